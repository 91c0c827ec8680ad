"""Sample-quality metrics: W2 (points and energies), histogram TV, ESS,
probability-flow likelihoods and mode coverage."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

W2_MAX_POINTS = 4000


@dataclass
class SampleSet:
    points: np.ndarray
    source: str = ""
    seed: int | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("a sample set needs at least one point")
        if not np.all(np.isfinite(p)):
            raise ValueError("sample set contains non-finite entries")
        self.points = p

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def _pts(a) -> np.ndarray:
    return a.points if isinstance(a, SampleSet) else SampleSet(a).points


# --------------------------------------------------------------------------
# Wasserstein-2


def w2(a, b) -> float:
    """Exact empirical W2 between equal-size point sets via optimal assignment."""
    A, B = _pts(a), _pts(b)
    if A.shape != B.shape:
        raise ValueError(f"w2 needs equal-size sets of equal dimension, got {A.shape} and {B.shape}; resample first")
    if A.shape[0] > W2_MAX_POINTS:
        raise ValueError(f"w2 is capped at {W2_MAX_POINTS} points; subsample the inputs")
    cost = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    # fsum is exactly rounded, so the result does not depend on pairing order
    return float(math.sqrt(max(math.fsum(cost[rows, cols]) / A.shape[0], 0.0)))


def energy_w2(energy_a, energy_b) -> float:
    """W2 between two sets of scalar energies."""
    return w2(np.asarray(energy_a, dtype=np.float64)[:, None], np.asarray(energy_b, dtype=np.float64)[:, None])


# --------------------------------------------------------------------------
# total variation


@dataclass(frozen=True)
class HistogramSpec:
    """Either a per-dimension grid (``pairwise=False``) or a 1-D histogram of
    all interparticle distances (``pairwise=True``)."""

    bins: int = 200
    low: tuple = (-50.0, -50.0)
    high: tuple = (50.0, 50.0)
    pairwise: bool = False
    particle_shape: tuple | None = None

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be positive")
        lo, hi = np.atleast_1d(self.low), np.atleast_1d(self.high)
        if lo.shape != hi.shape or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("histogram bounds must be finite with low < high")
        if self.pairwise and self.particle_shape is None:
            raise ValueError("pairwise histograms need particle_shape")


def gmm_histogram(bins: int = 200, bound: float = 50.0) -> HistogramSpec:
    return HistogramSpec(bins, (-bound, -bound), (bound, bound))


def distance_histogram(particle_shape, bins: int = 200, high: float = 8.0) -> HistogramSpec:
    return HistogramSpec(bins, (0.0,), (high,), pairwise=True, particle_shape=tuple(particle_shape))


def pairwise_distances(x: np.ndarray, particle_shape) -> np.ndarray:
    n, k = particle_shape
    x3 = np.asarray(x).reshape(-1, n, k)
    i, j = np.triu_indices(n, 1)
    return np.linalg.norm(x3[:, i, :] - x3[:, j, :], axis=-1).reshape(-1)


def histogram(x: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    """Normalized counts; mass outside the range is dropped before normalizing."""
    if spec.pairwise:
        vals = pairwise_distances(x, spec.particle_shape)
        h, _ = np.histogram(vals, bins=spec.bins, range=(spec.low[0], spec.high[0]))
    else:
        x = np.asarray(x)
        h, _ = np.histogramdd(x, bins=spec.bins, range=list(zip(spec.low, spec.high)))
    total = h.sum()
    return h / total if total > 0 else h.astype(np.float64)


def total_variation(a, b, spec: HistogramSpec) -> float:
    """0.5 * sum |p - q| over normalized histograms."""
    A, B = np.asarray(_pts(a)), np.asarray(_pts(b))
    return float(0.5 * math.fsum(np.abs(histogram(A, spec) - histogram(B, spec)).ravel()))


# --------------------------------------------------------------------------
# effective sample size


def _ess_scaled(e: np.ndarray) -> float:
    # e is the weight vector divided by its maximum, so every entry is in [0, 1]
    s1, s2 = math.fsum(e), math.fsum(e * e)
    return float(s1 * s1 / (e.size * s2))


def ess(log_weights) -> float:
    """Normalized ESS (sum w)^2 / (n sum w^2) from log-weights.

    Weights are shifted by their maximum in log space before exponentiating,
    so a constant offset of the log-weights leaves the result unchanged.
    """
    lw = np.asarray(log_weights, dtype=np.float64).reshape(-1)
    if lw.size == 0 or not np.any(np.isfinite(lw)) or np.any(lw == np.inf) or np.any(np.isnan(lw)):
        raise ValueError("ess needs at least one finite positive weight")
    return _ess_scaled(np.exp(lw - lw.max()))


def ess_from_weights(weights) -> float:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0 or np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, nonnegative and not all zero")
    return _ess_scaled(w / w.max())


# --------------------------------------------------------------------------
# probability-flow likelihood


def model_log_likelihood(score_fn, x, schedule, L: int = 1000, prior_var: float | None = None,
                         fd_step: float = 1e-4, t_min: float = 0.0) -> np.ndarray:
    """log p_model(x) by integrating the probability-flow ODE from ``t_min`` to 1.

    ``score_fn(x, t)`` returns the model score of shape (n, d). The drift is
    ``-0.5 g^2(t) score``; its divergence is taken by central differences.
    The prior is N(0, prior_var I) with ``prior_var`` defaulting to
    ``sigma(1)^2``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    n, d = x.shape
    dt = (1.0 - t_min) / L
    delta = np.zeros(n)

    def drift(z, t):
        return -0.5 * schedule.g2(t) * np.asarray(score_fn(z, t))

    eye = np.eye(d) * fd_step
    for k in range(L):
        t = t_min + k * dt
        f = drift(x, t)
        div = np.zeros(n)
        for j in range(d):
            div += (drift(x + eye[j], t)[:, j] - drift(x - eye[j], t)[:, j]) / (2.0 * fd_step)
        x = x + f * dt
        delta += div * dt
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(delta))):
            raise FloatingPointError(f"non-finite probability-flow trajectory at step {k}")
    var = schedule.sigma(1.0) ** 2 if prior_var is None else prior_var
    log_prior = -0.5 * (x**2).sum(-1) / var - 0.5 * d * math.log(2.0 * math.pi * var)
    return log_prior + delta


def ess_pfode(energy, score_fn, x, schedule, L: int = 1000, prior_var=None) -> float:
    """ESS of weights exp(-E(x)) / p_model(x) with p_model from the probability flow."""
    logp = model_log_likelihood(score_fn, x, schedule, L=L, prior_var=prior_var)
    return ess(-np.asarray(energy(x)) - logp)


# --------------------------------------------------------------------------
# mode coverage


def mode_coverage(samples, means, radius: float) -> int:
    """Number of means with at least one sample within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    X = _pts(samples)
    M = np.asarray(means, dtype=np.float64)
    covered = 0
    for m in M:
        if np.min(((X - m) ** 2).sum(-1)) <= radius * radius:
            covered += 1
    return covered
