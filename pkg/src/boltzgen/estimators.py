"""Monte Carlo estimators of noised energies and scores.

Every estimator perturbs the query point with Gaussian noise,
``x0 = x_t + sigma_t * eps``, and reweights the perturbed samples by
``exp(-E(x0))``. All weight computations go through log-space softmax.

Batched functions take ``x`` of shape ``(B, d)``, per-row noise levels and
either a ``numpy.random.Generator`` or pre-drawn standard normal noise
``eps`` of shape ``(B, K, d)``. Passing the same ``eps`` to two estimators
makes them share one sample draw.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .energy import EnergySpec


@dataclass(frozen=True)
class EstimatorConfig:
    K: int = 500
    score_clip: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.score_clip is not None and self.score_clip <= 0:
            raise ValueError("score_clip must be positive")


@dataclass(frozen=True)
class NoisedPoint:
    x_t: np.ndarray
    t: float
    sigma_t: float

    @classmethod
    def at(cls, x_t, t, schedule) -> "NoisedPoint":
        return cls(np.asarray(x_t, dtype=np.float64), float(t), float(schedule.sigma(t)))


@dataclass(frozen=True)
class BootstrapTrajectory:
    """Split times s_0 = 0 < s_1 < ... < s_n with bounded sigma^2 increments."""

    split_times: tuple
    kappa: float

    def validate(self, schedule) -> None:
        s = np.asarray(self.split_times, dtype=np.float64)
        if s[0] != 0.0 or np.any(np.diff(s) <= 0) or s[-1] > 1.0:
            raise ValueError("split times must increase strictly from 0 within [0, 1]")
        s2 = np.asarray(schedule.sigma(s)) ** 2
        if np.any(np.diff(s2) > self.kappa * (1 + 1e-9)):
            raise ValueError("sigma^2 increments exceed kappa")

    @classmethod
    def uniform_in_sigma2(cls, schedule, n_windows: int = 10) -> "BootstrapTrajectory":
        """Boundaries with equal sigma^2 increments between sigma(0)^2 and sigma(1)^2."""
        lo, hi = schedule.sigma(0.0) ** 2, schedule.sigma(1.0) ** 2
        levels = lo + (hi - lo) * np.arange(n_windows + 1) / n_windows
        times = [0.0] + [schedule.time_at_sigma2(v) for v in levels[1:-1]] + [1.0]
        return cls(tuple(times), kappa=(hi - lo) / n_windows)


# --------------------------------------------------------------------------
# helpers


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return np.atleast_2d(x), x.ndim == 1


def _sigmas(sigma, n):
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,)).copy()
    if np.any(s < 0):
        raise ValueError("sigma must be non-negative")
    return s


def _noise(rng, eps, n, K, d):
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (n, K, d):
            raise ValueError(f"eps must have shape {(n, K, d)}, got {eps.shape}")
        return eps
    if rng is None:
        raise ValueError("need either rng or eps")
    return rng.standard_normal((n, K, d))


def _log_mean_exp(a: np.ndarray) -> np.ndarray:
    # log (1/K) sum_i exp(a_i) along the last axis, fixed summation order
    top = a.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return top[..., 0] + np.log(np.exp(a - top).mean(axis=-1))


def _softmax(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=-1, keepdims=True)
    w = np.exp(a - top)
    return w / w.sum(axis=-1, keepdims=True)


def clip_norm(v: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Rescale rows of ``v`` whose Euclidean norm exceeds ``max_norm``."""
    if max_norm is None:
        return v
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    factor = np.minimum(1.0, max_norm / np.maximum(n, 1e-300))
    return v * factor


def _energies(E, x0: np.ndarray, want_grad=False):
    B, K, d = x0.shape
    flat = x0.reshape(B * K, d)
    if want_grad:
        e, g = E.energy_and_gradient(flat)
        return np.asarray(e).reshape(B, K), np.asarray(g).reshape(B, K, d)
    return np.asarray(E.energy(flat)).reshape(B, K), None


# --------------------------------------------------------------------------
# batched estimators


def mc_energy_batch(E: EnergySpec, x, sigma, K: int = 500, rng=None, eps=None):
    """E_K(x_t) = -log (1/K) sum_i exp(-E(x_t + sigma eps_i)) for each row."""
    xb, single = _as_batch(x)
    B, d = xb.shape
    s = _sigmas(sigma, B)
    eps = _noise(rng, eps, B, K, d)
    x0 = xb[:, None, :] + s[:, None, None] * eps
    e, _ = _energies(E, x0)
    out = -_log_mean_exp(-e)
    return out[0] if single else out


def mc_energy_and_score_batch(E: EnergySpec, x, sigma, K: int = 500, rng=None, eps=None, score_clip=None):
    """Energy and score estimates from one shared sample draw."""
    xb, single = _as_batch(x)
    B, d = xb.shape
    s = _sigmas(sigma, B)
    eps = _noise(rng, eps, B, K, d)
    x0 = xb[:, None, :] + s[:, None, None] * eps
    e, g = _energies(E, x0, want_grad=True)
    energy = -_log_mean_exp(-e)
    w = _softmax(-e)
    score = clip_norm(-np.einsum("bk,bkd->bd", w, g), score_clip)
    if single:
        return energy[0], score[0]
    return energy, score


def mc_score_batch(E: EnergySpec, x, sigma, K: int = 500, rng=None, eps=None, score_clip=None):
    """S_K: self-normalized average of -grad E over the perturbed samples."""
    return mc_energy_and_score_batch(E, x, sigma, K, rng, eps, score_clip)[1]


def _tweedie_parts(E, x, sigma, K, rng, eps):
    xb, single = _as_batch(x)
    B, d = xb.shape
    s = _sigmas(sigma, B)
    eps = _noise(rng, eps, B, K, d)
    x0 = xb[:, None, :] + s[:, None, None] * eps
    e, _ = _energies(E, x0)
    w = _softmax(-e)
    return xb, s, eps, w, single


def tweedie_denoiser_batch(E: EnergySpec, x, sigma, K: int = 500, rng=None, eps=None):
    """D_K: self-normalized posterior mean of the clean sample."""
    xb, s, eps, w, single = _tweedie_parts(E, x, sigma, K, rng, eps)
    out = xb + s[:, None] * np.einsum("bk,bkd->bd", w, eps)
    return out[0] if single else out


def tweedie_score_batch(E: EnergySpec, x, sigma, K: int = 500, rng=None, eps=None, score_clip=None):
    """(D_K - x_t) / sigma^2, evaluated as sum_i w_i eps_i / sigma."""
    xb, s, eps, w, single = _tweedie_parts(E, x, sigma, K, rng, eps)
    if np.any(s <= 0):
        raise ValueError("tweedie score needs sigma > 0")
    out = clip_norm(np.einsum("bk,bkd->bd", w, eps) / s[:, None], score_clip)
    return out[0] if single else out


def bootstrap_energy_batch(E_phi: Callable, x, sigma_t, s, sigma_s, K: int = 400, rng=None, eps=None):
    """Energy at level t bootstrapped from a learned energy at the lower level s.

    ``E_phi(points, s_values) -> energies`` is treated as a constant (no
    gradient flows through it). The kernel is centered at x_t with variance
    sigma_t^2 - sigma_s^2.
    """
    xb, single = _as_batch(x)
    B, d = xb.shape
    st = _sigmas(sigma_t, B)
    ss = _sigmas(sigma_s, B)
    s_arr = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    width2 = st**2 - ss**2
    if np.any(width2 < -1e-15):
        raise ValueError("bootstrap needs sigma_s <= sigma_t")
    width = np.sqrt(np.maximum(width2, 0.0))
    eps = _noise(rng, eps, B, K, d)
    xs = xb[:, None, :] + width[:, None, None] * eps
    e = np.asarray(E_phi(xs.reshape(B * K, d), np.repeat(s_arr, K)), dtype=np.float64).reshape(B, K)
    out = -_log_mean_exp(-e)
    return out[0] if single else out


def sequential_energy_batch(E: EnergySpec, x, sigma_t, sigma_s, K: int = 100, rng=None):
    """Two-stage K x K estimator: outer N(x_t, sigma_t^2 - sigma_s^2), inner N(., sigma_s^2)."""
    xb, single = _as_batch(x)
    B, d = xb.shape
    st = _sigmas(sigma_t, B)
    ss = _sigmas(sigma_s, B)
    if np.any(st < ss):
        raise ValueError("sequential estimator needs sigma_s <= sigma_t")
    outer = xb[:, None, :] + np.sqrt(st**2 - ss**2)[:, None, None] * rng.standard_normal((B, K, d))
    inner = outer[:, :, None, :] + ss[:, None, None, None] * rng.standard_normal((B, K, K, d))
    e = np.asarray(E.energy(inner.reshape(-1, d))).reshape(B, K * K)
    out = -_log_mean_exp(-e)
    return out[0] if single else out


# --------------------------------------------------------------------------
# single-point API, deterministic in (cfg.rng_seed, K, point)


def point_rng(seed: int, index: int = 0, replicate: int = 0) -> np.random.Generator:
    """Counter-keyed stream for one (point, replicate) pair."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, replicate])))


def _check_point(p: NoisedPoint):
    if p.sigma_t < 0:
        raise ValueError("sigma_t must be non-negative")


def mc_energy(E: EnergySpec, p: NoisedPoint, cfg: EstimatorConfig, eps=None) -> float:
    _check_point(p)
    rng = None if eps is not None else point_rng(cfg.rng_seed)
    if eps is not None:
        eps = np.asarray(eps).reshape(1, cfg.K, -1)
    return float(mc_energy_batch(E, p.x_t[None], p.sigma_t, cfg.K, rng, eps)[0])


def mc_score(E: EnergySpec, p: NoisedPoint, cfg: EstimatorConfig, eps=None) -> np.ndarray:
    _check_point(p)
    rng = None if eps is not None else point_rng(cfg.rng_seed)
    if eps is not None:
        eps = np.asarray(eps).reshape(1, cfg.K, -1)
    return mc_score_batch(E, p.x_t[None], p.sigma_t, cfg.K, rng, eps, cfg.score_clip)[0]


def tweedie_denoiser(E: EnergySpec, p: NoisedPoint, cfg: EstimatorConfig) -> np.ndarray:
    if p.sigma_t <= 0:
        raise ValueError("tweedie denoiser needs sigma_t > 0")
    return tweedie_denoiser_batch(E, p.x_t[None], p.sigma_t, cfg.K, point_rng(cfg.rng_seed))[0]


def tweedie_score(E: EnergySpec, p: NoisedPoint, cfg: EstimatorConfig) -> np.ndarray:
    if p.sigma_t <= 0:
        raise ValueError("tweedie score needs sigma_t > 0")
    return tweedie_score_batch(E, p.x_t[None], p.sigma_t, cfg.K, point_rng(cfg.rng_seed), score_clip=cfg.score_clip)[0]


def bootstrap_energy(E_phi: Callable, p: NoisedPoint, s: float, sigma_s: float, cfg: EstimatorConfig) -> float:
    if not s < p.t:
        raise ValueError(f"bootstrap needs s < t (s={s}, t={p.t})")
    rng = point_rng(cfg.rng_seed)
    return float(bootstrap_energy_batch(E_phi, p.x_t[None], p.sigma_t, s, sigma_s, cfg.K, rng)[0])


def sequential_energy(E: EnergySpec, p: NoisedPoint, s: float, sigma_s: float, cfg: EstimatorConfig) -> float:
    if not s < p.t:
        raise ValueError(f"sequential estimator needs s < t (s={s}, t={p.t})")
    rng = point_rng(cfg.rng_seed)
    return float(sequential_energy_batch(E, p.x_t[None], p.sigma_t, sigma_s, cfg.K, rng)[0])


def oracle_energy_fn(E: EnergySpec, schedule) -> Callable:
    """E_phi(x, s) backed by the exact noised energy (GMM only)."""

    def fn(x, s):
        return E.noised_energy_oracle(x, schedule.sigma(np.asarray(s)))

    return fn


# --------------------------------------------------------------------------
# standard errors and replicate statistics


def mc_energy_with_se(E: EnergySpec, x, sigma, K: int, rng=None, eps=None):
    """E_K together with its delta-method standard error sqrt(var(w) / (K mean(w)^2))."""
    xb, single = _as_batch(x)
    B, d = xb.shape
    s = _sigmas(sigma, B)
    eps = _noise(rng, eps, B, K, d)
    x0 = xb[:, None, :] + s[:, None, None] * eps
    e, _ = _energies(E, x0)
    a = -e
    top = a.max(axis=-1, keepdims=True)
    w = np.exp(a - top)
    mean_w = w.mean(axis=-1)
    est = -(top[:, 0] + np.log(mean_w))
    se = np.sqrt(w.var(axis=-1, ddof=1) / (K * mean_w**2)) if K > 1 else np.full(B, np.inf)
    return (est[0], se[0]) if single else (est, se)


def mc_score_with_se(E: EnergySpec, x, sigma, K: int, rng=None, eps=None, kind: str = "mc"):
    """Score estimate and componentwise self-normalized IS standard error."""
    xb, single = _as_batch(x)
    B, d = xb.shape
    s = _sigmas(sigma, B)
    eps = _noise(rng, eps, B, K, d)
    x0 = xb[:, None, :] + s[:, None, None] * eps
    e, g = _energies(E, x0, want_grad=(kind == "mc"))
    w = _softmax(-e)
    f = -g if kind == "mc" else eps / s[:, None, None]
    mu = np.einsum("bk,bkd->bd", w, f)
    se = np.sqrt(np.einsum("bk,bkd->bd", w**2, (f - mu[:, None, :]) ** 2))
    return (mu[0], se[0]) if single else (mu, se)


POINT_ESTIMATORS = {
    "mc_energy": ("scalar", lambda E, x, s, K, rng, clip: mc_energy_batch(E, x, s, K, rng)),
    "mc_score": ("vector", lambda E, x, s, K, rng, clip: mc_score_batch(E, x, s, K, rng, score_clip=clip)),
    "tweedie_score": ("vector", lambda E, x, s, K, rng, clip: tweedie_score_batch(E, x, s, K, rng, score_clip=clip)),
    "tweedie_denoiser": ("vector", lambda E, x, s, K, rng, clip: tweedie_denoiser_batch(E, x, s, K, rng)),
}


@dataclass
class EstimatorStats:
    x: np.ndarray
    t: float
    estimator: str
    mean: np.ndarray
    variance: float
    replicates: int


def estimator_statistics(estimator: str, E: EnergySpec, grid: list, replicates: int, cfg: EstimatorConfig) -> list:
    """Per-point sample mean and unbiased variance over independent replicates.

    For vector-valued estimators the reported variance is the trace of the
    sample covariance. Replicate r of point i uses stream (seed, i, r).
    """
    if replicates < 2:
        raise ValueError("need at least 2 replicates")
    kind, fn = POINT_ESTIMATORS[estimator]
    rows = []
    for i, p in enumerate(grid):
        vals = []
        for r in range(replicates):
            rng = point_rng(cfg.rng_seed, i, r)
            vals.append(np.atleast_1d(fn(E, p.x_t[None], p.sigma_t, cfg.K, rng, cfg.score_clip)[0]))
        vals = np.array(vals)
        mean = vals.mean(axis=0)
        var = float(vals.var(axis=0, ddof=1).sum())
        rows.append(EstimatorStats(np.asarray(p.x_t), p.t, estimator, mean if kind == "vector" else float(mean[0]), var, replicates))
    return rows


def replicate_values(estimator: str, E: EnergySpec, x, sigma, replicates: int, K: int, seed: int, clip=None):
    """Fast replicate simulation: returns an array (B, R) or (B, R, d).

    Replicates of point b are drawn as one (R, K, d) block from stream (seed, b).
    """
    _, fn = POINT_ESTIMATORS[estimator]
    xb, _ = _as_batch(x)
    s = _sigmas(sigma, xb.shape[0])
    out = []
    for b in range(xb.shape[0]):
        rng = point_rng(seed, b)
        xr = np.repeat(xb[b : b + 1], replicates, axis=0)
        out.append(fn(E, xr, s[b], K, rng, clip))
    return np.array(out)
