"""Target potentials with analytic gradients.

All potentials take flattened configurations of shape ``(d,)`` or ``(N, d)``
and return energies of shape ``()`` or ``(N,)``. An :class:`EnergySpec` may
carry a coordinate ``scale``: the sampler works in a normalized frame ``y``
and the physical configuration is ``scale * y`` (the 40-mode GMM benchmark
uses ``scale=50`` so that its modes fit inside a unit-variance prior).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

_CHUNK = 1 << 16


class DegenerateConfigurationError(ValueError):
    """Raised when two particles coincide."""

    def __init__(self, msg: str = "degenerate configuration"):
        super().__init__(msg)


@dataclass(frozen=True)
class GmmParams:
    means: np.ndarray
    component_variance: float = 40.0
    weights: np.ndarray | None = None  # None means uniform

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2:
            raise ValueError("means must be an (M, d) array")
        object.__setattr__(self, "means", means)
        if self.component_variance <= 0:
            raise ValueError("component_variance must be positive")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (means.shape[0],) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("weights must be a probability vector over the means")
            object.__setattr__(self, "weights", w)

    @property
    def n_modes(self) -> int:
        return self.means.shape[0]

    @property
    def log_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n_modes, -math.log(self.n_modes))
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


@dataclass(frozen=True)
class Dw4Params:
    a: float = 0.0
    b: float = -4.0
    c: float = 0.9
    d0: float = 4.0
    tau: float = 1.0
    n_particles: int = 4
    space_dim: int = 2

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class LjParams:
    n: int = 13
    r_m: float = 1.0
    tau: float = 1.0
    epsilon: float = 1.0
    osc_scale: float = 0.5
    smoothing_cutoff: float | None = 0.85
    space_dim: int = 3

    def __post_init__(self):
        if self.r_m <= 0:
            raise ValueError("r_m must be positive")
        if self.smoothing_cutoff is not None and self.smoothing_cutoff <= 0:
            raise ValueError("smoothing_cutoff must be positive")


# --------------------------------------------------------------------------
# GMM


def _gmm_energy_grad(x, params: GmmParams, variance: float, want_grad: bool):
    # -log p(x) = |x|^2 / 2v - logsumexp_m(x . mu_m / v + c_m), with the
    # row-constant quadratic term pulled out of the log-sum-exp
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x2.shape
    mu = params.means
    scaled = mu / variance
    c = params.log_weights - (mu * mu).sum(-1) / (2.0 * variance) - 0.5 * d * math.log(2.0 * math.pi * variance)
    energy = np.empty(n)
    grad = np.empty_like(x2) if want_grad else None
    for lo in range(0, n, _CHUNK):
        xs = x2[lo : lo + _CHUNK]
        xt = np.ascontiguousarray(xs.T)
        # components along axis 0 so the reductions run over contiguous rows
        a = c[:, None] + scaled[:, 0:1] * xt[0]
        for j in range(1, d):
            a += scaled[:, j : j + 1] * xt[j]
        top = a.max(axis=0)
        a -= top
        np.exp(a, out=a)
        z = a.sum(axis=0)
        energy[lo : lo + _CHUNK] = 0.5 * (xs * xs).sum(-1) / variance - top - np.log(z)
        if want_grad:
            # grad of -log p = sum_m r_m (x - mu_m) / v
            a /= z
            grad[lo : lo + _CHUNK] = (xs - (mu.T @ a).T) / variance
    if np.ndim(x) == 1:
        return energy[0], (grad[0] if want_grad else None)
    return energy, grad


def gmm_energy(x, params: GmmParams):
    """Negative log-density of the mixture, normalization included."""
    return _gmm_energy_grad(x, params, params.component_variance, False)[0]


def gmm_energy_naive(x, params: GmmParams):
    """Direct summation of the mixture density, no log-space tricks."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = params.means.shape[1]
    v = params.component_variance
    w = np.exp(params.log_weights)
    dens = np.zeros(x2.shape[0])
    for m in range(params.n_modes):
        sq = ((x2 - params.means[m]) ** 2).sum(-1)
        dens += w[m] * np.exp(-sq / (2 * v)) / (2 * math.pi * v) ** (d / 2)
    out = -np.log(dens)
    return out[0] if np.ndim(x) == 1 else out


def gmm_noised_energy_oracle(x, sigma_t, params: GmmParams):
    """Exact noised energy: the mixture with per-component variance v + sigma_t**2."""
    if np.any(np.asarray(sigma_t) < 0):
        raise ValueError("sigma_t must be non-negative")
    return _gmm_noised(x, sigma_t, params, want_grad=False)[0]


def gmm_noised_score_oracle(x, sigma_t, params: GmmParams):
    """Exact score grad log p_t of the noised mixture."""
    return -_gmm_noised(x, sigma_t, params, want_grad=True)[1]


def _gmm_noised(x, sigma_t, params, want_grad):
    sig = np.asarray(sigma_t, dtype=np.float64)
    if sig.ndim == 0:
        return _gmm_energy_grad(x, params, params.component_variance + float(sig) ** 2, want_grad)
    # one sigma per row
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    e = np.empty(x2.shape[0])
    g = np.empty_like(x2) if want_grad else None
    for val in np.unique(sig):
        idx = np.nonzero(sig == val)[0]
        ei, gi = _gmm_energy_grad(x2[idx], params, params.component_variance + val**2, want_grad)
        e[idx] = ei
        if want_grad:
            g[idx] = gi
    return e, g


def gmm_sample(params: GmmParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact i.i.d. draws from the mixture."""
    p = np.exp(params.log_weights)
    comp = rng.choice(params.n_modes, size=n, p=p)
    noise = rng.standard_normal((n, params.means.shape[1]))
    return params.means[comp] + math.sqrt(params.component_variance) * noise


def make_gmm_params(n_modes=40, box=40.0, variance=40.0, seed=0, dim=2) -> GmmParams:
    """Evenly weighted GMM with means drawn uniformly from [-box, box]^dim."""
    rng = np.random.default_rng(seed)
    return GmmParams(means=rng.uniform(-box, box, size=(n_modes, dim)), component_variance=variance)


# --------------------------------------------------------------------------
# particle systems


def _pair_index(n: int):
    return np.triu_indices(n, k=1)


def _pair_geometry(x, n, k):
    x3 = np.atleast_2d(np.asarray(x, dtype=np.float64)).reshape(-1, n, k)
    i, j = _pair_index(n)
    diff = x3[:, i, :] - x3[:, j, :]  # (N, P, k)
    dist = np.sqrt((diff * diff).sum(-1))
    return x3, i, j, diff, dist


def _scatter_pair_grad(dE_dd, diff, dist, i, j, shape):
    safe = np.where(dist > 0, dist, 1.0)
    f = (dE_dd / safe)[..., None] * diff  # dE/dx_i contribution, (N, P, k)
    g = np.zeros(shape)
    for p in range(len(i)):
        g[:, i[p]] += f[:, p]
        g[:, j[p]] -= f[:, p]
    return g


def dw4_energy(x, params: Dw4Params = Dw4Params()):
    """Pairwise double-well energy (1/2tau) sum_{i<j} a u + b u^2 + c u^4, u = d_ij - d0."""
    _, _, _, _, dist = _pair_geometry(x, params.n_particles, params.space_dim)
    u = dist - params.d0
    e = (params.a * u + params.b * u**2 + params.c * u**4).sum(-1) / (2.0 * params.tau)
    return e[0] if np.ndim(x) == 1 else e


def dw4_gradient(x, params: Dw4Params = Dw4Params()):
    x3, i, j, diff, dist = _pair_geometry(x, params.n_particles, params.space_dim)
    u = dist - params.d0
    dE_dd = (params.a + 2 * params.b * u + 4 * params.c * u**3) / (2.0 * params.tau)
    g = _scatter_pair_grad(dE_dd, diff, dist, i, j, x3.shape).reshape(x3.shape[0], -1)
    return g[0] if np.ndim(x) == 1 else g


def _lj_spline_coeffs(params: LjParams):
    # p(r) = A + C r^3: matches value and slope of the raw pair term at the
    # cutoff, with zero first and second derivative at r = 0
    rc = params.smoothing_cutoff * params.r_m
    val, slope = _lj_pair_raw(np.asarray(rc), params)
    c3 = slope / (3.0 * rc**2)
    a0 = val - c3 * rc**3
    return rc, float(a0), float(c3)


def _lj_pair_raw(r, params: LjParams):
    s6 = (params.r_m / r) ** 6
    pref = params.epsilon / (2.0 * params.tau)
    val = pref * (s6 * s6 - s6)
    slope = pref * (-12.0 * s6 * s6 + 6.0 * s6) / r
    return val, slope


def _lj_pair(r, params: LjParams):
    if params.smoothing_cutoff is None:
        return _lj_pair_raw(r, params)
    rc, a0, c3 = _lj_spline_coeffs(params)
    inner = r < rc
    r_out = np.where(inner, rc, r)
    val, slope = _lj_pair_raw(r_out, params)
    val = np.where(inner, a0 + c3 * r**3, val)
    slope = np.where(inner, 3.0 * c3 * r**2, slope)
    return val, slope


def _lj_check(dist):
    if np.any(dist <= 0):
        raise DegenerateConfigurationError()


def lj_energy(x, params: LjParams = LjParams()):
    """Lennard-Jones cluster energy plus a harmonic tether to the center of mass."""
    x3, _, _, _, dist = _pair_geometry(x, params.n, params.space_dim)
    _lj_check(dist)
    val, _ = _lj_pair(dist, params)
    com = x3.mean(axis=1, keepdims=True)
    osc = 0.5 * ((x3 - com) ** 2).sum(axis=(1, 2))
    e = val.sum(-1) + params.osc_scale * osc
    return e[0] if np.ndim(x) == 1 else e


def lj_gradient(x, params: LjParams = LjParams()):
    x3, i, j, diff, dist = _pair_geometry(x, params.n, params.space_dim)
    _lj_check(dist)
    _, slope = _lj_pair(dist, params)
    g = _scatter_pair_grad(slope, diff, dist, i, j, x3.shape)
    g += params.osc_scale * (x3 - x3.mean(axis=1, keepdims=True))
    g = g.reshape(x3.shape[0], -1)
    return g[0] if np.ndim(x) == 1 else g


# --------------------------------------------------------------------------
# EnergySpec


@dataclass(frozen=True)
class EnergySpec:
    """A target potential in the sampler's coordinate frame.

    The energy seen by samplers and estimators is ``potential(scale * x)``.
    """

    kind: str
    params: Any
    scale: float = 1.0
    seed: int | None = None
    dim: int = field(init=False)
    particle_shape: tuple[int, int] | None = field(init=False)

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind == "GMM":
            object.__setattr__(self, "dim", int(self.params.means.shape[1]))
            object.__setattr__(self, "particle_shape", None)
        elif kind == "DW4":
            shape = (self.params.n_particles, self.params.space_dim)
            object.__setattr__(self, "particle_shape", shape)
            object.__setattr__(self, "dim", shape[0] * shape[1])
        elif kind == "LJ":
            shape = (self.params.n, self.params.space_dim)
            object.__setattr__(self, "particle_shape", shape)
            object.__setattr__(self, "dim", shape[0] * shape[1])
        else:
            raise ValueError(f"unknown energy kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    # physical-frame potentials
    def _phys_energy(self, x):
        if self.kind == "GMM":
            return gmm_energy(x, self.params)
        if self.kind == "DW4":
            return dw4_energy(x, self.params)
        return lj_energy(x, self.params)

    def _phys_gradient(self, x):
        if self.kind == "GMM":
            return _gmm_energy_grad(x, self.params, self.params.component_variance, True)[1]
        if self.kind == "DW4":
            return dw4_gradient(x, self.params)
        return lj_gradient(x, self.params)

    def energy(self, x):
        return self._phys_energy(self.scale * np.asarray(x, dtype=np.float64))

    def gradient(self, x):
        return self.scale * self._phys_gradient(self.scale * np.asarray(x, dtype=np.float64))

    def energy_and_gradient(self, x):
        xs = self.scale * np.asarray(x, dtype=np.float64)
        if self.kind == "GMM":
            e, g = _gmm_energy_grad(xs, self.params, self.params.component_variance, True)
            return e, self.scale * g
        return self._phys_energy(xs), self.scale * self._phys_gradient(xs)

    def to_physical(self, x):
        return self.scale * np.asarray(x, dtype=np.float64)

    def to_frame(self, x):
        return np.asarray(x, dtype=np.float64) / self.scale

    @property
    def has_oracle(self) -> bool:
        return self.kind == "GMM"

    def noised_energy_oracle(self, x, sigma_t):
        """Exact noised energy in the sampler frame (GMM only)."""
        self._need_oracle()
        s = self.scale
        return gmm_noised_energy_oracle(s * np.asarray(x, dtype=np.float64), s * np.asarray(sigma_t), self.params)

    def noised_score_oracle(self, x, sigma_t):
        self._need_oracle()
        s = self.scale
        return s * gmm_noised_score_oracle(s * np.asarray(x, dtype=np.float64), s * np.asarray(sigma_t), self.params)

    def _need_oracle(self):
        if not self.has_oracle:
            raise NotImplementedError(f"no closed-form noised energy for {self.kind}")

    # serialization
    def to_config(self) -> dict:
        p = dataclasses.asdict(self.params)
        for key, val in list(p.items()):
            if isinstance(val, np.ndarray):
                p[key] = val.tolist()
        return {"kind": self.kind, "params": p, "scale": self.scale, "seed": self.seed}


def energy_gradient(spec: EnergySpec, x):
    return spec.gradient(x)


def gmm40(seed: int = 0, scale: float = 50.0) -> EnergySpec:
    """The 40-mode, variance-40 mixture on [-40, 40]^2."""
    return EnergySpec("GMM", make_gmm_params(40, 40.0, 40.0, seed), scale=scale, seed=seed)


def gmm10_unit(seed: int = 0) -> EnergySpec:
    """The 10-mode, variance-1/40 mixture on [-1, 1]^2 used for variance studies."""
    return EnergySpec("GMM", make_gmm_params(10, 1.0, 1.0 / 40.0, seed), scale=1.0, seed=seed)


def dw4(scale: float = 1.0) -> EnergySpec:
    return EnergySpec("DW4", Dw4Params(), scale=scale)


def lj13(scale: float = 1.0, smoothing_cutoff: float | None = 0.85) -> EnergySpec:
    return EnergySpec("LJ", LjParams(smoothing_cutoff=smoothing_cutoff), scale=scale)


_ALLOWED = {
    "GMM": {"n_modes", "box", "component_variance", "means", "weights", "dim"},
    "DW4": {f.name for f in dataclasses.fields(Dw4Params)},
    "LJ": {f.name for f in dataclasses.fields(LjParams)},
}


def energy_from_config(block: dict) -> EnergySpec:
    """Build an EnergySpec from a ``{kind, params, seed, scale}`` JSON block."""
    unknown = set(block) - {"kind", "params", "seed", "scale"}
    if unknown:
        raise ValueError(f"unknown keys in energy block: {sorted(unknown)}")
    kind = str(block["kind"]).upper()
    if kind not in _ALLOWED:
        raise ValueError(f"unknown energy kind {block['kind']!r}")
    params = dict(block.get("params") or {})
    bad = set(params) - _ALLOWED[kind]
    if bad:
        raise ValueError(f"unknown keys in {kind} params: {sorted(bad)}")
    seed = block.get("seed", 0)
    scale = float(block.get("scale", 50.0 if kind == "GMM" else 1.0))
    if kind == "GMM":
        if "means" in params:
            gp = GmmParams(np.asarray(params["means"]), float(params.get("component_variance", 40.0)), params.get("weights"))
        else:
            gp = make_gmm_params(
                int(params.get("n_modes", 40)),
                float(params.get("box", 40.0)),
                float(params.get("component_variance", 40.0)),
                seed,
                int(params.get("dim", 2)),
            )
        return EnergySpec("GMM", gp, scale=scale, seed=seed)
    if kind == "DW4":
        return EnergySpec("DW4", Dw4Params(**params), scale=scale, seed=seed)
    return EnergySpec("LJ", LjParams(**params), scale=scale, seed=seed)
