"""Reverse-time VE SDE integration from a score source."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import estimators as est
from .schedule import GeneralSde, NoiseSchedule, VeEquivalentSchedule

SCORE_KINDS = ("mc", "tweedie", "network", "network_score", "oracle", "callable")


class IntegrationError(RuntimeError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


def remove_com(x: np.ndarray, particle_shape) -> np.ndarray:
    """Project flattened configurations onto the mean-free subspace."""
    if particle_shape is None:
        return x
    n, k = particle_shape
    x3 = x.reshape(x.shape[:-1] + (n, k))
    return (x3 - x3.mean(axis=-2, keepdims=True)).reshape(x.shape)


@dataclass
class ScoreSource:
    """Callable ``(x, t, sigma, rng) -> score`` with optional norm clipping.

    kinds: ``mc`` (S_K), ``tweedie`` (Tweedie S~_K), ``network`` (-grad_x E_theta),
    ``network_score`` (direct s_theta), ``oracle`` (exact GMM score),
    ``callable`` (``fn(x, t, sigma)``).
    """

    kind: str
    energy: object = None
    K: int = 500
    clip_norm: float | None = None
    net: object = None
    params: object = None
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score source {self.kind!r}")

    def __call__(self, x, t: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
        B = x.shape[0]
        if self.kind == "mc":
            out = est.mc_score_batch(self.energy, x, sigma, self.K, rng)
        elif self.kind == "tweedie":
            out = est.tweedie_score_batch(self.energy, x, sigma, self.K, rng)
        elif self.kind == "network":
            out = -self.net.input_gradient(self.params, x, np.full(B, t))
        elif self.kind == "network_score":
            out = self.net.forward(self.params, x, np.full(B, t))
        elif self.kind == "oracle":
            out = self.energy.noised_score_oracle(x, sigma)
        else:
            out = self.fn(x, t, sigma)
        return est.clip_norm(np.asarray(out, dtype=np.float64), self.clip_norm)


@dataclass
class IntegrationConfig:
    L: int = 100
    schedule: object = field(default_factory=NoiseSchedule)
    batch: int = 128
    seed: int = 0
    particle_shape: tuple | None = None
    final_noise: bool = False
    # if set, the returned samples are clipped to [-clamp, clamp] per coordinate
    clamp: float | None = None

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp must be positive")


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    prior, brownian, score = ss.spawn(3)
    return (np.random.Generator(np.random.PCG64(s)) for s in (prior, brownian, score))


def sample_prior(d: int, sigma_max: float, n: int, seed=0, particle_shape=None) -> np.ndarray:
    """n draws from N(0, sigma_max^2 I), mean-free for particle systems.

    Integrators pass sigma(1), which differs from the nominal sigma_max only
    for the cosine schedule.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = sigma_max * rng.standard_normal((n, d))
    return remove_com(x, particle_shape)


def reverse_sde_integrate(score: ScoreSource, cfg: IntegrationConfig, d: int | None = None, x1=None, noise=None,
                          return_path: bool = False):
    """Euler-Maruyama on dx = -g^2 score dt + g dw from t = 1 to t = 0.

    ``x1`` overrides the prior draw, ``noise`` (shape ``(L, n, d)``) overrides
    the Brownian increments. No noise is added on the last step.
    """
    prior_rng, bm_rng, score_rng = _streams(cfg.seed)
    sched = cfg.schedule
    if x1 is None:
        if d is None:
            raise ValueError("need d or x1")
        x = sample_prior(d, float(sched.sigma(1.0)), cfg.batch, prior_rng, cfg.particle_shape)
    else:
        x = np.array(x1, dtype=np.float64)
    n, d = x.shape
    L = cfg.L
    dt = 1.0 / L
    path = [x.copy()] if return_path else None
    for k in range(L, 0, -1):
        t = k * dt
        sig = sched.sigma(t)
        g2 = sched.g2(t)
        s = remove_com(score(x, t, sig, score_rng), cfg.particle_shape)
        x = x + g2 * s * dt
        xi = noise[L - k] if noise is not None else bm_rng.standard_normal((n, d))
        if k > 1 or cfg.final_noise:
            x = x + math.sqrt(max(g2, 0.0) * dt) * remove_com(np.asarray(xi), cfg.particle_shape)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(L - k + 1)
        if return_path:
            path.append(x.copy())
    if cfg.clamp is not None:
        x = np.clip(x, -cfg.clamp, cfg.clamp)
    return (x, np.array(path)) if return_path else x


def general_sde_integrate(score_y: ScoreSource, sde: GeneralSde, cfg: IntegrationConfig, d: int | None = None,
                          x1=None, noise=None):
    """Sample via the VE-equivalent y-process of a linear-drift SDE; returns y_0 = x_0.

    ``x1``, if given, is a draw of x_1 from the general SDE's prior and is mapped
    to y_1 = x_1 / beta(1).
    """
    ve = VeEquivalentSchedule(sde)
    y_cfg = IntegrationConfig(cfg.L, ve, cfg.batch, cfg.seed, cfg.particle_shape, cfg.final_noise, cfg.clamp)
    y1 = None if x1 is None else np.asarray(x1, dtype=np.float64) / float(ve.beta(1.0))
    return reverse_sde_integrate(score_y, y_cfg, d=d, x1=y1, noise=noise)
