"""Noise schedules for the variance-exploding process, and the reduction of
linear-drift SDEs ``dx = -alpha(t) x dt + g(t) dw`` to an equivalent VE process.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

KINDS = ("geometric", "cosine", "quadratic", "linear")


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or np.any(np.isnan(t)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "geometric"
    sigma_min: float = 1e-5
    sigma_max: float = 1.0
    cosine_delta: float = 0.008

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.sigma_max <= 0 or self.sigma_min < 0:
            raise ValueError("need sigma_max > 0 and sigma_min >= 0")
        if self.kind == "geometric" and not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("geometric schedule needs 0 < sigma_min < sigma_max")

    def _cos_arg(self, t):
        d = self.cosine_delta
        return 0.5 * math.pi * (1.0 + d - t) / (1.0 + d)

    def sigma(self, t):
        t = _check_t(t)
        if self.kind == "geometric":
            out = self.sigma_min ** (1.0 - t) * self.sigma_max**t
        elif self.kind == "cosine":
            out = self.sigma_max * np.cos(self._cos_arg(t)) ** 2
        elif self.kind == "quadratic":
            out = self.sigma_max * t**2
        else:
            out = self.sigma_max * t
        return float(out) if out.ndim == 0 else out

    def g2(self, t):
        """Squared diffusion coefficient d(sigma^2)/dt."""
        t = _check_t(t)
        smax = self.sigma_max
        if self.kind == "geometric":
            s = self.sigma_min ** (1.0 - t) * smax**t
            out = 2.0 * s * s * math.log(smax / self.sigma_min)
        elif self.kind == "cosine":
            u = self._cos_arg(t)
            s = smax * np.cos(u) ** 2
            ds = smax * np.sin(2.0 * u) * 0.5 * math.pi / (1.0 + self.cosine_delta)
            out = 2.0 * s * ds
        elif self.kind == "quadratic":
            out = 4.0 * smax**2 * t**3
        else:
            out = 2.0 * smax**2 * t
        return float(out) if np.ndim(out) == 0 else out

    def time_at_sigma2(self, s2: float) -> float:
        """Smallest t with sigma(t)^2 >= s2 (bisection; schedules are monotone)."""
        lo, hi = 0.0, 1.0
        if self.sigma(0.0) ** 2 >= s2:
            return 0.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.sigma(mid) ** 2 < s2:
                lo = mid
            else:
                hi = mid
        return hi

    def to_config(self) -> dict:
        return {"kind": self.kind, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "delta": self.cosine_delta}


def sigma(schedule: NoiseSchedule, t):
    return schedule.sigma(t)


def schedule_from_config(block: dict) -> NoiseSchedule:
    unknown = set(block) - {"kind", "sigma_min", "sigma_max", "delta"}
    if unknown:
        raise ValueError(f"unknown keys in schedule block: {sorted(unknown)}")
    return NoiseSchedule(
        kind=block.get("kind", "geometric"),
        sigma_min=float(block.get("sigma_min", 1e-5)),
        sigma_max=float(block.get("sigma_max", 1.0)),
        cosine_delta=float(block.get("delta", 0.008)),
    )


# --------------------------------------------------------------------------
# general linear-drift SDEs


def simpson(f: Callable, a: float, b: float, panels: int = 256) -> float:
    """Composite Simpson rule; ``f`` must accept an array of nodes."""
    if panels % 2:
        panels += 1
    if b == a:
        return 0.0
    x = np.linspace(a, b, panels + 1)
    y = np.broadcast_to(np.asarray(f(x), dtype=np.float64), x.shape)
    h = (b - a) / panels
    return float(h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum()))


@dataclass(frozen=True)
class GeneralSde:
    """dx = -alpha(t) x dt + g(t) dw, coefficients vectorized over t."""

    alpha: Callable
    g: Callable
    panels: int = 256


def beta(sde: GeneralSde, t: float) -> float:
    """exp(-int_0^t alpha)."""
    t = float(_check_t(t))
    return math.exp(-simpson(sde.alpha, 0.0, t, sde.panels))


def _beta_vec(sde: GeneralSde, ts: np.ndarray) -> np.ndarray:
    return np.array([beta(sde, float(s)) for s in np.atleast_1d(ts)])


def ve_equivalent_variance(sde: GeneralSde, t: float) -> float:
    """Variance schedule of y_t = x_t / beta(t), i.e. int_0^t (g(s) / beta(s))^2 ds."""
    t = float(_check_t(t))

    def integrand(s):
        g = np.broadcast_to(np.asarray(sde.g(s), dtype=np.float64), np.shape(s))
        return (g / _beta_vec(sde, s)) ** 2

    return simpson(integrand, 0.0, t, sde.panels)


class VeEquivalentSchedule:
    """Schedule interface (sigma, g2, sigma_max) for the y-process of a GeneralSde.

    beta is tabulated once on a fixed grid by Simpson quadrature; the variance
    is its cumulative trapezoid integral on the same grid.
    """

    def __init__(self, sde: GeneralSde, grid: int = 2048):
        self.sde = sde
        ts = np.linspace(0.0, 1.0, grid + 1)
        self._ts = ts
        self._beta = _beta_vec(sde, ts)
        g2 = (np.broadcast_to(np.asarray(sde.g(ts), dtype=np.float64), ts.shape) / self._beta) ** 2
        self._g2 = g2
        self._var = np.concatenate([[0.0], np.cumsum(0.5 * (g2[1:] + g2[:-1]) * np.diff(ts))])
        self.sigma_max = float(math.sqrt(self._var[-1]))
        self.sigma_min = 0.0

    def beta(self, t):
        return np.interp(_check_t(t), self._ts, self._beta)

    def sigma(self, t):
        out = np.sqrt(np.interp(_check_t(t), self._ts, self._var))
        return float(out) if np.ndim(out) == 0 else out

    def g2(self, t):
        out = np.interp(_check_t(t), self._ts, self._g2)
        return float(out) if np.ndim(out) == 0 else out
