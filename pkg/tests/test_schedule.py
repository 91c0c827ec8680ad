import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boltzgen.schedule import (
    GeneralSde, NoiseSchedule, VeEquivalentSchedule, beta, schedule_from_config, sigma, ve_equivalent_variance,
)

KINDS = ["geometric", "cosine", "quadratic", "linear"]


def test_geometric_endpoint_and_midpoint():
    s = NoiseSchedule("geometric", 1e-5, 1.0)
    assert sigma(s, 0.0) == pytest.approx(1e-5, rel=1e-12)
    assert sigma(s, 0.5) == pytest.approx(math.sqrt(1e-5 * 1.0), rel=1e-12)
    assert sigma(s, 1.0) == pytest.approx(1.0, rel=1e-12)


def test_linear_and_quadratic_endpoints():
    assert sigma(NoiseSchedule("linear", 0.0, 3.0), 1.0) == 3.0
    assert sigma(NoiseSchedule("quadratic", 0.0, 3.0), 1.0) == 3.0
    assert sigma(NoiseSchedule("quadratic", 0.0, 3.0), 0.5) == pytest.approx(0.75)


def test_cosine_is_the_verbatim_curve():
    s = NoiseSchedule("cosine", 0.0, 2.0, 0.008)
    t = 0.37
    expected = 2.0 * math.cos(0.5 * math.pi * (1.008 - t) / 1.008) ** 2
    assert s.sigma(t) == pytest.approx(expected, rel=1e-14)
    assert s.sigma(0.0) == pytest.approx(0.0, abs=1e-15)
    assert s.sigma(1.0) == pytest.approx(2.0, rel=2e-4)


@pytest.mark.parametrize("bad", [-0.1, 1.1, float("nan")])
def test_time_out_of_range(bad):
    with pytest.raises(ValueError):
        NoiseSchedule().sigma(bad)


@pytest.mark.parametrize("kind", KINDS)
@given(a=st.floats(0, 1), b=st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_monotone(kind, a, b):
    s = NoiseSchedule(kind, 1e-3, 2.0)
    lo, hi = min(a, b), max(a, b)
    assert s.sigma(lo) <= s.sigma(hi) + 1e-15


@pytest.mark.parametrize("kind", KINDS)
def test_g2_is_derivative_of_variance(kind):
    s = NoiseSchedule(kind, 1e-3, 2.0)
    h = 1e-6
    for t in (0.1, 0.4, 0.8):
        fd = (s.sigma(t + h) ** 2 - s.sigma(t - h) ** 2) / (2 * h)
        assert s.g2(t) == pytest.approx(fd, rel=1e-6)


def test_schedule_config_roundtrip():
    s = NoiseSchedule("cosine", 0.01, 2.0, 0.01)
    assert schedule_from_config(s.to_config()) == s
    with pytest.raises(ValueError):
        schedule_from_config({"kind": "geometric", "sigmamax": 1})
    with pytest.raises(ValueError):
        NoiseSchedule("exponential")


def test_beta_ve_and_constant_alpha():
    ve = GeneralSde(alpha=lambda t: 0.0 * t, g=lambda t: 1.0 + 0.0 * t)
    assert beta(ve, 0.7) == 1.0
    c = 1.7
    sde = GeneralSde(alpha=lambda t: c + 0.0 * t, g=lambda t: 1.0 + 0.0 * t)
    for t in (0.0, 0.3, 1.0):
        assert beta(sde, t) == pytest.approx(math.exp(-c * t), abs=1e-10)


def test_ve_equivalent_variance_self_consistency():
    s = NoiseSchedule("geometric", 0.01, 1.0)
    sde = GeneralSde(alpha=lambda t: 0.0 * t, g=lambda t: np.sqrt(s.g2(t)), panels=512)
    for t in (0.2, 0.5, 1.0):
        assert ve_equivalent_variance(sde, t) == pytest.approx(s.sigma(t) ** 2 - s.sigma(0.0) ** 2, abs=1e-8)


def test_zero_diffusion_gives_zero_variance():
    sde = GeneralSde(alpha=lambda t: 1.0 + t, g=lambda t: 0.0 * t)
    assert ve_equivalent_variance(sde, 0.8) == 0.0


def _vp(b0=0.1, b1=20.0):
    bar = lambda t: b0 + (b1 - b0) * np.asarray(t)
    return GeneralSde(alpha=lambda t: 0.5 * bar(t), g=lambda t: np.sqrt(bar(t)), panels=256), b0, b1


def test_vp_against_fine_trapezoid_reference():
    sde, b0, b1 = _vp()
    t = 0.6
    # independent reference: closed-form beta, 1e6-panel trapezoid of (g / beta)^2
    s = np.linspace(0.0, t, 1_000_001)
    bar = b0 + (b1 - b0) * s
    log_beta = -0.5 * (b0 * s + 0.5 * (b1 - b0) * s**2)
    ref = np.trapezoid(bar * np.exp(-2 * log_beta), s)
    assert ve_equivalent_variance(sde, t) == pytest.approx(ref, rel=1e-8)


def test_vp_transform_round_trip():
    # x_t = beta x0 + sqrt(1 - beta^2) z for VP; y = x_t / beta has Var = Var(x0) + sigma~^2
    sde, b0, b1 = _vp(0.1, 5.0)
    t = 0.5
    rng = np.random.default_rng(0)
    n = 100_000
    x0 = rng.normal(0.0, 0.7, n)
    b = beta(sde, t)
    xt = b * x0 + math.sqrt(1 - b * b) * rng.standard_normal(n)
    y = xt / b
    target = 0.49 + ve_equivalent_variance(sde, t)
    se = target * math.sqrt(2.0 / (n - 1))
    assert abs(y.var(ddof=1) - target) < 3 * se


def test_ve_equivalent_schedule_tabulation():
    sde, _, _ = _vp()
    sch = VeEquivalentSchedule(sde)
    for t in (0.25, 0.5, 1.0):
        assert sch.sigma(t) ** 2 == pytest.approx(ve_equivalent_variance(sde, t), rel=1e-5)
    assert sch.sigma_max == pytest.approx(sch.sigma(1.0))
