import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from boltzgen import estimators as est
from boltzgen import training as T
from boltzgen.energy import gmm40
from boltzgen.network import MlpNet, ParamVector
from boltzgen.schedule import NoiseSchedule


class StubNet:
    """Parameter-free network: a fixed energy function of (x, sigma_t).

    Records every regression batch and returns a zero gradient so the
    parameters stay frozen.
    """

    def __init__(self, energy_fn, grad_fn, schedule, mode="energy"):
        self.energy_fn, self.grad_fn, self.schedule, self.mode = energy_fn, grad_fn, schedule, mode
        self.seen = []

    def init(self, seed=0):
        return ParamVector([("c", (1,))])

    def _sig(self, t):
        return np.asarray(self.schedule.sigma(np.asarray(t, dtype=np.float64)), dtype=np.float64)

    def forward(self, params, x, t):
        if self.mode == "score":
            return -self.grad_fn(np.asarray(x), self._sig(t))
        return self.energy_fn(np.asarray(x), self._sig(t))

    def input_gradient(self, params, x, t):
        return self.grad_fn(np.asarray(x), self._sig(t))

    def loss_and_param_gradient(self, params, x, t, target):
        self.seen.append((np.array(x), np.array(t), np.array(target)))
        resid = self.forward(params, x, t) - target
        return float(np.mean(resid**2)), params.like(np.zeros(params.size)), 0


def zero_net(schedule):
    return StubNet(lambda x, s: np.zeros(len(x)), lambda x, s: np.zeros_like(x), schedule)


def oracle_net(E, schedule):
    return StubNet(lambda x, s: E.noised_energy_oracle(x, s), lambda x, s: -E.noised_score_oracle(x, s), schedule)


def make_trainer(method="endem", net=None, E=None, **kw):
    E = E or gmm40(0)
    cfg = T.TrainConfig(method=method, **kw)
    if net is None:
        net = oracle_net(E, cfg.schedule)
        net.mode = "energy" if method in ("endem", "bendem") else "score"
    return T.Trainer(E, net, net.init(), cfg)


# replay buffer ---------------------------------------------------------


def test_buffer_fifo_bound():
    buf = T.ReplayBuffer(10, seed=0)
    for k in range(3):
        buf.push(np.arange(4 * k, 4 * k + 4, dtype=float)[:, None])
    assert len(buf) == 10
    np.testing.assert_array_equal(buf.contents().ravel(), np.arange(2, 12))


def test_buffer_uniform_sampling():
    buf = T.ReplayBuffer(1000, seed=1)
    buf.push(np.zeros((1000, 1)))
    counts = np.bincount(buf.sample_indices(100_000), minlength=1000)
    assert chisquare(counts).pvalue > 0.01


def test_buffer_errors():
    with pytest.raises(ValueError):
        T.ReplayBuffer(0)
    with pytest.raises(ValueError):
        T.ReplayBuffer(5).sample(2)


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(method="dem")
    with pytest.raises(ValueError):
        T.TrainConfig(batch=0)
    with pytest.raises(ValueError):
        T.TrainConfig(learning_rate=0.0)


# outer loop ------------------------------------------------------------


def test_outer_iteration_deterministic():
    a = make_trainer(batch=16, L=20)
    b = make_trainer(batch=16, L=20)
    T.outer_iteration(a)
    T.outer_iteration(b)
    np.testing.assert_array_equal(a.buffer.contents(), b.buffer.contents())


def test_zero_network_buffer_marginal():
    # score 0: the output is the prior draw plus all injected noise except the
    # last step, Var = sigma(1)^2 + sigma(1)^2 - sigma(1/L)^2
    sched = NoiseSchedule("geometric", 1e-3, 1.0)
    L = 100
    tr = make_trainer(net=zero_net(sched), schedule=sched, batch=10_000, L=L)
    assert T.outer_iteration(tr)
    expected = 2.0 * float(sched.sigma(1.0)) ** 2 - float(sched.sigma(1.0 / L)) ** 2
    var = tr.buffer.contents().var(0)
    assert np.all(np.abs(var / expected - 1.0) < 0.05)


def test_sample_clamp_bounds_buffer():
    sched = NoiseSchedule("geometric", 1e-3, 1.0)
    tr = make_trainer(net=zero_net(sched), schedule=sched, batch=2000, L=20, sample_clamp=0.5)
    assert T.outer_iteration(tr)
    buf = tr.buffer.contents()
    assert np.abs(buf).max() <= 0.5
    assert np.mean(np.abs(buf) == 0.5) > 0.1
    with pytest.raises(ValueError):
        T.TrainConfig(sample_clamp=-1.0)


def test_outer_abort_counted_and_training_fails():
    sched = NoiseSchedule("geometric", 1e-3, 1.0)
    bad = StubNet(lambda x, s: np.zeros(len(x)), lambda x, s: np.full_like(x, np.nan), sched)
    tr = make_trainer(net=bad, schedule=sched, batch=4, L=5)
    assert not T.outer_iteration(tr)
    assert tr.aborted == 1 and len(tr.buffer) == 0
    cfg = T.TrainConfig(outer_iters=4, inner_iters=1, batch=4, L=5, schedule=sched)
    with pytest.raises(T.TrainingError):
        T.train(gmm40(0), cfg, net=bad, params=bad.init())


# EnDEM -----------------------------------------------------------------


def test_endem_zero_time_target_is_energy():
    sched = NoiseSchedule("linear", 0.0, 1.0)
    tr = make_trainer(schedule=sched, batch=32, K=20)
    T.outer_iteration(tr)
    T.endem_inner_step(tr, t=0.0)
    x, t, target = tr.net.seen[-1]
    np.testing.assert_array_equal(target, tr.energy.energy(x))


def test_endem_oracle_loss_is_noise_floor_and_shrinks_with_K():
    def mean_loss(K):
        tr = make_trainer(batch=128, K=K, L=20, seed=3)
        T.outer_iteration(tr)
        return np.mean([T.endem_inner_step(tr, t=0.7) for _ in range(4)])

    small, large = mean_loss(20), mean_loss(500)
    assert 0.0 < large < small


def test_endem_steps_repeatable_with_frozen_params():
    a, b = make_trainer(batch=16, K=50, L=10, seed=9), make_trainer(batch=16, K=50, L=10, seed=9)
    for tr in (a, b):
        T.outer_iteration(tr)
    assert [T.endem_inner_step(a) for _ in range(2)] == [T.endem_inner_step(b) for _ in range(2)]


# iDEM / TweeDEM --------------------------------------------------------


def test_idem_targets_clipped():
    E = gmm40(0)
    sched = NoiseSchedule("geometric", 1e-5, 1.0)
    tr = make_trainer("idem", E=E, schedule=sched, batch=64, K=100, L=20, target_clip=70.0)
    tr.buffer.push(np.random.default_rng(0).uniform(-3.0, 3.0, (200, 2)))
    for _ in range(3):
        T.idem_inner_step(tr, t=0.1)
    norms = np.concatenate([np.linalg.norm(s[2], axis=1) for s in tr.net.seen])
    assert norms.max() <= 70.0 + 1e-9
    assert norms.max() > 60.0


def test_idem_zero_noise_target_is_negative_gradient():
    sched = NoiseSchedule("linear", 0.0, 1.0)
    tr = make_trainer("idem", schedule=sched, batch=16, K=10, L=10)
    T.outer_iteration(tr)
    T.idem_inner_step(tr, t=0.0)
    x, _, target = tr.net.seen[-1]
    np.testing.assert_allclose(target, -tr.energy.gradient(x), rtol=1e-12)


def test_tweedem_targets_match_tweedie_estimator():
    a = make_trainer("tweedem", batch=16, K=50, L=10, seed=4)
    b = make_trainer("tweedem", batch=16, K=50, L=10, seed=4)
    for tr in (a, b):
        T.outer_iteration(tr)
    T.idem_inner_step(a)
    _, _, sig, xt = b._noised_batch()
    expected = est.tweedie_score_batch(b.energy, xt, sig, 50, b.rng)
    np.testing.assert_array_equal(a.net.seen[-1][2], expected)


# BEnDEM ----------------------------------------------------------------


def test_acceptance_endpoints():
    assert T.acceptance_probability(0.0, 2.0) == 0.0
    assert T.acceptance_probability(1.5, 1.5) == 1.0
    assert T.acceptance_probability(3.0, 1.0) == 1.0
    assert T.acceptance_probability(0.3, 0.0) == 1.0


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_acceptance_in_unit_interval(ls, lt):
    assert 0.0 <= T.acceptance_probability(ls, lt) <= 1.0


def test_bendem_bootstrap_targets_match_oracle(monkeypatch):
    monkeypatch.setattr(T, "acceptance_probability", lambda ls, lt: 1.0)
    E = gmm40(0)
    sched = NoiseSchedule("geometric", 1e-5, 1.0)
    tr = make_trainer("bendem", E=E, schedule=sched, batch=256, K=100, bootstrap_K=400, L=20, seed=2)
    T.outer_iteration(tr)
    # t in an upper window (windows are uniform in sigma^2, so most of [0, 1]
    # lies in the lowest one for a geometric schedule)
    loss, used = T.bendem_inner_step(tr, t=0.97)
    assert used
    x, t, target = tr.net.seen[-1]
    bounds = np.asarray(tr.trajectory.split_times)
    upper = np.searchsorted(bounds, t, side="right") - 1 >= 1
    sig = np.asarray(sched.sigma(t))
    exact = E.noised_energy_oracle(x, sig)
    # delta-method spread of the bootstrap estimate: the lower-level oracle
    # averaged over the kernel at x_t is the level-t oracle, so the error is
    # pure Monte Carlo noise of size about sqrt(Var w / (K mean(w)^2))
    err = (target - exact)[upper]
    rng = np.random.default_rng(0)
    se = []
    for xi, ti, si in zip(x[upper], t[upper], sig[upper]):
        lo = bounds[np.searchsorted(bounds, ti, side="right") - 2]
        ss = float(sched.sigma(lo))
        eps = rng.standard_normal((4000, 2))
        pts = xi + math.sqrt(max(si * si - ss * ss, 0.0)) * eps
        lw = -E.noised_energy_oracle(pts, ss)
        w = np.exp(lw - lw.max())
        se.append(w.std() / (math.sqrt(400) * w.mean()))
    within = np.abs(err) <= 3.0 * np.array(se) + 1e-9
    assert upper.all()
    assert within.mean() > 0.95


def test_bendem_lowest_window_uses_mc():
    tr = make_trainer("bendem", batch=8, K=20, bootstrap_K=20, L=10)
    T.outer_iteration(tr)
    t0 = 0.5 * tr.trajectory.split_times[1]
    loss, used = T.bendem_inner_step(tr, t=t0)
    assert not used
    assert math.isfinite(loss)


def test_bendem_run_reports_fraction():
    E = gmm40(0)
    net = MlpNet(2, hidden=16, n_layers=2, n_freqs=8)
    cfg = T.TrainConfig("bendem", batch=16, outer_iters=2, inner_iters=3, K=20, bootstrap_K=20, L=10,
                        sampler_clip=70.0, target_clip=70.0)
    _, _, report = T.train(E, cfg, net=net)
    assert 0.0 <= report["bootstrap_fraction"] <= 1.0
    assert len(report["branches"]) == 6


# full runs -------------------------------------------------------------


def small_cfg(**kw):
    base = dict(batch=16, outer_iters=2, inner_iters=3, K=20, L=10, sampler_clip=70.0, seed=5)
    base.update(kw)
    return T.TrainConfig(**base)


def test_zero_inner_iterations_keep_parameters():
    net = MlpNet(2, hidden=16, n_layers=2, n_freqs=8)
    p0 = net.init(1)
    _, p, report = T.train(gmm40(0), small_cfg(inner_iters=0), net=net, params=p0.copy())
    np.testing.assert_array_equal(p.data, p0.data)
    assert report["steps"] == 0


def test_full_run_determinism(tmp_path):
    net = MlpNet(2, hidden=16, n_layers=2, n_freqs=8)
    runs = [T.train(gmm40(0), small_cfg(), net=net)[1:] for _ in range(2)]
    np.testing.assert_array_equal(runs[0][0].data, runs[1][0].data)
    assert runs[0][1]["losses"] == runs[1][1]["losses"]
    assert runs[0][1]["buffer"] == runs[1][1]["buffer"]


def test_training_lowers_loss_on_fixed_batch():
    E = gmm40(0)
    net = MlpNet(2, hidden=32, n_layers=2, n_freqs=8)
    cfg = small_cfg(outer_iters=1, inner_iters=60, learning_rate=1e-2)
    tr = T.Trainer(E, net, net.init(0), cfg)
    T.outer_iteration(tr)
    x, t = tr.buffer.contents()[:16], np.full(16, 0.5)
    target = est.mc_energy_batch(E, x, float(cfg.schedule.sigma(0.5)), 200, np.random.default_rng(0))
    before = net.loss_and_param_gradient(tr.params, x, t, target)[0]
    for _ in range(60):
        tr._apply(x, t, target)
    assert net.loss_and_param_gradient(tr.params, x, t, target)[0] < 0.5 * before


def test_checkpoints_written(tmp_path):
    net = MlpNet(2, hidden=8, n_layers=1, n_freqs=4)
    cfg = small_cfg(inner_iters=2, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    T.train(gmm40(0), cfg, net=net)
    assert sorted(os.listdir(tmp_path)) == ["step0000002.ckpt", "step0000004.ckpt"]


def test_default_net_modes():
    from boltzgen.energy import dw4

    assert T.default_net(gmm40(0), "endem").mode == "energy"
    assert T.default_net(gmm40(0), "idem").mode == "score"
    assert T.default_net(dw4(), "bendem").n_particles == 4
