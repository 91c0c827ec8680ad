import numpy as np
import pytest

from boltzgen import autodiff as ad
from boltzgen.network import (
    AdamState, EgnnNet, MlpNet, ParamVector, adam_step, forward, input_gradient, load_checkpoint,
    loss_and_param_gradient, save_checkpoint,
)

from conftest import random_rotation


def small_mlp(mode="energy", d=3):
    return MlpNet(d, mode=mode, hidden=16, n_freqs=4, x_freq_scale=3.0, t_freq_scale=3.0)


def small_egnn(mode="energy"):
    return EgnnNet(4, 2, mode=mode, hidden=12, n_freqs=4)


def randomized(net, seed=0):
    """Parameters with every entry O(0.3) so all paths carry signal."""
    p = net.init(seed)
    p.data[:] = np.random.default_rng(seed).standard_normal(p.size) * 0.3
    return p


def test_zero_network_outputs_constant():
    for net in (MlpNet(2), EgnnNet(4, 2)):
        p = ParamVector(net.segments())
        p["c"] = 3.7
        x = np.random.default_rng(0).standard_normal((5, net.dim))
        np.testing.assert_array_equal(forward(net, p, x, np.linspace(0, 1, 5)), np.full(5, 3.7))
        np.testing.assert_array_equal(input_gradient(net, p, x, 0.5), np.zeros_like(x))


def test_forward_is_pure():
    net = MlpNet(2)
    p = net.init(1)
    x = np.array([[0.2, -0.4]])
    assert np.array_equal(net.forward(p, x, 0.3), net.forward(p, x, 0.3))


def test_shape_mismatch_raises():
    net = MlpNet(2)
    with pytest.raises(ValueError):
        net.forward(net.init(0), np.zeros((3, 5)), 0.1)


def test_parameter_count_parity():
    assert MlpNet(2).n_params() == MlpNet(2, mode="score").n_params() + 1
    assert MlpNet(8).n_params() == MlpNet(8, mode="score").n_params() + 1


@pytest.mark.parametrize("make", [small_mlp, small_egnn], ids=["mlp", "egnn"])
def test_input_gradient_finite_differences(make):
    net = make()
    p = randomized(net)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, net.dim))
    t = rng.random(50)
    g = net.input_gradient(p, x, t)
    h = 1e-5
    fd = np.zeros_like(x)
    for j in range(net.dim):
        e = np.zeros(net.dim)
        e[j] = h
        fd[:, j] = (net.forward(p, x + e, t) - net.forward(p, x - e, t)) / (2 * h)
    err = np.linalg.norm(g - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-6)
    assert err.max() < 1e-5


@pytest.mark.parametrize("make,mode", [(small_mlp, "energy"), (small_mlp, "score"), (small_egnn, "energy"), (small_egnn, "score")])
def test_param_gradient_finite_differences(make, mode):
    net = make(mode)
    p = randomized(net, 2)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, net.dim))
    t = rng.random(6)
    target = rng.standard_normal(6) if mode == "energy" else rng.standard_normal((6, net.dim))
    loss, g, _ = net.loss_and_param_gradient(p, x, t, target)
    h = 1e-6
    for i in rng.choice(p.size, 25, replace=False):
        d = np.zeros(p.size)
        d[i] = h
        lp = net.loss_and_param_gradient(p.like(p.data + d), x, t, target)[0]
        lm = net.loss_and_param_gradient(p.like(p.data - d), x, t, target)[0]
        fd = (lp - lm) / (2 * h)
        assert abs(g.data[i] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_loss_zero_at_own_outputs():
    net = small_mlp()
    p = randomized(net)
    x = np.random.default_rng(0).standard_normal((4, 3))
    y = net.forward(p, x, 0.2)
    loss, g = loss_and_param_gradient(net, p, (x, np.full(4, 0.2), y))
    assert loss == 0.0
    assert np.all(g.data == 0.0)


def test_duplicated_batch_has_same_loss():
    net = small_mlp()
    p = randomized(net)
    x = np.array([[0.1, 0.2, 0.3]])
    l1, _ = loss_and_param_gradient(net, p, (x, np.array([0.4]), np.array([1.0])))
    l2, _ = loss_and_param_gradient(net, p, (np.repeat(x, 2, 0), np.array([0.4, 0.4]), np.array([1.0, 1.0])))
    assert l1 == pytest.approx(l2, rel=1e-14)


def test_non_finite_targets_are_dropped():
    net = small_mlp()
    p = randomized(net)
    x = np.random.default_rng(0).standard_normal((3, 3))
    loss, _, dropped = net.loss_and_param_gradient(p, x, np.zeros(3), np.array([1.0, np.nan, np.inf]))
    assert dropped == 2
    ref, _, _ = net.loss_and_param_gradient(p, x[:1], np.zeros(1), np.array([1.0]))
    assert loss == ref


def _group_action(x, n, k, rng):
    R = random_rotation(k, rng)
    perm = rng.permutation(n)
    shift = rng.standard_normal(k) * 2
    y = (x.reshape(-1, n, k)[:, perm, :] @ R.T + shift).reshape(len(x), -1)
    return y, R, perm


def test_egnn_energy_invariance():
    net = EgnnNet(4, 2)
    p = net.init(0)
    p.data[:] += np.random.default_rng(0).standard_normal(p.size) * 0.05
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 8)) * 2
    e0 = net.forward(p, x, 0.4)[0]
    worst = 0.0
    for _ in range(100):
        y, _, _ = _group_action(x, 4, 2, rng)
        worst = max(worst, abs(net.forward(p, y, 0.4)[0] - e0) / (1 + abs(e0)))
    assert worst < 1e-5


def test_egnn_gradient_and_score_equivariance():
    rng = np.random.default_rng(4)
    net = EgnnNet(4, 3)
    p = net.init(0)
    x = rng.standard_normal((3, 12))
    y, R, perm = _group_action(x, 4, 3, rng)
    g0 = net.input_gradient(p, x, 0.5).reshape(3, 4, 3)
    g1 = net.input_gradient(p, y, 0.5).reshape(3, 4, 3)
    np.testing.assert_allclose(g0[:, perm, :] @ R.T, g1, atol=1e-8)
    s = EgnnNet(4, 3, mode="score")
    ps = s.init(1)
    ps.data[:] += rng.standard_normal(ps.size) * 0.05
    f0 = s.forward(ps, x, 0.5).reshape(3, 4, 3)
    f1 = s.forward(ps, y, 0.5).reshape(3, 4, 3)
    np.testing.assert_allclose(f0[:, perm, :] @ R.T, f1, atol=1e-8)


def test_adam_zero_gradient_keeps_params():
    p = ParamVector([("w", (3,))], np.array([1.0, 2.0, 3.0]))
    st = AdamState.for_params(p, 1e-2)
    q = adam_step(st, p, p.like(np.zeros(3)))
    np.testing.assert_array_equal(q.data, p.data)


def test_adam_constant_gradient_moves_by_lr():
    p = ParamVector([("w", (2,))], np.zeros(2))
    st = AdamState.for_params(p, 1e-3)
    g = p.like(np.array([5.0, -0.2]))
    for _ in range(2000):
        prev = p.data.copy()
        p = adam_step(st, p, g)
    np.testing.assert_allclose(p.data - prev, [-1e-3, 1e-3], rtol=1e-4)


def test_adam_quadratic_bowl():
    target = np.array([0.8, -0.5, 0.25])
    p = ParamVector([("w", (3,))], np.zeros(3))
    st = AdamState.for_params(p, 1e-2)
    for _ in range(500):
        p = adam_step(st, p, p.like(2 * (p.data - target)))
    assert np.abs(p.data - target).max() < 1e-3


def test_adam_rejects_non_finite():
    p = ParamVector([("w", (2,))], np.zeros(2))
    with pytest.raises(FloatingPointError):
        adam_step(AdamState.for_params(p), p, p.like(np.array([np.nan, 0.0])))


def test_checkpoint_roundtrip(tmp_path):
    net = small_egnn()
    p = randomized(net)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net, p, step=17, rng_state={"seed": 3})
    net2, p2, header = load_checkpoint(path)
    assert header["step"] == 17 and header["rng_state"] == {"seed": 3}
    np.testing.assert_array_equal(p2.data, p.data)
    x = np.random.default_rng(0).standard_normal((2, 8))
    np.testing.assert_array_equal(net2.forward(p2, x, 0.3), net.forward(p, x, 0.3))
    raw = path.read_bytes()
    n = int.from_bytes(raw[:8], "little")
    assert len(raw) == 8 + n + 8 * p.size
    save_checkpoint(tmp_path / "m2.ckpt", net, p, step=17, rng_state={"seed": 3})
    assert (tmp_path / "m2.ckpt").read_bytes() == raw


def test_autodiff_take_accumulates_duplicates():
    a = ad.leaf(np.arange(6.0).reshape(1, 3, 2))
    out = ad.take(a, np.array([0, 0, 2]), axis=1)
    (g,) = ad.grad(out, [a])
    np.testing.assert_array_equal(g[0], [[2, 2], [0, 0], [1, 1]])
