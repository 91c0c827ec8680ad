"""Bi-level training: an outer loop that fills a replay buffer with samples
from the current model, and an inner loop that regresses the network toward
Monte Carlo (or bootstrapped) noised-energy targets.

Methods:

* ``endem``   - energy network regressed toward ``E_K``.
* ``bendem``  - as ``endem``, but with a rejection step that sometimes swaps
  the target for a bootstrap estimate built from the network itself at a
  lower noise level.
* ``idem``    - score network regressed toward the clipped ``S_K``.
* ``tweedem`` - as ``idem`` with the Tweedie score estimate as target.
"""
from __future__ import annotations

import logging
import math
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import estimators as est
from .energy import EnergySpec
from .network import AdamState, MlpNet, ParamVector, adam_step, save_checkpoint
from .sampler import IntegrationConfig, IntegrationError, ScoreSource, remove_com, reverse_sde_integrate
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

METHODS = ("endem", "bendem", "idem", "tweedem")


class TrainingError(RuntimeError):
    pass


class ReplayBuffer:
    """Bounded FIFO of clean samples with uniform sampling."""

    def __init__(self, capacity: int = 10000, seed=0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: deque = deque(maxlen=capacity)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.n_pushed = 0

    def __len__(self):
        return len(self._data)

    def push(self, x: np.ndarray) -> None:
        for row in np.atleast_2d(np.asarray(x, dtype=np.float64)):
            self._data.append(row.copy())
            self.n_pushed += 1

    def contents(self) -> np.ndarray:
        return np.array(self._data)

    def sample_indices(self, n: int) -> np.ndarray:
        if len(self._data) == 0:
            raise ValueError("replay buffer is empty")
        return self.rng.integers(0, len(self._data), size=n)

    def sample(self, n: int) -> np.ndarray:
        idx = self.sample_indices(n)
        return np.array([self._data[i] for i in idx])

    def stats(self) -> dict:
        if not self._data:
            return {"size": 0}
        x = self.contents()
        return {"size": len(x), "pushed": self.n_pushed, "mean": x.mean(0).tolist(), "std": x.std(0).tolist()}


@dataclass
class TrainConfig:
    method: str = "endem"
    batch: int = 128
    outer_iters: int = 200
    inner_iters: int = 100
    K: int = 500
    learning_rate: float = 5e-4
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    L: int = 100
    target_clip: float | None = None
    sampler_clip: float | None = None
    # box for generated samples (GMM: the normalized frame [-1, 1]^d)
    sample_clamp: float | None = None
    bootstrap_K: int = 400
    n_windows: int = 10
    buffer_capacity: int = 10000
    checkpoint_every: int = 1000
    checkpoint_dir: str | None = None
    max_abort_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("batch", "K", "L", "bootstrap_K", "n_windows", "buffer_capacity", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.outer_iters < 0 or self.inner_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.sample_clamp is not None and not self.sample_clamp > 0:
            raise ValueError("sample_clamp must be positive")

    def to_config(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_config()
        return d


@dataclass
class Trainer:
    """Mutable training state: network, parameters, optimizer, buffer, streams."""

    energy: EnergySpec
    net: object
    params: ParamVector
    cfg: TrainConfig
    opt: AdamState = None
    buffer: ReplayBuffer = None
    rng: np.random.Generator = None
    step: int = 0
    losses: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    dropped: int = 0
    aborted: int = 0
    outer_done: int = 0

    def __post_init__(self):
        ss = np.random.SeedSequence(self.cfg.seed)
        buf_ss, inner_ss, self._outer_ss = ss.spawn(3)
        if self.opt is None:
            self.opt = AdamState.for_params(self.params, self.cfg.learning_rate)
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.cfg.buffer_capacity, np.random.default_rng(buf_ss))
        if self.rng is None:
            self.rng = np.random.default_rng(inner_ss)
        self.trajectory = None
        if self.cfg.method == "bendem":
            self.trajectory = est.BootstrapTrajectory.uniform_in_sigma2(self.cfg.schedule, self.cfg.n_windows)
            self.trajectory.validate(self.cfg.schedule)

    @property
    def particle_shape(self):
        return self.energy.particle_shape

    def model_energy(self, x, t):
        return self.net.forward(self.params, x, t)

    def score_source(self) -> ScoreSource:
        kind = "network" if self.cfg.method in ("endem", "bendem") else "network_score"
        return ScoreSource(kind, self.energy, clip_norm=self.cfg.sampler_clip, net=self.net, params=self.params)

    # shared pieces ----------------------------------------------------
    def _noised_batch(self, t=None):
        x0 = self.buffer.sample(self.cfg.batch)
        b, d = x0.shape
        t = self.rng.random(b) if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
        sig = np.asarray(self.cfg.schedule.sigma(t), dtype=np.float64).reshape(b)
        xt = x0 + sig[:, None] * remove_com(self.rng.standard_normal((b, d)), self.particle_shape)
        return x0, t, sig, xt

    def _apply(self, x, t, target):
        loss, grad, dropped = self.net.loss_and_param_gradient(self.params, x, t, target)
        self.dropped += dropped
        if not math.isfinite(loss):
            return loss
        self.params = adam_step(self.opt, self.params, grad)
        return loss


def outer_iteration(tr: Trainer) -> bool:
    """Sample a batch from the current model and push it into the buffer.

    Returns False (and counts an abort) if the integration diverged.
    """
    cfg = tr.cfg
    seed = int(tr._outer_ss.spawn(1)[0].generate_state(1)[0])
    icfg = IntegrationConfig(L=cfg.L, schedule=cfg.schedule, batch=cfg.batch, seed=seed,
                             particle_shape=tr.particle_shape, clamp=cfg.sample_clamp)
    tr.outer_done += 1
    try:
        x = reverse_sde_integrate(tr.score_source(), icfg, d=tr.energy.dim)
    except IntegrationError as err:
        tr.aborted += 1
        log.warning("outer iteration skipped: %s", err)
        return False
    tr.buffer.push(x)
    return True


def endem_inner_step(tr: Trainer, t=None) -> float:
    """One regression step of E_theta(x_t, t) toward the MC energy estimate."""
    cfg = tr.cfg
    _, t, sig, xt = tr._noised_batch(t)
    target = est.mc_energy_batch(tr.energy, xt, sig, cfg.K, tr.rng)
    loss = tr._apply(xt, t, target)
    tr.step += 1
    tr.losses.append(loss)
    return loss


def idem_inner_step(tr: Trainer, t=None) -> float:
    """One regression step of s_theta(x_t, t) toward the clipped S_K (or Tweedie score)."""
    cfg = tr.cfg
    _, t, sig, xt = tr._noised_batch(t)
    fn = est.tweedie_score_batch if cfg.method == "tweedem" else est.mc_score_batch
    target = fn(tr.energy, xt, sig, cfg.K, tr.rng, score_clip=cfg.target_clip)
    target = remove_com(target, tr.particle_shape)
    loss = tr._apply(xt, t, target)
    tr.step += 1
    tr.losses.append(loss)
    return loss


def acceptance_probability(l_s: float, l_t: float) -> float:
    """min(1, l_s / l_t), with 1 when the fit at t is already exact."""
    if l_t == 0:
        return 1.0
    return float(min(1.0, max(0.0, l_s / l_t)))


def bendem_inner_step(tr: Trainer, t=None):
    """Rejection-based choice between the bootstrap and the MC target.

    Returns ``(loss, used_bootstrap)``. Batch elements in the lowest window
    have no lower level to bootstrap from and always use the MC target.
    """
    cfg, sched = tr.cfg, tr.cfg.schedule
    x0, t, sig, xt = tr._noised_batch(t)
    b, d = xt.shape
    bounds = np.asarray(tr.trajectory.split_times)
    win = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(bounds) - 2)
    upper = win >= 1
    s = np.zeros(b)
    lo = bounds[np.maximum(win - 1, 0)]
    hi = bounds[np.maximum(win, 0)]
    u = tr.rng.random(b)
    s[upper] = lo[upper] + u[upper] * (hi[upper] - lo[upper])
    sig_s = np.asarray(sched.sigma(s), dtype=np.float64).reshape(b)
    xs = x0 + sig_s[:, None] * remove_com(tr.rng.standard_normal((b, d)), tr.particle_shape)

    mc_t = est.mc_energy_batch(tr.energy, xt, sig, cfg.K, tr.rng)
    used = False
    target = mc_t
    if np.any(upper):
        mc_s = est.mc_energy_batch(tr.energy, xs[upper], sig_s[upper], cfg.K, tr.rng)
        l_s = float(np.mean((mc_s - tr.model_energy(xs[upper], s[upper])) ** 2))
        l_t = float(np.mean((mc_t[upper] - tr.model_energy(xt[upper], t[upper])) ** 2))
        if math.isfinite(l_s) or math.isfinite(l_t):
            alpha = acceptance_probability(l_s, l_t) if math.isfinite(l_s) and math.isfinite(l_t) else float(math.isfinite(l_s))
            if tr.rng.random() < alpha:
                frozen = tr.params.copy()

                def e_phi(pts, svals):
                    return tr.net.forward(frozen, pts, svals)

                boot = est.bootstrap_energy_batch(e_phi, xt[upper], sig[upper], s[upper], sig_s[upper],
                                                  cfg.bootstrap_K, tr.rng)
                target = mc_t.copy()
                target[upper] = boot
                used = True
        else:
            tr.step += 1
            tr.losses.append(float("nan"))
            tr.branches.append(False)
            return float("nan"), False
    loss = tr._apply(xt, t, target)
    tr.step += 1
    tr.losses.append(loss)
    tr.branches.append(used)
    return loss, used


def inner_step(tr: Trainer):
    m = tr.cfg.method
    if m == "endem":
        return endem_inner_step(tr)
    if m == "bendem":
        return bendem_inner_step(tr)[0]
    return idem_inner_step(tr)


def default_net(energy: EnergySpec, method: str):
    mode = "energy" if method in ("endem", "bendem") else "score"
    if energy.particle_shape is not None:
        from .network import EgnnNet

        n, k = energy.particle_shape
        return EgnnNet(n, k, mode=mode)
    return MlpNet(energy.dim, mode=mode)


def train(energy: EnergySpec, cfg: TrainConfig, net=None, params=None, init_seed=None, progress=None):
    """Run the outer/inner loop. Returns ``(net, params, report)``.

    The buffer is seeded with one outer iteration of the untrained model.
    ``report`` holds the loss curve, acceptance statistics, buffer
    statistics and timings.
    """
    net = net if net is not None else default_net(energy, cfg.method)
    if params is None:
        params = net.init(cfg.seed if init_seed is None else init_seed)
    tr = Trainer(energy, net, params, cfg)
    t0 = time.time()
    if cfg.inner_iters > 0 or cfg.outer_iters > 0:
        outer_iteration(tr)
    for it in range(cfg.outer_iters):
        if len(tr.buffer) > 0:
            for _ in range(cfg.inner_iters):
                inner_step(tr)
                if cfg.checkpoint_dir and tr.step % cfg.checkpoint_every == 0:
                    path = os.path.join(cfg.checkpoint_dir, f"step{tr.step:07d}.ckpt")
                    save_checkpoint(path, net, tr.params, tr.step)
        outer_iteration(tr)
        if tr.outer_done >= 4 and tr.aborted > cfg.max_abort_fraction * tr.outer_done:
            raise TrainingError(f"{tr.aborted} of {tr.outer_done} outer integrations diverged")
        if progress is not None:
            progress(it, tr)
    report = {
        "method": cfg.method,
        "steps": tr.step,
        "losses": [float(v) for v in tr.losses],
        "dropped_targets": tr.dropped,
        "aborted_outer": tr.aborted,
        "outer_iterations": tr.outer_done,
        "buffer": tr.buffer.stats(),
        "train_seconds": time.time() - t0,
    }
    if cfg.method == "bendem":
        report["bootstrap_fraction"] = float(np.mean(tr.branches)) if tr.branches else 0.0
        report["branches"] = [bool(v) for v in tr.branches]
    return net, tr.params, report


def trained_sampler_score(net, params, energy: EnergySpec, method: str, clip=None) -> ScoreSource:
    kind = "network" if method in ("endem", "bendem") else "network_score"
    return ScoreSource(kind, energy, clip_norm=clip, net=net, params=params)
