"""Parametric energy and score networks with exact gradients.

Two architectures:

* :class:`MlpNet` - sinusoidal embeddings of every coordinate and of ``t``,
  followed by a GELU MLP ``f_theta(x, t)`` with output dimension ``d``.
* :class:`EgnnNet` - E(n)-equivariant message passing over particles with
  squared-distance edge features.

Each net runs in one of two modes. ``energy`` mode returns
``E_theta(x, t) = sum f_theta(x, t) + c`` (for the EGNN: the sum of
per-particle outputs plus ``c``); ``score`` mode returns ``f_theta`` itself
(the coordinate displacement for the EGNN). The model score of an energy net
is always ``-input_gradient``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


class ParamVector:
    """Flat float64 storage with named, shaped segments."""

    def __init__(self, segments, data=None):
        self.segments = [(name, tuple(shape)) for name, shape in segments]
        self.offsets = {}
        off = 0
        for name, shape in self.segments:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off
        self.data = np.zeros(off) if data is None else np.asarray(data, dtype=np.float64)
        if self.data.shape != (off,):
            raise ValueError(f"expected {off} parameters, got {self.data.shape}")

    def __getitem__(self, name):
        lo, hi, shape = self.offsets[name]
        return self.data[lo:hi].reshape(shape)

    def __setitem__(self, name, value):
        lo, hi, shape = self.offsets[name]
        self.data[lo:hi] = np.asarray(value, dtype=np.float64).reshape(-1)

    def like(self, data) -> "ParamVector":
        return ParamVector(self.segments, data)

    def copy(self) -> "ParamVector":
        return self.like(self.data.copy())

    def names(self):
        return [n for n, _ in self.segments]


def sinusoidal(u: ad.Tensor, freqs: np.ndarray) -> ad.Tensor:
    """[sin(u w_k), cos(u w_k)] for each scalar in ``u`` (shape (B, m) -> (B, m * 2F))."""
    B, m = u.value.shape
    arg = ad.mul(ad.reshape(u, (B, m, 1)), freqs[None, None, :])
    return ad.reshape(ad.concat([ad.sin(arg), ad.cos(arg)], axis=-1), (B, m * 2 * len(freqs)))


def geometric_freqs(n: int, lo: float, hi: float) -> np.ndarray:
    return np.exp(np.linspace(math.log(lo), math.log(hi), n))


class _Net:
    mode: str

    def config(self) -> dict:
        raise NotImplementedError

    def segments(self):
        raise NotImplementedError

    def _build(self, P: dict, x: ad.Tensor, t: np.ndarray) -> ad.Tensor:
        raise NotImplementedError

    # parameter initialization ------------------------------------------
    def init(self, seed: int = 0) -> ParamVector:
        rng = np.random.default_rng(seed)
        pv = ParamVector(self.segments())
        for name, shape in pv.segments:
            if name.endswith(".w"):
                fan_in = shape[0]
                pv[name] = rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)
        for name in getattr(self, "_small_init", ()):
            if name in pv.offsets:
                pv[name] = pv[name] * 1e-2
        return pv

    def n_params(self) -> int:
        return ParamVector(self.segments()).size

    # evaluation --------------------------------------------------------
    def _leaves(self, params: ParamVector, track: bool):
        mk = ad.leaf if track else ad.as_tensor
        return {name: mk(params[name]) for name in params.names()}

    def _check(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected inputs of dimension {self.dim}, got {x.shape[-1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return x, t

    def forward(self, params: ParamVector, x, t, chunk: int = 8192) -> np.ndarray:
        """Energies (B,) in energy mode, vectors (B, d) in score mode."""
        x, t = self._check(x, t)
        P = self._leaves(params, False)
        outs = [self._build(P, ad.as_tensor(x[i : i + chunk]), t[i : i + chunk]).value for i in range(0, len(x), chunk)]
        return np.concatenate(outs, axis=0)

    def input_gradient(self, params: ParamVector, x, t) -> np.ndarray:
        """d E_theta / d x, shape (B, d). Energy mode only."""
        return self.energy_and_input_gradient(params, x, t)[1]

    def energy_and_input_gradient(self, params: ParamVector, x, t):
        if self.mode != "energy":
            raise ValueError("input gradients are defined for energy-mode nets")
        x, t = self._check(x, t)
        P = self._leaves(params, False)
        xl = ad.leaf(x)
        out = self._build(P, xl, t)
        (gx,) = ad.grad(out, [xl])
        return out.value, gx

    def loss_and_param_gradient(self, params: ParamVector, x, t, target):
        """Mean squared error to ``target`` and its exact parameter gradient.

        Rows with a non-finite target are dropped; returns
        ``(loss, grad, n_dropped)``.
        """
        x, t = self._check(x, t)
        target = np.asarray(target, dtype=np.float64)
        finite = np.isfinite(target) if target.ndim == 1 else np.all(np.isfinite(target), axis=-1)
        n_dropped = int((~finite).sum())
        if n_dropped:
            log.warning("dropped %d non-finite regression targets", n_dropped)
            x, t, target = x[finite], t[finite], target[finite]
        if len(x) == 0:
            return float("nan"), params.like(np.zeros(params.size)), n_dropped
        P = self._leaves(params, True)
        out = self._build(P, ad.as_tensor(x), t)
        resid = out.value - target
        B = len(x)
        per = resid**2 if resid.ndim == 1 else (resid**2).sum(-1)
        loss = float(per.mean())
        names = params.names()
        grads = ad.grad(out, [P[n] for n in names], seed=2.0 * resid / B)
        flat = np.concatenate([g.reshape(-1) for g in grads])
        return loss, params.like(flat), n_dropped


# --------------------------------------------------------------------------


@dataclass
class MlpNet(_Net):
    dim: int
    mode: str = "energy"
    hidden: int = 128
    n_layers: int = 3
    n_freqs: int = 64
    freq_min: float = 1.0
    freq_max: float = 1e4
    x_freq_scale: float = 1.0
    t_freq_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("energy", "score"):
            raise ValueError("mode must be 'energy' or 'score'")
        base = geometric_freqs(self.n_freqs, 1.0 / self.freq_max, 1.0 / self.freq_min)
        self._xf = base * self.x_freq_scale
        self._tf = base * self.t_freq_scale
        self._small_init = ("out.w",)

    def config(self) -> dict:
        return {
            "arch": "mlp",
            "dim": self.dim,
            "mode": self.mode,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "n_freqs": self.n_freqs,
            "freq_min": self.freq_min,
            "freq_max": self.freq_max,
            "x_freq_scale": self.x_freq_scale,
            "t_freq_scale": self.t_freq_scale,
        }

    def segments(self):
        width_in = 2 * self.n_freqs * (self.dim + 1)
        segs = []
        prev = width_in
        for i in range(self.n_layers):
            segs += [(f"h{i}.w", (prev, self.hidden)), (f"h{i}.b", (self.hidden,))]
            prev = self.hidden
        segs += [("out.w", (prev, self.dim)), ("out.b", (self.dim,))]
        if self.mode == "energy":
            segs.append(("c", ()))
        return segs

    def _build(self, P, x, t):
        B = x.value.shape[0]
        h = ad.concat([sinusoidal(x, self._xf), sinusoidal(ad.as_tensor(t.reshape(B, 1)), self._tf)], axis=-1)
        for i in range(self.n_layers):
            h = ad.gelu(ad.linear(h, P[f"h{i}.w"], P[f"h{i}.b"]))
        f = ad.linear(h, P["out.w"], P["out.b"])
        if self.mode == "score":
            return f
        return ad.add(ad.sum_(f, axis=-1), P["c"])


# --------------------------------------------------------------------------


@dataclass
class EgnnNet(_Net):
    n_particles: int
    space_dim: int
    mode: str = "energy"
    hidden: int = 128
    n_layers: int = 3
    n_freqs: int = 16
    freq_min: float = 1.0
    freq_max: float = 1e4
    dim: int = field(init=False)

    def __post_init__(self):
        if self.mode not in ("energy", "score"):
            raise ValueError("mode must be 'energy' or 'score'")
        self.dim = self.n_particles * self.space_dim
        self._tf = geometric_freqs(self.n_freqs, 1.0 / self.freq_max, 1.0 / self.freq_min)
        n = self.n_particles
        ii, jj = np.nonzero(~np.eye(n, dtype=bool))
        self._src, self._dst = ii, jj  # edge (i <- j)
        self._small_init = tuple(f"l{l}.x2.w" for l in range(self.n_layers)) + ("out2.w",)

    def config(self) -> dict:
        return {
            "arch": "egnn",
            "n_particles": self.n_particles,
            "space_dim": self.space_dim,
            "mode": self.mode,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "n_freqs": self.n_freqs,
            "freq_min": self.freq_min,
            "freq_max": self.freq_max,
        }

    def segments(self):
        H = self.hidden
        segs = [("emb.w", (2 * self.n_freqs, H)), ("emb.b", (H,))]
        for l in range(self.n_layers):
            segs += [
                (f"l{l}.e1.w", (2 * H + 1, H)), (f"l{l}.e1.b", (H,)),
                (f"l{l}.e2.w", (H, H)), (f"l{l}.e2.b", (H,)),
                (f"l{l}.n1.w", (2 * H, H)), (f"l{l}.n1.b", (H,)),
                (f"l{l}.n2.w", (H, H)), (f"l{l}.n2.b", (H,)),
                (f"l{l}.x1.w", (H, H)), (f"l{l}.x1.b", (H,)),
                (f"l{l}.x2.w", (H, 1)),
            ]
        if self.mode == "energy":
            segs += [("out1.w", (H, H)), ("out1.b", (H,)), ("out2.w", (H, 1)), ("out2.b", (1,)), ("c", ())]
        return segs

    def _build(self, P, x, t):
        B = x.value.shape[0]
        n, k, H = self.n_particles, self.space_dim, self.hidden
        x0 = ad.reshape(x, (B, n, k))
        temb = sinusoidal(ad.as_tensor(t.reshape(B, 1)), self._tf)
        h = ad.silu(ad.linear(temb, P["emb.w"], P["emb.b"]))
        h = ad.broadcast_to(ad.reshape(h, (B, 1, H)), (B, n, H))
        pos = x0
        src, dst = self._src, self._dst
        inv_deg = 1.0 / (n - 1)
        for l in range(self.n_layers):
            diff = ad.take(pos, src, 1) - ad.take(pos, dst, 1)  # (B, E, k)
            d2 = ad.sum_(ad.square(diff), axis=-1, keepdims=True)
            e_in = ad.concat([ad.take(h, src, 1), ad.take(h, dst, 1), d2], axis=-1)
            m = ad.silu(ad.linear(ad.silu(ad.linear(e_in, P[f"l{l}.e1.w"], P[f"l{l}.e1.b"])), P[f"l{l}.e2.w"], P[f"l{l}.e2.b"]))
            agg = _segment_sum(m, src, n)
            upd = ad.linear(ad.silu(ad.linear(ad.concat([h, agg], axis=-1), P[f"l{l}.n1.w"], P[f"l{l}.n1.b"])), P[f"l{l}.n2.w"], P[f"l{l}.n2.b"])
            phi = ad.matmul(ad.silu(ad.linear(m, P[f"l{l}.x1.w"], P[f"l{l}.x1.b"])), P[f"l{l}.x2.w"])  # (B, E, 1)
            pos = pos + ad.mul(_segment_sum(ad.mul(diff, phi), src, n), inv_deg)
            h = h + upd
        if self.mode == "score":
            return ad.reshape(pos - x0, (B, n * k))
        per = ad.linear(ad.silu(ad.linear(h, P["out1.w"], P["out1.b"])), P["out2.w"], P["out2.b"])  # (B, n, 1)
        return ad.add(ad.sum_(ad.reshape(per, (B, n)), axis=-1), P["c"])


def _segment_sum(v: ad.Tensor, seg: np.ndarray, n: int) -> ad.Tensor:
    """Sum edge values (B, E, C) into their destination nodes (B, n, C)."""
    onehot = np.zeros((n, len(seg)))
    onehot[seg, np.arange(len(seg))] = 1.0
    B, E, C = v.value.shape
    vt = ad.reshape(_swap(v), (B * C, E))  # (B*C, E)
    out = ad.matmul(vt, onehot.T)  # (B*C, n)
    return _swap(ad.reshape(out, (B, C, n)))


def _swap(a: ad.Tensor) -> ad.Tensor:
    return ad._make(np.swapaxes(a.value, 1, 2), (a,), lambda g: (np.swapaxes(g, 1, 2),))


# --------------------------------------------------------------------------
# module-level API


def forward(net, params, x, t):
    return net.forward(params, x, t)


def input_gradient(net, params, x, t):
    return net.input_gradient(params, x, t)


def loss_and_param_gradient(net, params, batch):
    """``batch`` is ``(x_t, t, target)`` arrays."""
    x, t, target = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    loss, g, _ = net.loss_and_param_gradient(params, x, t, target)
    return loss, g


def net_from_config(cfg: dict):
    cfg = dict(cfg)
    arch = cfg.pop("arch", "mlp")
    if arch == "mlp":
        return MlpNet(**cfg)
    if arch == "egnn":
        return EgnnNet(**cfg)
    raise ValueError(f"unknown architecture {arch!r}")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, learning_rate: float = 1e-3) -> "AdamState":
        return cls(np.zeros(params.size), np.zeros(params.size), 0, learning_rate)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector) -> ParamVector:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    g = grad.data if isinstance(grad, ParamVector) else np.asarray(grad)
    if g.shape != state.m.shape or params.size != g.size:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    return params.like(params.data - state.learning_rate * mhat / (np.sqrt(vhat) + state.eps))


# --------------------------------------------------------------------------
# checkpoints: <u8 header length><JSON header><little-endian float64 data>


def save_checkpoint(path, net, params: ParamVector, step: int = 0, rng_state=None, extra=None) -> None:
    header = {
        "format": "boltzgen-checkpoint-1",
        "architecture": net.config(),
        "segments": [[name, list(shape)] for name, shape in params.segments],
        "n_params": params.size,
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(net, params, header)``."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    net = net_from_config(header["architecture"])
    params = ParamVector([(name, tuple(shape)) for name, shape in header["segments"]], data)
    return net, params, header
