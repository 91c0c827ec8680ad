"""Reference sample sets: exact draws for the GMM, MALA chains for particle systems."""
from __future__ import annotations

import math

import numpy as np

from .energy import EnergySpec, gmm_sample
from .sampler import remove_com


def mala(energy_fn, grad_fn, x0: np.ndarray, n_steps: int, step: float, rng: np.random.Generator,
         particle_shape=None, burn_in: int = 0, thin: int = 1, target_accept: float = 0.57):
    """Metropolis-adjusted Langevin on many independent chains.

    The step size is adapted per chain during burn-in only, so the kept
    draws come from a fixed, reversible kernel. Returns ``(draws, accept_rate)``
    where ``draws`` has shape ``(n_kept, n_chains, d)``.
    """
    x = remove_com(np.array(x0, dtype=np.float64), particle_shape)
    n, d = x.shape
    h = np.full(n, float(step))
    e, g = energy_fn(x), grad_fn(x)
    kept, accepted, proposed = [], 0, 0
    for it in range(burn_in + n_steps):
        noise = remove_com(rng.standard_normal((n, d)), particle_shape)
        y = x - h[:, None] * g + np.sqrt(2.0 * h)[:, None] * noise
        y = remove_com(y, particle_shape)
        with np.errstate(over="ignore", invalid="ignore"):
            ey, gy = energy_fn(y), grad_fn(y)
            fwd = ((y - x + h[:, None] * g) ** 2).sum(-1) / (4.0 * h)
            bwd = ((x - y + h[:, None] * gy) ** 2).sum(-1) / (4.0 * h)
            log_a = -(ey - e) - bwd + fwd
        log_a = np.where(np.isfinite(log_a), log_a, -np.inf)
        acc = np.log(rng.random(n)) < log_a
        x = np.where(acc[:, None], y, x)
        e = np.where(acc, ey, e)
        g = np.where(acc[:, None], gy, g)
        if it < burn_in:
            h *= np.exp(0.05 * (acc.astype(float) - target_accept))
        else:
            accepted += int(acc.sum())
            proposed += n
            if (it - burn_in) % thin == 0:
                kept.append(x.copy())
    return np.array(kept), (accepted / proposed if proposed else float("nan"))


def make_testset(energy: EnergySpec, n: int, seed: int = 0, chains: int = 100, burn_in: int = 2000,
                 thin: int = 20, step: float = 1e-3) -> tuple[np.ndarray, dict]:
    """``n`` reference points in the physical frame plus a description dict."""
    rng = np.random.default_rng(seed)
    if energy.kind == "GMM":
        return gmm_sample(energy.params, n, rng), {"method": "exact"}
    pshape = energy.particle_shape
    per_chain = math.ceil(n / chains)
    x0 = remove_com(rng.standard_normal((chains, energy.dim)) * 1.0, pshape)
    if energy.kind == "LJ":
        # start from a slightly jittered compact cluster to avoid overlaps
        x0 = _compact_cluster(pshape, chains, rng)
    draws, rate = mala(energy._phys_energy, energy._phys_gradient, x0, per_chain * thin, step, rng,
                       pshape, burn_in=burn_in, thin=thin)
    flat = draws.transpose(1, 0, 2).reshape(-1, energy.dim)[:n]
    return flat, {"method": "mala", "chains": chains, "burn_in": burn_in, "thin": thin, "accept_rate": rate,
                  "note": "long-run MALA stand-in for an external MCMC reference"}


def _compact_cluster(particle_shape, chains: int, rng) -> np.ndarray:
    n, k = particle_shape
    side = math.ceil(n ** (1.0 / k))
    grid = np.stack(np.meshgrid(*[np.arange(side)] * k, indexing="ij"), -1).reshape(-1, k)[:n] * 1.1
    out = grid[None] + 0.05 * rng.standard_normal((chains, n, k))
    return remove_com(out.reshape(chains, n * k), particle_shape)


def save_csv(path, x: np.ndarray) -> None:
    x = np.atleast_2d(x)
    header = ",".join(f"x{i}" for i in range(x.shape[1]))
    np.savetxt(path, x, delimiter=",", header=header, comments="", fmt="%.17g")


def load_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or not all(h == f"x{i}" for i, h in enumerate(header)):
        raise ValueError(f"{path}: expected a header x0..x{{d-1}}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: row width does not match header")
    return data
