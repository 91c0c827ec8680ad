"""Experiment configuration (one JSON file with nested blocks) and run manifests."""
from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field

from .energy import energy_from_config
from .schedule import schedule_from_config

BLOCKS = ("energy", "schedule", "network", "training", "sampler", "seed")

TRAINING_KEYS = {
    "method", "batch", "outer_iters", "inner_iters", "K", "learning_rate", "L", "target_clip", "sampler_clip",
    "sample_clamp",
    "bootstrap_K", "n_windows", "buffer_capacity", "checkpoint_every", "max_abort_fraction",
}
SAMPLER_KEYS = {"score", "K", "steps", "n", "clip", "final_noise", "batch", "clamp"}
NETWORK_KEYS = {
    "arch", "hidden", "n_layers", "n_freqs", "freq_min", "freq_max", "x_freq_scale", "t_freq_scale",
}

# per-target defaults; flags and the config file override these
DEFAULTS = {
    "GMM": {
        "energy": {"kind": "gmm", "seed": 0, "scale": 50.0},
        "schedule": {"kind": "geometric", "sigma_min": 1e-5, "sigma_max": 1.0},
        "network": {"arch": "mlp", "x_freq_scale": 30.0, "t_freq_scale": 100.0},
        "training": {"method": "endem", "batch": 128, "outer_iters": 200, "inner_iters": 100, "K": 500,
                     "learning_rate": 5e-4, "L": 100, "target_clip": 70.0, "sampler_clip": 70.0,
                     "sample_clamp": 1.0, "bootstrap_K": 400},
        "sampler": {"score": "mc", "K": 500, "steps": 1000, "n": 1000, "clip": 70.0},
    },
    "DW4": {
        "energy": {"kind": "dw4"},
        "schedule": {"kind": "geometric", "sigma_min": 1e-5, "sigma_max": 3.0},
        "network": {"arch": "egnn"},
        "training": {"method": "endem", "batch": 128, "outer_iters": 50, "inner_iters": 100, "K": 1000,
                     "learning_rate": 1e-3, "L": 100, "target_clip": 20.0, "sampler_clip": 20.0,
                     "bootstrap_K": 400},
        "sampler": {"score": "mc", "K": 1000, "steps": 1000, "n": 1000, "clip": 20.0},
    },
    "LJ": {
        "energy": {"kind": "lj"},
        "schedule": {"kind": "geometric", "sigma_min": 0.01, "sigma_max": 2.0},
        "network": {"arch": "egnn"},
        "training": {"method": "endem", "batch": 64, "outer_iters": 20, "inner_iters": 50, "K": 1000,
                     "learning_rate": 1e-3, "L": 100, "target_clip": 20.0, "sampler_clip": 20.0,
                     "bootstrap_K": 100},
        "sampler": {"score": "mc", "K": 1000, "steps": 1000, "n": 1000, "clip": 20.0},
    },
}


class ConfigError(ValueError):
    pass


def _check_keys(name, block, allowed):
    if not isinstance(block, dict):
        raise ConfigError(f"block {name!r} must be an object")
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name} block: {sorted(unknown)}")


def resolve_config(raw: dict | None) -> dict:
    """Merge a user config onto the defaults of its energy kind and validate it."""
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(BLOCKS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kind = str(raw.get("energy", {}).get("kind", "gmm")).upper()
    if kind not in DEFAULTS:
        raise ConfigError(f"unknown energy kind {kind!r}")
    cfg = copy.deepcopy(DEFAULTS[kind])
    cfg["seed"] = 0
    for name in BLOCKS:
        if name not in raw:
            continue
        if name == "seed":
            cfg["seed"] = int(raw["seed"])
            continue
        cfg[name].update(raw[name])
    _check_keys("training", cfg["training"], TRAINING_KEYS)
    _check_keys("sampler", cfg["sampler"], SAMPLER_KEYS)
    _check_keys("network", cfg["network"], NETWORK_KEYS | {"n_particles", "space_dim", "dim", "mode"})
    try:
        energy_from_config(cfg["energy"])
        schedule_from_config(cfg["schedule"])
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    env_seed = os.environ.get("BOLTZGEN_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: malformed JSON ({err})") from err
    return resolve_config(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg: dict) -> str:
    """Git-style content hash: sha1 over ``"blob <len>\\0" + canonical JSON``."""
    body = canonical_json(cfg).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)
        if not self.environment:
            self.environment = {"python": platform.python_version(), "platform": platform.platform()}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def reproducible_part(self) -> dict:
        """Everything except wall-clock timings and environment details."""
        d = asdict(self)
        d.pop("timings")
        d.pop("environment")
        return d
