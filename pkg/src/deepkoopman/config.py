"""Declarative run configuration for the command-line driver.

A run config is a JSON object with a mandatory ``schema_version`` and
``seed`` plus optional sections. Unknown keys are rejected at every level so
typos fail loudly instead of silently falling back to defaults::

    {
      "schema_version": 1,
      "seed": 0,
      "env": {"kind": "wake", "sigma": 0.1},
      "data": {"total_snapshots": 4238, "T": 32, "n_sequences": 1600},
      "training": {"latent_dim": 16, "epochs": 150, "tikhonov_eps": 0.01},
      "eval": {"n_sequences": 20, "horizons": [32, 64, 128]},
      "mpc": {"steps": 1000, "R_scale": 5.0},
      "pcontrol": {"gain": 0.4, "sensor_phase": 0.0, "steps": 2000},
      "paths": {"dataset": "data/dataset.csv", "checkpoint": "model/checkpoint"}
    }

Relative paths are resolved against the directory holding the config file.

Randomness: every consumer draws from ``stream(seed, name)``, a PCG64
generator seeded with ``SeedSequence([seed, crc32(name)])``, so adding a new
consumer never shifts the numbers another one sees.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import envs
from .control import MpcConfig, PControlConfig
from .koopman import TrainingConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration."""


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent PCG64 stream derived from the run seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


def derived_seed(seed: int, name: str) -> int:
    """A 32-bit integer seed for components that take plain integer seeds."""
    return int(stream(seed, name).integers(0, 2**31 - 1))


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")


def _field_names(cls, exclude=()):
    return [f.name for f in fields(cls) if f.name not in exclude]


ENV_KEYS = {"oracle": ["kind", "mu", "lam", "dt"], "wake": ["kind", "sigma", "omega", "gamma", "dt"]}
CHIRP_KEYS = ["amplitude", "f0", "f1", "sweep_steps", "rest_steps", "repetitions"]
DATA_KEYS = ["total_snapshots", "T", "n_sequences", "x0", "chirp", "x1_range", "x2_range"]
EVAL_KEYS = ["n_sequences", "horizons", "warmup", "model"]
MPC_KEYS = _field_names(MpcConfig) + ["steps", "x0", "sensor_phase"]
PCTL_KEYS = ["gain", "sensor_phase", "steps", "x0"]
PATH_KEYS = ["dataset", "checkpoint", "test_dataset"]
TOP_KEYS = ["schema_version", "seed", "env", "data", "training", "eval", "mpc", "pcontrol", "paths"]


@dataclass
class RunConfig:
    seed: int
    env: dict = field(default_factory=lambda: {"kind": "wake"})
    data: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    pcontrol: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    # -- typed views ----------------------------------------------------------

    def make_env(self):
        try:
            return envs.env_from_dict(self.env)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env: {exc}") from None

    def chirp(self) -> envs.ChirpSchedule:
        try:
            return envs.ChirpSchedule(**self.data.get("chirp", {}), seed=derived_seed(self.seed, "chirp"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.chirp: {exc}") from None

    def training_config(self) -> TrainingConfig:
        try:
            return TrainingConfig(**self.training, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training: {exc}") from None

    def mpc_config(self) -> MpcConfig:
        kw = {k: v for k, v in self.mpc.items() if k not in ("steps", "x0", "sensor_phase")}
        try:
            return MpcConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"mpc: {exc}") from None

    def pcontrol_config(self) -> PControlConfig:
        try:
            return PControlConfig(gain=float(self.pcontrol.get("gain", 0.4)),
                                  sensor=envs.Sensor(float(self.pcontrol.get("sensor_phase", 0.0))))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pcontrol: {exc}") from None

    def path(self, key: str) -> Path:
        """Resolved input path; raises if the config does not name it."""
        if key not in self.paths:
            raise ConfigError(f"paths.{key} is required for this command")
        return self.paths[key]

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "seed": self.seed}
        for name in ("env", "data", "training", "eval", "mpc", "pcontrol"):
            d[name] = copy.deepcopy(getattr(self, name))
        d["paths"] = {k: str(v) for k, v in self.paths.items()}
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (sorted keys, resolved paths)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_config(raw: dict, base_dir=None, seed_override: int | None = None) -> RunConfig:
    """Validate a decoded JSON object and build a :class:`RunConfig`."""
    _check_keys("<top level>", raw, TOP_KEYS)
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    seed = raw.get("seed") if seed_override is None else seed_override
    if seed is None:
        raise ConfigError("seed is mandatory (in the config or via --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    env = raw.get("env", {"kind": "wake"})
    if not isinstance(env, dict) or env.get("kind") not in ENV_KEYS:
        raise ConfigError("env.kind must be 'oracle' or 'wake'")
    _check_keys("env", env, ENV_KEYS[env["kind"]])
    data = raw.get("data", {})
    _check_keys("data", data, DATA_KEYS)
    _check_keys("data.chirp", data.get("chirp", {}), CHIRP_KEYS)
    training = raw.get("training", {})
    _check_keys("training", training, _field_names(TrainingConfig, exclude=("seed",)))
    ev = raw.get("eval", {})
    _check_keys("eval", ev, EVAL_KEYS)
    mpc = raw.get("mpc", {})
    _check_keys("mpc", mpc, MPC_KEYS)
    pctl = raw.get("pcontrol", {})
    _check_keys("pcontrol", pctl, PCTL_KEYS)
    paths = raw.get("paths", {})
    _check_keys("paths", paths, PATH_KEYS)
    resolved = {}
    for k, v in paths.items():
        if not isinstance(v, str):
            raise ConfigError(f"paths.{k} must be a string")
        p = Path(v)
        resolved[k] = (p if p.is_absolute() else base / p).resolve()

    cfg = RunConfig(seed=seed, env=dict(env), data=dict(data), training=dict(training), eval=dict(ev),
                    mpc=dict(mpc), pcontrol=dict(pctl), paths=resolved, base_dir=base.resolve())
    # surface value errors now rather than halfway through a command
    cfg.make_env()
    if training:
        cfg.training_config()
    if mpc:
        cfg.mpc_config()
    if pctl:
        cfg.pcontrol_config()
    if "chirp" in data:
        cfg.chirp()
    return cfg


def load_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, base_dir=path.parent, seed_override=seed_override)
