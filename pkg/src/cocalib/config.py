"""Run configuration: a single versioned YAML file, validated on load.

Unknown keys are hard errors so typos fail fast, and every validation
message names the offending field. Defaults follow the calibrated
hyperparameters: tau1 = 0.5, tau2 = 3 m, lambda = 1, K = 5 neighbors,
LM capped at 1000 iterations, 500 diffusion timesteps sampled in 8 DDPM
steps, codec rate 32.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass, MISSING
from pathlib import Path

import yaml

from .evaluation import DiffusionParams
from .matching import MatchParams
from .posegraph import SolverOptions
from .scenario import NoiseConfig, SceneParams

CONFIG_SCHEMA = "cocalib-config-v1"


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


@dataclass(frozen=True)
class SweepSpec:
    noise_levels: tuple[tuple[float, float], ...] = (
        (0.0, 0.0),
        (0.1, 0.1),
        (0.2, 0.2),
        (0.3, 0.3),
        (0.4, 0.4),
    )
    delays_ms: tuple[float, ...] = (0.0, 100.0, 200.0, 400.0)
    flags: tuple[tuple[bool, bool], ...] = (
        (False, False),
        (True, False),
        (False, True),
        (True, True),
    )
    trials: int = 20
    jobs: int = 1

    def __post_init__(self):
        if not self.noise_levels or not self.delays_ms or not self.flags:
            raise ValueError("noise_levels, delays_ms and flags must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    schema: str = CONFIG_SCHEMA
    seed: int = 0
    output_dir: str = "results"
    scene: SceneParams = SceneParams()
    noise: NoiseConfig = NoiseConfig()
    matching: MatchParams = MatchParams()
    solver: SolverOptions = SolverOptions()
    diffusion: DiffusionParams = DiffusionParams()
    sweep: SweepSpec = SweepSpec()

    def __post_init__(self):
        if self.schema != CONFIG_SCHEMA:
            raise ValueError(
                f"schema: expected {CONFIG_SCHEMA!r}, got {self.schema!r}"
            )


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _coerce_flags(raw, path: str):
    if not isinstance(raw, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of {{pcm, tcm}} entries")
    out = []
    for i, entry in enumerate(raw):
        here = f"{path}[{i}]"
        if isinstance(entry, dict):
            unknown = set(entry) - {"pcm", "tcm"}
            if unknown:
                raise ConfigError(f"{here}: unknown key(s) {sorted(unknown)}")
            out.append((bool(entry.get("pcm", False)), bool(entry.get("tcm", False))))
        elif isinstance(entry, (list, tuple)) and len(entry) == 2:
            out.append((bool(entry[0]), bool(entry[1])))
        else:
            raise ConfigError(f"{here}: expected {{pcm, tcm}} mapping or [pcm, tcm] pair")
    return tuple(out)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        here = f"{path}.{name}" if path else name
        if cls is SweepSpec and name == "flags":
            kwargs[name] = _coerce_flags(value, here)
        elif is_dataclass(f.type) or (
            f.default is not MISSING and is_dataclass(type(f.default))
        ):
            sub_cls = type(f.default)
            kwargs[name] = _build(sub_cls, value, here)
        else:
            kwargs[name] = _tuplify(value)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def _as_plain(obj):
    if is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_as_plain(v) for v in obj]
    return obj


def dump_config(cfg: RunConfig) -> str:
    """Canonical YAML rendering; load(dump(load(x))) == load(x)."""
    plain = _as_plain(cfg)
    plain["sweep"]["flags"] = [
        {"pcm": pcm, "tcm": tcm} for pcm, tcm in cfg.sweep.flags
    ]
    return yaml.safe_dump(plain, sort_keys=False)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
