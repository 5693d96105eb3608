"""Run configuration: dataclasses, JSON loading, overrides, and validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backends import HttpBackendConfig
from .errors import ConfigError
from .grpo import GrpoConfig


@dataclass
class DomainSpec:
    category: str
    exemplar: str


DEFAULT_DOMAINS = (
    DomainSpec("charts", "stacked bar chart comparing quarterly totals"),
    DomainSpec("diagrams", "labeled pulley system with two masses"),
    DomainSpec("maps", "contour map with marked elevation lines"),
    DomainSpec("photos", "crowded market stall with visible price tags"),
)


@dataclass
class IterationConfig:
    group_size: int = 8
    probe_rollouts: int = 10
    vote_trajectories: int = 9
    tau_txt: float = 0.5
    tau_vis: float = 0.1
    tau_low: float = 0.3
    tau_high: float = 0.8
    queries_per_iteration: int = 6000
    top_k: int = 5
    domains: list[DomainSpec] = field(default_factory=lambda: list(DEFAULT_DOMAINS))
    searcher_steps: int = 10
    questioner_steps: int = 10
    solver_steps: int = 30
    cycles: int = 3
    reinit_each_cycle: bool = False
    probe_questions_per_image: int = 1
    stage2_images_per_step: int = 4
    stage3_items_per_step: int = 4
    penalty_scope: str = "group"  # "group" or "batch"
    searcher_lr: float = 0.35
    questioner_lr: float = 0.35
    solver_gain: float = 0.02


@dataclass
class WorldConfig:
    count: int = 10000
    dim: int = 32
    bands_per_category: int = 16
    noise: float = 0.02
    solver_skill: float = 0.5
    solver_noise_temperature: float = 0.15


@dataclass
class JudgeConfig:
    kind: str = "exact"  # "exact" or "remote"
    retries: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "synthetic"  # "synthetic" or "remote"
    run_dir: str | None = None
    manifest_path: str | None = None
    iteration: IterationConfig = field(default_factory=IterationConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    backend: HttpBackendConfig = field(default_factory=HttpBackendConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)


def validate_config(cfg: RunConfig) -> RunConfig:
    it = cfg.iteration
    if not (0.0 <= it.tau_low < it.tau_high <= 1.0):
        raise ConfigError(
            f"difficulty window is inverted or out of range: "
            f"tau_low={it.tau_low}, tau_high={it.tau_high} (need 0 <= low < high <= 1)"
        )
    if it.tau_txt < 0 or it.tau_vis < 0:
        raise ConfigError(
            f"clustering thresholds must be >= 0: tau_txt={it.tau_txt}, tau_vis={it.tau_vis}"
        )
    if it.group_size < 2:
        raise ConfigError(f"group_size must be >= 2 for advantage normalization, got {it.group_size}")
    for name in ("probe_rollouts", "vote_trajectories", "queries_per_iteration", "top_k", "cycles"):
        if getattr(it, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(it, name)}")
    if it.penalty_scope not in ("group", "batch"):
        raise ConfigError(f"penalty_scope must be 'group' or 'batch', got {it.penalty_scope!r}")
    if not it.domains:
        raise ConfigError("at least one domain is required")
    if cfg.mode not in ("synthetic", "remote"):
        raise ConfigError(f"mode must be 'synthetic' or 'remote', got {cfg.mode!r}")
    if cfg.judge.kind not in ("exact", "remote"):
        raise ConfigError(f"judge.kind must be 'exact' or 'remote', got {cfg.judge.kind!r}")
    if cfg.mode == "remote":
        missing = [
            name
            for name in ("endpoint", "model", "embedding_endpoint", "embedding_model")
            if not getattr(cfg.backend, name)
        ]
        if missing:
            raise ConfigError(
                f"remote mode requires backend fields: {', '.join(missing)}"
            )
        if not cfg.manifest_path:
            raise ConfigError("remote mode requires manifest_path")
    if cfg.mode == "synthetic" and cfg.world.dim < 2 * len(cfg.iteration.domains):
        raise ConfigError(
            f"world dim {cfg.world.dim} too small for {len(cfg.iteration.domains)} "
            f"domains (need at least 2 per domain)"
        )
    return cfg


def _build(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "domains":
            value = [
                DomainSpec(**d) if isinstance(d, dict) else DomainSpec(*d)
                for d in value
            ]
        kwargs[f.name] = value
    return cls(**kwargs)


_SECTIONS = {
    "iteration": IterationConfig,
    "grpo": GrpoConfig,
    "world": WorldConfig,
    "backend": HttpBackendConfig,
    "judge": JudgeConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs: dict = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            section_cls = _SECTIONS[key]
            extra = set(value) - {f.name for f in fields(section_cls)}
            if extra:
                raise ConfigError(
                    f"unknown key(s) in config section {key!r}: {', '.join(sorted(extra))}"
                )
            kwargs[key] = _build(section_cls, value)
        else:
            kwargs[key] = value
    return validate_config(RunConfig(**kwargs))


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file and apply overrides on top (overrides win)."""
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
    if overrides:
        data = deep_merge(data, overrides)
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def resolve_run_dir(cfg: RunConfig, root: str | Path = "runs") -> Path:
    if cfg.run_dir:
        return Path(cfg.run_dir)
    return Path(root) / f"{config_hash(cfg)}-seed{cfg.seed}"
