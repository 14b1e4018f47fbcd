"""Experiment configuration: typed sections, validation, and a flat TOML format.

Files use dotted keys, one per line::

    mode = "canu"
    mu = 0.1
    optim.name = "adam"
    cluster.eps_percentile = 0.16

Unknown keys are rejected. Keys whose value is unset are omitted.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MODES = ("baseline", "plain_adv", "canu")
COMPOSITIONS = ("single", "ssg", "mmt")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 32
    hidden: int = 64
    image_height: int = 128
    image_width: int = 64


@dataclass
class DiscConfig:
    hidden: int = 1024
    merge: str = "sum"
    routing: str = "reversal"
    lr: float = 3.5e-4


@dataclass
class ClusterConfig:
    algorithm: str = "dbscan"
    eps: Optional[float] = None
    eps_percentile: float = 0.16
    min_samples: int = 4
    kmeans_k: Optional[int] = None
    subsample: int = 2000
    eps_growth: float = 1.5
    max_retries: int = 3


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 3.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "constant"
    step_size: int = 20
    gamma: float = 0.1


@dataclass
class PretrainConfig:
    steps: int = 200
    lr: float = 1e-3
    checkpoint_every: int = 0


@dataclass
class SamplerConfig:
    p: int = 4
    k: int = 4
    batch_size: Optional[int] = None


@dataclass
class DataConfig:
    source: str = "synthetic"
    target: str = "synthetic"
    gallery: str = ""
    query: str = ""


@dataclass
class SynthConfig:
    num_identities: int = 20
    num_cameras: int = 4
    samples_per_id: int = 16
    id_dim: int = 16
    camera_shift_scale: float = 1.0
    correlation: float = 0.0
    noise_sigma: float = 0.3
    seed: int = 0
    query_per_id: int = 1
    gallery_per_id: int = 4
    num_distractors: int = 0
    source_seed: int = 1000
    source_num_identities: int = 20
    source_correlation: float = 0.0


@dataclass
class ExperimentConfig:
    mode: str = "canu"
    composition: str = "single"
    mu: float = 0.1
    lam: float = 1.0
    margin: float = 0.5
    seed: int = 0
    epochs: int = 40
    iterations_per_epoch: Optional[int] = None
    probe_steps: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        validate(self)

    @property
    def batch_size(self) -> int:
        return self.sampler.p * self.sampler.k

    @property
    def conditional(self) -> bool:
        return self.mode == "canu"

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        """Published defaults for the two-model (``mmt``) or multi-branch (``ssg``) setup.

        ``toy`` is the desk-scale synthetic setting: a small population with
        strongly camera-correlated identities, a looser eps percentile for the
        small sample count, and a stronger adversary.
        """
        if name == "mmt":
            base = dict(composition="mmt", mu=0.1, epochs=40, iterations_per_epoch=400)
            optim = OptimConfig(name="adam", lr=3.5e-4)
        elif name == "ssg":
            base = dict(composition="ssg", mu=0.05, epochs=40, iterations_per_epoch=None)
            optim = OptimConfig(name="sgd", lr=6e-5)
        elif name == "toy":
            base = dict(
                composition="single",
                mu=1.0,
                epochs=6,
                iterations_per_epoch=60,
                cluster=ClusterConfig(eps_percentile=2.0),
                disc=DiscConfig(lr=1e-3),
                synth=SynthConfig(
                    num_identities=30,
                    source_num_identities=30,
                    noise_sigma=0.4,
                    camera_shift_scale=2.0,
                    correlation=0.9,
                ),
            )
            optim = OptimConfig(name="adam", lr=1e-3)
        else:
            raise ConfigError(f"unknown preset {name!r}")
        cfg = cls(optim=optim, **base)
        return apply_overrides(cfg, overrides) if overrides else cfg


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: ExperimentConfig) -> None:
    _check(cfg.mode in MODES, f"mode must be one of {MODES}")
    _check(cfg.composition in COMPOSITIONS, f"composition must be one of {COMPOSITIONS}")
    _check(cfg.mu >= 0 and math.isfinite(cfg.mu), "mu must be a finite non-negative number")
    _check(cfg.lam >= 0, "lam must be non-negative")
    _check(cfg.margin >= 0, "margin must be non-negative")
    _check(cfg.epochs >= 0, "epochs must be non-negative")
    _check(cfg.iterations_per_epoch is None or cfg.iterations_per_epoch > 0, "iterations_per_epoch must be positive")
    _check(cfg.sampler.p >= 2 and cfg.sampler.k >= 2, "the P x K sampler needs P >= 2 and K >= 2")
    _check(
        cfg.sampler.batch_size is None or cfg.sampler.batch_size == cfg.sampler.p * cfg.sampler.k,
        "sampler.batch_size must equal sampler.p * sampler.k",
    )
    _check(cfg.disc.merge in ("sum", "concat"), "disc.merge must be sum or concat")
    _check(cfg.disc.routing in ("reversal", "alternating"), "disc.routing must be reversal or alternating")
    _check(cfg.cluster.algorithm in ("dbscan", "kmeans"), "cluster.algorithm must be dbscan or kmeans")
    _check(cfg.cluster.algorithm != "kmeans" or bool(cfg.cluster.kmeans_k), "k-means needs cluster.kmeans_k")
    _check(0 < cfg.cluster.eps_percentile <= 100, "cluster.eps_percentile is a percentage in (0, 100]")
    _check(cfg.optim.name in ("adam", "sgd"), "optim.name must be adam or sgd")
    _check(cfg.optim.schedule in ("constant", "step"), "optim.schedule must be constant or step")
    _check(cfg.optim.lr > 0 and cfg.pretrain.lr > 0 and cfg.disc.lr > 0, "learning rates must be positive")
    _check(0 <= cfg.synth.correlation <= 1, "synth.correlation must lie in [0, 1]")
    _check(0 <= cfg.synth.source_correlation <= 1, "synth.source_correlation must lie in [0, 1]")
    _check(cfg.synth.samples_per_id >= 2, "synth.samples_per_id must be >= 2")


def _scalar_type(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _coerce(key: str, value, tp):
    base, optional = _scalar_type(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} may not be empty")
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    raise ConfigError(f"unsupported type for {key}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def from_dict(data: dict) -> ExperimentConfig:
    """Build a validated config from nested dicts; unknown keys raise ConfigError."""
    hints = _hints(ExperimentConfig)
    top, sections = {}, {}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} is a section, not a value")
            sub_hints = _hints(tp)
            kwargs = {}
            for sk, sv in value.items():
                if sk not in sub_hints:
                    raise ConfigError(f"unknown config key {key}.{sk!r}")
                kwargs[sk] = _coerce(f"{key}.{sk}", sv, sub_hints[sk])
            sections[key] = tp(**kwargs)
        else:
            top[key] = _coerce(key, value, tp)
    return ExperimentConfig(**top, **sections)


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, int):
        return str(value)
    return json.dumps(value)


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in to_dict(cfg).items():
        if isinstance(value, dict):
            for sk, sv in value.items():
                if sv is not None:
                    lines.append(f"{key}.{sk} = {_literal(sv)}")
        elif value is not None:
            lines.append(f"{key} = {_literal(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def _parse_override_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``{"section.key": value}`` or ``["section.key=value", ...]`` overrides."""
    if not isinstance(overrides, dict):
        parsed = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            parsed[key.strip()] = _parse_override_value(raw.strip())
        overrides = parsed
    data = to_dict(cfg)
    for key, value in overrides.items():
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in data or isinstance(data[parts[0]], dict):
                raise ConfigError(f"unknown config key {key!r}")
            data[parts[0]] = value
        elif len(parts) == 2:
            section = data.get(parts[0])
            if not isinstance(section, dict) or parts[1] not in section:
                raise ConfigError(f"unknown config key {key!r}")
            section[parts[1]] = value
        else:
            raise ConfigError(f"config keys nest one level deep, got {key!r}")
    return from_dict(data)
