"""Typed experiment configuration with strict parsing.

Config files are plain YAML mappings.  Parsing is strict: unknown keys and
type mismatches raise ConfigError with the offending key path, so a typo in
a sweep file fails loudly instead of silently running defaults.  to/from dict
round-trips exactly, which the echo test relies on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .buffer import AugmentationSpec
from .stream import CORRUPTION_KINDS as CORRUPTION_GRID

CONFIG_FORMAT_VERSION = 1

LOSS_VARIANTS = ("cretta", "no_contrastive", "no_contrastive_sigma",
                 "pairwise_non_residual", "nce_residual", "nce_non_residual",
                 "entropy_tent", "pseudo_label", "bn_only")
BUFFER_ORIGINS = ("source_train", "surrogate_dataset", "confidence_high",
                  "confidence_low")
STREAM_MODES = ("iid", "dirichlet", "gradual")
EXPERIMENT_KINDS = ("single", "compare", "ablate", "sweep", "gradual",
                    "noniid")


class ConfigError(ValueError):
    """Bad configuration; message carries the key path."""


@dataclass
class BufferConfig:
    fraction: float = 0.10
    balanced: bool = True
    origin: str = "source_train"
    augmentation: AugmentationSpec | None = None

    def validate(self, path="buffer"):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"{path}.fraction must be in (0, 1]")
        if self.origin not in BUFFER_ORIGINS:
            raise ConfigError(f"{path}.origin: unknown origin "
                              f"{self.origin!r}")


@dataclass
class StreamConfig:
    mode: str = "iid"
    delta: float = 1.0
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    batches_per_stage: int = 10
    eval_batches: int = 5

    def validate(self, path="stream"):
        if self.mode not in STREAM_MODES:
            raise ConfigError(f"{path}.mode: unknown mode {self.mode!r}")
        if self.delta <= 0:
            raise ConfigError(f"{path}.delta must be positive")
        if self.batches_per_stage < 1:
            raise ConfigError(f"{path}.batches_per_stage must be >= 1")
        if self.eval_batches < 0:
            raise ConfigError(f"{path}.eval_batches must be >= 0")
        if any(int(s) != s or not 0 <= s <= 5 for s in self.severities):
            raise ConfigError(f"{path}.severities must be integers in 0..5")
        if list(self.severities) != sorted(self.severities):
            raise ConfigError(f"{path}.severities must be non-decreasing")


@dataclass
class AdaptConfig:
    loss_variant: str = "cretta"
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 200
    stream_length: int = 50
    param_mask: str = "bn_affine"
    bn_mode: str = "batch"
    temperature: float = 1.0
    weight_mode: str = "analytic"
    pairing: str = "aligned"
    pl_threshold: float = 0.9
    spot_check_every: int = 10
    seed: int = 0
    buffer: BufferConfig = field(default_factory=BufferConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)

    def validate(self, path="adapt"):
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"{path}.loss_variant: unknown variant "
                              f"{self.loss_variant!r}")
        if self.beta <= 0:
            raise ConfigError(f"{path}.beta must be positive")
        if self.lr < 0:
            raise ConfigError(f"{path}.lr must be >= 0")
        if self.batch_size < 2:
            raise ConfigError(f"{path}.batch_size must be >= 2")
        if self.stream_length < 1:
            raise ConfigError(f"{path}.stream_length must be >= 1")
        if self.param_mask not in ("bn_affine", "all", "head", "none"):
            raise ConfigError(f"{path}.param_mask: unknown policy "
                              f"{self.param_mask!r}")
        if self.bn_mode not in ("batch", "running"):
            raise ConfigError(f"{path}.bn_mode must be 'batch' or 'running'")
        if self.temperature <= 0:
            raise ConfigError(f"{path}.temperature must be positive")
        if self.weight_mode not in ("analytic", "uniform_random"):
            raise ConfigError(f"{path}.weight_mode: unknown mode "
                              f"{self.weight_mode!r}")
        if self.pairing not in ("aligned", "cartesian"):
            raise ConfigError(f"{path}.pairing must be 'aligned' or "
                              "'cartesian'")
        if not 0.0 <= self.pl_threshold < 1.0:
            raise ConfigError(f"{path}.pl_threshold must be in [0, 1)")
        if self.spot_check_every < 0:
            raise ConfigError(f"{path}.spot_check_every must be >= 0")
        self.buffer.validate(f"{path}.buffer")
        self.stream.validate(f"{path}.stream")


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    n: int = 4000
    target_n: int = 10000
    dim: int = 4
    classes: int = 4
    separation: float = 5.0
    aspect: float = 4.0
    spread: float = 10.0
    redundancy: float = 0.4
    offset: float = 2.0

    def validate(self, path="dataset"):
        if self.kind not in ("blobs", "moons"):
            raise ConfigError(f"{path}.kind must be 'blobs' or 'moons'")
        if self.n < 2 * self.classes or self.target_n < 2 * self.classes:
            raise ConfigError(f"{path}: need at least 2 samples per class")
        if self.dim < 2:
            raise ConfigError(f"{path}.dim must be >= 2")
        if self.classes < 2:
            raise ConfigError(f"{path}.classes must be >= 2")
        if self.separation <= 0 or self.aspect <= 0 or self.spread <= 0:
            raise ConfigError(f"{path}: separation, aspect, and spread must "
                              "be positive")
        if self.redundancy < 0:
            raise ConfigError(f"{path}.redundancy must be >= 0")
        if self.offset < 0:
            raise ConfigError(f"{path}.offset must be >= 0")


@dataclass
class PretrainConfig:
    hidden: list = field(default_factory=lambda: [32, 32])
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 200

    def validate(self, path="pretrain"):
        if not self.hidden or any(int(h) != h or h < 1 for h in self.hidden):
            raise ConfigError(f"{path}.hidden must be positive integers")
        if self.epochs < 1 or self.batch_size < 2 or self.lr <= 0:
            raise ConfigError(f"{path}: bad training hyperparameters")


@dataclass
class ExperimentConfig:
    kind: str = "single"
    format_version: int = CONFIG_FORMAT_VERSION
    methods: list = field(default_factory=lambda: ["cretta"])
    corruptions: list = field(default_factory=lambda: list(CORRUPTION_GRID))
    severities: list = field(default_factory=lambda: [5])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    betas: list = field(default_factory=lambda: [1.0])
    deltas: list = field(default_factory=lambda: [10.0, 1.0, 0.1, 0.01])
    out_dir: str | None = None
    dump_datasets: bool = False
    threads: int = 1
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def validate(self):
        from .experiments import METHOD_PRESETS  # one-way at runtime
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind: unknown experiment {self.kind!r}")
        if self.format_version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"format_version must be "
                              f"{CONFIG_FORMAT_VERSION}")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHOD_PRESETS:
                raise ConfigError(f"methods: unknown method {m!r}")
        for c in self.corruptions:
            if c not in CORRUPTION_GRID:
                raise ConfigError(f"corruptions: unknown kind {c!r}")
        if not self.corruptions:
            raise ConfigError("corruptions must not be empty")
        if not self.severities or \
                any(int(s) != s or not 0 <= s <= 5 for s in self.severities):
            raise ConfigError("severities must be integers in 0..5")
        if not self.seeds or any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of "
                              "non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.betas or any(b <= 0 for b in self.betas):
            raise ConfigError("betas must be positive")
        if not self.deltas or any(d <= 0 for d in self.deltas):
            raise ConfigError("deltas must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.adapt.validate()
        self.dataset.validate()
        self.pretrain.validate()


# -- dict / YAML round-tripping ----------------------------------------------

_NESTED = {
    "augmentation": AugmentationSpec,
    "buffer": BufferConfig,
    "stream": StreamConfig,
    "adapt": AdaptConfig,
    "dataset": DatasetConfig,
    "pretrain": PretrainConfig,
}

_OPTIONAL_NESTED = ("augmentation",)


def _coerce(value, target, path):
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if target is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _dataclass_from_dict(cls, data, path):
    if data is None and path.split(".")[-1] in _OPTIONAL_NESTED:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {data!r}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        child = f"{path}.{name}" if path else name
        value = data[name]
        if name in _NESTED:
            if value is None and name in _OPTIONAL_NESTED:
                kwargs[name] = None
            else:
                kwargs[name] = _dataclass_from_dict(_NESTED[name], value,
                                                    child)
        elif name == "out_dir":
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{child}: expected a string or null")
            kwargs[name] = value
        elif f.type in ("float", float):
            kwargs[name] = _coerce(value, float, child)
        elif f.type in ("int", int):
            kwargs[name] = _coerce(value, int, child)
        elif f.type in ("bool", bool):
            kwargs[name] = _coerce(value, bool, child)
        elif f.type in ("str", str):
            kwargs[name] = _coerce(value, str, child)
        elif f.type in ("list", list):
            kwargs[name] = _coerce(value, list, child)
        else:
            raise ConfigError(f"{child}: unhandled field type {f.type!r}")
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _dataclass_from_dict(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def adapt_config_from_dict(data: dict) -> AdaptConfig:
    cfg = _dataclass_from_dict(AdaptConfig, data, "adapt")
    cfg.validate()
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True,
                          default_flow_style=False)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
