"""Run configuration: a single versioned JSON document.

One file fully determines a run; there is no environment-variable or
implicit configuration, so any result can be reproduced from its config
echo alone. Unknown keys are rejected rather than ignored, and keys that
only apply to one method (say, DP noise under the self-supervised
stage 1) are rejected under the other, so a config cannot silently
carry dead settings.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datasets import AugmentSpec
from .errors import ConfigError, FormatError
from .numerics import MlpSpec, activation_id

CONFIG_VERSION = 1

CIFAR10_DIM = 3072
CIFAR10_CLASSES = 10


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _positive_int(value, name: str) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool)
             and value > 0, f"{name} must be a positive integer, "
             f"got {value!r}")
    return value


def _positive_float(value, name: str) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool)
             and math.isfinite(value) and value > 0,
             f"{name} must be a positive number, got {value!r}")
    return float(value)


def _nonnegative_float(value, name: str) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool)
             and math.isfinite(value) and value >= 0,
             f"{name} must be a nonnegative number, got {value!r}")
    return float(value)


def _fraction(value, name: str, *, closed_top: bool) -> float:
    v = _positive_float(value, name)
    top_ok = v <= 1.0 if closed_top else v < 1.0
    _require(top_ok, f"{name} must lie in "
             f"(0, 1{']' if closed_top else ')'}, got {value!r}")
    return v


@dataclass(frozen=True)
class DataConfig:
    """Synthetic benchmark generator or a CIFAR-10 binary file, plus the
    non-IID partition shape."""

    source: str = "synthetic"
    path: str | None = None
    num_classes: int = 10
    dim: int = 16
    samples_per_class: int = 800
    cluster_spread: float = 0.3
    num_clients: int = 10
    tau: float = 0.3
    train_per_client: int = 500
    test_per_client: int = 200
    test_distribution: str = "matched"

    def __post_init__(self):
        _require(self.source in ("synthetic", "cifar10"),
                 f"data.source must be 'synthetic' or 'cifar10', "
                 f"got {self.source!r}")
        if self.source == "cifar10":
            _require(self.path is not None,
                     "data.path is required when data.source is 'cifar10'")
            if not Path(self.path).exists():
                raise ConfigError(
                    f"data.path does not exist: {self.path}")
            _require(self.num_classes == CIFAR10_CLASSES,
                     f"CIFAR-10 has {CIFAR10_CLASSES} classes, "
                     f"got num_classes={self.num_classes}")
            _require(self.dim == CIFAR10_DIM,
                     f"CIFAR-10 samples have {CIFAR10_DIM} features, "
                     f"got dim={self.dim}")
        else:
            _require(self.path is None,
                     "data.path only applies when data.source is 'cifar10'")
            _positive_int(self.num_classes, "data.num_classes")
            _positive_int(self.dim, "data.dim")
            _positive_int(self.samples_per_class, "data.samples_per_class")
            _positive_float(self.cluster_spread, "data.cluster_spread")
        _positive_int(self.num_clients, "data.num_clients")
        _fraction(self.tau, "data.tau", closed_top=True)
        _positive_int(self.train_per_client, "data.train_per_client")
        _positive_int(self.test_per_client, "data.test_per_client")
        _require(self.test_distribution in ("matched", "iid"),
                 f"data.test_distribution must be 'matched' or 'iid', "
                 f"got {self.test_distribution!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Extractor and expert topologies plus the gate's logit noise."""

    fe_widths: tuple[int, ...] = (16, 32, 32)
    fe_activations: tuple[str, ...] = ("tanh", "tanh")
    expert_widths: tuple[int, ...] = (32, 10)
    expert_activations: tuple[str, ...] = ("identity",)
    gate_noise_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "fe_widths", tuple(self.fe_widths))
        object.__setattr__(self, "fe_activations",
                           tuple(self.fe_activations))
        object.__setattr__(self, "expert_widths",
                           tuple(self.expert_widths))
        object.__setattr__(self, "expert_activations",
                           tuple(self.expert_activations))
        _nonnegative_float(self.gate_noise_std, "model.gate_noise_std")
        self.fe_spec()
        self.expert_spec()

    def fe_spec(self) -> MlpSpec:
        return MlpSpec(self.fe_widths,
                       tuple(activation_id(a) for a in self.fe_activations))

    def expert_spec(self) -> MlpSpec:
        return MlpSpec(self.expert_widths,
                       tuple(activation_id(a)
                             for a in self.expert_activations))

    @property
    def latent_dim(self) -> int:
        return self.fe_widths[-1]


@dataclass(frozen=True)
class Stage1Config:
    method: str = "fedsc"
    rounds: int = 30
    local_epochs: int = 2
    lr: float = 0.05
    dp_noise_std: float = 0.05
    aug_noise_std: float = 0.1
    aug_mask_prob: float = 0.2

    def __post_init__(self):
        _require(self.method in ("fedce", "fedsc"),
                 f"stage1.method must be 'fedce' or 'fedsc', "
                 f"got {self.method!r}")
        _positive_int(self.rounds, "stage1.rounds")
        _positive_int(self.local_epochs, "stage1.local_epochs")
        _positive_float(self.lr, "stage1.lr")
        _nonnegative_float(self.dp_noise_std, "stage1.dp_noise_std")
        _nonnegative_float(self.aug_noise_std, "stage1.aug_noise_std")
        _require(0.0 <= self.aug_mask_prob < 1.0,
                 f"stage1.aug_mask_prob must lie in [0, 1), "
                 f"got {self.aug_mask_prob!r}")

    def aug_spec(self) -> AugmentSpec:
        return AugmentSpec(noise_std=self.aug_noise_std,
                           mask_prob=self.aug_mask_prob)


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 30
    lr: float = 0.05

    def __post_init__(self):
        _positive_int(self.epochs, "stage2.epochs")
        _positive_float(self.lr, "stage2.lr")


@dataclass(frozen=True)
class Stage3Config:
    method: str = "fedgate"
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.05
    lambda_load: float = 0.01
    client_fraction: float = 0.7
    grad_max_norm: float = 1.0
    pseudo_ratio: float = 0.7
    epochs_per_client: int = 2
    max_passes: int = 20

    def __post_init__(self):
        _require(self.method in ("rangate", "rollgate", "fedgate"),
                 f"stage3.method must be 'rangate', 'rollgate', or "
                 f"'fedgate', got {self.method!r}")
        _positive_int(self.rounds, "stage3.rounds")
        _positive_int(self.local_epochs, "stage3.local_epochs")
        _positive_float(self.lr, "stage3.lr")
        _nonnegative_float(self.lambda_load, "stage3.lambda_load")
        _fraction(self.client_fraction, "stage3.client_fraction",
                  closed_top=True)
        _positive_float(self.grad_max_norm, "stage3.grad_max_norm")
        _fraction(self.pseudo_ratio, "stage3.pseudo_ratio",
                  closed_top=False)
        _positive_int(self.epochs_per_client, "stage3.epochs_per_client")
        _positive_int(self.max_passes, "stage3.max_passes")


@dataclass(frozen=True)
class BaselineConfig:
    """Budget for the centralized mixture and the per-client classifier;
    the federated-classifier baseline reuses the stage-1 schedule."""

    epochs: int = 30
    lr: float = 0.05

    def __post_init__(self):
        _positive_int(self.epochs, "baselines.epochs")
        _positive_float(self.lr, "baselines.lr")


# Keys that only make sense for one method within their section.
_FEDSC_ONLY = ("dp_noise_std", "aug_noise_std", "aug_mask_prob")
_FEDGATE_ONLY = ("rounds", "local_epochs", "lambda_load",
                 "client_fraction", "grad_max_norm")
_ROLLGATE_ONLY = ("pseudo_ratio", "epochs_per_client", "max_passes")
_SYNTHETIC_ONLY = ("dim", "num_classes", "samples_per_class",
                   "cluster_spread")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on. The hash excludes output_dir, so the
    same experiment written to two places is recognized as one."""

    seed: int = 0
    k: int = 1
    batch_size: int = 64
    bytes_per_scalar: int = 4
    output_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        _require(isinstance(self.seed, int) and not isinstance(
            self.seed, bool) and self.seed >= 0,
            f"seed must be a nonnegative integer, got {self.seed!r}")
        _positive_int(self.k, "k")
        _positive_int(self.batch_size, "batch_size")
        _positive_int(self.bytes_per_scalar, "bytes_per_scalar")
        _require(self.k <= self.data.num_clients,
                 f"k={self.k} selects more experts than the "
                 f"{self.data.num_clients} clients provide")
        _require(self.model.fe_widths[0] == self.data.dim,
                 f"extractor input width {self.model.fe_widths[0]} does "
                 f"not match the data dimension {self.data.dim}")
        _require(self.model.expert_widths[0] == self.model.latent_dim,
                 f"expert input width {self.model.expert_widths[0]} does "
                 f"not match the latent width {self.model.latent_dim}")
        _require(self.model.expert_widths[-1] == self.data.num_classes,
                 f"expert output width {self.model.expert_widths[-1]} does "
                 f"not match the {self.data.num_classes} classes")
        _require(not (self.stage3.method == "rollgate"
                      and self.data.num_clients < 2),
                 "stage3.method 'rollgate' needs at least two clients")

    def to_dict(self) -> dict:
        """JSON-ready echo. Keys that do not apply to the selected
        methods are omitted, so the echo always reloads cleanly."""
        def section(obj, skip=()) -> dict:
            return {f.name: list(v) if isinstance(
                v := getattr(obj, f.name), tuple) else v
                for f in fields(obj) if f.name not in skip}

        data_skip = _SYNTHETIC_ONLY if self.data.source == "cifar10" \
            else ("path",)
        stage1_skip = _FEDSC_ONLY if self.stage1.method == "fedce" else ()
        method3 = self.stage3.method
        stage3_skip: tuple[str, ...] = ()
        if method3 != "fedgate":
            stage3_skip += _FEDGATE_ONLY
        if method3 != "rollgate":
            stage3_skip += _ROLLGATE_ONLY
        if method3 == "rangate":
            stage3_skip += ("lr",)
        return {
            "config_version": CONFIG_VERSION,
            "seed": self.seed,
            "k": self.k,
            "batch_size": self.batch_size,
            "bytes_per_scalar": self.bytes_per_scalar,
            "output_dir": self.output_dir,
            "data": section(self.data, data_skip),
            "model": section(self.model),
            "stage1": section(self.stage1, stage1_skip),
            "stage2": section(self.stage2),
            "stage3": section(self.stage3, stage3_skip),
            "baselines": section(self.baselines),
        }


def _build_section(cls, obj, name: str, *, tuple_fields=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {name!r} must be an object, "
                          f"got {type(obj).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - allowed)
    _require(not unknown,
             f"unknown key{'s' if len(unknown) > 1 else ''} in "
             f"{name!r}: {', '.join(unknown)}")
    kwargs = dict(obj)
    for key in tuple_fields:
        if key in kwargs:
            value = kwargs[key]
            _require(isinstance(value, (list, tuple)),
                     f"{name}.{key} must be a list")
            kwargs[key] = tuple(value)
    return cls(**kwargs)


def _reject_inapplicable(section: dict, name: str, method: str,
                         keys: tuple[str, ...], applies_to: str) -> None:
    present = sorted(k for k in keys if k in section)
    _require(not present,
             f"{name}.{', '.join(present)} only appl"
             f"{'ies' if len(present) == 1 else 'y'} to "
             f"{applies_to}, but {name}.method is {method!r}")


def config_from_dict(obj: dict) -> RunConfig:
    """Strictly validate a parsed config document."""
    if not isinstance(obj, dict):
        raise ConfigError(f"config root must be an object, "
                          f"got {type(obj).__name__}")
    version = obj.get("config_version")
    _require(version == CONFIG_VERSION,
             f"config_version must be {CONFIG_VERSION}, got {version!r}")
    known = {"config_version", "seed", "k", "batch_size",
             "bytes_per_scalar", "output_dir", "data", "model", "stage1",
             "stage2", "stage3", "baselines"}
    unknown = sorted(set(obj) - known)
    _require(not unknown,
             f"unknown top-level key{'s' if len(unknown) > 1 else ''}: "
             f"{', '.join(unknown)}")

    data_raw = obj.get("data", {})
    if isinstance(data_raw, dict) and data_raw.get("source") == "cifar10":
        _reject_inapplicable(data_raw, "data", "cifar10",
                             _SYNTHETIC_ONLY, "synthetic data")
        data_raw = dict(data_raw,
                        num_classes=CIFAR10_CLASSES, dim=CIFAR10_DIM)
    stage1_raw = obj.get("stage1", {})
    if isinstance(stage1_raw, dict) and \
            stage1_raw.get("method", "fedsc") == "fedce":
        _reject_inapplicable(stage1_raw, "stage1", "fedce",
                             _FEDSC_ONLY, "the 'fedsc' method")
    stage3_raw = obj.get("stage3", {})
    if isinstance(stage3_raw, dict):
        method3 = stage3_raw.get("method", "fedgate")
        if method3 != "fedgate":
            _reject_inapplicable(stage3_raw, "stage3", method3,
                                 _FEDGATE_ONLY, "the 'fedgate' method")
        if method3 != "rollgate":
            _reject_inapplicable(stage3_raw, "stage3", method3,
                                 _ROLLGATE_ONLY, "the 'rollgate' method")
        if method3 == "rangate":
            extra = sorted(set(stage3_raw) - {"method"})
            _require(not extra,
                     f"stage3.{', '.join(extra)} do not apply to the "
                     f"'rangate' method")
        if method3 == "rollgate":
            extra = sorted(set(stage3_raw)
                           - {"method", "lr", *_ROLLGATE_ONLY})
            _require(not extra,
                     f"stage3.{', '.join(extra)} do not apply to the "
                     f"'rollgate' method")

    output_dir = obj.get("output_dir")
    _require(output_dir is None or isinstance(output_dir, str),
             f"output_dir must be a string or null, got {output_dir!r}")
    scalars = {}
    for key in ("seed", "k", "batch_size", "bytes_per_scalar"):
        if key in obj:
            scalars[key] = obj[key]
    return RunConfig(
        output_dir=output_dir,
        data=_build_section(DataConfig, data_raw, "data"),
        model=_build_section(
            ModelConfig, obj.get("model", {}), "model",
            tuple_fields=("fe_widths", "fe_activations", "expert_widths",
                          "expert_activations")),
        stage1=_build_section(Stage1Config, stage1_raw, "stage1"),
        stage2=_build_section(Stage2Config, obj.get("stage2", {}),
                              "stage2"),
        stage3=_build_section(Stage3Config, stage3_raw, "stage3"),
        baselines=_build_section(BaselineConfig, obj.get("baselines", {}),
                                 "baselines"),
        **scalars)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") \
            from exc
    return config_from_dict(obj)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")


def config_hash(config: RunConfig) -> str:
    """Identity of the experiment: every field except where the results
    are written."""
    echo = config.to_dict()
    del echo["output_dir"]
    canonical = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
