"""Run configuration: dataclass defaults, YAML experiment files, env and flags.

Precedence (lowest first): dataclass defaults, the YAML file, environment
variables (``FC_DATA_ROOT``, ``FC_OUTPUT_DIR``), CLI overrides. The command
line also reads ``FC_LOG_LEVEL`` and ``FC_METRICS_PORT``; a ``.env`` file in
the working directory is loaded first.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("rotated-mnist", "synthetic", "heterogeneous-synthetic")
METHODS = ("agg", "fc-set", "fc-cov")
CRITIC_VARIANT = {"agg": None, "fc-set": "set", "fc-cov": "cov"}

# Learning-rate schedule of the large-scale protocol: 30K steps, decayed at
# 5K/12K/15K/20K by 5/10/50/100.
VD_MILESTONES = (5000, 12000, 15000, 20000)
VD_FACTORS = (5.0, 10.0, 50.0, 100.0)
VD_TOTAL_STEPS = 30000
PRESETS = ("rotated-mnist", "vd")


@dataclass
class ExperimentConfig:
    kind: str = "synthetic"
    method: str = "fc-set"
    data_root: Optional[str] = None
    output_dir: str = "runs"
    seeds: Tuple[int, ...] = (0,)
    target_domain: Optional[str] = None
    data_seed: int = 0
    per_class: int = 100
    angles: Tuple[float, ...] = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0)
    n_domains: int = 6
    n_classes: int = 10
    image_size: int = 16
    synth_shift: float = 15.0
    synth_noise: float = 0.1
    source_classes: Tuple[int, ...] = (0, 1, 2, 3, 4)
    target_classes: Tuple[int, ...] = (5, 6, 7, 8, 9)
    target_test_fraction: float = 0.5

    def validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"unknown experiment kind {self.kind!r}", "experiment.kind"
            )
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}", "experiment.method")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "experiment.seeds")
        if self.kind == "rotated-mnist" and not self.data_root:
            raise ConfigError(
                "rotated-mnist needs a data root (flag, file or FC_DATA_ROOT)",
                "experiment.data_root",
            )
        if set(self.source_classes) & set(self.target_classes):
            raise ConfigError(
                "source and target classes overlap", "experiment.target_classes"
            )
        if not 0.0 < self.target_test_fraction <= 1.0:
            raise ConfigError(
                "target_test_fraction must lie in (0, 1]",
                "experiment.target_test_fraction",
            )

    @property
    def heterogeneous(self) -> bool:
        return self.kind == "heterogeneous-synthetic"

    @property
    def critic_variant(self) -> Optional[str]:
        return CRITIC_VARIANT[self.method]


@dataclass
class ModelConfig:
    extractor: str = "mlp"
    image_shape: Tuple[int, int] = (16, 16)
    feature_dim: int = 64
    conv_channels: Tuple[int, ...] = (8, 16)
    kernel_size: int = 5
    stride: int = 2
    mlp_hidden: Tuple[int, ...] = (128,)
    activation: str = "relu"
    critic_hidden: Tuple[int, ...] = (64, 32)
    critic_activation: str = "relu"
    normalise_gram: bool = False

    def validate(self) -> None:
        if self.extractor not in ("conv", "mlp"):
            raise ConfigError(
                f"unknown extractor {self.extractor!r}", "model.extractor"
            )
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive", "model.feature_dim")
        for key in ("activation", "critic_activation"):
            if getattr(self, key) not in ("relu", "tanh"):
                raise ConfigError(
                    f"unsupported activation {getattr(self, key)!r}", f"model.{key}"
                )
        if len(self.image_shape) != 2:
            raise ConfigError("image_shape needs two entries", "model.image_shape")


@dataclass
class TrainerConfig:
    lr: float = 0.001
    alpha: Optional[float] = None
    critic_lr: Optional[float] = None
    inner_steps: int = 1
    max_steps: int = 5000
    n_val: int = 1
    single_meta_train: bool = False
    batch_size_trn: int = 64
    batch_size_val: int = 32
    weight_decay: float = 5e-5
    optimizer: str = "amsgrad"
    momentum: float = 0.9
    lr_milestones: Tuple[int, ...] = ()
    lr_factors: Tuple[float, ...] = ()
    lr_reference_steps: Optional[int] = None
    finetune_steps: int = 0
    aux_grad_point: str = "theta"
    log_every: int = 100

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr (eta) must be positive", "trainer.lr")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be positive", "trainer.alpha")
        if self.critic_lr is not None and self.critic_lr < 0:
            raise ConfigError("critic_lr must be non-negative", "trainer.critic_lr")
        if self.inner_steps < 1:
            raise ConfigError(
                "inner_steps (T) must be at least 1", "trainer.inner_steps"
            )
        if self.max_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step counts must be non-negative", "trainer.max_steps")
        if self.optimizer not in ("amsgrad", "momentum"):
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}", "trainer.optimizer"
            )
        if len(self.lr_milestones) != len(self.lr_factors):
            raise ConfigError(
                "lr_milestones and lr_factors differ in length", "trainer.lr_factors"
            )
        if self.aux_grad_point not in ("theta", "theta_old"):
            raise ConfigError(
                f"unknown aux_grad_point {self.aux_grad_point!r}",
                "trainer.aux_grad_point",
            )
        if self.batch_size_trn < 1 or self.batch_size_val < 1:
            raise ConfigError("batch sizes must be positive", "trainer.batch_size_trn")


@dataclass
class EvalConfig:
    knn_k: int = 5
    kshot: Tuple[int, ...] = (3, 5, 8, 10)
    kshot_trials: int = 10
    fractions: Tuple[float, ...] = (0.1, 0.25, 0.5, 1.0)
    probe_epochs: int = 100
    probe_lr: float = 0.1
    probe_reg: float = 1e-4
    probe_batch: int = 64
    pca: bool = False
    extract_batch: int = 256

    def validate(self) -> None:
        if self.knn_k < 1:
            raise ConfigError("knn_k must be at least 1", "eval.knn_k")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]", "eval.fractions")


@dataclass
class SweepConfig:
    methods: Tuple[str, ...] = ("agg", "fc-set")
    targets: Tuple[str, ...] = ()
    workers: int = 1

    def validate(self) -> None:
        for method in self.methods:
            if method not in METHODS:
                raise ConfigError(f"unknown method {method!r}", "sweep.methods")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1", "sweep.workers")


@dataclass
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "RunConfig":
        for section in _SECTIONS:
            getattr(self, section).validate()
        if self.experiment.method == "fc-cov" and self.model.feature_dim > 128:
            raise ConfigError(
                "covariance critic needs feature_dim <= 128", "model.feature_dim"
            )
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {
            section: {
                key: list(value) if isinstance(value, tuple) else value
                for key, value in dataclasses.asdict(getattr(self, section)).items()
            }
            for section in _SECTIONS
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        config = cls()
        apply_mapping(config, data)
        return config.validate()

    def with_values(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with per-section key updates, e.g. ``experiment={"method": "agg"}``."""
        config = RunConfig.from_dict(self.to_dict())
        apply_mapping(config, sections)
        return config.validate()


_SECTIONS = ("experiment", "model", "trainer", "eval", "sweep")


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
        return value
    if isinstance(default, tuple):
        items = list(value) if isinstance(value, (list, tuple)) else [value]
        if default:
            return tuple(_coerce(item, default[0], key) for item in items)
        return tuple(items)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        if int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    # Optional fields (default None) take numbers, strings or lists as given.
    if isinstance(value, list):
        return tuple(value)
    return value


def apply_mapping(config: RunConfig, data: Dict[str, Any]) -> None:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of sections")
    for section, values in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}", section)
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping", section)
        target = getattr(config, section)
        fresh = type(target)()
        defaults = {f.name: getattr(fresh, f.name) for f in dataclasses.fields(target)}
        for key, value in values.items():
            dotted = f"{section}.{key}"
            if key not in defaults:
                raise ConfigError(f"unknown key {dotted!r}", dotted)
            if value is None:
                setattr(target, key, None)
                continue
            setattr(target, key, _coerce(value, defaults[key], dotted))


def _key_lines(text: str) -> Dict[str, int]:
    """Map ``section.key`` to the 1-based line where the key is written."""
    lines: Dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for section_key, section_value in root.value:
        lines[section_key.value] = section_key.start_mark.line + 1
        if isinstance(section_value, yaml.MappingNode):
            for key, _ in section_value.value:
                lines[f"{section_key.value}.{key.value}"] = key.start_mark.line + 1
    return lines


def parse_override(text: str) -> Tuple[str, str, Any]:
    """Split ``section.key=value``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    dotted, raw = text.split("=", 1)
    if "." not in dotted:
        raise ConfigError(f"override key {dotted!r} needs a section", dotted)
    section, key = dotted.strip().split(".", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {raw!r}: {e}", dotted) from e
    return section, key, value


def load_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    flags: Optional[Dict[str, Dict[str, Any]]] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    """Resolve a RunConfig from preset, file, environment, overrides and flags."""
    load_dotenv()
    config = preset_config(preset)
    key_lines: Dict[str, int] = {}

    if path:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"cannot parse {path}: {e}", line=line) from e
        key_lines = _key_lines(text)
        try:
            apply_mapping(config, data)
        except ConfigError as e:
            if e.key and e.line is None and e.key in key_lines:
                raise ConfigError(e.detail, e.key, key_lines[e.key]) from e
            raise
        logger.info(f"Loaded configuration from {path}")

    env_data_root = os.getenv("FC_DATA_ROOT")
    if env_data_root:
        config.experiment.data_root = env_data_root
    env_output = os.getenv("FC_OUTPUT_DIR")
    if env_output:
        config.experiment.output_dir = env_output

    updates: Dict[str, Dict[str, Any]] = {}
    for text in overrides:
        section, key, value = parse_override(text)
        updates.setdefault(section, {})[key] = value
    for section, values in (flags or {}).items():
        updates.setdefault(section, {}).update(
            {k: v for k, v in values.items() if v is not None}
        )
    apply_mapping(config, updates)

    try:
        return config.validate()
    except ConfigError as e:
        if e.key in key_lines and e.line is None:
            raise ConfigError(e.detail, e.key, key_lines[e.key]) from e
        raise


def rotated_mnist_defaults(data_root: Optional[str] = None) -> RunConfig:
    """Rotated MNIST protocol: 100 images per class, six 15-degree domains,
    AMSGrad lr 1e-3 / wd 5e-5 for 5000 iterations, one meta-train and one
    meta-test domain per iteration, conv-conv-FC extractor."""
    config = RunConfig()
    config.experiment.kind = "rotated-mnist"
    config.experiment.data_root = data_root
    config.experiment.seeds = tuple(range(10))
    config.experiment.target_test_fraction = 0.5
    config.model.extractor = "conv"
    config.model.image_shape = (28, 28)
    config.model.feature_dim = 64
    config.trainer.lr = 0.001
    config.trainer.weight_decay = 5e-5
    config.trainer.max_steps = 5000
    config.trainer.n_val = 1
    config.trainer.single_meta_train = True
    config.sweep.methods = ("agg", "fc-set", "fc-cov")
    return config


def vd_style_defaults(max_steps: int = VD_TOTAL_STEPS) -> TrainerConfig:
    """Large-scale heterogeneous protocol settings, schedule scaled to max_steps."""
    return TrainerConfig(
        lr=0.0005,
        weight_decay=1e-4,
        batch_size_trn=64,
        batch_size_val=32,
        n_val=2,
        max_steps=max_steps,
        lr_milestones=VD_MILESTONES,
        lr_factors=VD_FACTORS,
        lr_reference_steps=VD_TOTAL_STEPS,
        finetune_steps=max_steps // 3,
    )


def preset_config(name: Optional[str] = None) -> RunConfig:
    """Starting point before the YAML file and flags are applied."""
    if name is None:
        return RunConfig()
    if name == "rotated-mnist":
        return rotated_mnist_defaults()
    if name == "vd":
        return RunConfig(trainer=vd_style_defaults())
    raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}", "preset")
