#!/usr/bin/env python3

"""
RunConfig files: YAML documents made of named sections of typed scalars.

    model:    preset, image_size, patch_size, channels, embed_dim, num_heads,
              num_layers, ffn_hidden, num_classes, ln_eps
    sparsify: enabled, operator, keep_rate, positions | start_layer + interval,
              strategy, predictor_hidden
    adapter:  enabled, variant, bottleneck, scale, inputs
    train:    epochs, batch_size, base_lr, weight_decay, beta1, beta2, eps, seed, workers
    data:     source, path, eval_path, classes, samples, eval_samples, seed, noise
    output:   dir, checkpoint_every, wall_time

Parsing is strict: unknown sections or keys are rejected, and every value is type
checked. Omitted keys take the documented defaults; model keys default to the
values of the chosen preset.
"""

import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import yaml

import config
from config import ConfigError
from dense_adapter import ADAPTER_INPUTS, VARIANTS, AdapterConfig
from finetune_engine import TrainConfig
from input_validation import (
    ValidationError,
    validate_bool,
    validate_choice,
    validate_choice_list,
    validate_int_list,
    validate_keep_rate,
    validate_non_negative_float,
    validate_non_negative_int,
    validate_path,
    validate_positive_float,
    validate_positive_int,
    validate_unit_fraction,
)
from token_sparsify import OPERATORS, STRATEGIES, SparsifyConfig, derive_positions
from vit_backbone import PRESETS, SparsePlan, ViTConfig

logger = logging.getLogger(__name__)

DATA_SOURCES = ("synthetic", "raw-dir")

Validator = Callable[[str, Any], Any]


def _optional(validator: Validator) -> Validator:
    def check(field_name: str, value: Any) -> Any:
        return None if value is None else validator(field_name, value)

    return check


# section -> key -> (validator, default); model defaults come from the preset
SCHEMA: Dict[str, Dict[str, Tuple[Validator, Any]]] = {
    "model": {
        "preset": (partial(validate_choice, choices=tuple(PRESETS)), "vit-b16"),
        "image_size": (validate_positive_int, None),
        "patch_size": (validate_positive_int, None),
        "channels": (validate_positive_int, None),
        "embed_dim": (validate_positive_int, None),
        "num_heads": (validate_positive_int, None),
        "num_layers": (validate_positive_int, None),
        "ffn_hidden": (validate_positive_int, None),
        "num_classes": (validate_positive_int, None),
        "ln_eps": (validate_positive_float, None),
    },
    "sparsify": {
        "enabled": (validate_bool, True),
        "operator": (partial(validate_choice, choices=OPERATORS), "evit"),
        "keep_rate": (validate_keep_rate, 0.7),
        "positions": (partial(validate_int_list, minimum=1), None),
        "start_layer": (_optional(validate_positive_int), None),
        "interval": (_optional(validate_positive_int), None),
        "strategy": (partial(validate_choice, choices=STRATEGIES), "merge"),
        "predictor_hidden": (_optional(validate_positive_int), None),
    },
    "adapter": {
        "enabled": (validate_bool, True),
        "variant": (partial(validate_choice, choices=VARIANTS), "inner"),
        "bottleneck": (validate_positive_int, 32),
        "scale": (validate_non_negative_float, 1.0),
        "inputs": (partial(validate_choice_list, choices=ADAPTER_INPUTS), list(ADAPTER_INPUTS)),
    },
    "train": {
        "epochs": (validate_positive_int, 30),
        "batch_size": (validate_positive_int, 32),
        "base_lr": (validate_positive_float, 1e-3),
        "weight_decay": (validate_non_negative_float, 0.01),
        "beta1": (validate_unit_fraction, 0.9),
        "beta2": (validate_unit_fraction, 0.999),
        "eps": (validate_positive_float, 1e-8),
        "seed": (validate_non_negative_int, 0),
        "workers": (validate_positive_int, None),
    },
    "data": {
        "source": (partial(validate_choice, choices=DATA_SOURCES), "synthetic"),
        "path": (_optional(validate_path), None),
        "eval_path": (_optional(validate_path), None),
        "classes": (validate_positive_int, 4),
        "samples": (validate_positive_int, 400),
        "eval_samples": (validate_non_negative_int, 100),
        "seed": (validate_non_negative_int, 7),
        "noise": (validate_non_negative_float, 0.1),
    },
    "output": {
        "dir": (validate_path, "runs/default"),
        "checkpoint_every": (validate_non_negative_int, 0),
        "wall_time": (validate_bool, True),
    },
}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    eval_path: Optional[str] = None
    classes: int = 4
    samples: int = 400
    eval_samples: int = 100
    seed: int = 7
    noise: float = 0.1


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    checkpoint_every: int = 0
    wall_time: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig
    plan: SparsePlan
    train: TrainConfig
    data: DataConfig
    output: OutputConfig
    values: Dict[str, Dict[str, Any]] = field(default_factory=dict, compare=False)

    def to_header(self) -> str:
        """Every effective value as `section.key=value`, in schema order."""
        lines = []
        for section, keys in SCHEMA.items():
            for key in keys:
                lines.append(f"{section}.{key}={_render(self.values[section][key])}")
        return "\n".join(lines)


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _section_values(section: str, raw: Any) -> Dict[str, Any]:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ValidationError(f"{section}: expected a mapping of keys, got {raw!r}")
    schema = SCHEMA[section]
    for key in raw:
        if key not in schema:
            raise ValidationError(f"{section}.{key}: unknown key")
    values = {}
    for key, (validator, default) in schema.items():
        values[key] = validator(f"{section}.{key}", raw[key]) if key in raw else default
    return values


def _model_config(values: Dict[str, Any]) -> ViTConfig:
    preset = asdict(PRESETS[values["preset"]])
    for key in preset:
        if values.get(key) is None:
            values[key] = preset[key]
    model = ViTConfig(**{key: values[key] for key in preset})
    try:
        model.validate()
    except ConfigError as e:
        raise ValidationError(f"model: {e}")
    return model


def _sparsify_config(values: Dict[str, Any], num_layers: int, raw: Mapping) -> Optional[SparsifyConfig]:
    explicit = "positions" in raw
    derived = values["start_layer"] is not None or values["interval"] is not None
    if explicit and derived:
        raise ValidationError("sparsify.positions: give either positions or start_layer/interval, not both")
    if derived:
        start = values["start_layer"] if values["start_layer"] is not None else 4
        interval = values["interval"] if values["interval"] is not None else 3
        values["positions"] = list(derive_positions(start, interval, num_layers))
    elif values["positions"] is None:
        values["positions"] = [p for p in (4, 7, 10) if p <= num_layers]

    if not values["enabled"]:
        return None
    sparsify = SparsifyConfig(
        operator=values["operator"],
        keep_rate=values["keep_rate"],
        positions=tuple(values["positions"]),
        strategy=values["strategy"],
        predictor_hidden=values["predictor_hidden"],
    )
    try:
        sparsify.validate(num_layers)
    except ConfigError as e:
        raise ValidationError(f"sparsify: {e}")
    return sparsify


def _adapter_config(values: Dict[str, Any]) -> Optional[AdapterConfig]:
    if not values["enabled"]:
        return None
    adapter = AdapterConfig(
        variant=values["variant"],
        bottleneck=values["bottleneck"],
        scale=values["scale"],
        inputs=tuple(values["inputs"]),
    )
    try:
        adapter.validate()
    except ConfigError as e:
        raise ValidationError(f"adapter: {e}")
    return adapter


def parse_run_config(document: Any) -> RunConfig:
    """
    Build a RunConfig from a parsed YAML document.

    Raises:
        ValidationError: Naming the offending `section.key`
    """
    if document is None:
        document = {}
    if not isinstance(document, Mapping):
        raise ValidationError(f"config: expected a mapping of sections, got {type(document).__name__}")
    for section in document:
        if section not in SCHEMA:
            raise ValidationError(f"{section}: unknown section")

    values = {section: _section_values(section, document.get(section)) for section in SCHEMA}
    model = _model_config(values["model"])
    raw_sparsify = document.get("sparsify") or {}
    plan = SparsePlan(
        sparsify=_sparsify_config(values["sparsify"], model.num_layers, raw_sparsify),
        adapter=_adapter_config(values["adapter"]),
    )

    train_values = values["train"]
    if train_values["workers"] is None:
        train_values["workers"] = config.WORKERS
    train = TrainConfig(plan=plan, **train_values)

    data = DataConfig(**values["data"])
    if data.source == "raw-dir" and data.path is None:
        raise ValidationError("data.path: required when data.source is raw-dir")
    if data.source == "synthetic" and data.classes < 2:
        raise ValidationError(f"data.classes: synthetic data needs at least 2 classes, got {data.classes}")
    if data.source == "synthetic" and data.classes > model.num_classes:
        raise ValidationError(
            f"data.classes: {data.classes} classes do not fit a {model.num_classes}-way head"
        )

    return RunConfig(
        model=model,
        plan=plan,
        train=train,
        data=data,
        output=OutputConfig(**values["output"]),
        values=values,
    )


def load_run_config(path: str) -> RunConfig:
    """
    Read and validate a RunConfig file.

    Raises:
        ValidationError: If the file is unreadable, not YAML, or fails validation
    """
    try:
        with open(path) as f:
            document = yaml.safe_load(f)
    except OSError as e:
        raise ValidationError(f"config: cannot read {path}: {e}")
    except yaml.YAMLError as e:
        raise ValidationError(f"config: {path} is not valid YAML: {e}")
    run_config = parse_run_config(document)
    logger.info(f"Loaded run config from {path}")
    return run_config
