#!/usr/bin/env python3

"""
Dense Adapters with cross-layer connections.

The adapter at layer N sees the current tokens x_N together with the adapter
outputs of layers N-1 and N-3. Those cached outputs were produced on an earlier,
longer token set, so before use they are replayed through every sparsification
record that happened after their source layer.

Three fusion variants are provided:
    inner:  x_down = x_N Wd1 + x_DA(N-1) Wd2 + x_DA(N-3) Wd3, out = s * relu(x_down) Wup
    input:  x_fusion = x_N + x_DA(N-1) + x_DA(N-3), out = s * relu(x_fusion Wd) Wup
    output: out = s * sum_i relu(x_i Wd_i) Wup_i
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from config import ConfigError
from tensor_autograd import Tensor, add, linear, relu, scale
from token_sparsify import AlignmentError, SparsifyRecord, apply_record

logger = logging.getLogger(__name__)

VARIANTS = ("inner", "input", "output")
ADAPTER_INPUTS = ("current", "prev", "prev3")

# Skip offsets of the dense connections: x_DA(N-1) and x_DA(N-3)
SKIP_OFFSETS = {"prev": 1, "prev3": 3}


class AdapterStateError(Exception):
    """Raised when the adapter cache lacks a layer the recurrence needs"""

    pass


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "inner"
    bottleneck: int = 32
    scale: float = 1.0
    inputs: Tuple[str, ...] = ADAPTER_INPUTS

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown adapter variant {self.variant!r}, expected one of {VARIANTS}")
        if self.bottleneck < 1:
            raise ConfigError(f"Adapter bottleneck must be positive, got {self.bottleneck}")
        unknown = [name for name in self.inputs if name not in ADAPTER_INPUTS]
        if unknown:
            raise ConfigError(f"Unknown adapter inputs {unknown}, expected a subset of {ADAPTER_INPUTS}")
        if "current" not in self.inputs:
            raise ConfigError("Adapter inputs must include 'current'")


def layer_inputs(config: AdapterConfig, layer: int) -> Tuple[str, ...]:
    """Inputs that exist at a 1-based layer: skips need their source layer to exist."""
    return tuple(
        name
        for name in ADAPTER_INPUTS
        if name in config.inputs and layer - SKIP_OFFSETS.get(name, 0) >= 1
    )


def adapter_prefix(layer: int) -> str:
    return f"layers.{layer}.adapter"


def adapter_parameter_shapes(
    config: AdapterConfig, layer: int, embed_dim: int
) -> Dict[str, Tuple[int, ...]]:
    """Named parameter shapes of the adapter at one layer."""
    prefix = adapter_prefix(layer)
    d = config.bottleneck
    shapes: Dict[str, Tuple[int, ...]] = {}
    inputs = layer_inputs(config, layer)
    down_inputs = ("current",) if config.variant == "input" else inputs
    for name in down_inputs:
        shapes[f"{prefix}.down_{name}.weight"] = (embed_dim, d)
        shapes[f"{prefix}.down_{name}.bias"] = (d,)
    up_inputs = inputs if config.variant == "output" else ("current",)
    for name in up_inputs:
        suffix = "up" if config.variant != "output" else f"up_{name}"
        shapes[f"{prefix}.{suffix}.weight"] = (d, embed_dim)
        shapes[f"{prefix}.{suffix}.bias"] = (embed_dim,)
    return shapes


@dataclass
class DenseAdapterWeights:
    """Weights of one layer's adapter, keyed by input name."""

    layer: int
    down: Dict[str, Tuple[Tensor, Tensor]]
    up: Dict[str, Tuple[Tensor, Tensor]]

    @classmethod
    def from_params(
        cls, params: Dict[str, Tensor], config: AdapterConfig, layer: int
    ) -> "DenseAdapterWeights":
        prefix = adapter_prefix(layer)
        inputs = layer_inputs(config, layer)
        down_inputs = ("current",) if config.variant == "input" else inputs
        down = {
            name: (params[f"{prefix}.down_{name}.weight"], params[f"{prefix}.down_{name}.bias"])
            for name in down_inputs
        }
        if config.variant == "output":
            up = {
                name: (params[f"{prefix}.up_{name}.weight"], params[f"{prefix}.up_{name}.bias"])
                for name in inputs
            }
        else:
            up = {"current": (params[f"{prefix}.up.weight"], params[f"{prefix}.up.bias"])}
        return cls(layer=layer, down=down, up=up)


@dataclass
class DenseAdapterState:
    """
    Per-forward-pass cache of adapter outputs and the sparsification records seen so far.

    Cache entries keep the token count that was current at their layer.
    """

    cache: Dict[int, Tensor] = field(default_factory=dict)
    records: List[SparsifyRecord] = field(default_factory=list)

    def observe(self, record: SparsifyRecord) -> None:
        if self.records and record.layer_index <= self.records[-1].layer_index:
            raise AdapterStateError(
                f"Sparsification record for layer {record.layer_index} arrived after "
                f"layer {self.records[-1].layer_index}"
            )
        self.records.append(record)

    def store(self, layer: int, output: Tensor) -> None:
        self.cache[layer] = output

    def skip_feature(self, source_layer: int, current_count: int) -> Tensor:
        """
        The cached output of source_layer re-aligned to the current token set.

        Raises:
            AdapterStateError: If source_layer was never cached
            AlignmentError: If re-alignment does not end at current_count tokens
        """
        if source_layer not in self.cache:
            raise AdapterStateError(
                f"Adapter cache has no entry for layer {source_layer} "
                f"(cached layers: {sorted(self.cache)})"
            )
        feature = self.cache[source_layer]
        for record in self.records:
            if record.layer_index > source_layer:
                feature = apply_record(feature, record)
        if feature.shape[0] != current_count:
            raise AlignmentError(
                f"Skip feature from layer {source_layer} has {feature.shape[0]} tokens "
                f"after re-alignment, current tokens: {current_count}"
            )
        return feature


def _skips(x: Tensor, state: DenseAdapterState, layer: int, config: AdapterConfig) -> Dict[str, Tensor]:
    features = {"current": x}
    for name in layer_inputs(config, layer):
        if name != "current":
            features[name] = state.skip_feature(layer - SKIP_OFFSETS[name], x.shape[0])
    return features


def dense_adapter_forward(
    x: Tensor,
    state: DenseAdapterState,
    layer: int,
    weights: DenseAdapterWeights,
    config: AdapterConfig,
) -> Tensor:
    """Inner fusion: sum of per-input down projections, one shared up projection."""
    features = _skips(x, state, layer, config)
    x_down: Optional[Tensor] = None
    for name, feature in features.items():
        w, b = weights.down[name]
        term = linear(feature, w, b)
        x_down = term if x_down is None else add(x_down, term)
    w_up, b_up = weights.up["current"]
    return scale(linear(relu(x_down), w_up, b_up), config.scale)


def variant_a_forward(
    x: Tensor,
    state: DenseAdapterState,
    layer: int,
    weights: DenseAdapterWeights,
    config: AdapterConfig,
) -> Tensor:
    """Early fusion: add the inputs, then a single bottleneck."""
    fused: Optional[Tensor] = None
    for feature in _skips(x, state, layer, config).values():
        fused = feature if fused is None else add(fused, feature)
    w_down, b_down = weights.down["current"]
    w_up, b_up = weights.up["current"]
    return scale(linear(relu(linear(fused, w_down, b_down)), w_up, b_up), config.scale)


def variant_b_forward(
    x: Tensor,
    state: DenseAdapterState,
    layer: int,
    weights: DenseAdapterWeights,
    config: AdapterConfig,
) -> Tensor:
    """Late fusion: an independent bottleneck per input, outputs summed."""
    out: Optional[Tensor] = None
    for name, feature in _skips(x, state, layer, config).items():
        w_down, b_down = weights.down[name]
        w_up, b_up = weights.up[name]
        path = linear(relu(linear(feature, w_down, b_down)), w_up, b_up)
        out = path if out is None else add(out, path)
    return scale(out, config.scale)


_FORWARDS = {
    "inner": dense_adapter_forward,
    "input": variant_a_forward,
    "output": variant_b_forward,
}


def adapter_forward(
    x: Tensor,
    state: DenseAdapterState,
    layer: int,
    weights: DenseAdapterWeights,
    config: AdapterConfig,
) -> Tensor:
    """Run the configured variant and cache its output for later layers."""
    out = _FORWARDS[config.variant](x, state, layer, weights, config)
    state.store(layer, out)
    logger.debug(f"Adapter {config.variant} at layer {layer}: {x.shape[0]} tokens")
    return out
