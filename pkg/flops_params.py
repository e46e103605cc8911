#!/usr/bin/env python3

"""
Analytic FLOPs and parameter accounting.

Counts are closed-form functions of the architecture and the sparsification
plan; nothing is executed. Conventions:

- One multiply-accumulate counts as FLOPS_PER_MAC operations (1, the convention
  of common FLOP-counting tools; the published 17.58 GFLOPs of ViT-B/16 is only
  reproducible under it).
- LayerNorm costs LAYERNORM_FLOPS_PER_ELEMENT per element. Softmax, GELU, ReLU,
  bias and residual additions are not counted.
- Attention counts the Q/K/V and output projections plus QK^T and AV.
- A fused-token weighted mean costs (N - 1 - K) * C MACs per event, and the same
  again for every cached adapter feature replayed through that event.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from dense_adapter import SKIP_OFFSETS, AdapterConfig, layer_inputs
from token_sparsify import SparsifyConfig, keep_count, sparsified_count
from vit_backbone import SparsePlan, ViTConfig, parameter_shapes

logger = logging.getLogger(__name__)

FLOPS_PER_MAC = 1
LAYERNORM_FLOPS_PER_ELEMENT = 5
SOFTMAX_FLOPS_PER_ELEMENT = 0
GELU_FLOPS_PER_ELEMENT = 0


@dataclass(frozen=True)
class LayerCost:
    layer: int
    token_count_in: int
    token_count_out: int
    mha_flops: int
    ffn_flops: int
    adapter_flops: int
    sparsify_flops: int

    @property
    def total_flops(self) -> int:
        return self.mha_flops + self.ffn_flops + self.adapter_flops + self.sparsify_flops


@dataclass(frozen=True)
class CostReport:
    layers: Tuple[LayerCost, ...]
    embed_flops: int
    head_flops: int
    total_params: int
    trainable_params: int

    @property
    def total_flops(self) -> int:
        return self.embed_flops + self.head_flops + sum(layer.total_flops for layer in self.layers)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_table(self) -> str:
        """Line-oriented text table, one row per layer plus totals."""
        header = (
            f"{'layer':>5} {'tok_in':>7} {'tok_out':>7} {'mha_flops':>15} {'ffn_flops':>15} "
            f"{'adapter_flops':>15} {'sparsify_flops':>15}"
        )
        lines = [header]
        for lc in self.layers:
            lines.append(
                f"{lc.layer:>5} {lc.token_count_in:>7} {lc.token_count_out:>7} {lc.mha_flops:>15,} "
                f"{lc.ffn_flops:>15,} {lc.adapter_flops:>15,} {lc.sparsify_flops:>15,}"
            )
        lines.append(f"embed_flops     {self.embed_flops:,}")
        lines.append(f"head_flops      {self.head_flops:,}")
        lines.append(f"total_flops     {self.total_flops:,}")
        lines.append(f"GFLOPs          {self.gflops:.2f}")
        lines.append(f"params          {self.total_params:,} ({self.total_params / 1e6:.2f} M)")
        lines.append(f"trainable       {self.trainable_params:,} ({self.trainable_params / 1e6:.2f} M)")
        return "\n".join(lines)

    def to_keyvalue(self) -> str:
        """Structured key=value lines with stable field names for machine diffing."""
        lines = [
            f"gflops={self.gflops:.4f}",
            f"total_flops={self.total_flops}",
            f"embed_flops={self.embed_flops}",
            f"head_flops={self.head_flops}",
            f"total_params={self.total_params}",
            f"trainable_params={self.trainable_params}",
        ]
        for lc in self.layers:
            prefix = f"layer.{lc.layer}"
            lines.extend(
                [
                    f"{prefix}.token_count_in={lc.token_count_in}",
                    f"{prefix}.token_count_out={lc.token_count_out}",
                    f"{prefix}.mha_flops={lc.mha_flops}",
                    f"{prefix}.ffn_flops={lc.ffn_flops}",
                    f"{prefix}.adapter_flops={lc.adapter_flops}",
                    f"{prefix}.sparsify_flops={lc.sparsify_flops}",
                ]
            )
        return "\n".join(lines)


def layernorm_flops(tokens: int, channels: int) -> int:
    return LAYERNORM_FLOPS_PER_ELEMENT * tokens * channels


def mha_flops_breakdown(tokens: int, channels: int) -> Tuple[int, int]:
    """(projection, attention-matrix) FLOPs: 4 N C^2 and 2 N^2 C MACs."""
    projection = 4 * tokens * channels * channels * FLOPS_PER_MAC
    attention = 2 * tokens * tokens * channels * FLOPS_PER_MAC
    return projection, attention


def mha_flops(tokens: int, config: ViTConfig) -> int:
    projection, attention = mha_flops_breakdown(tokens, config.embed_dim)
    softmax = SOFTMAX_FLOPS_PER_ELEMENT * config.num_heads * tokens * tokens
    return layernorm_flops(tokens, config.embed_dim) + projection + attention + softmax


def ffn_flops(tokens: int, config: ViTConfig) -> int:
    c, f = config.embed_dim, config.ffn_hidden
    matmuls = 2 * tokens * c * f * FLOPS_PER_MAC
    return layernorm_flops(tokens, c) + matmuls + GELU_FLOPS_PER_ELEMENT * tokens * f


def _discarded(tokens_in: int, sparsify: SparsifyConfig) -> int:
    """Tokens folded away by one event (fused or merged)."""
    if sparsify.operator == "tome":
        return tokens_in - sparsified_count(tokens_in, sparsify)
    k = keep_count(tokens_in, sparsify.keep_rate)
    if sparsify.strategy != "merge":
        return 0
    return tokens_in - 1 - k


def replay_flops(tokens_in: int, sparsify: SparsifyConfig, channels: int) -> int:
    """Merge arithmetic of one event applied to a C-wide feature tensor."""
    return _discarded(tokens_in, sparsify) * channels * FLOPS_PER_MAC


def sparsify_flops(tokens_in: int, sparsify: SparsifyConfig, channels: int) -> int:
    """Scoring plus merge arithmetic of one event on the main token stream."""
    body = tokens_in - 1
    flops = replay_flops(tokens_in, sparsify, channels)
    if sparsify.operator == "dynamicvit":
        hidden = sparsify.predictor_width(channels)
        flops += body * (channels * hidden + hidden) * FLOPS_PER_MAC
    elif sparsify.operator == "tome":
        size_a, size_b = (body + 1) // 2, body // 2
        flops += size_a * size_b * channels * FLOPS_PER_MAC
    return flops


def adapter_matmul_flops(adapter: AdapterConfig, layer: int, tokens: int, channels: int) -> int:
    d = adapter.bottleneck
    paths = len(layer_inputs(adapter, layer))
    per_matmul = tokens * channels * d * FLOPS_PER_MAC
    if adapter.variant == "inner":
        return (paths + 1) * per_matmul
    if adapter.variant == "input":
        return 2 * per_matmul
    return 2 * paths * per_matmul


def token_schedule(config: ViTConfig, plan: SparsePlan) -> List[int]:
    """Token count (CLS included) after each layer."""
    counts = []
    tokens = config.num_tokens
    for layer in range(1, config.num_layers + 1):
        if plan.sparsifies_at(layer):
            tokens = sparsified_count(tokens, plan.sparsify)
        counts.append(tokens)
    return counts


def count_params(config: ViTConfig, plan: SparsePlan, include_head: bool = False) -> Tuple[int, int]:
    """
    Exact (total, trainable) parameter counts from shapes.

    Trainable follows the freezing rule (names containing "adapter" or "head");
    the classification head is left out of the trainable figure unless
    include_head is set.
    """
    total = 0
    trainable = 0
    for name, shape in parameter_shapes(config, plan).items():
        size = 1
        for dim in shape:
            size *= dim
        total += size
        if "adapter" in name or (include_head and "head" in name):
            trainable += size
    return total, trainable


def count_flops(config: ViTConfig, plan: SparsePlan) -> CostReport:
    """Layer-by-layer cost of one forward pass under `plan`."""
    config.validate()
    plan.validate(config)
    c = config.embed_dim
    schedule = token_schedule(config, plan)
    inputs = [config.num_tokens] + schedule[:-1]
    events: Dict[int, int] = {
        layer: inputs[layer - 1]
        for layer in range(1, config.num_layers + 1)
        if plan.sparsifies_at(layer)
    }

    layers = []
    for layer in range(1, config.num_layers + 1):
        n_in, n_out = inputs[layer - 1], schedule[layer - 1]
        event_flops = sparsify_flops(n_in, plan.sparsify, c) if layer in events else 0
        adapter = 0
        if plan.adapter is not None:
            adapter = adapter_matmul_flops(plan.adapter, layer, n_out, c)
            adapter += _skip_replay_flops(plan, layer, events, c)
        layers.append(
            LayerCost(
                layer=layer,
                token_count_in=n_in,
                token_count_out=n_out,
                mha_flops=mha_flops(n_in, config),
                ffn_flops=ffn_flops(n_out, config),
                adapter_flops=adapter,
                sparsify_flops=event_flops,
            )
        )

    embed = config.num_patches * config.patch_dim * c * FLOPS_PER_MAC
    head = layernorm_flops(1, c) + c * config.num_classes * FLOPS_PER_MAC
    total_params, trainable_params = count_params(config, plan)
    report = CostReport(
        layers=tuple(layers),
        embed_flops=embed,
        head_flops=head,
        total_params=total_params,
        trainable_params=trainable_params,
    )
    logger.debug(f"Counted {report.total_flops:,} FLOPs over {config.num_layers} layers")
    return report


def _skip_replay_flops(plan: SparsePlan, layer: int, events: Dict[int, int], channels: int) -> int:
    """Cost of re-aligning the cached x_DA(N-1) / x_DA(N-3) features at `layer`."""
    flops = 0
    for name in layer_inputs(plan.adapter, layer):
        if name == "current":
            continue
        source = layer - SKIP_OFFSETS[name]
        for event_layer, n_in in events.items():
            if source < event_layer <= layer:
                flops += replay_flops(n_in, plan.sparsify, channels)
    return flops


def describe(config: ViTConfig, plan: Optional[SparsePlan]) -> str:
    """One-line summary used by the ablation grid."""
    plan = plan if plan is not None else SparsePlan()
    report = count_flops(config, plan)
    variant = plan.adapter.variant if plan.adapter else "none"
    d = plan.adapter.bottleneck if plan.adapter else 0
    r = plan.sparsify.keep_rate if plan.sparsify else 1.0
    return (
        f"variant={variant} d={d} r={r:g} gflops={report.gflops:.2f} "
        f"params={report.total_params / 1e6:.2f}M trainable={report.trainable_params / 1e6:.2f}M"
    )
