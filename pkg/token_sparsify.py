#!/usr/bin/env python3

"""
Token sparsification operators: EViT, DynamicViT and ToMe.

Each operator maps a token tensor [N x C] (CLS at row 0) to a shorter tensor and
emits a SparsifyRecord describing the exact selection and merge arithmetic.
Replaying a record with `apply_record` applies the same transform to any other
feature tensor with the same rows, which is how cross-layer adapter features are
kept aligned with the shrinking token set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import ConfigError
from tensor_autograd import (
    Tensor,
    concat,
    gelu,
    index_rows,
    linear,
    matmul,
    normalize_sum,
    reshape,
    softmax_rows,
    straight_through,
)

if TYPE_CHECKING:
    from vit_backbone import AttnTrace

logger = logging.getLogger(__name__)

OPERATORS = ("evit", "dynamicvit", "tome")
STRATEGIES = ("merge", "drop", "argmax")

DEFAULT_POSITIONS = (4, 7, 10)
DEFAULT_KEEP_RATE = 0.7


class AlignmentError(Exception):
    """Raised when a feature tensor does not have the rows a record expects"""

    pass


@dataclass(frozen=True)
class SparsifyConfig:
    """Which operator runs, where, and how discarded tokens are handled."""

    operator: str = "evit"
    keep_rate: float = DEFAULT_KEEP_RATE
    positions: Tuple[int, ...] = DEFAULT_POSITIONS
    strategy: str = "merge"
    predictor_hidden: Optional[int] = None

    def validate(self, num_layers: Optional[int] = None) -> None:
        if self.operator not in OPERATORS:
            raise ConfigError(f"Unknown sparsification operator {self.operator!r}, expected one of {OPERATORS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"Unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if not 0.0 < self.keep_rate <= 1.0:
            raise ConfigError(f"Keep rate must lie in (0, 1], got {self.keep_rate}")
        if list(self.positions) != sorted(set(self.positions)):
            raise ConfigError(f"Sparsification positions must be strictly increasing, got {list(self.positions)}")
        if any(p < 1 for p in self.positions):
            raise ConfigError(f"Sparsification positions are 1-based layer numbers, got {list(self.positions)}")
        if num_layers is not None and any(p > num_layers for p in self.positions):
            raise ConfigError(f"Sparsification positions {list(self.positions)} exceed the {num_layers} layers")
        if self.predictor_hidden is not None and self.predictor_hidden < 1:
            raise ConfigError(f"Predictor hidden width must be positive, got {self.predictor_hidden}")

    def predictor_width(self, embed_dim: int) -> int:
        return self.predictor_hidden if self.predictor_hidden is not None else max(1, embed_dim // 4)


def derive_positions(start_layer: int, interval: int, num_layers: int) -> Tuple[int, ...]:
    """Layers start, start+interval, ... that exist in a num_layers deep encoder."""
    if start_layer < 1 or interval < 1:
        raise ConfigError(f"start_layer and interval must be positive, got {start_layer} and {interval}")
    return tuple(range(start_layer, num_layers + 1, interval))


@dataclass(frozen=True)
class SparsifyRecord:
    """
    Outcome of one sparsification event.

    kept_indices and merge_indices index the pre-sparsification non-CLS tokens.
    Output rows are: CLS, then one row per kept index (ToMe: combined through the
    `combine` matrix), then the fused token when merge_indices is non-empty.
    """

    layer_index: int
    operator: str
    strategy: str
    input_count: int
    kept_indices: Tuple[int, ...]
    merge_indices: Tuple[int, ...] = ()
    merge_weights: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    merge_weight_tensor: Optional[Tensor] = field(default=None, compare=False, repr=False)
    combine: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    pairs: Tuple[Tuple[int, int], ...] = ()

    @property
    def has_fused(self) -> bool:
        return len(self.merge_indices) > 0

    @property
    def output_count(self) -> int:
        return len(self.kept_indices) + (1 if self.has_fused else 0) + 1


@dataclass
class PredictorWeights:
    """DynamicViT score head: s = gelu(x W1 + b1) W2 + b2 per token."""

    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], layer: int) -> "PredictorWeights":
        prefix = predictor_prefix(layer)
        return cls(
            fc1_weight=params[f"{prefix}.fc1.weight"],
            fc1_bias=params[f"{prefix}.fc1.bias"],
            fc2_weight=params[f"{prefix}.fc2.weight"],
            fc2_bias=params[f"{prefix}.fc2.bias"],
        )


def predictor_prefix(layer: int) -> str:
    return f"layers.{layer}.adapter_predictor"


def predictor_parameter_shapes(embed_dim: int, hidden: int, layer: int) -> Dict[str, Tuple[int, ...]]:
    prefix = predictor_prefix(layer)
    return {
        f"{prefix}.fc1.weight": (embed_dim, hidden),
        f"{prefix}.fc1.bias": (hidden,),
        f"{prefix}.fc2.weight": (hidden, 1),
        f"{prefix}.fc2.bias": (1,),
    }


def keep_count(n_tokens: int, r: float) -> int:
    """ceil(r * (n_tokens - 1)), rounded first so that e.g. 0.7 * 10 yields 7."""
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"Keep rate must lie in (0, 1], got {r}")
    if n_tokens < 2:
        raise ConfigError(f"Need CLS plus at least one patch token, got {n_tokens} tokens")
    return int(math.ceil(round(r * (n_tokens - 1), 9)))


def sparsified_count(n_tokens: int, config: SparsifyConfig) -> int:
    """Token count (CLS included) after one event of the configured operator."""
    body = n_tokens - 1
    k = keep_count(n_tokens, config.keep_rate)
    if config.operator == "tome":
        return 1 + max(k, body - (body + 1) // 2)
    if k >= body:
        return n_tokens
    if config.strategy == "drop":
        return k + 1
    return k + 2


def top_k_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    return np.argsort(-scores, kind="stable")


def apply_record(features: Tensor, record: SparsifyRecord) -> Tensor:
    """
    Apply the selection and merge arithmetic of `record` to a feature tensor.

    Raises:
        AlignmentError: If features does not have record.input_count rows
    """
    if features.shape[0] != record.input_count:
        raise AlignmentError(
            f"Record from layer {record.layer_index} expects {record.input_count} tokens, "
            f"features have {features.shape[0]}"
        )
    cls_row = features[0:1]
    body = features[1:]
    if record.combine is not None:
        combine = Tensor(record.combine.astype(features.dtype, copy=False))
        return concat([cls_row, matmul(combine, body)])

    parts = [cls_row, index_rows(body, record.kept_indices)]
    if record.has_fused:
        parts.append(_fuse(body, record))
    return concat(parts)


def _fuse(body: Tensor, record: SparsifyRecord) -> Tensor:
    weights = record.merge_weight_tensor
    if weights is None or weights.dtype != body.dtype:
        weights = Tensor(np.asarray(record.merge_weights, dtype=body.dtype))
    m = len(record.merge_indices)
    return matmul(reshape(weights, (1, m)), index_rows(body, record.merge_indices))


def propagate_sources(
    sources: Sequence[Tuple[int, ...]], record: SparsifyRecord
) -> List[Tuple[int, ...]]:
    """Track which original patches each non-CLS token now represents."""
    if len(sources) != record.input_count - 1:
        raise AlignmentError(
            f"Record from layer {record.layer_index} expects {record.input_count - 1} "
            f"patch tokens, got {len(sources)} source entries"
        )
    if record.combine is not None:
        out = []
        for row in record.combine:
            merged: Tuple[int, ...] = ()
            for j in np.flatnonzero(row):
                merged += sources[j]
            out.append(tuple(sorted(merged)))
        return out
    out = [sources[i] for i in record.kept_indices]
    if record.has_fused:
        fused: Tuple[int, ...] = ()
        for i in record.merge_indices:
            fused += sources[i]
        out.append(tuple(sorted(fused)))
    return out


def evit_sparsify(
    tokens: Tensor,
    trace: "AttnTrace",
    r: float,
    strategy: str = "merge",
    layer_index: int = 0,
) -> Tuple[Tensor, SparsifyRecord]:
    """
    Keep the top-K tokens by head-averaged CLS attention and handle the rest.

    With the merge strategy the inattentive tokens are fused into one background
    token weighted by their normalized attention. The weights stay connected to
    the attention graph so gradients reach the scores that produced them.
    """
    n = tokens.shape[0]
    scores = trace.avg_cls_attn
    if scores.shape[0] != n - 1:
        raise AlignmentError(f"Attention trace covers {scores.shape[0]} tokens, input has {n - 1}")

    k = keep_count(n, r)
    order = top_k_order(scores)
    top = tuple(int(i) for i in order[:k])
    rest = tuple(int(i) for i in order[k:])

    if not rest or strategy == "drop":
        record = SparsifyRecord(layer_index, "evit", strategy, n, top)
    elif strategy == "argmax":
        record = SparsifyRecord(layer_index, "evit", strategy, n, top + rest[:1])
    else:
        weights = _attention_weights(trace, rest, tokens.dtype, layer_index)
        record = SparsifyRecord(
            layer_index,
            "evit",
            strategy,
            n,
            top,
            merge_indices=rest,
            merge_weights=weights.data,
            merge_weight_tensor=weights,
        )
    logger.debug(f"EViT at layer {layer_index}: {n} -> {record.output_count} tokens")
    return apply_record(tokens, record), record


def _attention_weights(
    trace: "AttnTrace", rest: Tuple[int, ...], dtype: np.dtype, layer_index: int
) -> Tensor:
    rest_scores = trace.avg_cls_attn[list(rest)]
    if float(rest_scores.sum()) <= 0.0:
        logger.warning(
            f"All-zero attention over {len(rest)} inattentive tokens at layer {layer_index}; "
            "fusing with uniform weights"
        )
        return Tensor(np.full(len(rest), 1.0 / len(rest), dtype=dtype))
    return normalize_sum(index_rows(trace.scores, rest))


def predictor_scores(tokens: Tensor, predictor: PredictorWeights) -> Tensor:
    """Per-token keep scores for the non-CLS rows of tokens."""
    body = tokens[1:]
    hidden = gelu(linear(body, predictor.fc1_weight, predictor.fc1_bias))
    scores = linear(hidden, predictor.fc2_weight, predictor.fc2_bias)
    return reshape(scores, (body.shape[0],))


def dynamicvit_sparsify(
    tokens: Tensor,
    predictor: PredictorWeights,
    rho: float,
    strategy: str = "merge",
    layer_index: int = 0,
) -> Tuple[Tensor, SparsifyRecord]:
    """
    Keep the tokens the predictor scores highest.

    Selection is a hard top-K. Kept rows pass through a straight-through gate so
    the predictor receives gradient through the kept scores; with the merge
    strategy the discarded tokens are fused with softmax weights of their scores.
    The drop strategy prunes them outright.
    """
    n = tokens.shape[0]
    c = tokens.shape[1]
    if predictor.fc1_weight.shape[0] != c:
        raise ConfigError(
            f"Predictor expects {predictor.fc1_weight.shape[0]} channels, tokens have {c}"
        )

    scores = predictor_scores(tokens, predictor)
    k = keep_count(n, rho)
    order = top_k_order(scores.data)
    top = tuple(int(i) for i in order[:k])
    rest = tuple(int(i) for i in order[k:])

    body = tokens[1:]
    kept_ids = top + rest[:1] if (rest and strategy == "argmax") else top
    parts = [tokens[0:1], straight_through(index_rows(body, kept_ids), index_rows(scores, kept_ids))]

    if rest and strategy == "merge":
        weights = softmax_rows(index_rows(scores, rest))
        record = SparsifyRecord(
            layer_index,
            "dynamicvit",
            strategy,
            n,
            kept_ids,
            merge_indices=rest,
            merge_weights=weights.data,
            merge_weight_tensor=weights,
        )
        parts.append(_fuse(body, record))
    else:
        record = SparsifyRecord(layer_index, "dynamicvit", strategy, n, kept_ids)

    logger.debug(f"DynamicViT at layer {layer_index}: {n} -> {record.output_count} tokens")
    return concat(parts), record


def tome_merge(
    tokens: Tensor, target_count: int, layer_index: int = 0
) -> Tuple[Tensor, SparsifyRecord]:
    """
    Bipartite soft matching over the non-CLS tokens.

    Tokens at even positions form set A, odd positions set B. Every A token
    proposes its most cosine-similar B token; the m = current - target most
    similar proposals are merged by averaging each B token with all A tokens
    that chose it. Output order: CLS, unmerged A tokens, then B tokens.
    """
    n = tokens.shape[0]
    body_count = n - 1
    if target_count >= body_count:
        raise ConfigError(f"ToMe target {target_count} must be below the current {body_count} patch tokens")
    if target_count < 1:
        raise ConfigError(f"ToMe target must keep at least one patch token, got {target_count}")

    a_idx = np.arange(0, body_count, 2)
    b_idx = np.arange(1, body_count, 2)
    m = body_count - target_count
    if m > len(a_idx):
        logger.warning(
            f"ToMe at layer {layer_index}: requested {m} merges, only {len(a_idx)} possible; capping"
        )
        m = len(a_idx)

    body = tokens.data[1:]
    norms = np.linalg.norm(body, axis=-1, keepdims=True)
    unit = body / np.where(norms > 0, norms, 1.0)
    similarity = unit[a_idx] @ unit[b_idx].T
    best_b = similarity.argmax(axis=-1)
    best_sim = similarity.max(axis=-1)
    proposal_order = top_k_order(best_sim)
    src = np.sort(proposal_order[:m])
    unmerged = np.sort(proposal_order[m:])

    out_rows = len(unmerged) + len(b_idx)
    combine = np.zeros((out_rows, body_count), dtype=np.float64)
    for row, a in enumerate(unmerged):
        combine[row, a_idx[a]] = 1.0
    offset = len(unmerged)
    groups: Dict[int, List[int]] = {j: [int(b_idx[j])] for j in range(len(b_idx))}
    for a in src:
        groups[int(best_b[a])].append(int(a_idx[a]))
    for j in range(len(b_idx)):
        members = groups[j]
        combine[offset + j, members] = 1.0 / len(members)

    kept = tuple(int(a_idx[a]) for a in unmerged) + tuple(int(b) for b in b_idx)
    pairs = tuple((int(a_idx[a]), int(b_idx[best_b[a]])) for a in src)
    record = SparsifyRecord(
        layer_index,
        "tome",
        "merge",
        n,
        kept,
        combine=combine,
        pairs=pairs,
    )
    logger.debug(f"ToMe at layer {layer_index}: merged {len(pairs)} pairs, {n} -> {record.output_count} tokens")
    return apply_record(tokens, record), record


def sparsify_tokens(
    tokens: Tensor,
    trace: "AttnTrace",
    config: SparsifyConfig,
    layer_index: int,
    predictor: Optional[PredictorWeights] = None,
) -> Tuple[Tensor, SparsifyRecord]:
    """Dispatch to the configured operator."""
    if config.operator == "evit":
        return evit_sparsify(tokens, trace, config.keep_rate, config.strategy, layer_index)
    if config.operator == "dynamicvit":
        if predictor is None:
            raise ConfigError(f"DynamicViT at layer {layer_index} needs predictor weights")
        return dynamicvit_sparsify(tokens, predictor, config.keep_rate, config.strategy, layer_index)
    if config.operator == "tome":
        target = keep_count(tokens.shape[0], config.keep_rate)
        if target >= tokens.shape[0] - 1:
            record = SparsifyRecord(layer_index, "tome", "merge", tokens.shape[0], tuple(range(tokens.shape[0] - 1)))
            return apply_record(tokens, record), record
        return tome_merge(tokens, target, layer_index)
    raise ConfigError(f"Unknown sparsification operator {config.operator!r}")
