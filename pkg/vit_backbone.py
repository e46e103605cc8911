#!/usr/bin/env python3

"""
Vision Transformer encoder with pluggable token sparsification and Dense Adapters.

Layers use the pre-norm convention:
    x = proj(MHA(ln1(x))) + x
    x = sparsify(x)                        (at planned layers)
    x_adapter = adapter(x, cached skips)   (when adapters are attached)
    x = ffn(ln2(x)) + x + x_adapter

Layer numbers are 1-based everywhere: positions [4, 7, 10] sparsify after the
attention of the 4th, 7th and 10th layer.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Dict, Generator, Iterator, List, Optional, Tuple, Union

import numpy as np

from config import ConfigError
from dense_adapter import (
    AdapterConfig,
    DenseAdapterState,
    DenseAdapterWeights,
    adapter_forward,
    adapter_parameter_shapes,
)
from metrics import record_sparsify_event
from tensor_autograd import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    reshape,
    softmax_rows,
    transpose,
)
from token_sparsify import (
    PredictorWeights,
    SparsifyConfig,
    SparsifyRecord,
    predictor_parameter_shapes,
    propagate_sources,
    sparsify_tokens,
)
from utils import trunc_normal

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 768
    num_heads: int = 12
    num_layers: int = 12
    ffn_hidden: int = 3072
    num_classes: int = 100
    ln_eps: float = 1e-6

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "channels", "embed_dim", "num_heads", "num_layers",
                     "ffn_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


PRESETS: Dict[str, ViTConfig] = {
    "vit-b16": ViTConfig(),
    "vit-l16": ViTConfig(embed_dim=1024, num_heads=16, num_layers=24, ffn_hidden=4096),
    "tiny": ViTConfig(
        image_size=32,
        patch_size=4,
        embed_dim=64,
        num_heads=4,
        num_layers=6,
        ffn_hidden=256,
        num_classes=4,
    ),
}


@dataclass(frozen=True)
class SparsePlan:
    """Which layers sparsify and whether Dense Adapters are attached."""

    sparsify: Optional[SparsifyConfig] = None
    adapter: Optional[AdapterConfig] = None

    def validate(self, config: ViTConfig) -> None:
        if self.sparsify is not None:
            self.sparsify.validate(config.num_layers)
        if self.adapter is not None:
            self.adapter.validate()

    def sparsifies_at(self, layer: int) -> bool:
        return self.sparsify is not None and layer in self.sparsify.positions

    def with_keep_rate(self, keep_rate: float) -> "SparsePlan":
        if self.sparsify is None:
            return self
        return replace(self, sparsify=replace(self.sparsify, keep_rate=keep_rate))


def default_plan() -> SparsePlan:
    """EViT at layers 4, 7 and 10 with r = 0.7 and inner Dense Adapters with d = 32."""
    return SparsePlan(sparsify=SparsifyConfig(), adapter=AdapterConfig())


def backbone_parameter_shapes(config: ViTConfig, layer: int) -> Dict[str, Tuple[int, ...]]:
    c, f = config.embed_dim, config.ffn_hidden
    prefix = f"layers.{layer}"
    shapes: Dict[str, Tuple[int, ...]] = {
        f"{prefix}.ln1.weight": (c,),
        f"{prefix}.ln1.bias": (c,),
    }
    for proj in ("q", "k", "v", "proj"):
        shapes[f"{prefix}.attn.{proj}.weight"] = (c, c)
        shapes[f"{prefix}.attn.{proj}.bias"] = (c,)
    shapes.update(
        {
            f"{prefix}.ln2.weight": (c,),
            f"{prefix}.ln2.bias": (c,),
            f"{prefix}.mlp.fc1.weight": (c, f),
            f"{prefix}.mlp.fc1.bias": (f,),
            f"{prefix}.mlp.fc2.weight": (f, c),
            f"{prefix}.mlp.fc2.bias": (c,),
        }
    )
    return shapes


def parameter_shapes(config: ViTConfig, plan: SparsePlan) -> Dict[str, Tuple[int, ...]]:
    """Every named parameter of the network in declaration order."""
    c = config.embed_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, c),
        "patch_embed.bias": (c,),
        "cls_token": (1, c),
        "pos_embed": (config.num_tokens, c),
    }
    for layer in range(1, config.num_layers + 1):
        shapes.update(backbone_parameter_shapes(config, layer))
        if plan.sparsifies_at(layer) and plan.sparsify.operator == "dynamicvit":
            hidden = plan.sparsify.predictor_width(c)
            shapes.update(predictor_parameter_shapes(c, hidden, layer))
        if plan.adapter is not None:
            shapes.update(adapter_parameter_shapes(plan.adapter, layer, c))
    shapes.update(
        {
            "norm.weight": (c,),
            "norm.bias": (c,),
            "head.weight": (c, config.num_classes),
            "head.bias": (config.num_classes,),
        }
    )
    return shapes


def _initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "norm.weight":
        return np.ones(shape, dtype=dtype)
    if ".up" in name and ".adapter." in name:
        return np.zeros(shape, dtype=dtype)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    return trunc_normal(rng, shape, INIT_STD, dtype)


@dataclass
class LayerWeights:
    ln1_weight: Tensor
    ln1_bias: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    ln2_weight: Tensor
    ln2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], layer: int) -> "LayerWeights":
        p = f"layers.{layer}"
        return cls(
            ln1_weight=params[f"{p}.ln1.weight"],
            ln1_bias=params[f"{p}.ln1.bias"],
            q_weight=params[f"{p}.attn.q.weight"],
            q_bias=params[f"{p}.attn.q.bias"],
            k_weight=params[f"{p}.attn.k.weight"],
            k_bias=params[f"{p}.attn.k.bias"],
            v_weight=params[f"{p}.attn.v.weight"],
            v_bias=params[f"{p}.attn.v.bias"],
            proj_weight=params[f"{p}.attn.proj.weight"],
            proj_bias=params[f"{p}.attn.proj.bias"],
            ln2_weight=params[f"{p}.ln2.weight"],
            ln2_bias=params[f"{p}.ln2.bias"],
            fc1_weight=params[f"{p}.mlp.fc1.weight"],
            fc1_bias=params[f"{p}.mlp.fc1.bias"],
            fc2_weight=params[f"{p}.mlp.fc2.weight"],
            fc2_bias=params[f"{p}.mlp.fc2.bias"],
        )


class ViTWeights:
    """
    The full named-parameter set of a network and its plan.

    A parameter is frozen when its tensor does not require gradients.
    """

    def __init__(self, config: ViTConfig, plan: SparsePlan, params: Dict[str, Tensor]):
        config.validate()
        plan.validate(config)
        expected = parameter_shapes(config, plan)
        missing = [name for name in expected if name not in params]
        unexpected = [name for name in params if name not in expected]
        if missing or unexpected:
            raise ConfigError(f"Parameter names do not match the plan: missing {missing}, unexpected {unexpected}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"Parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.plan = plan
        self.params = {name: params[name] for name in expected}
        self._layers: Dict[int, LayerWeights] = {}

    @classmethod
    def initialize(
        cls,
        config: ViTConfig,
        plan: Optional[SparsePlan] = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> "ViTWeights":
        plan = plan if plan is not None else SparsePlan()
        config.validate()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config, plan).items():
            params[name] = Tensor(_initial_value(name, shape, rng, dtype), requires_grad=True, name=name)
        logger.debug(f"Initialized {len(params)} parameters with seed {seed}")
        return cls(config, plan, params)

    @classmethod
    def from_arrays(
        cls, config: ViTConfig, plan: SparsePlan, arrays: Dict[str, Tuple[np.ndarray, bool]]
    ) -> "ViTWeights":
        """Build from (array, frozen) pairs, e.g. a loaded checkpoint."""
        params = {
            name: Tensor(array, requires_grad=not frozen, name=name)
            for name, (array, frozen) in arrays.items()
        }
        return cls(config, plan, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def is_frozen(self, name: str) -> bool:
        return not self.params[name].requires_grad

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if t.requires_grad}

    def frozen(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if not t.requires_grad}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    @contextmanager
    def inference(self) -> Generator["ViTWeights", None, None]:
        """Run forward passes without building a backward graph, restoring flags afterwards."""
        flags = {name: t.requires_grad for name, t in self.params.items()}
        for tensor in self.params.values():
            tensor.requires_grad = False
        try:
            yield self
        finally:
            for name, tensor in self.params.items():
                tensor.requires_grad = flags[name]

    def astype(self, dtype) -> "ViTWeights":
        params = {
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name)
            for name, t in self.params.items()
        }
        return ViTWeights(self.config, self.plan, params)

    def layer(self, layer: int) -> LayerWeights:
        if layer not in self._layers:
            self._layers[layer] = LayerWeights.from_params(self.params, layer)
        return self._layers[layer]

    def adapter(self, layer: int) -> DenseAdapterWeights:
        return DenseAdapterWeights.from_params(self.params, self.plan.adapter, layer)

    def predictor(self, layer: int) -> PredictorWeights:
        return PredictorWeights.from_params(self.params, layer)


@dataclass
class AttnTrace:
    """Head-averaged attention of the CLS token to every current non-CLS token."""

    avg_cls_attn: np.ndarray
    scores: Tensor

    @classmethod
    def from_attention(cls, attn: Tensor) -> "AttnTrace":
        scores = mean(attn[:, 0, 1:], axis=0)
        return cls(avg_cls_attn=scores.data, scores=scores)

    @classmethod
    def from_scores(cls, values) -> "AttnTrace":
        scores = Tensor(np.asarray(values))
        return cls(avg_cls_attn=scores.data, scores=scores)

    def __len__(self) -> int:
        return int(self.avg_cls_attn.shape[0])


@dataclass
class LayerOutput:
    tokens: Tensor
    trace: AttnTrace
    record: Optional[SparsifyRecord] = None


@dataclass
class ForwardResult:
    logits: Tensor
    traces: List[AttnTrace]
    records: List[SparsifyRecord]
    token_counts: List[int]
    sources_in: List[List[Tuple[int, ...]]] = field(default_factory=list)
    sources_out: List[List[Tuple[int, ...]]] = field(default_factory=list)

    @property
    def tokens_processed(self) -> int:
        return int(sum(self.token_counts))


def patch_embed(image: Union[np.ndarray, Tensor], weights: ViTWeights) -> Tensor:
    """
    Split an image [channels x H x W] into patches, project them and prepend CLS.

    Patches are taken row-major over the grid and flattened channel-first.
    """
    config = weights.config
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    expected = (config.channels, config.image_size, config.image_size)
    if data.shape != expected:
        raise ConfigError(f"Image shape {data.shape} does not match the configured {expected}")

    g, p = config.grid_size, config.patch_size
    dtype = weights["patch_embed.weight"].dtype
    patches = (
        data.reshape(config.channels, g, p, g, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(g * g, config.patch_dim)
        .astype(dtype)
    )
    tokens = linear(Tensor(patches), weights["patch_embed.weight"], weights["patch_embed.bias"])
    tokens = concat([weights["cls_token"], tokens])
    return add(tokens, weights["pos_embed"])


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, num_heads: int
) -> Tuple[Tensor, Tensor]:
    """
    softmax(Q K^T / sqrt(d_head)) V for every head.

    Returns:
        Concatenated head outputs [N x C] and attention probabilities [H x N x N]
    """
    n, c = q.shape
    if c % num_heads:
        raise ConfigError(f"Channel count {c} is not divisible by {num_heads} heads")
    head_dim = c // num_heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, num_heads, head_dim)), (1, 0, 2))

    scores = matmul(split(q), transpose(split(k)))
    attn = softmax_rows(scores, 1.0 / math.sqrt(head_dim))
    context = matmul(attn, split(v))
    return reshape(transpose(context, (1, 0, 2)), (n, c)), attn


def multi_head_attention(
    x: Tensor, layer_weights: LayerWeights, num_heads: int, eps: float = 1e-6
) -> Tuple[Tensor, AttnTrace]:
    """Pre-norm self-attention with the residual added: proj(attn(ln1(x))) + x."""
    if x.shape[0] < 2:
        raise ConfigError(f"Attention needs CLS plus at least one token, got {x.shape[0]} tokens")
    lw = layer_weights
    h = layer_norm(x, lw.ln1_weight, lw.ln1_bias, eps)
    q = linear(h, lw.q_weight, lw.q_bias)
    k = linear(h, lw.k_weight, lw.k_bias)
    v = linear(h, lw.v_weight, lw.v_bias)
    context, attn = scaled_dot_product_attention(q, k, v, num_heads)
    out = add(linear(context, lw.proj_weight, lw.proj_bias), x)
    return out, AttnTrace.from_attention(attn)


def feed_forward(x: Tensor, layer_weights: LayerWeights, eps: float = 1e-6) -> Tensor:
    lw = layer_weights
    h = layer_norm(x, lw.ln2_weight, lw.ln2_bias, eps)
    return linear(gelu(linear(h, lw.fc1_weight, lw.fc1_bias)), lw.fc2_weight, lw.fc2_bias)


def encoder_layer_forward(
    x: Tensor,
    layer_index: int,
    weights: ViTWeights,
    plan: SparsePlan,
    adapter_state: Optional[DenseAdapterState] = None,
) -> LayerOutput:
    """One encoder layer: attention, optional sparsification, FFN with optional adapter."""
    config = weights.config
    lw = weights.layer(layer_index)
    x, trace = multi_head_attention(x, lw, config.num_heads, config.ln_eps)

    record = None
    if plan.sparsifies_at(layer_index):
        predictor = weights.predictor(layer_index) if plan.sparsify.operator == "dynamicvit" else None
        x, record = sparsify_tokens(x, trace, plan.sparsify, layer_index, predictor)
        record_sparsify_event(plan.sparsify.operator)
        if adapter_state is not None:
            adapter_state.observe(record)

    adapter_out = None
    if plan.adapter is not None:
        if adapter_state is None:
            raise ConfigError(f"Layer {layer_index} has adapters but no adapter state was supplied")
        adapter_out = adapter_forward(x, adapter_state, layer_index, weights.adapter(layer_index), plan.adapter)

    out = add(feed_forward(x, lw, config.ln_eps), x)
    if adapter_out is not None:
        out = add(out, adapter_out)
    return LayerOutput(tokens=out, trace=trace, record=record)


def vit_forward(
    image: Union[np.ndarray, Tensor], weights: ViTWeights, plan: Optional[SparsePlan] = None
) -> ForwardResult:
    """Classify one image; logits come from head(norm(CLS))."""
    config = weights.config
    if plan is None:
        plan = weights.plan
    elif plan != weights.plan:
        expected = parameter_shapes(config, plan)
        if expected != {name: t.shape for name, t in weights.items()}:
            raise ConfigError("Plan needs different parameters than the weights were built for")
    x = patch_embed(image, weights)
    state = DenseAdapterState() if plan.adapter is not None else None

    sources: List[Tuple[int, ...]] = [(i,) for i in range(config.num_patches)]
    traces: List[AttnTrace] = []
    records: List[SparsifyRecord] = []
    counts: List[int] = []
    sources_in: List[List[Tuple[int, ...]]] = []
    sources_out: List[List[Tuple[int, ...]]] = []

    for layer in range(1, config.num_layers + 1):
        sources_in.append(sources)
        result = encoder_layer_forward(x, layer, weights, plan, state)
        x = result.tokens
        traces.append(result.trace)
        if result.record is not None:
            records.append(result.record)
            sources = propagate_sources(sources, result.record)
        sources_out.append(sources)
        counts.append(x.shape[0])

    cls_row = layer_norm(x[0:1], weights["norm.weight"], weights["norm.bias"], config.ln_eps)
    logits = reshape(linear(cls_row, weights["head.weight"], weights["head.bias"]), (config.num_classes,))
    return ForwardResult(
        logits=logits,
        traces=traces,
        records=records,
        token_counts=counts,
        sources_in=sources_in,
        sources_out=sources_out,
    )
