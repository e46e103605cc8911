#!/usr/bin/env python3

"""
Sparse-Tuning training loop.

Only parameters whose names contain "adapter" or "head" train; everything else
stays frozen. Optimization is AdamW with decoupled weight decay and a cosine
learning-rate schedule that reaches zero on the last step. Each sample of a
batch builds its own graph; gradients are reduced in sample order so results do
not depend on the worker count.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import ConfigError
from datasets import Dataset
from metrics import record_evaluation, record_forward, record_nonfinite_abort, record_train_step
from tensor_autograd import NumericError, Tensor, backward, cross_entropy, scale
from utils import calculate_tensor_hash
from vit_backbone import SparsePlan, ViTWeights, default_plan, vit_forward

logger = logging.getLogger(__name__)

TRAINABLE_MARKERS = ("adapter", "head")


class NonFiniteLossError(Exception):
    """Raised when a training step produces a non-finite loss"""

    def __init__(self, message: str, diagnostics: Dict[str, object]):
        super().__init__(message)
        self.diagnostics = diagnostics


class ContractError(Exception):
    """Raised when an engine operation is called outside its contract"""

    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    workers: int = 1
    plan: SparsePlan = field(default_factory=default_plan)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.plan.sparsify is not None and not 0 < self.plan.sparsify.keep_rate <= 1:
            raise ConfigError(f"keep rate must lie in (0, 1], got {self.plan.sparsify.keep_rate}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_accuracy: Optional[float]
    seconds: float
    tokens_processed: int

    def to_line(self, wall_time: bool = True) -> str:
        """Metrics log line; "-" marks an omitted wall time or a run without an eval set."""
        seconds = f"{self.seconds:.3f}" if wall_time else "-"
        eval_accuracy = f"{self.eval_accuracy:.4f}" if self.eval_accuracy is not None else "-"
        return (
            f"{self.epoch} {self.train_loss:.6f} {self.train_accuracy:.4f} "
            f"{eval_accuracy} {seconds}"
        )


@dataclass
class Metrics:
    epochs: List[EpochMetrics] = field(default_factory=list)

    @property
    def final(self) -> Optional[EpochMetrics]:
        return self.epochs[-1] if self.epochs else None

    @property
    def best_eval_accuracy(self) -> Optional[float]:
        scores = [e.eval_accuracy for e in self.epochs if e.eval_accuracy is not None]
        return max(scores) if scores else None


@dataclass
class StepResult:
    loss: float
    correct: int
    samples: int
    tokens_processed: int
    lr: float


def is_trainable_name(name: str) -> bool:
    return any(marker in name for marker in TRAINABLE_MARKERS)


def freeze_parameters(weights: ViTWeights) -> int:
    """Apply the name rule to every parameter; returns the trainable parameter count."""
    trainable = 0
    for name, tensor in weights.items():
        tensor.requires_grad = is_trainable_name(name)
        tensor.zero_grad()
        if tensor.requires_grad:
            trainable += tensor.data.size
    logger.info(f"Froze {len(weights.frozen())} tensors; {trainable:,} trainable parameters")
    return trainable


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """
    base_lr at step 0, decaying along a half cosine to exactly 0 at the last step.

    Step 0 takes precedence, so a run with a single step trains at base_lr.
    """
    progress = min(max(step, 0), max(total_steps - 1, 0)) / max(total_steps - 1, 1)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a fixed set of trainable tensors."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.steps += 1
        bias1 = 1.0 - self.beta1**self.steps
        bias2 = 1.0 - self.beta2**self.steps
        for name, param in self.params.items():
            if param.grad is None:
                continue
            grad = param.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            param.data -= lr * (update + self.weight_decay * param.data)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()


def _sample_pass(
    image: np.ndarray,
    label: int,
    weights: ViTWeights,
    loss_scale: float,
    sink: Optional[Dict[Tensor, np.ndarray]],
) -> Tuple[float, int, int]:
    start = time.perf_counter()
    try:
        result = vit_forward(image, weights)
    except NumericError as e:
        logger.warning(f"Forward pass hit non-finite activations: {e}")
        return float("nan"), 0, 0
    record_forward(_keep_rate(weights.plan), time.perf_counter() - start, result.tokens_processed)
    loss = cross_entropy(result.logits, label)
    backward(scale(loss, loss_scale), sink)
    correct = int(int(np.argmax(result.logits.data)) == label)
    return loss.item(), correct, result.tokens_processed


def _frozen_hash(weights: ViTWeights) -> str:
    return calculate_tensor_hash((name, t.data) for name, t in weights.frozen().items())


def _keep_rate(plan: SparsePlan) -> float:
    return plan.sparsify.keep_rate if plan.sparsify is not None else 1.0


def train_step(
    batch: Dataset,
    weights: ViTWeights,
    optimizer: AdamW,
    lr: float,
    workers: int = 1,
    step: int = 0,
) -> StepResult:
    """
    One optimizer step on the mean cross-entropy of a batch.

    Raises:
        NonFiniteLossError: If any sample loss is not finite; no update is applied
    """
    if len(batch) == 0:
        raise ContractError("train_step needs a non-empty batch")
    optimizer.zero_grad()
    loss_scale = 1.0 / len(batch)

    if workers > 1:
        samples = list(batch)
        sinks: List[Dict[Tensor, np.ndarray]] = [{} for _ in samples]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(
                    lambda i: _sample_pass(samples[i][0], samples[i][1], weights, loss_scale, sinks[i]),
                    range(len(samples)),
                )
            )
        # Fixed reduction order: sample 0, 1, 2, ...
        for sink in sinks:
            for param, grad in sink.items():
                if param.grad is None:
                    param.grad = grad.copy()
                else:
                    param.grad += grad
    else:
        outcomes = [_sample_pass(image, label, weights, loss_scale, None) for image, label in batch]

    losses = [loss for loss, _, _ in outcomes]
    if not all(math.isfinite(loss) for loss in losses):
        diagnostics = {
            "step": step,
            "lr": lr,
            "losses": losses,
            "max_abs_trainable": {
                name: float(np.max(np.abs(p.data))) for name, p in optimizer.params.items()
            },
        }
        record_nonfinite_abort()
        raise NonFiniteLossError(f"Non-finite loss at step {step}: {losses}", diagnostics)

    optimizer.step(lr)
    return StepResult(
        loss=float(np.mean(losses)),
        correct=sum(correct for _, correct, _ in outcomes),
        samples=len(batch),
        tokens_processed=sum(tokens for _, _, tokens in outcomes),
        lr=lr,
    )


def evaluate(dataset: Dataset, weights: ViTWeights, batch_size: int = 32) -> float:
    """
    Top-1 accuracy; argmax ties go to the lowest class index.

    Raises:
        ContractError: If the dataset is empty
    """
    if len(dataset) == 0:
        raise ContractError("Cannot evaluate on an empty dataset")
    correct = 0
    with weights.inference():
        for start in range(0, len(dataset), batch_size):
            for image, label in dataset.subset(range(start, min(start + batch_size, len(dataset)))):
                begin = time.perf_counter()
                result = vit_forward(image, weights)
                record_forward(_keep_rate(weights.plan), time.perf_counter() - begin, result.tokens_processed)
                correct += int(int(np.argmax(result.logits.data)) == label)
    accuracy = correct / len(dataset)
    record_evaluation(accuracy)
    return accuracy


def train(
    config: TrainConfig,
    weights: ViTWeights,
    train_set: Dataset,
    eval_set: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
    should_stop: Optional[Callable[[], bool]] = None,
) -> Metrics:
    """Fine-tune `weights` in place for config.epochs epochs."""
    config.validate()
    if weights.plan != config.plan:
        raise ConfigError(f"Weights were built for plan {weights.plan}, training config uses {config.plan}")
    if len(train_set) == 0:
        raise ContractError("Cannot train on an empty dataset")

    freeze_parameters(weights)
    frozen_hash = _frozen_hash(weights)
    optimizer = AdamW(
        weights.trainable(),
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    rng = np.random.default_rng(config.seed)
    metrics = Metrics()
    step = 0

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        correct = 0
        tokens = 0
        for offset in range(0, len(train_set), config.batch_size):
            batch = train_set.subset(order[offset : offset + config.batch_size])
            lr = cosine_lr(step, total_steps, config.base_lr)
            step_start = time.perf_counter()
            result = train_step(batch, weights, optimizer, lr, config.workers, step)
            record_train_step(result.loss, time.perf_counter() - step_start)
            loss_sum += result.loss * result.samples
            correct += result.correct
            tokens += result.tokens_processed
            step += 1
            logger.debug(f"Step {step}/{total_steps}: loss {result.loss:.4f}, lr {lr:.3e}")

        eval_accuracy = evaluate(eval_set, weights) if eval_set is not None and len(eval_set) else None
        eval_note = f"eval acc {eval_accuracy:.3f}" if eval_accuracy is not None else "no eval set"
        epoch_metrics = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / len(train_set),
            train_accuracy=correct / len(train_set),
            eval_accuracy=eval_accuracy,
            seconds=time.perf_counter() - start,
            tokens_processed=tokens,
        )
        metrics.epochs.append(epoch_metrics)
        logger.info(
            f"Epoch {epoch}/{config.epochs}: loss {epoch_metrics.train_loss:.4f}, "
            f"train acc {epoch_metrics.train_accuracy:.3f}, {eval_note}, "
            f"{epoch_metrics.seconds:.1f}s"
        )
        if on_epoch is not None:
            on_epoch(epoch_metrics)
        if should_stop is not None and should_stop():
            logger.warning(f"Stopping after epoch {epoch} on request")
            break

    if _frozen_hash(weights) != frozen_hash:
        raise ContractError("Frozen parameters changed during training")
    return metrics
