#!/usr/bin/env python3

"""
Prometheus metrics for the Sparse-Tuning engine.

Provides observability into training progress, sparsification activity and
forward-pass throughput.
"""

import logging
from prometheus_client import Counter, Gauge, Histogram, Info

logger = logging.getLogger(__name__)

# Info metrics
engine_info = Info("sptn_engine", "Sparse-Tuning engine information")

# Training metrics
train_steps_total = Counter(
    "sptn_train_steps_total",
    "Total number of optimizer steps taken",
)

train_loss = Gauge(
    "sptn_train_loss",
    "Mean cross-entropy loss of the most recent optimizer step",
)

eval_accuracy = Gauge(
    "sptn_eval_accuracy",
    "Top-1 accuracy of the most recent evaluation",
)

step_duration = Histogram(
    "sptn_step_duration_seconds",
    "Time spent on one optimizer step (forward, backward and update)",
    buckets=(0.01, 0.05, 0.1, 0.25, 0.5, 1, 2, 5, 10, 30),
)

nonfinite_aborts_total = Counter(
    "sptn_nonfinite_aborts_total",
    "Total number of training runs aborted on a non-finite loss",
)

# Inference metrics
tokens_processed_total = Counter(
    "sptn_tokens_processed_total",
    "Total number of token-layer visits across all forward passes",
)

forward_duration = Histogram(
    "sptn_forward_duration_seconds",
    "Time spent on one forward pass",
    ["keep_rate"],
    buckets=(0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1, 5),
)

sparsify_events_total = Counter(
    "sptn_sparsify_events_total",
    "Total number of token sparsification events",
    ["operator"],
)

# Checkpoint metrics
checkpoints_written_total = Counter(
    "sptn_checkpoints_written_total",
    "Total number of checkpoint files written",
)


def init_metrics():
    """Initialize metrics with engine information"""
    engine_info.info(
        {
            "version": "0.1.0",
            "name": "sparse-tuning-engine",
            "component": "engine",
        }
    )
    logger.info("Prometheus metrics initialized")


# Helper functions for common metric operations
def record_train_step(loss: float, duration: float):
    """Record a completed optimizer step"""
    train_steps_total.inc()
    train_loss.set(loss)
    step_duration.observe(duration)


def record_forward(keep_rate: float, duration: float, tokens: int):
    """Record one forward pass and the token-layer visits it made"""
    forward_duration.labels(keep_rate=f"{keep_rate:g}").observe(duration)
    tokens_processed_total.inc(tokens)


def record_sparsify_event(operator: str):
    """Record one token sparsification event"""
    sparsify_events_total.labels(operator=operator).inc()


def record_evaluation(accuracy: float):
    """Record the accuracy of an evaluation pass"""
    eval_accuracy.set(accuracy)


def record_nonfinite_abort():
    """Record a training abort caused by a non-finite loss"""
    nonfinite_aborts_total.inc()


def record_checkpoint_written():
    """Record a checkpoint write"""
    checkpoints_written_total.inc()
