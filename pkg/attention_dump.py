#!/usr/bin/env python3

"""
CLS-attention dumps.

For every layer the head-averaged attention of CLS to each original patch is
written as one CSV row with one column per original patch. Every token present
after that layer's sparsification, except a freshly fused background token,
contributes one score at its lowest source patch; the remaining columns hold the
sentinel -1. A token fused at one event that is kept by a later one scores again.

Selected layers are additionally rendered as binary PGM images (P5) on the patch
grid, scaled by the row maximum, with discarded patches black.
"""

import csv
import logging
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np

from token_sparsify import SparsifyRecord
from vit_backbone import ForwardResult, ViTWeights, vit_forward

logger = logging.getLogger(__name__)

SENTINEL = -1.0
CSV_NAME = "attention.csv"


def attention_rows(result: ForwardResult, num_patches: int) -> np.ndarray:
    """[layers x patches] CLS-attention scores with -1 for tokens no longer present."""
    rows = np.full((len(result.traces), num_patches), SENTINEL, dtype=np.float64)
    events = {record.layer_index: record for record in result.records}
    scored = [True] * num_patches
    for i, trace in enumerate(result.traces):
        scores = trace.avg_cls_attn
        record = events.get(i + 1)
        if record is None:
            token_scores = list(scores)
        else:
            token_scores, scored = _scores_after_event(record, scores, scored)
        for src, flag, score in zip(result.sources_out[i], scored, token_scores):
            if flag:
                rows[i, min(src)] = score
    return rows


def _scores_after_event(
    record: SparsifyRecord, scores: np.ndarray, scored: List[bool]
) -> Tuple[List[float], List[bool]]:
    """Scores and score flags of the tokens leaving one sparsification event."""
    if record.combine is not None:
        members = [np.flatnonzero(row) for row in record.combine]
        return (
            [float(scores[m].sum()) for m in members],
            [any(scored[j] for j in m) for m in members],
        )
    token_scores = [float(scores[k]) for k in record.kept_indices]
    flags = [True] * len(record.kept_indices)
    if record.has_fused:
        # The fused background token is not one of the kept tokens
        token_scores.append(float(scores[list(record.merge_indices)].sum()))
        flags.append(False)
    return token_scores, flags


def write_attention_csv(rows: np.ndarray, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer"] + [f"p{i}" for i in range(rows.shape[1])])
        for layer, row in enumerate(rows, start=1):
            writer.writerow([layer] + ["-1" if v == SENTINEL else f"{v:.8g}" for v in row])


def render_pgm(row: np.ndarray, grid_size: int) -> bytes:
    """Binary grayscale PGM of one attention row on a grid_size x grid_size grid."""
    if row.shape[0] != grid_size * grid_size:
        raise ValueError(f"Row has {row.shape[0]} entries, a {grid_size}x{grid_size} grid needs {grid_size ** 2}")
    present = row != SENTINEL
    peak = row[present].max() if present.any() else 0.0
    pixels = np.zeros(row.shape[0], dtype=np.uint8)
    if peak > 0:
        scaled = np.clip(row[present] / peak, 0.0, 1.0)
        pixels[present] = np.rint(scaled * 255).astype(np.uint8)
    header = f"P5\n{grid_size} {grid_size}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def dump_attention(
    image: np.ndarray,
    weights: ViTWeights,
    out_dir: str,
    layers: Optional[Sequence[int]] = None,
) -> List[str]:
    """
    Run one forward pass and write the CSV plus one PGM per selected layer.

    Args:
        image: [channels x H x W] input
        weights: Network to trace
        out_dir: Output directory, created if needed
        layers: 1-based layers to render as images; all layers when None

    Returns:
        Paths of the files written, CSV first
    """
    config = weights.config
    selected = list(layers) if layers is not None else list(range(1, config.num_layers + 1))
    for layer in selected:
        if not 1 <= layer <= config.num_layers:
            raise ValueError(f"Layer {layer} is outside 1..{config.num_layers}")

    with weights.inference():
        result = vit_forward(image, weights)
    rows = attention_rows(result, config.num_patches)

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, CSV_NAME)
    write_attention_csv(rows, csv_path)
    written = [csv_path]
    for layer in selected:
        pgm_path = os.path.join(out_dir, f"attn_layer{layer:02d}.pgm")
        with open(pgm_path, "wb") as f:
            f.write(render_pgm(rows[layer - 1], config.grid_size))
        written.append(pgm_path)
    logger.info(f"Wrote attention dump for {config.num_layers} layers to {out_dir}")
    return written
