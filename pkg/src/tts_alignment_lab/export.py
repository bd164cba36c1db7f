"""Attention heatmap files: full-precision CSV and plain (P2) PGM."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import List

import numpy as np

from tts_alignment_lab.checkpoint import Checkpoint
from tts_alignment_lab.errors import ParameterError, ShapeError
from tts_alignment_lab.model import AcousticModel
from tts_alignment_lab.synthdata import SyntheticSample
from tts_alignment_lab.tensor import no_grad

logger = logging.getLogger(__name__)

FORMATS = ("csv", "pgm")
CSV_HEADER = ("s", "t", "weight")
PGM_MAX = 255


def _as_matrix(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError(f"heatmap needs an S x T matrix, got {weights.shape}")
    return weights


def write_attention_csv(weights: np.ndarray, path: Path) -> Path:
    """Header "s,t,weight" then one row per cell, weights written with repr precision."""
    weights = _as_matrix(weights)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        for s in range(weights.shape[0]):
            for t in range(weights.shape[1]):
                writer.writerow([s, t, repr(float(weights[s, t]))])
    return path


def read_attention_csv(path: Path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        cells = [(int(row["s"]), int(row["t"]), float(row["weight"])) for row in csv.DictReader(handle)]
    if not cells:
        raise ShapeError(f"{path} holds no attention cells")
    matrix = np.zeros((max(c[0] for c in cells) + 1, max(c[1] for c in cells) + 1))
    for s, t, weight in cells:
        matrix[s, t] = weight
    return matrix


def pgm_levels(weights: np.ndarray) -> np.ndarray:
    """Grey levels 0..255, linear in the weight, 255 at the largest weight."""
    weights = _as_matrix(weights)
    peak = weights.max()
    if peak <= 0:
        return np.zeros(weights.shape, dtype=np.int64)
    return np.floor(PGM_MAX * weights / peak + 0.5).astype(np.int64)


def write_attention_pgm(weights: np.ndarray, path: Path) -> Path:
    """P2 image, T columns by S rows, decoder frame 0 on top."""
    levels = pgm_levels(weights)
    rows, cols = levels.shape
    body = "\n".join(" ".join(str(v) for v in row) for row in levels)
    path = Path(path)
    path.write_text(f"P2\n{cols} {rows}\n{PGM_MAX}\n{body}\n", encoding="ascii")
    return path


def dump_attention_heatmap(
    checkpoint: Checkpoint,
    sample: SyntheticSample,
    fmt: str,
    out_dir: Path,
) -> List[Path]:
    """Teacher-forced attention of every (layer, head) as attention_l{layer}_h{head}.{fmt}."""
    if fmt not in FORMATS:
        raise ParameterError(f"unknown heatmap format {fmt!r}; choose from {FORMATS}")
    model = AcousticModel.from_checkpoint(checkpoint)
    with no_grad():
        _, _, attns = model.forward_teacher_forced(sample.phonemes, sample.frames, sample.speaker, rng=0)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = write_attention_csv if fmt == "csv" else write_attention_pgm
    heads = model.config.num_heads
    paths = [
        writer(attn.numpy(), out_dir / f"attention_l{index // heads}_h{index % heads}.{fmt}")
        for index, attn in enumerate(attns)
    ]
    logger.info("wrote %d %s heatmaps to %s", len(paths), fmt, out_dir)
    return paths
