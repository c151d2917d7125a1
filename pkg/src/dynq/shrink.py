"""Peak-frame selection: CTC posteriors -> compact dynamic queries.

Frames are grouped into maximal runs of identical non-blank argmax labels;
each run contributes the single frame where that label's posterior peaks.
Blank-argmax frames are dropped. Selection is discrete: gradients flow through
the gathered feature rows, never through the index choice.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ctc import PosteriorGrid
from .errors import BoundsError
from .tensor import Tensor, gather_rows


@dataclass
class ShrinkResult:
    """Selected frames and the query matrix gathered at them."""

    indices: np.ndarray  # strictly ascending frame indices
    labels: np.ndarray  # argmax label per selected frame
    queries: Tensor  # [n_q, d_model]

    @property
    def n_q(self) -> int:
        return int(self.indices.size)


def select_peak_frames(grid: PosteriorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Return (indices, labels) of per-run peak frames.

    All-blank grids fall back to the single frame with the smallest blank
    posterior so downstream attention always has at least one query; that is
    the only case where a returned label is the blank id.
    """
    lp = grid.log_probs.data
    blank = grid.blank
    argmax = lp.argmax(axis=1)  # ties resolve to the lower label id
    if (argmax == blank).all():
        idx = int(lp[:, blank].argmin())  # ties resolve to the earliest frame
        return np.array([idx], dtype=np.int64), np.array([blank], dtype=np.int64)

    indices: list[int] = []
    labels: list[int] = []
    t = 0
    T = lp.shape[0]
    while t < T:
        lab = int(argmax[t])
        start = t
        while t < T and argmax[t] == lab:
            t += 1
        if lab == blank:
            continue
        run = lp[start:t, lab]
        peak = start + int(run.argmax())  # first occurrence wins ties
        indices.append(peak)
        labels.append(lab)
    return np.array(indices, dtype=np.int64), np.array(labels, dtype=np.int64)


def build_dynamic_queries(enhanced: Tensor, indices) -> Tensor:
    """Gather enhanced-feature rows at the selected frames (no parameters)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = enhanced.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise BoundsError(f"query index out of range [0, {n})")
    return gather_rows(enhanced, idx)


def shrink(grid: PosteriorGrid, enhanced: Tensor) -> ShrinkResult:
    indices, labels = select_peak_frames(grid)
    return ShrinkResult(indices=indices, labels=labels, queries=build_dynamic_queries(enhanced, indices))


def write_shrink_stats(rows, path) -> None:
    """Diagnostic CSV: one row per utterance {id, frames, n_q, transcript_len}."""
    with open(str(path), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id", "frames", "n_q", "transcript_len"])
        for r in rows:
            w.writerow([r["utterance_id"], r["frames"], r["n_q"], r["transcript_len"]])
