"""Evaluation metrics: WER/CER, corpus BLEU, and token-efficiency diagnostics.

Edit-distance stats come from the minimal-cost alignment that maximizes
matches; that tie-break makes the (S, I, D) decomposition unique and
symmetric under argument swap. BLEU uses add-1 smoothing on zero n-gram
counts for n >= 2 only, so scores are reproducible bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError


@dataclass
class EditStats:
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _distance_and_matches(ref, hyp) -> tuple[int, int]:
    """Levenshtein distance plus max matches over minimal-cost alignments."""
    n, m = len(ref), len(hyp)
    # cell = (cost, -matches); lexicographic min
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0)] + [(0, 0)] * m
        ri = ref[i - 1]
        for j in range(1, m + 1):
            match = ri == hyp[j - 1]
            dc, dm = prev[j - 1]
            diag = (dc + (0 if match else 1), dm - (1 if match else 0))
            uc, um = prev[j]
            up = (uc + 1, um)
            lc, lm = cur[j - 1]
            left = (lc + 1, lm)
            cur[j] = min(diag, up, left)
        prev = cur
    cost, neg_matches = prev[m]
    return cost, -neg_matches


def edit_stats(ref, hyp) -> EditStats:
    ref, hyp = list(ref), list(hyp)
    dist, matches = _distance_and_matches(ref, hyp)
    # with matches M fixed, the (S, I, D) split is determined:
    #   S + D = |ref| - M,  S + I = |hyp| - M,  S + I + D = dist
    subs = len(ref) + len(hyp) - 2 * matches - dist
    dels = len(ref) - matches - subs
    ins = len(hyp) - matches - subs
    return EditStats(
        substitutions=subs, insertions=ins, deletions=dels, reference_length=len(ref)
    )


def wer(reference, hypothesis) -> tuple[float, EditStats]:
    """Word error rate in percent; empty references use denominator 1."""
    stats = edit_stats(reference, hypothesis)
    denom = max(1, stats.reference_length)
    return 100.0 * stats.errors / denom, stats


def token_glyphs(tokens) -> list[str]:
    """Render token ids as fixed two-character glyphs for character metrics."""
    chars: list[str] = []
    for t in tokens:
        chars.extend(f"{int(t):02d}")
    return chars


def cer(reference, hypothesis) -> float:
    """Character error rate over the two-character glyph rendering."""
    rate, _ = wer(token_glyphs(reference), token_glyphs(hypothesis))
    return rate


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(references, hypotheses, max_order: int = 4) -> float:
    """Corpus BLEU with clipping, brevity penalty, and add-1 smoothing on
    zero counts for orders >= 2. Returns a score in [0, 100]."""
    references, hypotheses = list(references), list(hypotheses)
    if len(references) != len(hypotheses):
        raise ParameterError(
            f"references ({len(references)}) and hypotheses ({len(hypotheses)}) differ in length"
        )
    if not references:
        raise ParameterError("corpus_bleu needs at least one sentence pair")
    matched = [0] * max_order
    total = [0] * max_order
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref, hyp = list(ref), list(hyp)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_order + 1):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(
                min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items()
            )
    log_precisions = []
    for n in range(1, max_order + 1):
        m, t = matched[n - 1], total[n - 1]
        if m == 0 and n >= 2:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0  # unigram precision zero: smoothing does not apply
        log_precisions.append(math.log(m / t))
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(log_precisions) / max_order)


@dataclass
class EfficiencyRecord:
    uid: str
    audio_tokens: int
    text_tokens: int

    def __post_init__(self):
        if self.text_tokens < 1:
            raise ParameterError("text token count must be >= 1")

    @property
    def ratio(self) -> float:
        return self.audio_tokens / self.text_tokens


def length_correlation(records) -> float:
    """Pearson r between audio-token and text-token counts."""
    records = list(records)
    if len(records) < 3:
        raise ParameterError("length correlation needs >= 3 records")
    x = np.array([r.audio_tokens for r in records], dtype=np.float64)
    y = np.array([r.text_tokens for r in records], dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DataError("correlation undefined for a constant series")
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / math.sqrt((xc**2).sum() * (yc**2).sum()))


def expansion_report(records_by_system: dict[str, list[EfficiencyRecord]]) -> dict:
    """Mean/median audio-to-text ratio and length correlation per system."""
    if not records_by_system:
        raise DataError("no efficiency records")
    out: dict[str, dict] = {}
    for system, records in sorted(records_by_system.items()):
        if not records:
            raise DataError(f"system '{system}' has no efficiency records")
        ratios = np.array([r.ratio for r in records], dtype=np.float64)
        entry = {
            "count": len(records),
            "mean_ratio": float(ratios.mean()),
            "median_ratio": float(np.median(ratios)),
        }
        try:
            entry["length_correlation"] = length_correlation(records)
        except (DataError, ParameterError):
            entry["length_correlation"] = None
        out[system] = entry
    return out


def write_expansion_report(report: dict, json_path, csv_path) -> None:
    with open(str(json_path), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(str(csv_path), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["system", "count", "mean_ratio", "median_ratio", "length_correlation"])
        for system, entry in sorted(report.items()):
            w.writerow(
                [
                    system,
                    entry["count"],
                    entry["mean_ratio"],
                    entry["median_ratio"],
                    entry["length_correlation"],
                ]
            )
