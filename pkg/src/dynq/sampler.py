"""Temperature-aware category sampling over dialect x task pairs.

Category probabilities follow p_c proportional to (1/N_c)^(1/tau), computed
in log space. tau -> infinity flattens toward uniform; tau = 1 weights
categories exactly by inverse count. Note the convention: this is the inverse
of the common multilingual p proportional to N^(1/tau) rule, so reports
surface the tau=1 and tau=3 distributions alongside the configured one rather
than guessing intent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError


@dataclass(frozen=True, order=True)
class CategoryKey:
    dialect: str
    task: str

    def __post_init__(self):
        if not self.dialect or not self.task:
            raise ParameterError("category key fields must be non-empty")

    def __str__(self) -> str:
        return f"{self.dialect}/{self.task}"


@dataclass
class SamplerConfig:
    temperature: float = 3.0
    seed: int = 0
    batch: int = 16

    def validate(self) -> None:
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ParameterError(f"temperature must be finite and > 0, got {self.temperature}")
        if self.batch < 1:
            raise ParameterError("batch must be >= 1")


def category_stats(records) -> dict[CategoryKey, int]:
    """Sample counts per (dialect, task) from manifest-like records."""
    stats: dict[CategoryKey, int] = {}
    for r in records:
        key = CategoryKey(r.dialect, r.task)
        stats[key] = stats.get(key, 0) + 1
    if not stats:
        raise DataError("no records: category stats are empty")
    return stats


def category_probabilities(stats: dict[CategoryKey, int], tau: float) -> dict[CategoryKey, float]:
    """p_c proportional to (1/N_c)^(1/tau), normalized to sum to 1."""
    if not (tau > 0 and math.isfinite(tau)):
        raise ParameterError(f"temperature must be finite and > 0, got {tau}")
    if not stats:
        raise DataError("category stats are empty")
    keys = sorted(stats)
    counts = np.array([stats[k] for k in keys], dtype=np.float64)
    if (counts < 1).any():
        raise ParameterError("all category counts must be >= 1")
    logw = -np.log(counts) / tau
    logw -= logw.max()
    w = np.exp(logw)
    probs = w / w.sum()
    return {k: float(p) for k, p in zip(keys, probs)}


def sample_batch(records, probs: dict[CategoryKey, float], config: SamplerConfig, rng):
    """Draw a batch of utterance ids: category by ``probs``, utterance uniform.

    Returns (ids, rng); the generator advances in place, so repeated calls
    continue the same deterministic stream.
    """
    config.validate()
    by_cat: dict[CategoryKey, list[str]] = {}
    for r in records:
        by_cat.setdefault(CategoryKey(r.dialect, r.task), []).append(r.uid)
    for ids in by_cat.values():
        ids.sort()
    keys = sorted(probs)
    for k in keys:
        if probs[k] > 0 and not by_cat.get(k):
            raise DataError(f"category {k} has positive probability but no utterances")
    p = np.array([probs[k] for k in keys], dtype=np.float64)
    cum = np.cumsum(p)
    cum[-1] = 1.0  # guard rounding at the top end
    draws = rng.random(config.batch)
    cat_idx = np.searchsorted(cum, draws, side="right")
    ids_out: list[str] = []
    for ci in cat_idx:
        pool = by_cat[keys[int(ci)]]
        ids_out.append(pool[int(rng.integers(len(pool)))])
    return ids_out, rng


@dataclass
class FrequencyReport:
    counts: dict[CategoryKey, int]
    frequencies: dict[CategoryKey, float]
    target: dict[CategoryKey, float]
    kl_divergence: float
    draws: int = 0

    def to_json(self) -> str:
        def keyed(d):
            return {str(k): v for k, v in sorted(d.items())}

        payload = {
            "draws": self.draws,
            "counts": keyed(self.counts),
            "frequencies": keyed(self.frequencies),
            "target": keyed(self.target),
            "kl_divergence": self.kl_divergence,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def frequency_report(schedule, target: dict[CategoryKey, float]) -> FrequencyReport:
    """Empirical category frequencies of a schedule plus KL(empirical || target)."""
    schedule = list(schedule)
    if not schedule:
        raise DataError("schedule is empty")
    counts: dict[CategoryKey, int] = {k: 0 for k in target}
    for key in schedule:
        counts[key] = counts.get(key, 0) + 1
    n = len(schedule)
    freqs = {k: c / n for k, c in counts.items()}
    kl = 0.0
    for k, f in freqs.items():
        if f > 0:
            t = target.get(k, 0.0)
            if t <= 0:
                raise DataError(f"schedule contains category {k} with zero target probability")
            kl += f * math.log(f / t)
    return FrequencyReport(
        counts=counts, frequencies=freqs, target=dict(target), kl_divergence=kl, draws=n
    )
