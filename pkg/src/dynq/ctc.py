"""CTC loss, decoding, and the exponential-time oracle used to verify them.

The loss is the standard forward recursion over the blank-augmented label
lattice, carried out entirely in log space. The blank symbol sits at index
``vocab`` (the last column of the posterior grid). Gradients with respect to
the log-probability grid come from the forward/backward occupancies, so the
loss plugs straight into the tape in :mod:`dynq.tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AlignmentInfeasibleError,
    NumericError,
    ParameterError,
    SizeError,
)
from .tensor import Tensor, as_tensor

NEG_INF = -np.inf

BRUTE_FORCE_LIMIT = 10**7


@dataclass
class PosteriorGrid:
    """Per-frame log-probabilities over vocabulary-plus-blank.

    Rows must be normalized: log-sum-exp of each row is 0 within 1e-9.
    """

    log_probs: Tensor
    vocab: int

    def __post_init__(self):
        self.log_probs = as_tensor(self.log_probs)
        lp = self.log_probs.data
        if lp.ndim != 2:
            raise NumericError(f"posterior grid must be 2-d, got shape {lp.shape}")
        if lp.shape[1] != self.vocab + 1:
            raise NumericError(
                f"grid width {lp.shape[1]} != vocab+1 = {self.vocab + 1}"
            )
        if np.isnan(lp).any():
            raise NumericError("posterior grid contains NaN")
        row_lse = _logsumexp_rows(lp)
        if np.abs(row_lse).max() > 1e-9:
            raise NumericError("posterior grid rows are not normalized")

    @property
    def frames(self) -> int:
        return self.log_probs.data.shape[0]

    @property
    def blank(self) -> int:
        return self.vocab


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))).reshape(-1)


def _validate_target(target, vocab: int) -> np.ndarray:
    target = np.asarray(list(target), dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= vocab):
        raise ParameterError(f"target ids must lie in [0, {vocab})")
    return target


def min_frames(target) -> int:
    """Least number of frames that can emit ``target``: L plus one per adjacent repeat."""
    target = np.asarray(list(target), dtype=np.int64)
    repeats = int((target[1:] == target[:-1]).sum()) if target.size > 1 else 0
    return int(target.size) + repeats


def _augmented(target: np.ndarray, blank: int) -> np.ndarray:
    aug = np.full(2 * target.size + 1, blank, dtype=np.int64)
    aug[1::2] = target
    return aug


def _forward(lp: np.ndarray, aug: np.ndarray, blank: int) -> np.ndarray:
    T = lp.shape[0]
    S = aug.size
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = (aug[2:] != blank) & (aug[2:] != aug[:-2])
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, aug[0]]
    if S > 1:
        alpha[0, 1] = lp[0, aug[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        acc = np.logaddexp(stay, step)
        if S > 2:
            skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
            acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lp[t, aug]
    return alpha


def _backward_lattice(lp: np.ndarray, aug: np.ndarray, blank: int) -> np.ndarray:
    T = lp.shape[0]
    S = aug.size
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[:-2] = (aug[:-2] != blank) & (aug[:-2] != aug[2:])
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, aug[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, aug[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        acc = np.logaddexp(stay, step)
        if S > 2:
            skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
            acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        beta[t] = acc + lp[t, aug]
    return beta


def ctc_loss(grid: PosteriorGrid, target) -> Tensor:
    """-log P(target | grid), differentiable w.r.t. the log-probability grid."""
    target = _validate_target(target, grid.vocab)
    T = grid.frames
    need = min_frames(target)
    if T < need:
        raise AlignmentInfeasibleError(
            f"cannot align {target.size} labels (min {need} frames) in {T} frames"
        )
    lp_tensor = grid.log_probs
    lp = lp_tensor.data
    blank = grid.blank
    aug = _augmented(target, blank)
    S = aug.size

    alpha = _forward(lp, aug, blank)
    if S > 1:
        log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, 0]
    loss = -log_p

    def bwd(g):
        if not lp_tensor.requires_grad:
            return
        beta = _backward_lattice(lp, aug, blank)
        # occupancy: for each (t, k), log-sum over lattice states with label k
        occ = np.full_like(lp, NEG_INF)
        ab = alpha + beta
        for s in range(S):
            k = aug[s]
            occ[:, k] = np.logaddexp(occ[:, k], ab[:, s])
        d = np.zeros_like(lp)
        finite = occ > NEG_INF
        # d(-logP)/d lp[t,k] = -exp(occ - lp - logP); emission double-counted in
        # alpha*beta, hence the -lp term.
        d[finite] = -np.exp(occ[finite] - lp[finite] - log_p)
        lp_tensor.accumulate(float(g) * d)

    return Tensor(np.array(loss), parents=(lp_tensor,), backward=bwd)


def collapse(path, blank: int) -> list[int]:
    """Remove consecutive repeats, then drop blanks (CTC many-to-one map)."""
    out: list[int] = []
    prev = -1
    for p in path:
        if p != prev:
            if p != blank:
                out.append(int(p))
            prev = p
    return out


def brute_force_path_sum(grid: PosteriorGrid, target) -> float:
    """Total probability of all frame paths collapsing to ``target``.

    Exhaustive enumeration over (vocab+1)^frames paths; refuses instances
    larger than the documented budget.
    """
    target = _validate_target(target, grid.vocab)
    T = grid.frames
    n_sym = grid.vocab + 1
    n_paths = n_sym**T
    if n_paths > BRUTE_FORCE_LIMIT:
        raise SizeError(f"{n_paths} paths exceed the brute-force limit {BRUTE_FORCE_LIMIT}")
    lp = grid.log_probs.data
    blank = grid.blank
    want = [int(x) for x in target]
    total = 0.0
    path = np.zeros(T, dtype=np.int64)
    # mixed-radix counting over symbols keeps memory flat
    for code in range(n_paths):
        c = code
        for t in range(T):
            path[t] = c % n_sym
            c //= n_sym
        if collapse(path, blank) == want:
            total += float(np.exp(lp[np.arange(T), path].sum()))
    return total


def greedy_decode(grid: PosteriorGrid) -> list[int]:
    """Frame-wise argmax, collapse repeats, drop blanks. Ties pick the lower id."""
    lp = grid.log_probs.data
    labels = lp.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    return collapse(labels, grid.blank)
