"""Minimal float64 reverse-mode autodiff substrate.

Everything downstream (enhancer, fusion, decoder, CTC) builds its forward and
backward passes on the small op set here. Design constraints:

* float64 everywhere so finite-difference gradient checks are meaningful,
* fixed reduction order (plain numpy ops, serial accumulation) so repeated
  runs are bit-identical,
* no general autodiff ambitions: only the ops this project needs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import (
    BoundsError,
    DeterminismError,
    DimensionError,
    NumericError,
    ParameterError,
    StateError,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 ndarray with tape hooks for reverse-mode differentiation.

    Only scalar outputs can start a backward pass. Gradients accumulate into
    ``.grad`` (same shape as ``.data``); leaves created with
    ``requires_grad=False`` take no part in the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        rg = requires_grad or any(p.requires_grad for p in parents)
        self.requires_grad = rg
        self._parents = tuple(parents) if rg else ()
        self._backward = backward if rg else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar output")
        # Iterative post-order: graphs can be a few hundred nodes deep.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bwd)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = a.data * c

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return Tensor(out, parents=(a,), backward=bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * out)

    return Tensor(out, parents=(a,), backward=bwd)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a.accumulate(g * (cdf + x * pdf))

    return Tensor(out, parents=(a,), backward=bwd)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data.sum())

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g)))

    return Tensor(out, parents=(a,), backward=bwd)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.array(a.data.sum() / n)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g) / n))

    return Tensor(out, parents=(a,), backward=bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {a.data.shape}")
    out = a.data.T

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.T)

    return Tensor(out, parents=(a,), backward=bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {tuple(a.data.shape)} x {tuple(b.data.shape)}"
        )
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Tensor(out, parents=(a, b), backward=bwd)


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows expects a 1-d index array")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise BoundsError(f"row index out of range [0, {n})")
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a.accumulate(acc)

    return Tensor(out, parents=(a,), backward=bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise BoundsError(f"row slice [{start}:{stop}] outside 0..{a.data.shape[0]}")
    out = a.data[start:stop]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[start:stop] = g
            a.accumulate(acc)

    return Tensor(out, parents=(a,), backward=bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[1]):
        raise BoundsError(f"col slice [{start}:{stop}] outside 0..{a.data.shape[1]}")
    out = a.data[:, start:stop]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[:, start:stop] = g
            a.accumulate(acc)

    return Tensor(out, parents=(a,), backward=bwd)


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[off : off + n])
            off += n

    return Tensor(out, parents=tuple(parts), backward=bwd)


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[:, off : off + n])
            off += n

    return Tensor(out, parents=tuple(parts), backward=bwd)


# ---------------------------------------------------------------------------
# normalizers and losses
# ---------------------------------------------------------------------------


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction. Rows sum to 1 within 1e-12."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-d tensor, got {a.data.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            a.accumulate(out * (g - dot))

    return Tensor(out, parents=(a,), backward=bwd)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a 2-d tensor, got {a.data.shape}")
    if np.isnan(a.data).any():
        raise NumericError("log_softmax_rows: NaN in input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g - np.exp(out) * g.sum(axis=1, keepdims=True))

    return Tensor(out, parents=(a,), backward=bwd)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-softmax probability over unmasked positions.

    ``targets`` are class indices, ``mask`` marks the rows that count; with
    no mask every row counts.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs 2-d logits, got {logits.data.shape}")
    m, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (m,):
        raise DimensionError(f"targets shape {targets.shape} != ({m},)")
    if mask is None:
        mask = np.ones(m, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m,):
        raise DimensionError(f"mask shape {mask.shape} != ({m},)")
    if not mask.any():
        raise NumericError("cross_entropy: all positions masked, loss is empty")
    if targets[mask].min() < 0 or targets[mask].max() >= v:
        raise ParameterError(f"target ids must lie in [0, {v})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n_active = int(mask.sum())
    rows = np.arange(m)
    loss = -logp[rows, targets][mask].sum() / n_active

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            d = p.copy()
            d[rows, targets] -= 1.0
            d *= (mask / n_active)[:, None]
            logits.accumulate(float(g) * d)

    return Tensor(np.array(loss), parents=(logits,), backward=bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learnable gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm needs a 2-d tensor, got {x.data.shape}")
    n = x.data.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise DimensionError("layer_norm gain/bias must match the feature width")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            x.accumulate(inv * term)

    return Tensor(out, parents=(x, gain, bias), backward=bwd)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterSet:
    """Named float64 parameters with per-name freeze flags.

    Frozen parameters take no part in the tape (``requires_grad=False``) and
    are never touched by the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise StateError(f"parameter '{name}' already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self._params if n not in self._frozen]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise StateError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter '{name}': stored shape {arr.shape} != {t.data.shape}"
                )
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# optimizer: AdamW with linear warmup into cosine decay
# ---------------------------------------------------------------------------


@dataclass
class CosineSchedule:
    """lr ramps linearly over the warmup steps, then follows a cosine to 0."""

    base_lr: float
    total_steps: int
    warmup_frac: float = 0.05

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.total_steps)))

    def lr_at(self, step: int) -> float:
        w = self.warmup_steps
        if step < w:
            return self.base_lr * (step + 1) / w
        span = max(1, self.total_steps - w)
        progress = min(1.0, (step - w) / span)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """AdamW moments for the trainable subset of a ParameterSet."""

    schedule: CosineSchedule
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(
    params: ParameterSet,
    lr: float,
    total_steps: int,
    weight_decay: float = 0.01,
    warmup_frac: float = 0.05,
) -> OptimizerState:
    state = OptimizerState(
        schedule=CosineSchedule(base_lr=lr, total_steps=total_steps, warmup_frac=warmup_frac),
        weight_decay=weight_decay,
    )
    for name in params.trainable_names():
        state.m[name] = np.zeros_like(params[name].data)
        state.v[name] = np.zeros_like(params[name].data)
    return state


def optimizer_step(params: ParameterSet, state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update; clears gradients afterwards."""
    lr = state.schedule.lr_at(state.step_count)
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in params.trainable_names():
        p = params[name]
        if p.grad is None:
            raise StateError(f"missing gradient for parameter '{name}'")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
    state.step_count += 1
    params.zero_grads()


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    epsilon: float
    per_param: dict[str, float]
    max_rel_err: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(
    fn,
    params: ParameterSet,
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(params)`` against central differences.

    ``fn`` must be deterministic (checked by double evaluation) and return a
    scalar Tensor. Relative error uses a floored denominator
    ``max(|analytic|, |numeric|, rel_floor)`` so that finite-difference noise
    on near-zero entries does not register as failure.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ParameterError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    v1 = float(fn(params).item())
    v2 = float(fn(params).item())
    if v1 != v2 or not math.isfinite(v1):
        raise DeterminismError(f"fn is not deterministic: {v1!r} vs {v2!r}")

    params.zero_grads()
    out = fn(params)
    out.backward()
    analytic = {}
    for name in params.trainable_names():
        g = params[name].grad
        analytic[name] = np.zeros_like(params[name].data) if g is None else g.copy()
    params.zero_grads()

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name in params.trainable_names():
        flat = params[name].data.reshape(-1)
        n = flat.size
        if max_entries is None or n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(fn(params).item())
            flat[i] = orig - epsilon
            fm = float(fn(params).item())
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            if rel > worst:
                worst = rel
        per_param[name] = worst
    overall = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(epsilon=epsilon, per_param=per_param, max_rel_err=overall)


# ---------------------------------------------------------------------------
# checkpoint I/O: one JSON index line, then raw little-endian float64 payload
# ---------------------------------------------------------------------------


def save_checkpoint(params: ParameterSet, path) -> None:
    index: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(params.names()):
        arr = params[name].data
        raw = arr.astype("<f8").tobytes(order="C")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(b"\n")
        for c in chunks:
            f.write(c)
    os.replace(tmp, str(path))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(str(path), "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    index = json.loads(raw[:nl].decode("utf-8"))
    payload = raw[nl + 1 :]
    out: dict[str, np.ndarray] = {}
    for name, meta in index.items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=meta["offset"])
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
