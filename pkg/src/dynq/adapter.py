"""Dynamic-query adapter: projector + transformer enhancer, ASR head,
peak-frame query selection, and cross-attention fusion.

The enhancer output doubles as the full-length key/value sequence; the ASR
head's posteriors drive both the CTC loss and the peak-frame selection that
defines the queries. A single-affine baseline (`linear_baseline_forward`)
provides the no-compression comparison system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ctc import PosteriorGrid
from .errors import DimensionError, ParameterError
from .shrink import ShrinkResult, shrink
from .tensor import (
    ParameterSet,
    Tensor,
    add,
    as_tensor,
    concat_cols,
    constant,
    exp,
    gelu,
    layer_norm,
    log_softmax_rows,
    matmul,
    mul,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)


@dataclass
class AdapterConfig:
    d_audio: int = 16
    d_model: int = 64
    n_layers: int = 2
    heads: int = 4
    d_ff: int = 128
    vocab: int = 12
    logit_scale_init: float = 2.3026
    tie_asr_head: bool = True
    max_frames: int = 512

    def __post_init__(self):
        for name in ("d_audio", "d_model", "heads", "d_ff", "vocab", "max_frames"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ParameterError("n_layers must be >= 0")
        if self.d_model % self.heads != 0:
            raise ParameterError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )


@dataclass
class FusionOutput:
    z: Tensor  # [n_q, d_model]
    attn: np.ndarray  # [n_q, T], head-averaged attention weights


@dataclass
class AdapterOutput:
    z: Tensor
    grid: PosteriorGrid
    shrink: ShrinkResult
    attn: np.ndarray


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_attention_params(ps: ParameterSet, prefix: str, d_model: int, rng) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        ps.add(f"{prefix}.{name}", _uniform(rng, d_model, (d_model, d_model)))
        ps.add(f"{prefix}.{name[1]}b", np.zeros(d_model))


def _add_block_params(ps: ParameterSet, prefix: str, d_model: int, d_ff: int, rng) -> None:
    ps.add(f"{prefix}.ln1.g", np.ones(d_model))
    ps.add(f"{prefix}.ln1.b", np.zeros(d_model))
    _add_attention_params(ps, f"{prefix}.attn", d_model, rng)
    ps.add(f"{prefix}.ln2.g", np.ones(d_model))
    ps.add(f"{prefix}.ln2.b", np.zeros(d_model))
    ps.add(f"{prefix}.ffn.w1", _uniform(rng, d_model, (d_model, d_ff)))
    ps.add(f"{prefix}.ffn.b1", np.zeros(d_ff))
    ps.add(f"{prefix}.ffn.w2", _uniform(rng, d_ff, (d_ff, d_model)))
    ps.add(f"{prefix}.ffn.b2", np.zeros(d_model))


def init_adapter_params(
    ps: ParameterSet,
    cfg: AdapterConfig,
    rng,
    tie_source: np.ndarray | None = None,
) -> None:
    """Register all adapter parameters (fully trainable).

    With ``tie_asr_head`` the non-blank columns of the ASR weight start from
    ``tie_source`` (the decoder's token embedding rows), then train freely.
    """
    ps.add("enh.proj.w", _uniform(rng, cfg.d_audio, (cfg.d_audio, cfg.d_model)))
    ps.add("enh.proj.b", np.zeros(cfg.d_model))
    ps.add("enh.pos", _uniform(rng, cfg.d_model, (cfg.max_frames, cfg.d_model)))
    for i in range(cfg.n_layers):
        _add_block_params(ps, f"enh.blk{i}", cfg.d_model, cfg.d_ff, rng)
    asr_w = _uniform(rng, cfg.d_model, (cfg.d_model, cfg.vocab + 1))
    if cfg.tie_asr_head:
        if tie_source is None:
            raise ParameterError("tie_asr_head set but no embedding rows supplied")
        if tie_source.shape != (cfg.vocab, cfg.d_model):
            raise DimensionError(
                f"tie source shape {tie_source.shape} != ({cfg.vocab}, {cfg.d_model})"
            )
        asr_w[:, : cfg.vocab] = tie_source.T
    ps.add("asr.w", asr_w)
    ps.add("asr.b", np.zeros(cfg.vocab + 1))
    ps.add("asr.logit_scale", np.array([cfg.logit_scale_init]))
    _add_attention_params(ps, "fuse", cfg.d_model, rng)


def init_linear_params(ps: ParameterSet, cfg: AdapterConfig, rng) -> None:
    ps.add("lin.w", _uniform(rng, cfg.d_audio, (cfg.d_audio, cfg.d_model)))
    ps.add("lin.b", np.zeros(cfg.d_model))


def multi_head_attention(
    ps: ParameterSet,
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Standard multi-head attention; returns output and head-averaged weights."""
    d_model = q_in.data.shape[1]
    if kv_in.data.shape[1] != d_model:
        raise DimensionError(
            f"query width {d_model} != key/value width {kv_in.data.shape[1]}"
        )
    d_k = d_model // heads
    q_all = add(matmul(q_in, ps[f"{prefix}.wq"]), ps[f"{prefix}.qb"])
    k_all = add(matmul(kv_in, ps[f"{prefix}.wk"]), ps[f"{prefix}.kb"])
    v_all = add(matmul(kv_in, ps[f"{prefix}.wv"]), ps[f"{prefix}.vb"])
    mask_t = constant(mask) if mask is not None else None
    outs = []
    attn_sum = np.zeros((q_in.data.shape[0], kv_in.data.shape[0]))
    for h in range(heads):
        lo, hi = h * d_k, (h + 1) * d_k
        q = slice_cols(q_all, lo, hi)
        k = slice_cols(k_all, lo, hi)
        v = slice_cols(v_all, lo, hi)
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
        if mask_t is not None:
            scores = add(scores, mask_t)
        weights = softmax_rows(scores)
        attn_sum += weights.data
        outs.append(matmul(weights, v))
    merged = concat_cols(outs) if heads > 1 else outs[0]
    out = add(matmul(merged, ps[f"{prefix}.wo"]), ps[f"{prefix}.ob"])
    return out, attn_sum / heads


def _encoder_block(ps: ParameterSet, prefix: str, x: Tensor, heads: int) -> Tensor:
    h = layer_norm(x, ps[f"{prefix}.ln1.g"], ps[f"{prefix}.ln1.b"])
    attn_out, _ = multi_head_attention(ps, f"{prefix}.attn", h, h, heads)
    x = add(x, attn_out)
    h = layer_norm(x, ps[f"{prefix}.ln2.g"], ps[f"{prefix}.ln2.b"])
    ff = add(matmul(gelu(add(matmul(h, ps[f"{prefix}.ffn.w1"]), ps[f"{prefix}.ffn.b1"])), ps[f"{prefix}.ffn.w2"]), ps[f"{prefix}.ffn.b2"])
    return add(x, ff)


def enhance(h_raw, cfg: AdapterConfig, ps: ParameterSet) -> Tensor:
    """Project d_audio -> d_model, add learned positions, run pre-norm blocks."""
    x = as_tensor(h_raw)
    if x.data.ndim != 2 or x.data.shape[1] != cfg.d_audio:
        raise DimensionError(
            f"expected features [T, {cfg.d_audio}], got {tuple(x.data.shape)}"
        )
    T = x.data.shape[0]
    if T > cfg.max_frames:
        raise DimensionError(f"{T} frames exceed max_frames={cfg.max_frames}")
    out = add(matmul(x, ps["enh.proj.w"]), ps["enh.proj.b"])
    out = add(out, slice_rows(ps["enh.pos"], 0, T))
    for i in range(cfg.n_layers):
        out = _encoder_block(ps, f"enh.blk{i}", out, cfg.heads)
    return out


def asr_head(enhanced: Tensor, cfg: AdapterConfig, ps: ParameterSet) -> PosteriorGrid:
    """Affine map to V+1 logits, scaled by exp(learnable logit scale), log-softmaxed."""
    logits = add(matmul(enhanced, ps["asr.w"]), ps["asr.b"])
    logits = mul(logits, exp(ps["asr.logit_scale"]))
    return PosteriorGrid(log_probs=log_softmax_rows(logits), vocab=cfg.vocab)


def cross_attend(q: Tensor, kv: Tensor, cfg: AdapterConfig, ps: ParameterSet) -> FusionOutput:
    """Multi-head cross-attention from dynamic queries over the full sequence,
    with a residual connection so each output row keeps its query identity."""
    out, attn = multi_head_attention(ps, "fuse", q, kv, cfg.heads)
    return FusionOutput(z=add(q, out), attn=attn)


def adapter_forward(
    h_raw,
    cfg: AdapterConfig,
    ps: ParameterSet,
    indices_override: np.ndarray | None = None,
) -> AdapterOutput:
    """Full pipeline: enhance -> ASR head -> peak selection -> fuse.

    ``indices_override`` pins the selected frames; gradient checks use it to
    keep the discrete selection fixed while parameters are perturbed.
    """
    enhanced = enhance(h_raw, cfg, ps)
    grid = asr_head(enhanced, cfg, ps)
    if indices_override is None:
        result = shrink(grid, enhanced)
    else:
        from .shrink import build_dynamic_queries

        idx = np.asarray(indices_override, dtype=np.int64)
        labels = grid.log_probs.data[idx].argmax(axis=1)
        result = ShrinkResult(
            indices=idx, labels=labels, queries=build_dynamic_queries(enhanced, idx)
        )
    fused = cross_attend(result.queries, enhanced, cfg, ps)
    return AdapterOutput(z=fused.z, grid=grid, shrink=result, attn=fused.attn)


def linear_baseline_forward(h_raw, ps: ParameterSet) -> Tensor:
    """Per-frame affine map only: no compression, no CTC branch."""
    x = as_tensor(h_raw)
    return add(matmul(x, ps["lin.w"]), ps["lin.b"])
