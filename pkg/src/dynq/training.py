"""Joint training: next-token prediction through a small causal decoder plus
weighted CTC through the ASR head.

The decoder stands in for a frozen language model: its transformer blocks are
frozen and adapt only through low-rank (LoRA) updates on the q/k/v
projections, while the token/position tables stay trainable because, unlike a
pretrained model, they start random and carry no usable structure. The
adapter (or the linear baseline) is always fully trainable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import (
    AdapterConfig,
    adapter_forward,
    init_adapter_params,
    init_linear_params,
    linear_baseline_forward,
)
from .corpus import load_all_features, load_manifest, load_meta
from .ctc import ctc_loss
from .errors import DataError, DimensionError, NumericError, ParameterError
from .sampler import SamplerConfig, category_probabilities, category_stats, sample_batch
from .tensor import (
    ParameterSet,
    Tensor,
    add,
    as_tensor,
    concat_cols,
    concat_rows,
    constant,
    cross_entropy,
    gather_rows,
    gelu,
    init_optimizer,
    layer_norm,
    load_checkpoint,
    matmul,
    optimizer_step,
    save_checkpoint,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)

DYNAMIC = "dynamic"
LINEAR = "linear"
ADAPTER_KINDS = (DYNAMIC, LINEAR)


@dataclass(frozen=True)
class VocabLayout:
    """Decoder token space: source block, target block, then specials."""

    phonemes: int

    @property
    def pad(self) -> int:
        return 2 * self.phonemes

    @property
    def bos(self) -> int:
        return 2 * self.phonemes + 1

    @property
    def eos(self) -> int:
        return 2 * self.phonemes + 2

    @property
    def size(self) -> int:
        return 2 * self.phonemes + 5

    def prompt_id(self, task: str) -> int:
        if task == "asr":
            return 2 * self.phonemes + 3
        if task == "st":
            return 2 * self.phonemes + 4
        raise ParameterError(f"unknown task '{task}'")


@dataclass
class TrainConfig:
    lam: float = 0.3  # CTC weight in the joint objective
    lr: float = 1e-3
    steps: int = 600
    batch: int = 16
    lora_rank: int = 4
    lora_alpha: float = 16.0
    seed: int = 0
    checkpoint_every: int = 500
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ff: int = 128
    decoder_max_len: int = 128
    max_decode_len: int = 64
    use_lora: bool = True
    freeze_decoder_blocks: bool = True
    train_embeddings: bool = True

    def validate(self) -> None:
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if self.lora_rank < 1:
            raise ParameterError("lora rank must be >= 1")
        if self.steps < 1 or self.batch < 1:
            raise ParameterError("steps and batch must be >= 1")


@dataclass
class LossBreakdown:
    ntp: float
    ctc: float | None
    lam: float
    total: float


def total_loss(ntp: Tensor, ctc: Tensor | None, lam: float) -> tuple[Tensor, LossBreakdown]:
    """Joint objective: ntp + lam * ctc; the CTC branch may be absent."""
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    if ctc is None:
        tot = ntp
        bd = LossBreakdown(ntp=ntp.item(), ctc=None, lam=lam, total=ntp.item())
    else:
        tot = add(ntp, scale(ctc, lam))
        bd = LossBreakdown(ntp=ntp.item(), ctc=ctc.item(), lam=lam, total=tot.item())
    return tot, bd


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


def lora_wrap(ps: ParameterSet, weight_name: str, rank: int, alpha: float, rng):
    """Attach trainable low-rank factors to a frozen weight.

    A starts small and random, B starts at zero, so at initialization the
    adapted map equals the base map exactly. Returns ``apply(x)`` computing
    x @ W + (alpha/rank) * (x @ A) @ B.
    """
    w = ps[weight_name]
    d_in, d_out = w.data.shape
    if rank > min(d_in, d_out):
        raise ParameterError(f"rank {rank} exceeds min dim of {weight_name} ({min(d_in, d_out)})")
    bound = 1.0 / math.sqrt(d_in)
    ps.add(f"{weight_name}.lora_a", rng.uniform(-bound, bound, size=(d_in, rank)))
    ps.add(f"{weight_name}.lora_b", np.zeros((rank, d_out)))

    def apply(x: Tensor) -> Tensor:
        return lora_apply(ps, weight_name, x, rank, alpha)

    return apply


def lora_apply(ps: ParameterSet, weight_name: str, x: Tensor, rank: int, alpha: float) -> Tensor:
    base = matmul(x, ps[weight_name])
    a_name = f"{weight_name}.lora_a"
    if a_name not in ps:
        return base
    low = matmul(matmul(x, ps[a_name]), ps[f"{weight_name}.lora_b"])
    return add(base, scale(low, alpha / rank))


# ---------------------------------------------------------------------------
# toy causal decoder
# ---------------------------------------------------------------------------


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_decoder_params(
    ps: ParameterSet,
    tcfg: TrainConfig,
    vocab: VocabLayout,
    d_model: int,
    rng,
    lora_rng,
) -> None:
    frozen = tcfg.freeze_decoder_blocks
    tables_frozen = not tcfg.train_embeddings
    ps.add("dec.emb", _uniform(rng, d_model, (vocab.size, d_model)), frozen=tables_frozen)
    ps.add("dec.pos", _uniform(rng, d_model, (tcfg.decoder_max_len, d_model)), frozen=tables_frozen)
    for i in range(tcfg.decoder_layers):
        p = f"dec.blk{i}"
        ps.add(f"{p}.ln1.g", np.ones(d_model), frozen=frozen)
        ps.add(f"{p}.ln1.b", np.zeros(d_model), frozen=frozen)
        for w, b in (("wq", "qb"), ("wk", "kb"), ("wv", "vb"), ("wo", "ob")):
            ps.add(f"{p}.attn.{w}", _uniform(rng, d_model, (d_model, d_model)), frozen=frozen)
            ps.add(f"{p}.attn.{b}", np.zeros(d_model), frozen=frozen)
        ps.add(f"{p}.ln2.g", np.ones(d_model), frozen=frozen)
        ps.add(f"{p}.ln2.b", np.zeros(d_model), frozen=frozen)
        ps.add(f"{p}.ffn.w1", _uniform(rng, d_model, (d_model, tcfg.decoder_ff)), frozen=frozen)
        ps.add(f"{p}.ffn.b1", np.zeros(tcfg.decoder_ff), frozen=frozen)
        ps.add(f"{p}.ffn.w2", _uniform(rng, tcfg.decoder_ff, (tcfg.decoder_ff, d_model)), frozen=frozen)
        ps.add(f"{p}.ffn.b2", np.zeros(d_model), frozen=frozen)
        if tcfg.use_lora:
            for w in ("wq", "wk", "wv"):
                lora_wrap(ps, f"{p}.attn.{w}", tcfg.lora_rank, tcfg.lora_alpha, lora_rng)
    ps.add("dec.ln_f.g", np.ones(d_model), frozen=frozen)
    ps.add("dec.ln_f.b", np.zeros(d_model), frozen=frozen)


def _decoder_attention(ps, prefix: str, x: Tensor, heads: int, mask, tcfg: TrainConfig) -> Tensor:
    d_model = x.data.shape[1]
    d_k = d_model // heads
    q_all = add(lora_apply(ps, f"{prefix}.wq", x, tcfg.lora_rank, tcfg.lora_alpha), ps[f"{prefix}.qb"])
    k_all = add(lora_apply(ps, f"{prefix}.wk", x, tcfg.lora_rank, tcfg.lora_alpha), ps[f"{prefix}.kb"])
    v_all = add(lora_apply(ps, f"{prefix}.wv", x, tcfg.lora_rank, tcfg.lora_alpha), ps[f"{prefix}.vb"])
    mask_t = constant(mask)
    outs = []
    for h in range(heads):
        lo, hi = h * d_k, (h + 1) * d_k
        q = slice_cols(q_all, lo, hi)
        k = slice_cols(k_all, lo, hi)
        v = slice_cols(v_all, lo, hi)
        scores = add(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k)), mask_t)
        outs.append(matmul(softmax_rows(scores), v))
    merged = concat_cols(outs) if heads > 1 else outs[0]
    return add(matmul(merged, ps[f"{prefix}.wo"]), ps[f"{prefix}.ob"])


def decoder_forward(
    ps: ParameterSet,
    tcfg: TrainConfig,
    vocab: VocabLayout,
    speech: Tensor,
    prompt_ids,
    teacher_ids,
) -> Tensor:
    """Teacher-forced decoder pass over [speech; prompt; BOS; teacher tokens].

    Returns logits [S, vocab.size] tied to the embedding table.
    """
    ids = list(prompt_ids) + [vocab.bos] + list(teacher_ids)
    text = gather_rows(ps["dec.emb"], np.asarray(ids, dtype=np.int64))
    x = concat_rows([as_tensor(speech), text])
    S = x.data.shape[0]
    if S > tcfg.decoder_max_len:
        raise DimensionError(f"sequence length {S} exceeds decoder_max_len={tcfg.decoder_max_len}")
    x = add(x, slice_rows(ps["dec.pos"], 0, S))
    mask = np.triu(np.full((S, S), -1e9), k=1)
    for i in range(tcfg.decoder_layers):
        p = f"dec.blk{i}"
        h = layer_norm(x, ps[f"{p}.ln1.g"], ps[f"{p}.ln1.b"])
        x = add(x, _decoder_attention(ps, f"{p}.attn", h, tcfg.decoder_heads, mask, tcfg))
        h = layer_norm(x, ps[f"{p}.ln2.g"], ps[f"{p}.ln2.b"])
        ff = add(
            matmul(gelu(add(matmul(h, ps[f"{p}.ffn.w1"]), ps[f"{p}.ffn.b1"])), ps[f"{p}.ffn.w2"]),
            ps[f"{p}.ffn.b2"],
        )
        x = add(x, ff)
    h = layer_norm(x, ps["dec.ln_f.g"], ps["dec.ln_f.b"])
    return matmul(h, transpose(ps["dec.emb"]))


def ntp_loss(
    ps: ParameterSet,
    tcfg: TrainConfig,
    vocab: VocabLayout,
    speech: Tensor,
    prompt_ids,
    target_ids,
) -> Tensor:
    """Cross-entropy over target positions only (speech and prompt masked out).

    Teacher forcing: position BOS predicts the first target token, each target
    position predicts its successor, and the last one predicts EOS.
    """
    target_ids = list(target_ids)
    if not target_ids:
        raise ParameterError("target must be non-empty")
    logits = decoder_forward(ps, tcfg, vocab, speech, prompt_ids, target_ids)
    S = logits.data.shape[0]
    L = len(target_ids)
    first = S - L - 1  # index of the BOS position
    targets = np.zeros(S, dtype=np.int64)
    mask = np.zeros(S, dtype=bool)
    for j, tok in enumerate(target_ids):
        targets[first + j] = tok
        mask[first + j] = True
    targets[first + L] = vocab.eos
    mask[first + L] = True
    return cross_entropy(logits, targets, mask)


def greedy_generate(
    ps: ParameterSet,
    tcfg: TrainConfig,
    vocab: VocabLayout,
    speech: Tensor,
    prompt_ids,
    max_len: int | None = None,
) -> list[int]:
    """Deterministic argmax decoding; stops at EOS or the length cap."""
    cap = tcfg.max_decode_len if max_len is None else max_len
    generated: list[int] = []
    for _ in range(cap):
        logits = decoder_forward(ps, tcfg, vocab, speech, prompt_ids, generated)
        nxt = int(logits.data[-1].argmax())
        if nxt == vocab.eos:
            break
        generated.append(nxt)
    return generated


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


def build_model(
    phonemes: int,
    acfg: AdapterConfig,
    tcfg: TrainConfig,
    adapter_kind: str = DYNAMIC,
) -> tuple[ParameterSet, VocabLayout]:
    """Create all parameters for one system, deterministically from the seed.

    The decoder stream is independent of the adapter kind, so dynamic and
    linear systems share identical decoder initializations for a given seed.
    """
    if adapter_kind not in ADAPTER_KINDS:
        raise ParameterError(f"adapter kind must be one of {ADAPTER_KINDS}")
    tcfg.validate()
    vocab = VocabLayout(phonemes)
    root = np.random.SeedSequence(tcfg.seed)
    dec_ss, adapter_ss, lora_ss = root.spawn(3)
    ps = ParameterSet()
    init_decoder_params(
        ps, tcfg, vocab, acfg.d_model, np.random.default_rng(dec_ss), np.random.default_rng(lora_ss)
    )
    if adapter_kind == DYNAMIC:
        tie = ps["dec.emb"].data[: acfg.vocab].copy() if acfg.tie_asr_head else None
        init_adapter_params(ps, acfg, np.random.default_rng(adapter_ss), tie_source=tie)
    else:
        init_linear_params(ps, acfg, np.random.default_rng(adapter_ss))
    return ps, vocab


def utterance_losses(
    ps: ParameterSet,
    acfg: AdapterConfig,
    tcfg: TrainConfig,
    vocab: VocabLayout,
    record,
    features: np.ndarray,
    adapter_kind: str,
) -> tuple[Tensor, LossBreakdown, int]:
    """Forward one utterance; returns (total tensor, breakdown, audio tokens)."""
    target = record.transcript if record.task == "asr" else record.translation
    prompt = [vocab.prompt_id(record.task)]
    if adapter_kind == DYNAMIC:
        out = adapter_forward(features, acfg, ps)
        ctc_t = ctc_loss(out.grid, record.transcript)
        ntp_t = ntp_loss(ps, tcfg, vocab, out.z, prompt, target)
        tot, bd = total_loss(ntp_t, ctc_t, tcfg.lam)
        return tot, bd, out.shrink.n_q
    speech = linear_baseline_forward(features, ps)
    ntp_t = ntp_loss(ps, tcfg, vocab, speech, prompt, target)
    tot, bd = total_loss(ntp_t, None, tcfg.lam)
    return tot, bd, features.shape[0]


@dataclass
class TrainResult:
    run_dir: Path
    log_path: Path
    checkpoint_path: Path
    steps: int


def train_run(
    corpus_dir,
    out_dir,
    acfg: AdapterConfig,
    tcfg: TrainConfig,
    scfg: SamplerConfig,
    adapter_kind: str = DYNAMIC,
    dialects: list[str] | None = None,
    resolved_config: dict | None = None,
) -> TrainResult:
    """Run the joint optimization loop and write log + checkpoints.

    Fully deterministic: (seed, configs, manifest) fixes every byte of the
    training log and of the checkpoints.
    """
    tcfg.validate()
    scfg.validate()
    corpus_dir = Path(corpus_dir)
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    meta = load_meta(corpus_dir)
    records = [r for r in load_manifest(corpus_dir) if r.split == "train"]
    if dialects:
        keep = set(dialects)
        records = [r for r in records if r.dialect in keep]
    if not records:
        raise DataError("no training utterances after filtering")
    feats = load_all_features(corpus_dir, records, meta["d_audio"])
    by_uid = {r.uid: r for r in records}

    stats = category_stats(records)
    probs = category_probabilities(stats, scfg.temperature)

    ps, vocab = build_model(meta["phonemes"], acfg, tcfg, adapter_kind)
    opt = init_optimizer(
        ps, tcfg.lr, tcfg.steps, weight_decay=tcfg.weight_decay, warmup_frac=tcfg.warmup_frac
    )
    sample_rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(4)[3])

    if resolved_config is not None:
        (run_dir / "resolved_config.json").write_text(
            json.dumps(resolved_config, indent=2, sort_keys=True) + "\n"
        )

    batch_cfg = SamplerConfig(temperature=scfg.temperature, seed=scfg.seed, batch=tcfg.batch)
    log_path = run_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_f:
        for step in range(tcfg.steps):
            ids, sample_rng = sample_batch(records, probs, batch_cfg, sample_rng)
            totals: list[Tensor] = []
            ntp_vals: list[float] = []
            ctc_vals: list[float] = []
            nq_vals: list[int] = []
            for uid in ids:
                rec = by_uid[uid]
                tot, bd, n_audio = utterance_losses(
                    ps, acfg, tcfg, vocab, rec, feats[uid], adapter_kind
                )
                totals.append(tot)
                ntp_vals.append(bd.ntp)
                if bd.ctc is not None:
                    ctc_vals.append(bd.ctc)
                nq_vals.append(n_audio)
            acc = totals[0]
            for t in totals[1:]:
                acc = add(acc, t)
            batch_loss = scale(acc, 1.0 / len(totals))
            loss_val = batch_loss.item()
            if not math.isfinite(loss_val):
                dump = {
                    "step": step,
                    "batch": ids,
                    "ntp": ntp_vals,
                    "ctc": ctc_vals,
                }
                (run_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2) + "\n")
                raise NumericError(f"non-finite loss at step {step}; batch dumped")
            ps.zero_grads()
            batch_loss.backward()
            lr_now = opt.schedule.lr_at(opt.step_count)
            optimizer_step(ps, opt)
            entry = {
                "step": step,
                "ntp": sum(ntp_vals) / len(ntp_vals),
                "ctc": (sum(ctc_vals) / len(ctc_vals)) if ctc_vals else None,
                "total": loss_val,
                "lr": lr_now,
                "mean_nq": sum(nq_vals) / len(nq_vals),
            }
            log_f.write(json.dumps(entry, sort_keys=True) + "\n")
            if tcfg.checkpoint_every > 0 and (step + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(ps, ckpt_dir / f"step_{step + 1:06d}.ckpt")
    final = ckpt_dir / "final.ckpt"
    save_checkpoint(ps, final)
    return TrainResult(run_dir=run_dir, log_path=log_path, checkpoint_path=final, steps=tcfg.steps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_checkpoint(
    checkpoint_path,
    corpus_dir,
    task: str,
    acfg: AdapterConfig,
    tcfg: TrainConfig,
    adapter_kind: str = DYNAMIC,
    split: str = "test",
    dialects: list[str] | None = None,
    out_path=None,
) -> list[dict]:
    """Greedy-decode every utterance of ``task`` in ``split``; write JSONL rows.

    Each row records reference and hypothesis token ids plus the audio-token
    count (n_q for the dynamic adapter, frame count for the linear baseline).
    """
    if task not in ("asr", "st"):
        raise ParameterError(f"task must be 'asr' or 'st', got '{task}'")
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    corpus_dir = Path(corpus_dir)
    meta = load_meta(corpus_dir)
    records = [r for r in load_manifest(corpus_dir) if r.split == split and r.task == task]
    if dialects:
        keep = set(dialects)
        records = [r for r in records if r.dialect in keep]
    if not records:
        raise DataError(f"no '{task}' utterances in split '{split}'")
    feats = load_all_features(corpus_dir, records, meta["d_audio"])

    ps, vocab = build_model(meta["phonemes"], acfg, tcfg, adapter_kind)
    ps.load_state(load_checkpoint(checkpoint_path))

    rows: list[dict] = []
    for rec in records:
        x = feats[rec.uid]
        if adapter_kind == DYNAMIC:
            out = adapter_forward(x, acfg, ps)
            speech = out.z
            audio_tokens = out.shrink.n_q
        else:
            speech = linear_baseline_forward(x, ps)
            audio_tokens = x.shape[0]
        hyp = greedy_generate(ps, tcfg, vocab, speech, [vocab.prompt_id(task)])
        reference = rec.transcript if task == "asr" else rec.translation
        rows.append(
            {
                "uid": rec.uid,
                "dialect": rec.dialect,
                "task": task,
                "reference": list(reference),
                "hypothesis": hyp,
                "audio_tokens": int(audio_tokens),
                "text_tokens": len(reference),
                "frames": rec.frames,
            }
        )
    if out_path is not None:
        with open(str(out_path), "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return rows
