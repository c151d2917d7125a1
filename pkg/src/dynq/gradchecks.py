"""Canned finite-difference checks used by the CLI and the acceptance suite.

Four scalar objectives cover the differentiable surface: one enhancer layer,
the cross-attention fusion, the CTC loss through the ASR head, and the full
joint objective with the discrete frame selection pinned.
"""

from __future__ import annotations

import numpy as np

from .adapter import AdapterConfig, adapter_forward, cross_attend, enhance, init_adapter_params
from .ctc import ctc_loss
from .shrink import select_peak_frames
from .tensor import GradCheckReport, ParameterSet, Tensor, grad_check, mul, sum_all
from .training import TrainConfig, VocabLayout, build_model, ntp_loss, total_loss

TOLERANCE = 1e-4
EPSILON = 1e-5

_TINY = AdapterConfig(
    d_audio=3, d_model=8, n_layers=1, heads=2, d_ff=12, vocab=4, max_frames=8
)


def _tiny_params(seed: int = 0) -> tuple[ParameterSet, np.ndarray]:
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    tie = rng.uniform(-0.3, 0.3, size=(_TINY.vocab, _TINY.d_model))
    init_adapter_params(ps, _TINY, rng, tie_source=tie)
    x = rng.normal(0.0, 1.0, size=(3, _TINY.d_audio))
    return ps, x


def _weighted_sum(t: Tensor, rng) -> Tensor:
    w = rng.normal(0.0, 1.0, size=t.data.shape)
    return sum_all(mul(t, Tensor(w)))


def check_enhancer(max_entries: int = 40) -> GradCheckReport:
    ps, x = _tiny_params(seed=1)
    rng = np.random.default_rng(11)
    w = rng.normal(0.0, 1.0, size=(3, _TINY.d_model))

    def fn(params):
        return sum_all(mul(enhance(x, _TINY, params), Tensor(w)))

    return grad_check(fn, ps, epsilon=EPSILON, max_entries=max_entries, seed=101)


def check_cross_attention(max_entries: int = 40) -> GradCheckReport:
    ps, x = _tiny_params(seed=2)
    rng = np.random.default_rng(12)
    q = rng.normal(0.0, 1.0, size=(2, _TINY.d_model))
    kv = rng.normal(0.0, 1.0, size=(4, _TINY.d_model))
    w = rng.normal(0.0, 1.0, size=(2, _TINY.d_model))

    def fn(params):
        fused = cross_attend(Tensor(q), Tensor(kv), _TINY, params)
        return sum_all(mul(fused.z, Tensor(w)))

    return grad_check(fn, ps, epsilon=EPSILON, max_entries=max_entries, seed=102)


def check_ctc(max_entries: int = 60) -> GradCheckReport:
    rng = np.random.default_rng(13)
    ps = ParameterSet()
    ps.add("logits", rng.normal(0.0, 1.0, size=(5, 4)))
    target = [1, 0, 1]

    def fn(params):
        from .ctc import PosteriorGrid
        from .tensor import log_softmax_rows

        grid = PosteriorGrid(log_probs=log_softmax_rows(params["logits"]), vocab=3)
        return ctc_loss(grid, target)

    return grad_check(fn, ps, epsilon=EPSILON, max_entries=max_entries, seed=103)


def check_joint_objective(max_entries: int = 12) -> GradCheckReport:
    tcfg = TrainConfig(
        lam=0.3,
        lora_rank=2,
        decoder_layers=1,
        decoder_heads=2,
        decoder_ff=12,
        decoder_max_len=16,
        seed=5,
    )
    ps, vocab = build_model(_TINY.vocab, _TINY, tcfg, adapter_kind="dynamic")
    rng = np.random.default_rng(14)
    x = rng.normal(0.0, 1.0, size=(4, _TINY.d_audio))
    transcript = [2, 0]
    # pin the discrete selection at the base point before perturbing
    base = adapter_forward(x, _TINY, ps)
    fixed_idx = base.shrink.indices.copy()

    def fn(params):
        out = adapter_forward(x, _TINY, params, indices_override=fixed_idx)
        ctc_t = ctc_loss(out.grid, transcript)
        ntp_t = ntp_loss(params, tcfg, vocab, out.z, [vocab.prompt_id("asr")], transcript)
        tot, _ = total_loss(ntp_t, ctc_t, tcfg.lam)
        return tot

    return grad_check(fn, ps, epsilon=EPSILON, max_entries=max_entries, seed=104)


def run_all() -> dict[str, GradCheckReport]:
    return {
        "enhancer_layer": check_enhancer(),
        "cross_attention": check_cross_attention(),
        "ctc_loss": check_ctc(),
        "joint_objective": check_joint_objective(),
    }
