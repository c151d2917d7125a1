"""CTC-guided dynamic query compression for speech-to-text alignment.

A desk-scale, fully deterministic sandbox: synthetic multi-dialect corpora,
a from-scratch float64 autodiff core, a dynamic-query cross-attention adapter
with an auxiliary CTC branch, temperature-aware category sampling, and a toy
LoRA-adapted decoder, plus the metrics and CLI to run transfer/ablation
experiments end to end.
"""

from .adapter import (
    AdapterConfig,
    AdapterOutput,
    FusionOutput,
    adapter_forward,
    asr_head,
    cross_attend,
    enhance,
    linear_baseline_forward,
)
from .corpus import (
    CorpusConfig,
    DialectSpec,
    PhonemeInventory,
    Utterance,
    build_dialect_chain,
    centroid_distances,
    generate_corpus,
    load_manifest,
    synthesize_utterance,
)
from .ctc import PosteriorGrid, brute_force_path_sum, ctc_loss, greedy_decode
from .metrics import EditStats, EfficiencyRecord, cer, corpus_bleu, expansion_report, length_correlation, wer
from .sampler import CategoryKey, SamplerConfig, category_probabilities, frequency_report, sample_batch
from .shrink import ShrinkResult, build_dynamic_queries, select_peak_frames, shrink
from .tensor import (
    CosineSchedule,
    GradCheckReport,
    OptimizerState,
    ParameterSet,
    Tensor,
    cross_entropy,
    grad_check,
    init_optimizer,
    load_checkpoint,
    matmul,
    optimizer_step,
    save_checkpoint,
    softmax_rows,
)
from .training import (
    LossBreakdown,
    TrainConfig,
    VocabLayout,
    build_model,
    evaluate_checkpoint,
    greedy_generate,
    lora_wrap,
    ntp_loss,
    total_loss,
    train_run,
)

__version__ = "0.1.0"
