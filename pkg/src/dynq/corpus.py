"""Synthetic multi-dialect speech-like corpora.

Three dialects A, B, C form a chain: A and C get independent random shifts of
the shared phoneme prototypes, B sits at their midpoint plus a small jitter,
so B is transitional by construction. Utterances are prototype frames with
per-phoneme random durations and Gaussian noise; the "translation" target is
a deterministic token remap of the reversed transcript, which gives the
sequence-to-sequence path something genuinely order-sensitive to learn.

On disk a corpus is a packed float32 feature payload plus a JSON-Lines
manifest; regeneration from the same config is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError

DIALECTS = ("A", "B", "C")
TASKS = ("asr", "st")

FEATURES_FILE = "features.bin"
MANIFEST_FILE = "manifest.jsonl"
META_FILE = "corpus_meta.json"


@dataclass(frozen=True)
class PhonemeInventory:
    """Shared prototype vectors, one per phoneme, pairwise distinct."""

    prototypes: np.ndarray  # [P, d_audio]

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        object.__setattr__(self, "prototypes", protos)
        if protos.ndim != 2 or protos.shape[0] < 2:
            raise ParameterError("inventory needs at least two prototype rows")
        diff = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 1e-9:
            raise ParameterError("prototypes must be pairwise distinct")

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d_audio(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def from_seed(cls, seed: int, phonemes: int, d_audio: int) -> "PhonemeInventory":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
        return cls(prototypes=rng.normal(0.0, 1.0, size=(phonemes, d_audio)))


@dataclass
class DialectSpec:
    """Per-dialect rendering of the shared inventory."""

    dialect: str
    shift: np.ndarray  # [d_audio, d_audio], near identity
    duration_min: int = 2
    duration_max: int = 4
    noise: float = 0.1


@dataclass
class Utterance:
    uid: str
    dialect: str
    task: str
    features: np.ndarray  # [T, d_audio]
    transcript: list[int]
    translation: list[int] | None = None


@dataclass
class ManifestRecord:
    uid: str
    dialect: str
    task: str
    split: str
    frames: int
    transcript_len: int
    feature_path: str
    byte_offset: int
    transcript: list[int]
    translation: list[int] | None


@dataclass
class CorpusConfig:
    seed: int = 7
    divergence: float = 1.0
    noise: float = 0.1
    phonemes: int = 12
    d_audio: int = 16
    duration_min: int = 2
    duration_max: int = 4
    transcript_min: int = 3
    transcript_max: int = 8
    # counts keyed dialect -> task -> n; defaults mirror a ~1:1.79:1 imbalance
    train_counts: dict = field(
        default_factory=lambda: {
            "A": {"asr": 500, "st": 300},
            "B": {"asr": 895, "st": 537},
            "C": {"asr": 500, "st": 300},
        }
    )
    test_counts: dict = field(
        default_factory=lambda: {
            "A": {"asr": 50, "st": 50},
            "B": {"asr": 50, "st": 50},
            "C": {"asr": 50, "st": 50},
        }
    )

    def validate(self) -> None:
        if self.divergence <= 0:
            raise ParameterError(f"divergence must be > 0, got {self.divergence}")
        if self.phonemes < 2 or self.d_audio < 1:
            raise ParameterError("need >= 2 phonemes and d_audio >= 1")
        if not (1 <= self.duration_min <= self.duration_max):
            raise ParameterError("duration bounds must satisfy 1 <= min <= max")
        if not (1 <= self.transcript_min <= self.transcript_max):
            raise ParameterError("transcript bounds must satisfy 1 <= min <= max")
        total = 0
        for counts in (self.train_counts, self.test_counts):
            for dialect, per_task in counts.items():
                if dialect not in DIALECTS:
                    raise ParameterError(f"unknown dialect '{dialect}'")
                for task, n in per_task.items():
                    if task not in TASKS:
                        raise ParameterError(f"unknown task '{task}'")
                    if n < 0:
                        raise ParameterError("sample counts must be >= 0")
                    total += n
        if total == 0:
            raise ParameterError("at least one category count must be positive")


def translate_tokens(transcript, phonemes: int) -> list[int]:
    """Deterministic toy translation: remap into the target block, reversed order."""
    return [int(t) + phonemes for t in reversed(transcript)]


def build_dialect_chain(
    seed: int,
    divergence: float,
    d_audio: int = 16,
    duration_min: int = 2,
    duration_max: int = 4,
    noise: float = 0.1,
) -> list[DialectSpec]:
    """Construct shifts for A, B, C with B at the A/C midpoint plus jitter <= divergence/10."""
    if divergence <= 0:
        raise ParameterError(f"divergence must be > 0, got {divergence}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    eye = np.eye(d_audio)
    scale = 1.0 / np.sqrt(d_audio)
    shift_a = eye + divergence * rng.normal(0.0, scale, size=(d_audio, d_audio))
    shift_c = eye + divergence * rng.normal(0.0, scale, size=(d_audio, d_audio))
    jitter = rng.normal(0.0, scale, size=(d_audio, d_audio))
    jitter /= np.sqrt((jitter**2).sum())
    magnitude = (divergence / 10.0) * rng.uniform(0.0, 1.0)
    shift_b = 0.5 * (shift_a + shift_c) + magnitude * jitter
    shifts = {"A": shift_a, "B": shift_b, "C": shift_c}
    return [
        DialectSpec(
            dialect=d,
            shift=shifts[d],
            duration_min=duration_min,
            duration_max=duration_max,
            noise=noise,
        )
        for d in DIALECTS
    ]


def synthesize_utterance(
    spec: DialectSpec,
    inventory: PhonemeInventory,
    transcript,
    seed,
    uid: str = "",
    task: str = "asr",
) -> Utterance:
    """Render a transcript as shifted prototypes with random durations and noise."""
    transcript = [int(t) for t in transcript]
    if not transcript:
        raise ParameterError("transcript must be non-empty")
    if min(transcript) < 0 or max(transcript) >= inventory.size:
        raise ParameterError("transcript token outside the inventory")
    rng = np.random.default_rng(seed)
    shifted = inventory.prototypes @ spec.shift.T
    frames: list[np.ndarray] = []
    for tok in transcript:
        k = int(rng.integers(spec.duration_min, spec.duration_max + 1))
        base = shifted[tok]
        noise = spec.noise * rng.normal(0.0, 1.0, size=(k, inventory.d_audio))
        frames.append(base[None, :] + noise)
    feats = np.concatenate(frames, axis=0)
    translation = translate_tokens(transcript, inventory.size) if task == "st" else None
    return Utterance(
        uid=uid,
        dialect=spec.dialect,
        task=task,
        features=feats,
        transcript=transcript,
        translation=translation,
    )


def _utterance_seed(config_seed: int, split: str, dialect: str, task: str, i: int):
    split_i = 0 if split == "train" else 1
    return np.random.SeedSequence(
        entropy=config_seed,
        spawn_key=(2, split_i, DIALECTS.index(dialect), TASKS.index(task), i),
    )


def generate_corpus(config: CorpusConfig, out_dir) -> list[ManifestRecord]:
    """Write features + manifest + meta under ``out_dir``; returns the records."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inventory = PhonemeInventory.from_seed(config.seed, config.phonemes, config.d_audio)
    chain = {
        s.dialect: s
        for s in build_dialect_chain(
            config.seed,
            config.divergence,
            d_audio=config.d_audio,
            duration_min=config.duration_min,
            duration_max=config.duration_max,
            noise=config.noise,
        )
    }

    records: list[ManifestRecord] = []
    offset = 0
    feat_path = out / FEATURES_FILE
    with open(feat_path, "wb") as feats_f:
        for split, counts in (("train", config.train_counts), ("test", config.test_counts)):
            for dialect in DIALECTS:
                per_task = counts.get(dialect, {})
                for task in TASKS:
                    n = int(per_task.get(task, 0))
                    for i in range(n):
                        ss = _utterance_seed(config.seed, split, dialect, task, i)
                        rng = np.random.default_rng(ss)
                        length = int(rng.integers(config.transcript_min, config.transcript_max + 1))
                        transcript = rng.integers(0, config.phonemes, size=length).tolist()
                        uid = f"{split}-{dialect}-{task}-{i:05d}"
                        utt = synthesize_utterance(
                            chain[dialect], inventory, transcript, rng, uid=uid, task=task
                        )
                        raw = utt.features.astype("<f4").tobytes(order="C")
                        feats_f.write(raw)
                        records.append(
                            ManifestRecord(
                                uid=uid,
                                dialect=dialect,
                                task=task,
                                split=split,
                                frames=utt.features.shape[0],
                                transcript_len=len(utt.transcript),
                                feature_path=FEATURES_FILE,
                                byte_offset=offset,
                                transcript=utt.transcript,
                                translation=utt.translation,
                            )
                        )
                        offset += len(raw)

    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    sidecar = {"dtype": "<f4", "shape": [offset // 4]}
    (out / (FEATURES_FILE + ".json")).write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    meta = {
        "config": config_to_dict(config),
        "d_audio": config.d_audio,
        "phonemes": config.phonemes,
    }
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return records


def config_to_dict(config: CorpusConfig) -> dict:
    return asdict(config)


def load_manifest(corpus_dir) -> list[ManifestRecord]:
    path = Path(corpus_dir) / MANIFEST_FILE
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            records.append(ManifestRecord(**d))
    return records


def load_meta(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / META_FILE).read_text())


def load_features(corpus_dir, record: ManifestRecord, d_audio: int) -> np.ndarray:
    path = Path(corpus_dir) / record.feature_path
    count = record.frames * d_audio
    with open(path, "rb") as f:
        f.seek(record.byte_offset)
        raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise DataError(f"feature byte range missing for utterance {record.uid}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return arr.reshape(record.frames, d_audio)


def load_all_features(corpus_dir, records, d_audio: int) -> dict[str, np.ndarray]:
    return {r.uid: load_features(corpus_dir, r, d_audio) for r in records}


def centroid_distances(corpus_dir, records=None) -> tuple[np.ndarray, list[str]]:
    """Pairwise Euclidean distances between per-dialect mean feature vectors."""
    if records is None:
        records = load_manifest(corpus_dir)
    meta = load_meta(corpus_dir)
    d_audio = meta["d_audio"]
    by_dialect: dict[str, list[np.ndarray]] = {}
    for r in records:
        by_dialect.setdefault(r.dialect, []).append(load_features(corpus_dir, r, d_audio))
    dialects = sorted(by_dialect)
    if len(dialects) < 2:
        raise DataError(f"need >= 2 dialects for centroid distances, got {dialects}")
    for d, feats in by_dialect.items():
        if len(feats) < 2:
            raise DataError(f"dialect '{d}' has fewer than 2 utterances")
    centroids = np.stack(
        [np.concatenate(by_dialect[d], axis=0).mean(axis=0) for d in dialects]
    )
    diff = centroids[:, None, :] - centroids[None, :, :]
    return np.sqrt((diff**2).sum(-1)), dialects
