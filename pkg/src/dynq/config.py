"""Run configuration: one JSON document with corpus / adapter / training /
sampler sections, strict about unknown keys, plus dotted-path overrides.

The JSON key for the CTC weight is "lambda"; it maps to the ``lam`` field of
TrainConfig because of the Python keyword.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .adapter import AdapterConfig
from .corpus import CorpusConfig
from .errors import ConfigError
from .sampler import SamplerConfig
from .training import TrainConfig

_JSON_ALIASES = {"training.lambda": "training.lam"}
_FIELD_TO_JSON = {"lam": "lambda"}

_SECTIONS = {
    "corpus": CorpusConfig,
    "adapter": AdapterConfig,
    "training": TrainConfig,
    "sampler": SamplerConfig,
}


@dataclasses.dataclass
class RunConfig:
    corpus: CorpusConfig
    adapter: AdapterConfig
    training: TrainConfig
    sampler: SamplerConfig

    def to_dict(self) -> dict:
        out: dict = {}
        for section, cls in _SECTIONS.items():
            raw = dataclasses.asdict(getattr(self, section))
            out[section] = {_FIELD_TO_JSON.get(k, k): v for k, v in raw.items()}
        return out

    def validate(self) -> None:
        self.corpus.validate()
        self.training.validate()
        self.sampler.validate()
        if self.adapter.d_audio != self.corpus.d_audio:
            raise ConfigError(
                f"adapter.d_audio ({self.adapter.d_audio}) != corpus.d_audio ({self.corpus.d_audio})"
            )
        if self.adapter.vocab != self.corpus.phonemes:
            raise ConfigError(
                f"adapter.vocab ({self.adapter.vocab}) != corpus.phonemes ({self.corpus.phonemes})"
            )


def _build_section(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = "lam" if (section == "training" and key == "lambda") else key
        if name not in fields:
            raise ConfigError(f"unknown key '{section}.{key}'")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    sections = {}
    for section, cls in _SECTIONS.items():
        sections[section] = _build_section(cls, data.get(section, {}), section)
    cfg = RunConfig(**sections)
    cfg.validate()
    return cfg


def default_run_config() -> RunConfig:
    return run_config_from_dict({})


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    key = _JSON_ALIASES.get(key.strip(), key.strip())
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(data: dict, overrides) -> dict:
    for item in overrides or ():
        key, value = _parse_override(item)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path '{key}' crosses a non-object value")
        node[parts[-1]] = value
    return data


def load_run_config(path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    data = apply_overrides(data, overrides)
    return run_config_from_dict(data)


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_digest(cfg: RunConfig, extra: dict | None = None) -> str:
    """Content address for a run: sha256 of the resolved config (plus extras)."""
    payload = {"config": cfg.to_dict()}
    if extra:
        payload["extra"] = extra
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:12]
