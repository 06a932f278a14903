"""Flat ``key = value`` run configuration with dotted namespaces.

Defaults are the full-scale hyperparameters; ``preset = desk`` swaps in the
small model used for the synthetic task. Unknown keys are an error.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

from saa.decoder import DecoderConfig, Vocab
from saa.encoder import ChunkSpec, EncoderConfig
from saa.errors import ConfigError
from saa.lm import LMConfig
from saa.san import SANConfig

DEFAULTS: dict[str, Any] = {
    "preset": "full",
    "seed": 0,
    "vocab.labels": "a b c d e f g h i j",
    "model.d": 320,
    "model.h": 4,
    "model.d_ff": 1280,
    "model.residual_dropout": 0.1,
    "model.attention_dropout": 0.1,
    "encoder.feature_dim": 120,
    "encoder.conv_filters": 64,
    "encoder.n": 5,
    "encoder.stages": 2,
    "encoder.pool_stride": 2,
    "encoder.kernel": 3,
    "encoder.freq_stride": 2,
    "decoder.k": 2,
    "decoder.embed_dim": 0,
    "lm.layers": 3,
    "lm.residual_dropout": 0.2,
    "lm.attention_dropout": 0.2,
    "lm.use_proximity_bias": False,
    "chunk.past": -1,
    "chunk.current": -1,
    "chunk.future": -1,
    "chunk.frame_shift_ms": 10.0,
    "train.lr": 1e-3,
    "train.warmup": 400,
    "train.batch_size": 32,
    "train.epochs": 20,
    "train.penalty": 0.2,
    "train.clip": 5.0,
    "train.max_minutes": 0.0,
    "lm_train.lr": 1e-3,
    "lm_train.warmup": 200,
    "lm_train.batch_size": 64,
    "lm_train.epochs": 10,
    "joint.lr": 1e-3,
    "joint.warmup": 100,
    "joint.epochs": 2,
    "data.train": "",
    "data.dev": "",
    "data.lm_corpus": "",
    "data.lm_dev": "",
    "out.dir": "run",
    "out.lm_checkpoint": "",
}

PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "model.d": 64,
        "model.h": 2,
        "model.d_ff": 256,
        "encoder.n": 2,
        "decoder.k": 2,
        "encoder.feature_dim": 20,
        "encoder.conv_filters": 32,
        "train.epochs": 8,
        "train.max_minutes": 25.0,
    },
}

_PATH_KEYS = ("data.train", "data.dev", "data.lm_corpus", "data.lm_dev", "out.dir", "out.lm_checkpoint")


def _convert(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig:
    def __init__(self, values: Optional[dict[str, Any]] = None, base_dir: Optional[Path] = None):
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        values = dict(values or {})
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        preset = values.get("preset", DEFAULTS["preset"])
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        self.values = {**DEFAULTS, **PRESETS[preset], **values}

    @classmethod
    def parse(cls, text: str, base_dir=None) -> "RunConfig":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"line {n}: unknown configuration key {key!r}")
            values[key] = _convert(key, raw)
        return cls(values, base_dir)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.parse(text, path.parent.resolve())

    def render(self) -> str:
        """Fully resolved config; paths are made absolute so the echo re-runs anywhere."""
        lines = []
        for key in DEFAULTS:
            val = self.values[key]
            if key in _PATH_KEYS and val:
                val = self.path(key)
            if isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def override(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            vals[key] = v
        return RunConfig(vals, self.base_dir)

    def path(self, key: str) -> Optional[Path]:
        val = self.values[key]
        if not val:
            return None
        p = Path(val)
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    # -- component configs ---------------------------------------------------
    @property
    def vocab(self) -> Vocab:
        return Vocab(self["vocab.labels"].split())

    @property
    def san(self) -> SANConfig:
        return SANConfig(self["model.d"], self["model.h"], self["model.d_ff"],
                         self["model.residual_dropout"], self["model.attention_dropout"])

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self["encoder.feature_dim"], self["encoder.conv_filters"],
                             self["encoder.n"], self["encoder.stages"], self["encoder.pool_stride"],
                             self["encoder.kernel"], self["encoder.freq_stride"], self.san)

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self["decoder.k"], self["decoder.embed_dim"] or None, self.san)

    @property
    def lm(self) -> LMConfig:
        san = SANConfig(self["model.d"], self["model.h"], self["model.d_ff"],
                        self["lm.residual_dropout"], self["lm.attention_dropout"])
        return LMConfig(self["lm.layers"], san, self["lm.use_proximity_bias"])

    @property
    def chunk(self) -> Optional[ChunkSpec]:
        parts = [self[f"chunk.{k}"] for k in ("past", "current", "future")]
        if all(p < 0 for p in parts):
            return None
        if any(p < 0 for p in parts):
            raise ConfigError("chunk.past, chunk.current and chunk.future must be set together")
        return ChunkSpec(*parts, frame_shift_ms=self["chunk.frame_shift_ms"])

    def with_chunk(self, spec: Optional[ChunkSpec]) -> "RunConfig":
        if spec is None:
            return self.override(chunk__past=-1, chunk__current=-1, chunk__future=-1)
        return self.override(chunk__past=spec.past, chunk__current=spec.current,
                             chunk__future=spec.future, chunk__frame_shift_ms=spec.frame_shift_ms)
