"""Synthetic transduction task, feature files, manifests, normalization and CER."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from saa.errors import DataError, UndefinedCERError

log = logging.getLogger(__name__)

FEAT_MAGIC = b"FEAT"


@dataclass
class SynthTaskConfig:
    vocab_size: int = 10
    min_len: int = 5
    max_len: int = 12
    min_duration: int = 6
    max_duration: int = 12
    noise_std: float = 1.0
    feature_dim: int = 20
    onset_scale: float = 1.0
    seed: int = 0


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, F)
    target: list[int]


def label_names(vocab_size: int) -> list[str]:
    if vocab_size <= 26:
        return [chr(ord("a") + i) for i in range(vocab_size)]
    return [f"l{i}" for i in range(vocab_size)]


def synth_patterns(cfg: SynthTaskConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-label frame patterns and the shared onset pattern, fixed by the seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    patterns = rng.normal(size=(cfg.vocab_size, cfg.feature_dim))
    onset = rng.normal(size=cfg.feature_dim) * cfg.onset_scale
    return patterns, onset


def synth_generate(cfg: SynthTaskConfig, count: int, split: str = "train") -> list[Utterance]:
    """Render random label sequences as contiguous noisy frame runs.

    Each label occupies a run of frames carrying its pattern; the first frame
    of every run also carries a shared onset pattern so that repeated labels
    stay distinguishable. The pattern set depends only on ``cfg.seed``; the
    utterances also depend on ``split``.
    """
    patterns, onset = synth_patterns(cfg)
    rng = np.random.default_rng([cfg.seed, 1, int.from_bytes(split.encode(), "little") % (2 ** 32)])
    out = []
    for i in range(count):
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        target = rng.integers(0, cfg.vocab_size, size=n).tolist()
        durs = rng.integers(cfg.min_duration, cfg.max_duration + 1, size=n)
        frames = np.repeat(patterns[target], durs, axis=0)
        frames[np.concatenate([[0], np.cumsum(durs)[:-1]])] += onset
        frames = frames + rng.normal(scale=cfg.noise_std, size=frames.shape) if cfg.noise_std else frames
        out.append(Utterance(f"{split}-{i:05d}", frames, target))
    return out


# -- normalization ----------------------------------------------------------
@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: Iterable[np.ndarray]) -> "FeatureStats":
        frames = np.concatenate(list(features), axis=0)
        mean = frames.mean(axis=0)
        std = frames.std(axis=0)
        # zero-variance dimensions are only centred
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def checksum(self) -> str:
        return hashlib.sha256(self.mean.tobytes() + self.std.tobytes()).hexdigest()[:16]


def normalize_features(features: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return stats.apply(features)


# -- feature files ----------------------------------------------------------
def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    t, f = features.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + struct.pack("<II", t, f))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    """Binary FEAT file or the plain-text variant (one frame per line)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == FEAT_MAGIC:
        if len(raw) < 12:
            raise DataError(f"{path}: truncated FEAT header")
        t, f = struct.unpack("<II", raw[4:12])
        if len(raw) != 12 + 8 * t * f:
            raise DataError(f"{path}: expected {t}x{f} frames, payload is {len(raw) - 12} bytes")
        return np.frombuffer(raw[12:], dtype="<f8").reshape(t, f).astype(np.float64)
    try:
        rows = [list(map(float, line.split())) for line in raw.decode().splitlines() if line.strip()]
    except (UnicodeDecodeError, ValueError) as e:
        raise DataError(f"{path}: not a FEAT file and not parseable as text ({e})") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: text features need equal-length non-empty rows")
    return np.array(rows, dtype=np.float64)


# -- manifests and corpora --------------------------------------------------
def write_manifest(path, utts: Sequence[Utterance], labels: Sequence[str], feature_dir=None) -> None:
    path = Path(path)
    feature_dir = Path(feature_dir) if feature_dir else path.parent / (path.stem + "_feats")
    feature_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for u in utts:
            fpath = feature_dir / f"{u.id}.feat"
            write_features(fpath, u.features)
            rel = fpath.relative_to(path.parent) if fpath.is_relative_to(path.parent) else fpath
            fh.write(json.dumps({"id": u.id, "feature_file": str(rel),
                                 "target": " ".join(labels[i] for i in u.target)}) + "\n")


def read_manifest(path, vocab) -> list[Utterance]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            fpath = Path(rec["feature_file"])
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"{path}:{n}: bad manifest record ({e})") from None
        if not fpath.is_absolute():
            fpath = path.parent / fpath
        out.append(Utterance(rec["id"], read_features(fpath), vocab.encode(rec["target"].split())))
    return out


def write_corpus(path, sentences: Sequence[Sequence[int]], labels: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for s in sentences:
            fh.write(" ".join(labels[i] for i in s) + "\n")


def read_corpus(path, vocab) -> list[list[int]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus {path} does not exist")
    return [vocab.encode(line.split()) for line in path.read_text().splitlines() if line.strip()]


# -- batching ---------------------------------------------------------------
@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, F), zero past each length
    lengths: np.ndarray
    targets: list[list[int]]
    ids: list[str]

    @property
    def pad_mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.lengths[:, None]


def make_batch(utts: Sequence[Utterance]) -> Batch:
    lengths = np.array([u.features.shape[0] for u in utts])
    feats = np.zeros((len(utts), lengths.max(), utts[0].features.shape[1]))
    for i, u in enumerate(utts):
        feats[i, :lengths[i]] = u.features
    return Batch(feats, lengths, [list(u.target) for u in utts], [u.id for u in utts])


def batches(utts: Sequence[Utterance], batch_size: int, rng: Optional[np.random.Generator] = None,
            ) -> list[Batch]:
    """Length-bucketed batches; ``rng`` shuffles bucket membership and order."""
    order = np.arange(len(utts))
    if rng is not None:
        order = rng.permutation(len(utts))
        # sort within windows of 20 batches to keep padding low but order random
        win = batch_size * 20
        order = np.concatenate([
            sorted(order[i:i + win], key=lambda j: utts[j].features.shape[0])
            for i in range(0, len(order), win)
        ])
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [make_batch([utts[j] for j in g]) for g in groups]


# -- scoring ----------------------------------------------------------------
def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    if not ref:
        if hyp:
            raise UndefinedCERError("empty reference with a non-empty hypothesis")
        return 0.0
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edit distance over total reference length.

    Pairs whose CER is undefined are skipped with a warning.
    """
    errors = total = 0
    for r, h in zip(refs, hyps):
        if not r and h:
            log.warning("skipping utterance with empty reference and non-empty hypothesis")
            continue
        errors += edit_distance(r, h)
        total += len(r)
    return errors / total if total else 0.0
