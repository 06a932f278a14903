"""Convolutional front-end, stacked SANs with temporal pooling, chunk-hopping.

All batched paths take features of shape (B, T, F) plus per-item lengths.
Frames at or beyond an item's length are zeroed after every convolution and
hidden from attention, so a padded item encodes the same as it would alone
(up to summation order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from saa import tensor as T
from saa.errors import ConfigError, DimensionError, InputTooShortError
from saa.nn import LayerNorm, Linear, Module, glorot
from saa.san import SANBlock, SANConfig, key_padding_bias, proximity_bias
from saa.tensor import Tensor

# added before pooling so padded frames never win the max
_POOL_FILL = -1e30


@dataclass
class EncoderConfig:
    feature_dim: int = 120
    conv_filters: int = 64
    n: int = 5
    stages: int = 2
    pool_stride: int = 2
    kernel: int = 3
    freq_stride: int = 2
    san: SANConfig = field(default_factory=SANConfig)

    def __post_init__(self):
        if self.n < 1 or self.stages < 1 or self.pool_stride < 1:
            raise ValueError("encoder needs n >= 1, stages >= 1, pool_stride >= 1")

    @property
    def downsample(self) -> int:
        return 2 * self.pool_stride ** (self.stages - 1)


@dataclass
class AcousticStates:
    h: Tensor  # (B, U, d)
    lengths: np.ndarray  # encoded length per item
    downsample_factor: int
    source_frames: np.ndarray


@dataclass(frozen=True)
class ChunkSpec:
    past: int
    current: int
    future: int
    frame_shift_ms: float = 10.0

    @property
    def size(self) -> int:
        return self.past + self.current + self.future

    @property
    def hop(self) -> int:
        return self.current

    def validate(self, downsample: int) -> None:
        if self.current <= 0 or self.past < 0 or self.future < 0:
            raise ConfigError(f"invalid chunk geometry {self}")
        bad = [n for n in ("past", "current", "future") if getattr(self, n) % downsample]
        if bad:
            raise ConfigError(
                f"chunk {', '.join(bad)} must be multiples of the downsampling factor {downsample}"
            )

    @classmethod
    def parse(cls, text: str, frame_shift_ms: float = 10.0) -> "ChunkSpec":
        try:
            past, current, future = (int(v) for v in text.split(","))
        except ValueError:
            raise ConfigError(f"chunk spec must be 'past,current,future', got {text!r}") from None
        return cls(past, current, future, frame_shift_ms)


@dataclass(frozen=True)
class Chunk:
    abs_start: int
    abs_end: int
    pad_left: int
    pad_right: int
    current_range: tuple[int, int]


def chunk_segment(t: int, spec: ChunkSpec) -> list[Chunk]:
    """Split ``t`` frames into overlapping chunks hopping by ``spec.current``.

    Chunk c spans absolute frames [c*current - past, (c+1)*current + future);
    the part outside [0, t) is zero padding.
    """
    if t < 1:
        raise InputTooShortError("cannot segment an empty utterance")
    chunks = []
    for c in range(-(-t // spec.current)):
        cur_lo = c * spec.current
        start = cur_lo - spec.past
        end = cur_lo + spec.current + spec.future
        chunks.append(Chunk(start, end, max(0, -start), max(0, end - t),
                            (cur_lo, min(cur_lo + spec.current, t))))
    return chunks


def latency_of(spec: ChunkSpec) -> float:
    """Look-ahead latency in milliseconds: future frames times the frame shift."""
    return spec.future * spec.frame_shift_ms


def _time_mask(lengths, t: int) -> np.ndarray:
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


class Frontend(Module):
    """Strided conv + layer norm, then a gated multiplicative unit, then projection to d."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        k, c = cfg.kernel, cfg.conv_filters
        self.cfg = cfg
        self.conv_w = T.parameter(glorot(rng, k * k, k * k * c, (k, k, 1, c)))
        self.conv_b = T.parameter(np.zeros(c))
        self.norm = LayerNorm(c)
        self.gate_w = T.parameter(glorot(rng, k * k * c, k * k * c, (k, k, c, c)))
        self.gate_b = T.parameter(np.zeros(c))
        self.gate_norm = LayerNorm(c)
        self.cand_w = T.parameter(glorot(rng, k * k * c, k * k * c, (k, k, c, c)))
        self.cand_b = T.parameter(np.zeros(c))
        self.cand_norm = LayerNorm(c)
        self.freq_out = -(-cfg.feature_dim // cfg.freq_stride)
        self.proj = Linear(rng, self.freq_out * c, cfg.san.d)

    def __call__(self, feats: Tensor, lengths, train: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
        b, t, f = feats.shape
        if f != self.cfg.feature_dim:
            raise DimensionError("frontend_forward", feats.shape, (self.cfg.feature_dim,))
        x = T.reshape(feats * _time_mask(lengths, t)[:, :, None], (b, t, f, 1))
        x = self.norm(T.conv2d(x, self.conv_w, self.conv_b, (2, self.cfg.freq_stride)))
        out_len = -(-np.asarray(lengths) // 2)
        mask = _time_mask(out_len, x.shape[1])[:, :, None, None]
        x = x * mask
        gate = T.sigmoid(self.gate_norm(T.conv2d(x, self.gate_w, self.gate_b)))
        cand = T.tanh(self.cand_norm(T.conv2d(x, self.cand_w, self.cand_b)))
        x = gate * cand * mask
        x = T.reshape(x, (b, x.shape[1], self.freq_out * self.cfg.conv_filters))
        return self.proj(x), out_len


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.frontend = Frontend(cfg, rng)
        self.blocks = [SANBlock(cfg.san, rng) for _ in range(cfg.n * cfg.stages)]

    @property
    def downsample(self) -> int:
        return self.cfg.downsample

    def __call__(self, feats: Tensor, lengths, train: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
        """(B, T, F) features -> ((B, U, d) states, encoded lengths)."""
        x, lens = self.frontend(feats, lengths, train, rng)
        p = self.cfg.pool_stride
        for s in range(self.cfg.stages):
            u = x.shape[1]
            bias = proximity_bias(u, u)[None, None] + key_padding_bias(lens, u)
            for blk in self.blocks[s * self.cfg.n:(s + 1) * self.cfg.n]:
                x = blk(x, bias, train, rng)
            if s < self.cfg.stages - 1:
                valid = _time_mask(lens, u)[:, :, None]
                x = T.max_pool_time(x + (1.0 - valid) * _POOL_FILL, p)
                lens = -(-lens // p)
                x = x * _time_mask(lens, x.shape[1])[:, :, None]
        return x * _time_mask(lens, x.shape[1])[:, :, None], lens


def frontend_forward(features, encoder: "Encoder", train: bool = False, rng=None) -> Tensor:
    """Front-end alone on one (T, F) utterance: returns (ceil(T/2), d)."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.shape[0] < 2:
        raise InputTooShortError(f"front-end needs at least 2 frames, got {feats.shape[0]}")
    out, _ = encoder.frontend(T.reshape(feats, (1,) + feats.shape), [feats.shape[0]], train, rng)
    return T.reshape(out, out.shape[1:])


def pad_batch(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in features])
    out = np.zeros((len(features), lengths.max(), features[0].shape[1]))
    for i, f in enumerate(features):
        out[i, :f.shape[0]] = f
    return out, lengths


def encoder_forward(features, encoder: Encoder, train: bool = False, rng=None,
                    lengths=None) -> AcousticStates:
    """Full-context encoding of one (T, F) utterance or a padded (B, T, F) batch."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.ndim == 2:
        feats = T.reshape(feats, (1,) + feats.shape)
    if lengths is None:
        lengths = np.full(feats.shape[0], feats.shape[1])
    lengths = np.asarray(lengths)
    if lengths.min() < encoder.downsample:
        raise InputTooShortError(
            f"utterance of {lengths.min()} frames is shorter than the downsampling factor {encoder.downsample}"
        )
    h, lens = encoder(feats, lengths, train, rng)
    return AcousticStates(h, lens, encoder.downsample, lengths)


def encoder_forward_streaming(features, encoder: Encoder, spec: ChunkSpec, train: bool = False,
                              rng=None, lengths=None) -> AcousticStates:
    """Chunk-hopping encoding: each chunk is encoded on its own, current parts are kept.

    Every chunk of every utterance is stacked into one batch of windows. A
    window holds the chunk's frames inside [0, T); the out-of-range part is
    zero padding, realized exactly like batch padding.
    """
    d = encoder.downsample
    spec.validate(d)
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.ndim == 2:
        feats = T.reshape(feats, (1,) + feats.shape)
    if lengths is None:
        lengths = np.full(feats.shape[0], feats.shape[1])
    lengths = np.asarray(lengths)

    windows, win_lens, owners = [], [], []
    for b, t in enumerate(lengths):
        for ch in chunk_segment(int(t), spec):
            lo, hi = max(ch.abs_start, 0), min(ch.abs_end, int(t))
            cur_lo, cur_hi = ch.current_range
            windows.append(feats[b, lo:hi])
            win_lens.append(hi - lo)
            owners.append((b, (cur_lo - lo) // d, -(-(cur_hi - lo) // d)))
    w_max = max(win_lens)
    batch = T.stack([w if w.shape[0] == w_max else T.concat(
        [w, Tensor(np.zeros((w_max - w.shape[0], w.shape[1])))], axis=0) for w in windows])
    h, _ = encoder(batch, np.array(win_lens), train, rng)

    pieces: list[list[Tensor]] = [[] for _ in lengths]
    for i, (b, lo, hi) in enumerate(owners):
        pieces[b].append(h[i, lo:hi])
    enc_lens = -(-lengths // d)
    u_max = enc_lens.max()
    rows = []
    for b, parts in enumerate(pieces):
        seq = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        if seq.shape[0] < u_max:
            seq = T.concat([seq, Tensor(np.zeros((u_max - seq.shape[0], seq.shape[1])))], axis=0)
        rows.append(seq)
    return AcousticStates(T.stack(rows), enc_lens, d, lengths)
