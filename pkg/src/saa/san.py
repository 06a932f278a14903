"""Self-attention network block with additive attention bias.

One block computes, for input X (pre-norm topology)::

    X1 = LN(X)
    head_i = softmax(Q_i K_i^T / sqrt(d/h) + bias) V_i,  Q_i, K_i, V_i = X1 W_i
    Y1 = concat(heads) W_O
    X2 = LN(dropout(Y1) + X1)
    Y2 = relu(X2 W_1 + b_1) W_2 + b_2
    out = dropout(Y2) + X2

Attention dropout acts on the softmax weights. There is no trailing norm; the
next block's first norm covers it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from saa import tensor as T
from saa.errors import ContractError, DimensionError
from saa.nn import LayerNorm, Linear, Module, glorot
from saa.tensor import MASK_VALUE, Tensor


@dataclass
class SANConfig:
    d: int = 320
    h: int = 4
    d_ff: int = 1280
    residual_dropout: float = 0.1
    attention_dropout: float = 0.1

    def __post_init__(self):
        if self.d <= 0 or self.h <= 0 or self.d % self.h:
            raise ValueError(f"d={self.d} must be positive and divisible by h={self.h}")
        for name in ("residual_dropout", "attention_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name}={p} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d // self.h


def proximity_bias(t_q: int, t_k: int, q_offset: int = 0) -> np.ndarray:
    """Entry (i, j) = -ln(1 + |q_offset + i - j|)."""
    qi = np.arange(t_q)[:, None] + q_offset
    kj = np.arange(t_k)[None, :]
    return -np.log1p(np.abs(qi - kj).astype(np.float64))


def causal_bias(t_q: int, t_k: int, q_offset: int = 0) -> np.ndarray:
    """MASK_VALUE where key j lies after query position q_offset + i."""
    qi = np.arange(t_q)[:, None] + q_offset
    kj = np.arange(t_k)[None, :]
    return np.where(kj > qi, MASK_VALUE, 0.0)


def key_padding_bias(lengths, t_k: int) -> np.ndarray:
    """(B, 1, 1, t_k) bias hiding keys at or beyond each item's length."""
    lengths = np.asarray(lengths)
    pad = np.arange(t_k)[None, :] >= lengths[:, None]
    return np.where(pad, MASK_VALUE, 0.0)[:, None, None, :]


@dataclass
class SANCache:
    """Keys and values of the steps seen so far, shape (B, h, steps, d/h)."""

    keys: Optional[Tensor] = None
    values: Optional[Tensor] = None

    @property
    def length(self) -> int:
        return 0 if self.keys is None else self.keys.shape[2]

    def extend(self, k: Tensor, v: Tensor) -> "SANCache":
        if self.keys is None:
            return SANCache(k, v)
        return SANCache(T.concat([self.keys, k], axis=2), T.concat([self.values, v], axis=2))


class SANBlock(Module):
    def __init__(self, cfg: SANConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.norm1 = LayerNorm(d)
        # per-head projections W_i in R^{d x d/h}, stored side by side
        self.w_q = T.parameter(glorot(rng, d, cfg.head_dim, (d, d)))
        self.w_k = T.parameter(glorot(rng, d, cfg.head_dim, (d, d)))
        self.w_v = T.parameter(glorot(rng, d, cfg.head_dim, (d, d)))
        self.w_o = T.parameter(glorot(rng, d, d))
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, cfg.d_ff)
        self.ff2 = Linear(rng, cfg.d_ff, d)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.cfg.h, self.cfg.head_dim)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, _, t, _ = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, self.cfg.d))

    def _attend(self, q, k, v, bias, train, rng) -> Tensor:
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.cfg.head_dim))
        weights = T.softmax(scores, bias)
        weights = T.dropout(weights, self.cfg.attention_dropout, rng, train)
        return T.matmul(weights, v)

    def _tail(self, x1: Tensor, attended: Tensor, train: bool, rng) -> Tensor:
        y1 = T.matmul(self._merge(attended), self.w_o)
        x2 = self.norm2(T.dropout(y1, self.cfg.residual_dropout, rng, train) + x1)
        y2 = self.ff2(T.relu(self.ff1(x2)))
        return T.dropout(y2, self.cfg.residual_dropout, rng, train) + x2

    def __call__(self, x: Tensor, bias=None, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        """x: (T, d) or (B, T, d); bias broadcastable to (B, h, T, T)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.cfg.d:
            raise DimensionError("san_forward", x.shape, (self.cfg.d,))
        x1 = self.norm1(x)
        q, k, v = (self._heads(T.matmul(x1, w)) for w in (self.w_q, self.w_k, self.w_v))
        out = self._tail(x1, self._attend(q, k, v, bias, train, rng), train, rng)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def step(self, x_u: Tensor, cache: SANCache, bias_row, train: bool = False,
             rng: Optional[np.random.Generator] = None) -> tuple[Tensor, SANCache]:
        """Process one new position given the cached earlier ones.

        x_u: (B, 1, d). ``bias_row`` has length cache.length + 1 along its last
        axis and holds the bias of the new query against every key so far.
        """
        if x_u.ndim != 3 or x_u.shape[1] != 1 or x_u.shape[-1] != self.cfg.d:
            raise DimensionError("san_forward_incremental", x_u.shape, (self.cfg.d,))
        bias_row = np.asarray(bias_row, dtype=np.float64)
        if bias_row.shape[-1] != cache.length + 1:
            raise ContractError(
                f"bias row covers {bias_row.shape[-1]} keys but the cache holds "
                f"{cache.length} steps; expected {cache.length + 1}"
            )
        x1 = self.norm1(x_u)
        q, k, v = (self._heads(T.matmul(x1, w)) for w in (self.w_q, self.w_k, self.w_v))
        cache = cache.extend(k, v)
        attended = self._attend(q, cache.keys, cache.values, bias_row, train, rng)
        return self._tail(x1, attended, train, rng), cache


def san_forward(x: Tensor, block: SANBlock, bias=None, train: bool = False, rng=None) -> Tensor:
    return block(x, bias, train, rng)


def san_forward_incremental(x_u: Tensor, cache: SANCache, block: SANBlock, bias_row,
                            train: bool = False, rng=None) -> tuple[Tensor, SANCache]:
    return block.step(x_u, cache, bias_row, train, rng)
