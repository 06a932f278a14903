"""Auto-regressive SAN decoder with argmax feedback.

Step u consumes concat(h_{u-1}, embed(z_{u-1})) and emits logits from
concat(san_out_u, h_u). Step 1 uses a zero vector for h_0 and the blank
label for z_0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from saa import tensor as T
from saa.encoder import AcousticStates
from saa.nn import Linear, Module, glorot
from saa.san import SANBlock, SANCache, SANConfig, causal_bias, proximity_bias
from saa.tensor import Tensor


@dataclass
class Vocab:
    labels: list[str]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise ValueError("vocabulary labels must be non-empty and unique")
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def blank_id(self) -> int:
        return len(self.labels)

    @property
    def sos_id(self) -> int:
        return len(self.labels) + 1

    def encode(self, tokens: Sequence[str]) -> list[int]:
        from saa.errors import DataError

        try:
            return [self._index[t] for t in tokens]
        except KeyError as e:
            raise DataError(f"label {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in ids]


@dataclass
class DecoderConfig:
    k: int = 2
    embed_dim: Optional[int] = None
    san: SANConfig = field(default_factory=SANConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("decoder needs k >= 1")
        if self.embed_dim is None:
            self.embed_dim = max(1, self.san.d // 4)


@dataclass
class AlignmentLattice:
    log_probs: Tensor  # (B, U, L+1)
    lengths: np.ndarray


def beta_collapse(z: Sequence[int], blank: int) -> list[int]:
    """Drop blanks; repeated labels are kept."""
    return [int(v) for v in z if v != blank]


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, n_labels: int, rng: np.random.Generator):
        super().__init__()
        d = cfg.san.d
        self.cfg = cfg
        self.n_labels = n_labels
        self.embed = T.parameter(glorot(rng, n_labels + 1, cfg.embed_dim))
        self.in_proj = Linear(rng, d + cfg.embed_dim, d)
        self.blocks = [SANBlock(cfg.san, rng) for _ in range(cfg.k)]
        self.head = Linear(rng, 2 * d, n_labels + 1)

    @property
    def blank_id(self) -> int:
        return self.n_labels

    def shifted_inputs(self, h: Tensor, z: np.ndarray) -> Tensor:
        """Inputs for every step given the whole alignment z (B, U)."""
        b, u, d = h.shape
        h_prev = T.concat([Tensor(np.zeros((b, 1, d))), h[:, :u - 1]], axis=1)
        z_prev = np.concatenate([np.full((b, 1), self.blank_id), z[:, :u - 1]], axis=1)
        return self.in_proj(T.concat([h_prev, T.embedding(z_prev, self.embed)], axis=-1))

    def states_parallel(self, h: Tensor, z: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """Pre-logit states (B, U, 2d) for a fixed feedback path z."""
        u = h.shape[1]
        x = self.shifted_inputs(h, z)
        bias = causal_bias(u, u) + proximity_bias(u, u)
        for blk in self.blocks:
            x = blk(x, bias, train, rng)
        return T.concat([x, h], axis=-1)

    def step(self, h_prev: Tensor, h_cur: Tensor, z_prev: np.ndarray, caches: list[SANCache],
             u: int, train: bool = False, rng=None) -> tuple[Tensor, list[SANCache]]:
        """One step (0-based index u): rows are (B, 1, d); returns (B, 1, 2d)."""
        emb = T.embedding(np.asarray(z_prev)[:, None], self.embed)
        x = self.in_proj(T.concat([h_prev, emb], axis=-1))
        bias_row = proximity_bias(1, u + 1, q_offset=u)
        new = []
        for blk, cache in zip(self.blocks, caches):
            x, cache = blk.step(x, cache, bias_row, train, rng)
            new.append(cache)
        return T.concat([x, h_cur], axis=-1), new

    def empty_caches(self) -> list[SANCache]:
        return [SANCache() for _ in self.blocks]


class BaselineHead:
    """Plain output projection; the joint model swaps in a fused head."""

    def __init__(self, decoder: Decoder):
        self.decoder = decoder

    def reset(self, batch: int) -> None:
        pass

    def step(self, pre: Tensor, z_prev: np.ndarray) -> Tensor:
        return self.decoder.head(pre)

    def parallel(self, pre: Tensor, z: np.ndarray) -> Tensor:
        return self.decoder.head(pre)


def greedy_incremental(decoder: Decoder, h: Tensor, head=None, train: bool = False,
                       rng=None) -> tuple[Tensor, np.ndarray]:
    """Run the decoder step by step with caches; returns ((B, U, L+1) log-probs, z)."""
    head = head or BaselineHead(decoder)
    b, u_max, d = h.shape
    head.reset(b)
    caches = decoder.empty_caches()
    z = np.zeros((b, u_max), dtype=np.int64)
    z_prev = np.full(b, decoder.blank_id)
    h_prev = Tensor(np.zeros((b, 1, d)))
    rows = []
    for u in range(u_max):
        h_cur = h[:, u:u + 1]
        pre, caches = decoder.step(h_prev, h_cur, z_prev, caches, u, train, rng)
        row = T.log_softmax(head.step(pre, z_prev))
        rows.append(row)
        z[:, u] = np.argmax(row.data[:, 0], axis=-1)
        z_prev, h_prev = z[:, u], h_cur
    return T.concat(rows, axis=1), z


def decoder_run(states: AcousticStates, decoder: Decoder, train: bool = False, rng=None,
                head=None) -> tuple[AlignmentLattice, np.ndarray]:
    """Greedy-feedback decoding producing the alignment lattice and path z.

    In training the path is found first by the cached eval-mode pass (argmax
    feedback carries no gradient), then every step is recomputed in one causal
    pass along that path so the lattice is differentiable and sees dropout.
    """
    head = head or BaselineHead(decoder)
    if not train:
        lp, z = greedy_incremental(decoder, states.h, head)
        return AlignmentLattice(lp, states.lengths), z
    with T.no_grad():
        _, z = greedy_incremental(decoder, states.h, head)
    pre = decoder.states_parallel(states.h, z, train, rng)
    lp = T.log_softmax(head.parallel(pre, z))
    return AlignmentLattice(lp, states.lengths), z


def decode_greedy(states: AcousticStates, decoder: Decoder, head=None) -> list[list[int]]:
    with T.no_grad():
        _, z = greedy_incremental(decoder, states.h, head)
    return [beta_collapse(z[i, :n], decoder.blank_id) for i, n in enumerate(states.lengths)]
