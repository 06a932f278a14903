"""Character SAN language model and its fusion with the aligner's decoder.

During joint training the LM reads the decoder's argmax path with blanks
replaced by the most recent real label (``<sos>`` before any), and attention
is masked so that substituted positions are never used as keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from saa import tensor as T
from saa.errors import ContractError
from saa.nn import Linear, Module, glorot
from saa.san import SANBlock, SANCache, SANConfig, causal_bias, proximity_bias
from saa.tensor import MASK_VALUE, Tensor


def _lm_san_default() -> SANConfig:
    return SANConfig(residual_dropout=0.2, attention_dropout=0.2)


@dataclass
class LMConfig:
    layers: int = 3
    san: SANConfig = field(default_factory=_lm_san_default)
    use_proximity_bias: bool = False
    joint: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("LM needs at least one layer")
        if self.joint and self.use_proximity_bias:
            raise ValueError("joint training requires the LM without proximity bias")


@dataclass
class LMStream:
    inputs: list[int]
    legal_mask: list[bool]


def blank_substitute(z: Sequence[int], blank: int, sos: int) -> LMStream:
    """Stream s_0..s_U for an alignment z_1..z_U.

    s_0 is <sos>; a blank repeats the previous stream entry. A position is
    legal when its original label was real (position 0 always is).
    """
    inputs, legal = [sos], [True]
    for v in z:
        v = int(v)
        if v == blank:
            inputs.append(inputs[-1])
            legal.append(False)
        else:
            inputs.append(v)
            legal.append(True)
    return LMStream(inputs, legal)


def lm_attention_mask(legal_mask) -> np.ndarray:
    """(M, M) bias: masked when the key is in the future or illegal."""
    legal = np.asarray(legal_mask, dtype=bool)
    m = len(legal)
    bias = causal_bias(m, m)
    bias[:, ~legal] = MASK_VALUE
    return bias


class SANLM(Module):
    """Causal SAN stack over embedded tokens predicting the next real label."""

    def __init__(self, cfg: LMConfig, n_labels: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.n_labels = n_labels
        self.sos_id = n_labels + 1
        # row n_labels would be the blank; it exists only to share label ids
        self.embed = T.parameter(glorot(rng, n_labels + 2, cfg.san.d))
        self.blocks = [SANBlock(cfg.san, rng) for _ in range(cfg.layers)]
        self.out = Linear(rng, cfg.san.d, n_labels)

    def _check(self, tokens: np.ndarray) -> None:
        if (tokens == self.n_labels).any():
            raise ContractError("blank label in LM input")
        if tokens.size and (tokens.min() < 0 or tokens.max() > self.sos_id):
            raise ContractError("LM input id out of range")

    def _bias(self, m: int) -> np.ndarray:
        bias = causal_bias(m, m)
        if self.cfg.use_proximity_bias:
            bias = bias + proximity_bias(m, m)
        return bias

    def states(self, tokens, bias=None, train: bool = False, rng=None) -> Tensor:
        """Hidden states (B, M, d) for token ids (B, M)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        self._check(tokens)
        x = T.embedding(tokens, self.embed)
        if bias is None:
            bias = self._bias(tokens.shape[1])
        for blk in self.blocks:
            x = blk(x, bias, train, rng)
        return x

    def step(self, token: np.ndarray, caches: list[SANCache], key_bias: np.ndarray,
             ) -> tuple[Tensor, list[SANCache]]:
        """Advance all streams by one token; ``key_bias`` is (B, 1, 1, steps+1)."""
        x = T.embedding(np.asarray(token)[:, None], self.embed)
        new = []
        for blk, cache in zip(self.blocks, caches):
            x, cache = blk.step(x, cache, key_bias)
            new.append(cache)
        return x, new

    def __call__(self, tokens, train: bool = False, rng=None) -> Tensor:
        return T.log_softmax(self.out(self.states(tokens, None, train, rng)))


def lm_forward(tokens, lm: SANLM, train: bool = False, rng=None) -> Tensor:
    """(M,) or (B, M) tokens -> next-token log-distributions over real labels."""
    out = lm(tokens, train, rng)
    return T.reshape(out, out.shape[1:]) if np.ndim(tokens) == 1 else out


def lm_nll(lm: SANLM, sentences: Sequence[Sequence[int]], train: bool = False, rng=None) -> tuple[Tensor, int]:
    """Summed next-token NLL of <sos>-prefixed sentences and the token count."""
    m = max(len(s) for s in sentences) + 1
    tokens = np.full((len(sentences), m), lm.sos_id, dtype=np.int64)
    targets = np.zeros((len(sentences), m), dtype=np.int64)
    mask = np.zeros((len(sentences), m))
    for i, s in enumerate(sentences):
        tokens[i, 1:len(s) + 1] = s
        targets[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    lp = lm(tokens, train, rng)
    return T.nll_gather(lp, targets, mask), int(mask.sum())


def perplexity(corpus: Sequence[Sequence[int]], lm: SANLM, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(corpus), batch_size):
            nll, n = lm_nll(lm, corpus[i:i + batch_size])
            total += nll.item()
            count += n
    return math.exp(total / count)


class Fusion(Module):
    """logits = dec_state W_dec + sigmoid(lm_state W_g + b_g) W_lm + b.

    Equivalent to one linear layer over concat(dec_state, gated LM state).
    W_dec and b start as copies of the decoder head and W_lm starts at zero,
    so the fused model initially reproduces the baseline outputs exactly.
    """

    def __init__(self, head: Linear, lm_dim: int, rng: np.random.Generator):
        super().__init__()
        n_out = head.weight.shape[1]
        self.w_dec = T.parameter(head.weight.data.copy())
        self.gate = Linear(rng, lm_dim, lm_dim)
        self.w_lm = T.parameter(np.zeros((lm_dim, n_out)))
        self.bias = T.parameter(head.bias.data.copy())

    def __call__(self, dec_state: Tensor, lm_state: Tensor) -> Tensor:
        lm_part = T.matmul(T.sigmoid(self.gate(lm_state)), self.w_lm)
        return T.add(T.add(T.matmul(dec_state, self.w_dec), lm_part), self.bias)


def fused_logits(decoder_state: Tensor, lm_state: Tensor, fusion: Fusion) -> Tensor:
    return fusion(decoder_state, lm_state)


class FusedHead:
    """Decoder head replacement that runs the LM alongside the decoder.

    Step u feeds the LM the substituted label for z_{u-1}; the LM state at
    that stream position goes into the fusion layer.
    """

    def __init__(self, lm: SANLM, fusion: Fusion, blank: int):
        self.lm = lm
        self.fusion = fusion
        self.blank = blank

    def reset(self, batch: int) -> None:
        self.caches = [SANCache() for _ in self.lm.blocks]
        self.prev = np.full(batch, self.lm.sos_id)
        self.legal: list[np.ndarray] = []
        self.steps = 0

    def step(self, pre: Tensor, z_prev: np.ndarray) -> Tensor:
        if self.steps == 0:
            token, legal = self.prev, np.ones(len(self.prev), dtype=bool)
        else:
            legal = np.asarray(z_prev) != self.blank
            token = np.where(legal, z_prev, self.prev)
        self.legal.append(legal)
        self.prev = token
        self.steps += 1
        legal_hist = np.stack(self.legal, axis=1)  # (B, steps)
        key_bias = np.where(legal_hist, 0.0, MASK_VALUE)[:, None, None, :]
        state, self.caches = self.lm.step(token, self.caches, key_bias)
        return self.fusion(pre, state)

    def lm_states(self, z: np.ndarray) -> Tensor:
        """LM states for every decoder step of a fixed path z (B, U)."""
        b, u = z.shape
        tokens = np.zeros((b, u), dtype=np.int64)
        bias = np.zeros((b, 1, u, u))
        for i in range(b):
            stream = blank_substitute(z[i, :u - 1], self.blank, self.lm.sos_id)
            tokens[i] = stream.inputs
            bias[i, 0] = lm_attention_mask(stream.legal_mask)
        return self.lm.states(tokens, bias)

    def parallel(self, pre: Tensor, z: np.ndarray) -> Tensor:
        return self.fusion(pre, self.lm_states(z))
