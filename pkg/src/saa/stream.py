"""Online recognition: encode one chunk at a time and extend the decoder in place."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from saa import tensor as T
from saa.decoder import BaselineHead
from saa.encoder import ChunkSpec, chunk_segment
from saa.errors import InputTooShortError
from saa.model import SAAModel
from saa.tensor import Tensor


@dataclass
class Partial:
    index: int
    frames: tuple[int, int]  # current part, absolute frames
    labels: list[int]  # labels emitted while decoding this chunk's positions


class StreamingRecognizer:
    """Decodes a chunk as soon as its future context has arrived.

    The decoder is causal, so carrying its caches across chunks gives the same
    alignment as decoding the concatenated streaming encoding in one go.
    """

    def __init__(self, model: SAAModel, spec: ChunkSpec, head=None):
        spec.validate(model.downsample)
        self.model = model
        self.spec = spec
        self.head = head or BaselineHead(model.decoder)

    def run(self, features: np.ndarray) -> Iterator[Partial]:
        model, dec, d = self.model, self.model.decoder, self.model.downsample
        t = features.shape[0]
        if t < d:
            raise InputTooShortError(f"utterance of {t} frames is shorter than the downsampling factor {d}")
        feats = model.normalize(features[None], [t])[0]
        self.head.reset(1)
        caches = dec.empty_caches()
        z_prev = np.array([dec.blank_id])
        h_prev = Tensor(np.zeros((1, 1, dec.cfg.san.d)))
        u = 0
        with T.no_grad():
            for i, ch in enumerate(chunk_segment(t, self.spec)):
                lo, hi = max(ch.abs_start, 0), min(ch.abs_end, t)
                h, _ = model.encoder(Tensor(feats[None, lo:hi]), [hi - lo])
                cur_lo, cur_hi = ch.current_range
                states = h[:, (cur_lo - lo) // d:-(-(cur_hi - lo) // d)]
                labels = []
                for j in range(states.shape[1]):
                    h_cur = states[:, j:j + 1]
                    pre, caches = dec.step(h_prev, h_cur, z_prev, caches, u)
                    z = int(np.argmax(T.log_softmax(self.head.step(pre, z_prev)).data[0, 0]))
                    if z != dec.blank_id:
                        labels.append(z)
                    z_prev, h_prev, u = np.array([z]), h_cur, u + 1
                yield Partial(i, ch.current_range, labels)
