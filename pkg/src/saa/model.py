"""The full aligner: encoder, decoder, feature statistics and checkpoints."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from saa import tensor as T
from saa.checkpoint import load_tensors, save_tensors
from saa.config import RunConfig
from saa.data import Batch, FeatureStats
from saa.decoder import Decoder, decode_greedy, decoder_run
from saa.encoder import (AcousticStates, ChunkSpec, Encoder, encoder_forward,
                         encoder_forward_streaming)
from saa.errors import CheckpointError
from saa.lm import SANLM, Fusion
from saa.nn import Module
from saa.tensor import Tensor


def init_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generators per purpose (0 init, 1 dropout, 2 shuffling)."""
    return np.random.default_rng([seed, stream])


class SAAModel(Module):
    def __init__(self, cfg: RunConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or init_rng(cfg["seed"], 0)
        self.vocab = cfg.vocab
        self.encoder = Encoder(cfg.encoder, rng)
        self.decoder = Decoder(cfg.decoder, self.vocab.size, rng)
        self.stats: Optional[FeatureStats] = None

    @property
    def downsample(self) -> int:
        return self.encoder.downsample

    def normalize(self, feats: np.ndarray, lengths) -> np.ndarray:
        if self.stats is None:
            return feats
        out = self.stats.apply(feats)
        # keep batch padding exactly zero
        return out * (np.arange(feats.shape[1])[None, :] < np.asarray(lengths)[:, None])[:, :, None]

    def encode(self, batch: Batch, chunk: Optional[ChunkSpec] = None, train: bool = False,
               rng=None) -> AcousticStates:
        feats = Tensor(self.normalize(batch.features, batch.lengths))
        if chunk is None:
            return encoder_forward(feats, self.encoder, train, rng, batch.lengths)
        return encoder_forward_streaming(feats, self.encoder, chunk, train, rng, batch.lengths)

    def lattice(self, batch: Batch, chunk=None, train: bool = False, rng=None, head=None):
        states = self.encode(batch, chunk, train, rng)
        return decoder_run(states, self.decoder, train, rng, head)

    def decode(self, batch: Batch, chunk=None, head=None) -> list[list[int]]:
        with T.no_grad():
            states = self.encode(batch, chunk)
        return decode_greedy(states, self.decoder, head)

    def tensors(self) -> dict[str, np.ndarray]:
        out = self.state_dict()
        if self.stats is not None:
            out["norm.mean"] = self.stats.mean
            out["norm.std"] = self.stats.std
        return out

    def load_tensors(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        mean, std = state.pop("norm.mean", None), state.pop("norm.std", None)
        own = {k: v for k, v in state.items() if not k.startswith(("lm.", "fusion."))}
        self.load_state_dict(own)
        if mean is not None:
            f = self.encoder.cfg.feature_dim
            if mean.shape != (f,) or std is None or std.shape != (f,):
                raise CheckpointError(f"normalization statistics do not match feature_dim={f}")
            self.stats = FeatureStats(mean, std)


def save_model(path, model: SAAModel, lm: Optional[SANLM] = None, fusion: Optional[Fusion] = None) -> None:
    tensors = model.tensors()
    if lm is not None:
        tensors.update({f"lm.{k}": v for k, v in lm.state_dict().items()})
    if fusion is not None:
        tensors.update({f"fusion.{k}": v for k, v in fusion.state_dict().items()})
    save_tensors(path, tensors)


def load_model(path, cfg: RunConfig) -> tuple[SAAModel, dict[str, np.ndarray]]:
    """Load an aligner checkpoint; returns the model and any lm./fusion. tensors."""
    state = load_tensors(path)
    model = SAAModel(cfg)
    model.load_tensors(state)
    return model, {k: v for k, v in state.items() if k.startswith(("lm.", "fusion."))}


def save_lm(path, lm: SANLM) -> None:
    save_tensors(path, {f"lm.{k}": v for k, v in lm.state_dict().items()})


def strip_prefix(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}


def load_lm(path, cfg: RunConfig) -> SANLM:
    lm = SANLM(cfg.lm, cfg.vocab.size, init_rng(cfg["seed"], 0))
    state = strip_prefix(load_tensors(path), "lm.")
    lm.load_state_dict(state)
    return lm


def load_fused(path, cfg: RunConfig):
    """Load a joint checkpoint; returns the aligner and a ready FusedHead."""
    from saa.lm import FusedHead

    model, extra = load_model(path, cfg)
    lm_state, fusion_state = strip_prefix(extra, "lm."), strip_prefix(extra, "fusion.")
    if not lm_state or not fusion_state:
        raise CheckpointError(f"{path} holds no lm./fusion. tensors; is it a joint checkpoint?")
    lm = SANLM(cfg.lm, cfg.vocab.size, init_rng(cfg["seed"], 0))
    lm.load_state_dict(lm_state)
    fusion = Fusion(model.decoder.head, lm.cfg.san.d, init_rng(cfg["seed"], 20))
    fusion.load_state_dict(fusion_state)
    return model, FusedHead(lm, fusion, model.decoder.blank_id)
