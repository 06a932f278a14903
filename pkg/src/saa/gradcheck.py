"""Finite-difference checks over every composite op at tiny shapes."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from saa import tensor as T
from saa.alignment import confidence_penalty, rna_loss_dp
from saa.decoder import Decoder, DecoderConfig
from saa.encoder import Encoder, EncoderConfig, encoder_forward, frontend_forward
from saa.lm import FusedHead, Fusion, LMConfig, SANLM
from saa.nn import Linear, Module
from saa.san import SANBlock, SANConfig, causal_bias, proximity_bias
from saa.tensor import Tensor, grad_check

TOLERANCE = 1e-4
STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_index: tuple
    checked: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28} max_rel_err={self.max_rel_error:.2e} "
                f"worst={self.worst_index} coords={self.checked}")


def _jitter(module: Module, rng: np.random.Generator, scale: float = 0.2) -> None:
    # moves norms and zero-initialized biases off their symmetric starting point
    for _, p in module.named_parameters():
        p.data += scale * rng.normal(size=p.shape)


def _cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, Tensor]]:
    san = SANConfig(8, 2, 16, 0.0, 0.0)

    block = SANBlock(san, rng)
    _jitter(block, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    bias = proximity_bias(5, 5) + causal_bias(5, 5)
    r = rng.normal(size=(2, 5, 8))
    f = lambda _: T.sum_(block(x, bias) * r)
    yield "san_block/input", f, x
    yield "san_block/w_q", f, block.w_q
    yield "san_block/ff1", f, block.ff1.weight

    enc = Encoder(EncoderConfig(6, 3, 1, 2, san=san), rng)
    _jitter(enc, rng, 0.1)
    feats = Tensor(rng.normal(size=(9, 6)))
    r_fe = rng.normal(size=(5, 8))
    f_fe = lambda _: T.sum_(frontend_forward(feats, enc) * r_fe)
    yield "frontend_mu/input", f_fe, feats
    yield "frontend_mu/gate", f_fe, enc.frontend.gate_w
    yield "frontend_mu/cand", f_fe, enc.frontend.cand_w
    r_enc = rng.normal(size=(1, 3, 8))
    f_enc = lambda _: T.sum_(encoder_forward(feats, enc).h * r_enc)
    yield "encoder/input", f_enc, feats
    yield "encoder/stage2_w_v", f_enc, enc.blocks[1].w_v

    n_labels = 3
    dec = Decoder(DecoderConfig(2, san=san), n_labels, rng)
    _jitter(dec, rng)
    h = Tensor(rng.normal(size=(2, 3, 8)))
    z_prev = [np.array([n_labels, n_labels]), np.array([0, n_labels]), np.array([2, 1])]
    r_dec = rng.normal(size=(2, 1, n_labels + 1))

    def f_dec(_):
        caches = dec.empty_caches()
        h_prev = Tensor(np.zeros((2, 1, 8)))
        total = None
        for u in range(3):
            pre, caches = dec.step(h_prev, h[:, u:u + 1], z_prev[u], caches, u)
            term = T.sum_(T.log_softmax(dec.head(pre)) * r_dec)
            total = term if total is None else total + term
            h_prev = h[:, u:u + 1]
        return total

    yield "decoder_step/states", f_dec, h
    yield "decoder_step/embed", f_dec, dec.embed
    yield "decoder_step/in_proj", f_dec, dec.in_proj.weight

    logits = Tensor(rng.normal(size=(2, 5, n_labels + 1)))
    targets, lengths = [[0, 2, 2], [1]], [5, 3]
    yield "rna_loss", lambda t: rna_loss_dp(T.log_softmax(t), targets, n_labels, lengths), logits
    yield "confidence_penalty", lambda t: confidence_penalty(T.log_softmax(t), lengths), logits

    lm = SANLM(LMConfig(2, san), n_labels, rng)
    _jitter(lm, rng)
    fusion = Fusion(Linear(rng, 16, n_labels + 1), 8, rng)
    _jitter(fusion, rng)
    fused = FusedHead(lm, fusion, n_labels)
    z = np.array([[0, n_labels, 1, 1], [n_labels, 2, n_labels, 0]])
    pre = Tensor(rng.normal(size=(2, 4, 16)))
    r_fu = rng.normal(size=(2, 4, n_labels + 1))
    f_fu = lambda _: T.sum_(T.log_softmax(fused.parallel(pre, z)) * r_fu)
    yield "fusion/w_lm", f_fu, fusion.w_lm
    yield "fusion/gate", f_fu, fusion.gate.weight
    yield "fusion/decoder_state", f_fu, pre


def run_suite(seed: int = 0, tol: float = TOLERANCE, step: float = STEP,
              max_coords: Optional[int] = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, f, x in _cases(rng):
        rep = grad_check(f, x, step=step, max_coords=max_coords, rng=np.random.default_rng(seed))
        ok = bool(np.isfinite(rep.max_rel_error) and rep.max_rel_error < tol)
        out.append(CheckResult(name, rep.max_rel_error, rep.worst_index, rep.checked, ok))
    return out


# -- negative control -------------------------------------------------------
def _scaled_backward(fn: Callable, factor: float) -> Callable:
    def wrong(*args, **kwargs):
        out = fn(*args, **kwargs)
        if out._backward is not None:
            rule = out._backward
            out._backward = lambda g: tuple(None if d is None else d * factor for d in rule(g))
        return out

    wrong.__name__ = fn.__name__
    return wrong


@contextlib.contextmanager
def corrupted_rule(primitive: str, factor: float = 1.5):
    """Temporarily scale one primitive's gradient rule by ``factor``."""
    catalog = T.primitive_set()
    if primitive not in catalog:
        raise KeyError(f"unknown primitive {primitive!r}; choose from {sorted(catalog)}")
    attr = catalog[primitive].__name__
    original = getattr(T, attr)
    setattr(T, attr, _scaled_backward(original, factor))
    try:
        yield
    finally:
        setattr(T, attr, original)


def run(seed: int = 0, corrupt: Optional[str] = None, echo: Callable[[str], None] = print) -> bool:
    t0 = time.monotonic()
    ctx = corrupted_rule(corrupt) if corrupt else contextlib.nullcontext()
    with ctx:
        results = run_suite(seed)
    for r in results:
        echo(r.line())
    failed = [r for r in results if not r.passed]
    echo(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.monotonic() - t0:.1f}s")
    return not failed
