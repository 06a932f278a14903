"""Training and evaluation loops for the aligner, the LM and the joint stage."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from saa import tensor as T
from saa.alignment import confidence_penalty, rna_loss_dp
from saa.config import RunConfig
from saa.data import Batch, FeatureStats, Utterance, batches, cer, corpus_cer, make_batch
from saa.decoder import beta_collapse, greedy_incremental
from saa.encoder import ChunkSpec
from saa.errors import DataError, UndefinedCERError
from saa.lm import SANLM, FusedHead, Fusion, lm_nll, perplexity
from saa.model import SAAModel, init_rng, save_lm, save_model
from saa.optim import Adam

log = logging.getLogger(__name__)


def feasible(utts: Sequence[Utterance], downsample: int, strict: bool = False) -> list[Utterance]:
    """Drop utterances whose target is longer than their encoded length."""
    keep = [u for u in utts if len(u.target) <= -(-u.features.shape[0] // downsample)]
    dropped = len(utts) - len(keep)
    if dropped:
        if strict:
            raise DataError(f"{dropped} utterances have more labels than encoded frames")
        log.warning("skipping %d infeasible utterances (target longer than encoded length)", dropped)
    return keep


def batch_loss(model: SAAModel, batch: Batch, penalty: float, chunk=None, train=False, rng=None,
               head=None) -> T.Tensor:
    lattice, _ = model.lattice(batch, chunk, train, rng, head)
    loss = rna_loss_dp(lattice.log_probs, batch.targets, model.decoder.blank_id, lattice.lengths)
    if penalty:
        loss = loss + penalty * confidence_penalty(lattice.log_probs, lattice.lengths)
    return loss


@dataclass
class EvalResult:
    cer: float
    hyps: list[list[int]]
    refs: list[list[int]]
    ids: list[str]

    def records(self, vocab) -> list[dict]:
        out = []
        for i, r, h in zip(self.ids, self.refs, self.hyps):
            try:
                score = cer(r, h)
            except UndefinedCERError:
                score = None
            out.append({"id": i, "hyp": " ".join(vocab.decode(h)), "ref": " ".join(vocab.decode(r)),
                        "cer": score})
        return out


def evaluate(model: SAAModel, utts: Sequence[Utterance], chunk: Optional[ChunkSpec] = None,
             batch_size: int = 64, head=None) -> EvalResult:
    hyps, refs, ids = [], [], []
    for i in range(0, len(utts), batch_size):
        b = make_batch(utts[i:i + batch_size])
        hyps.extend(model.decode(b, chunk, head))
        refs.extend(b.targets)
        ids.extend(b.ids)
    return EvalResult(corpus_cer(refs, hyps), hyps, refs, ids)


@dataclass
class TrainResult:
    best_dev_cer: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


class MetricsLog:
    def __init__(self, path: Optional[Path]):
        self.path = path
        if path:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, rec: dict) -> None:
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def _prepare(cfg: RunConfig, model: SAAModel, train_utts, dev_utts, strict: bool):
    model.stats = FeatureStats.fit(u.features for u in train_utts)
    train_utts = feasible(train_utts, model.downsample, strict)
    return train_utts, list(dev_utts)


def train_saa(cfg: RunConfig, train_utts: Sequence[Utterance], dev_utts: Sequence[Utterance],
              out_dir: Optional[Path] = None, strict: bool = False,
              on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[SAAModel, TrainResult]:
    """Train from scratch with loss = alignment NLL + penalty * sum(p log p).

    The best-dev-CER weights are restored into the returned model and, when
    ``out_dir`` is given, saved as ``model.ckpt`` next to ``config.resolved``.
    """
    seed = cfg["seed"]
    model = SAAModel(cfg, init_rng(seed, 0))
    drop_rng, shuf_rng = init_rng(seed, 1), init_rng(seed, 2)
    train_utts, dev_utts = _prepare(cfg, model, list(train_utts), dev_utts, strict)
    chunk = cfg.chunk
    if chunk is not None:
        chunk.validate(model.downsample)
    opt = Adam(model.parameters(), cfg["train.lr"], cfg["train.warmup"], clip=cfg["train.clip"])
    out_dir = Path(out_dir) if out_dir else None
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    if out_dir:
        (out_dir / "config.resolved").write_text(cfg.render())

    best, best_state, t0 = None, None, time.monotonic()
    history = []
    budget = cfg["train.max_minutes"] * 60
    for epoch in range(1, cfg["train.epochs"] + 1):
        total, count = 0.0, 0
        for b in batches(train_utts, cfg["train.batch_size"], shuf_rng):
            opt.zero_grad()
            loss = batch_loss(model, b, cfg["train.penalty"], chunk, True, drop_rng)
            loss.backward()
            opt.step()
            total += loss.item()
            count += len(b.ids)
        dev = evaluate(model, dev_utts, chunk)
        rec = {"epoch": epoch, "train_loss": total / count, "dev_cer": dev.cer, "lr": opt.lr,
               "steps": opt.t, "elapsed_s": round(time.monotonic() - t0, 2)}
        history.append(rec)
        metrics.write(rec)
        log.info("epoch %d train_loss %.4f dev_cer %.4f", epoch, rec["train_loss"], dev.cer)
        if on_epoch:
            on_epoch(rec)
        if best is None or dev.cer < best[0]:
            best = (dev.cer, epoch)
            best_state = model.state_dict()
        if budget and time.monotonic() - t0 > budget:
            log.info("time budget reached after epoch %d", epoch)
            break
    model.load_state_dict(best_state)
    result = TrainResult(best[0], best[1], history)
    if out_dir:
        result.checkpoint = out_dir / "model.ckpt"
        save_model(result.checkpoint, model)
    return model, result


def train_lm(cfg: RunConfig, corpus: Sequence[Sequence[int]], dev: Optional[Sequence] = None,
             out_path: Optional[Path] = None) -> tuple[SANLM, list[dict]]:
    seed = cfg["seed"]
    lm = SANLM(cfg.lm, cfg.vocab.size, init_rng(seed, 10))
    drop_rng, shuf_rng = init_rng(seed, 11), init_rng(seed, 12)
    opt = Adam(lm.parameters(), cfg["lm_train.lr"], cfg["lm_train.warmup"], clip=cfg["train.clip"])
    bs = cfg["lm_train.batch_size"]
    history = []
    corpus = [list(s) for s in corpus if len(s)]
    for epoch in range(1, cfg["lm_train.epochs"] + 1):
        order = shuf_rng.permutation(len(corpus))
        total = count = 0
        for i in range(0, len(order), bs):
            opt.zero_grad()
            nll, n = lm_nll(lm, [corpus[j] for j in order[i:i + bs]], True, drop_rng)
            (nll * (1.0 / n)).backward()
            opt.step()
            total += nll.item()
            count += n
        rec = {"epoch": epoch, "train_ppl": float(np.exp(total / count))}
        if dev:
            rec["dev_ppl"] = perplexity(dev, lm)
        history.append(rec)
        log.info("lm epoch %d %s", epoch, rec)
    if out_path:
        save_lm(out_path, lm)
    return lm, history


@dataclass
class JointResult:
    baseline_cer: float
    step0_cer: float
    final_cer: float
    history: list[dict]


def joint_lattice(model: SAAModel, head: FusedHead, batch: Batch, chunk=None) -> tuple[T.Tensor, np.ndarray]:
    """Fused lattice with gradient reaching only the fusion parameters."""
    with T.no_grad():
        states = model.encode(batch, chunk)
        _, z = greedy_incremental(model.decoder, states.h, head)
        pre = model.decoder.states_parallel(states.h, z)
        lm_state = head.lm_states(z)
    return T.log_softmax(head.fusion(pre, lm_state)), states.lengths


def train_joint(cfg: RunConfig, model: SAAModel, lm: SANLM, train_utts: Sequence[Utterance],
                dev_utts: Sequence[Utterance], out_dir: Optional[Path] = None,
                strict: bool = False) -> tuple[Fusion, JointResult]:
    """Freeze the aligner and the LM, then optimize the fusion layer alone."""
    if lm.cfg.use_proximity_bias:
        raise ValueError("joint training requires an LM trained without proximity bias")
    if lm.n_labels != model.vocab.size:
        raise DataError(f"LM has {lm.n_labels} labels, aligner has {model.vocab.size}")
    model.freeze()
    lm.freeze()
    fusion = Fusion(model.decoder.head, lm.cfg.san.d, init_rng(cfg["seed"], 20))
    head = FusedHead(lm, fusion, model.decoder.blank_id)
    chunk = cfg.chunk
    train_utts = feasible(list(train_utts), model.downsample, strict)
    shuf_rng = init_rng(cfg["seed"], 21)
    opt = Adam(fusion.parameters(), cfg["joint.lr"], cfg["joint.warmup"], clip=cfg["train.clip"])

    baseline = evaluate(model, dev_utts, chunk).cer
    step0 = evaluate(model, dev_utts, chunk, head=head).cer
    history = [{"epoch": 0, "dev_cer": step0, "baseline_dev_cer": baseline}]
    metrics = MetricsLog(Path(out_dir) / "joint_metrics.jsonl" if out_dir else None)
    metrics.write(history[0])
    best = (step0, fusion.state_dict())
    for epoch in range(1, cfg["joint.epochs"] + 1):
        total = count = 0
        for b in batches(train_utts, cfg["train.batch_size"], shuf_rng):
            opt.zero_grad()
            lp, lengths = joint_lattice(model, head, b, chunk)
            loss = rna_loss_dp(lp, b.targets, model.decoder.blank_id, lengths)
            if cfg["train.penalty"]:
                loss = loss + cfg["train.penalty"] * confidence_penalty(lp, lengths)
            loss.backward()
            opt.step()
            total += loss.item()
            count += len(b.ids)
        dev = evaluate(model, dev_utts, chunk, head=head).cer
        rec = {"epoch": epoch, "train_loss": total / count, "dev_cer": dev}
        history.append(rec)
        metrics.write(rec)
        log.info("joint epoch %d %s", epoch, rec)
        if dev <= best[0]:
            best = (dev, fusion.state_dict())
    fusion.load_state_dict(best[1])
    if out_dir:
        save_model(Path(out_dir) / "joint.ckpt", model, lm, fusion)
    return fusion, JointResult(baseline, step0, best[0], history)
