"""``saa`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 data or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from saa import gradcheck
from saa.config import RunConfig
from saa.data import SynthTaskConfig, label_names, read_corpus, read_features, read_manifest, synth_generate, write_corpus, write_manifest
from saa.encoder import ChunkSpec, latency_of
from saa.errors import (CheckpointError, ConfigError, DataError, InfeasibleAlignmentError,
                        InputTooShortError, NumericalError, UndefinedCERError)
from saa.lm import perplexity
from saa.model import load_fused, load_lm, load_model
from saa.stream import StreamingRecognizer
from saa.train import evaluate, train_joint, train_lm, train_saa

log = logging.getLogger("saa")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_DATA = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, type=Path, help="key = value run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--chunk", help="streaming geometry past,current,future in frames")
    p.add_argument("--strict", action="store_true", help="fail on infeasible utterances instead of skipping")
    p.add_argument("--joint", action="store_true", help="use the LM-fused model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saa", description="Self-attention aligner toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the aligner, or only the fusion layer with --joint")
    _common(p)

    p = sub.add_parser("eval", help="greedy decoding and CER on a manifest")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path, help="defaults to data.dev")

    p = sub.add_parser("stream", help="simulate online recognition of one feature file")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--features", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every composite op")
    _common(p, config_required=False)
    p.add_argument("--corrupt", metavar="PRIMITIVE",
                   help="negative control: scale this primitive's gradient rule")

    p = sub.add_parser("lm", help="train or evaluate the character LM")
    p.add_argument("action", choices=["train", "eval"])
    _common(p)
    p.add_argument("--corpus", type=Path, help="eval corpus, defaults to data.lm_dev")

    p = sub.add_parser("synth", help="write the synthetic fixture (manifests and LM corpora)")
    _common(p, config_required=False)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--dev", type=int, default=200)
    p.add_argument("--lm-sentences", type=int, default=2000)
    p.add_argument("--noise", type=float, default=1.0)
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig({"preset": "desk"})
    if args.seed is not None:
        cfg = cfg.override(seed=args.seed)
    if args.chunk:
        cfg = cfg.with_chunk(ChunkSpec.parse(args.chunk, cfg["chunk.frame_shift_ms"]))
    return cfg


def _require(cfg: RunConfig, key: str) -> Path:
    path = cfg.path(key)
    if path is None:
        raise ConfigError(f"{key} is not set")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path("out.dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lm_path(cfg: RunConfig) -> Path:
    return cfg.path("out.lm_checkpoint") or _out_dir(cfg) / "lm.ckpt"


def _load(cfg: RunConfig, checkpoint: Optional[Path], joint: bool):
    default = _out_dir(cfg) / ("joint.ckpt" if joint else "model.ckpt")
    path = checkpoint or default
    if joint:
        return load_fused(path, cfg)
    model, _ = load_model(path, cfg)
    return model, None


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    train = read_manifest(_require(cfg, "data.train"), cfg.vocab)
    dev = read_manifest(_require(cfg, "data.dev"), cfg.vocab)
    if args.joint:
        model, _ = load_model(out / "model.ckpt", cfg)
        lm = load_lm(_lm_path(cfg), cfg)
        _, res = train_joint(cfg, model, lm, train, dev, out, args.strict)
        print(f"baseline dev CER {res.baseline_cer:.4f}  step-0 {res.step0_cer:.4f}  "
              f"joint {res.final_cer:.4f}")
        print(f"checkpoint: {out / 'joint.ckpt'}")
        return EXIT_OK
    _, res = train_saa(cfg, train, dev, out, args.strict)
    print(f"best dev CER {res.best_dev_cer:.4f} at epoch {res.best_epoch}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, head = _load(cfg, args.checkpoint, args.joint)
    manifest = args.manifest or _require(cfg, "data.dev")
    utts = read_manifest(manifest, cfg.vocab)
    chunk = cfg.chunk
    if chunk is not None:
        chunk.validate(model.downsample)
        print(f"latency: {latency_of(chunk):g}ms")
    res = evaluate(model, utts, chunk, head=head)
    out = _out_dir(cfg)
    records = res.records(cfg.vocab)
    (out / "eval.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    (out / "eval.hyp").write_text("".join(f"{r['id']}\t{r['hyp']}\n" for r in records))
    print(f"CER {res.cer:.4f} on {len(utts)} utterances ({manifest})")
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg = _config(args)
    chunk = cfg.chunk
    if chunk is None:
        raise ConfigError("stream needs a chunk geometry (--chunk or chunk.* keys)")
    model, head = _load(cfg, args.checkpoint, args.joint)
    feats = read_features(args.features)
    rec = StreamingRecognizer(model, chunk, head)
    print(f"chunk: past={chunk.past} current={chunk.current} future={chunk.future} frames")
    print(f"latency: {latency_of(chunk):g}ms")
    labels = []
    for part in rec.run(feats):
        labels.extend(part.labels)
        text = " ".join(cfg.vocab.decode(part.labels))
        print(f"chunk {part.index} [{part.frames[0]},{part.frames[1]}): {text}", flush=True)
    print(f"final: {' '.join(cfg.vocab.decode(labels))}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else (_config(args)["seed"] if args.config else 0)
    try:
        ok = gradcheck.run(seed, args.corrupt)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_lm(args) -> int:
    cfg = _config(args)
    if args.action == "train":
        corpus = read_corpus(_require(cfg, "data.lm_corpus"), cfg.vocab)
        dev_path = cfg.path("data.lm_dev")
        dev = read_corpus(dev_path, cfg.vocab) if dev_path else None
        path = _lm_path(cfg)
        _, hist = train_lm(cfg, corpus, dev, path)
        last = hist[-1] if hist else {}
        print(" ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in last.items()))
        print(f"checkpoint: {path}")
        return EXIT_OK
    corpus_path = args.corpus or cfg.path("data.lm_dev") or _require(cfg, "data.lm_corpus")
    lm = load_lm(_lm_path(cfg), cfg)
    print(f"perplexity {perplexity(read_corpus(corpus_path, cfg.vocab), lm):.4f} ({corpus_path})")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    labels = cfg.vocab.labels
    task = SynthTaskConfig(vocab_size=len(labels), feature_dim=cfg["encoder.feature_dim"],
                           noise_std=args.noise, seed=cfg["seed"])
    args.out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", args.train), ("dev", args.dev)):
        write_manifest(args.out / f"{split}.jsonl", synth_generate(task, n, split), labels)
    text = synth_generate(task, args.lm_sentences, "lm")
    write_corpus(args.out / "lm.txt", [u.target for u in text], labels)
    write_corpus(args.out / "lm_dev.txt", [u.target for u in synth_generate(task, 200, "lm_dev")], labels)
    print(f"wrote {args.train} train / {args.dev} dev utterances and LM corpora to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "stream": cmd_stream,
            "gradcheck": cmd_gradcheck, "lm": cmd_lm, "synth": cmd_synth}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"saa: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"saa: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, InfeasibleAlignmentError, InputTooShortError,
            UndefinedCERError) as e:
        print(f"saa: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
