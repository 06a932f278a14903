import json
import math

import numpy as np
import pytest

from conftest import TINY, config_text
from saa.cli import main
from saa.config import RunConfig
from saa.data import make_batch, read_features, read_manifest
from saa.encoder import ChunkSpec
from saa.model import load_model
from saa.stream import StreamingRecognizer


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    values = {**TINY, "data.train": "data/train.jsonl", "data.dev": "data/dev.jsonl",
              "data.lm_corpus": "data/lm.txt", "data.lm_dev": "data/lm_dev.txt", "out.dir": "run"}
    (root / "run.cfg").write_text(config_text(values))
    assert main(["synth", "--config", str(root / "run.cfg"), "--out", str(root / "data"),
                 "--train", "32", "--dev", "8", "--lm-sentences", "40"]) == 0
    assert main(["train", "--config", str(root / "run.cfg")]) == 0
    return root


def cfg_arg(root):
    return ["--config", str(root / "run.cfg")]


def test_train_outputs(run_dir):
    run = run_dir / "run"
    assert {"model.ckpt", "metrics.jsonl", "config.resolved"} <= {p.name for p in run.iterdir()}
    echo = RunConfig.load(run / "config.resolved")
    assert echo["model.d"] == 16 and echo.path("data.train") == run_dir / "data" / "train.jsonl"


def test_eval_reproduces_training_dev_cer(run_dir, capsys):
    best = min(json.loads(x)["dev_cer"] for x in (run_dir / "run" / "metrics.jsonl").read_text().splitlines())
    capsys.readouterr()
    assert main(["eval", *cfg_arg(run_dir)]) == 0
    out = capsys.readouterr().out
    assert f"CER {best:.4f}" in out
    recs = [json.loads(x) for x in (run_dir / "run" / "eval.jsonl").read_text().splitlines()]
    assert len(recs) == 8 and {"id", "hyp", "ref", "cer"} <= set(recs[0])
    assert len((run_dir / "run" / "eval.hyp").read_text().splitlines()) == 8


def test_degenerate_chunk_eval_equals_full(run_dir, capsys):
    capsys.readouterr()
    main(["eval", *cfg_arg(run_dir)])
    full = capsys.readouterr().out.splitlines()[-1]
    assert main(["eval", *cfg_arg(run_dir), "--chunk", "0,4096,0"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "latency: 0ms" and out[-1] == full


def test_stream_matches_streaming_eval(run_dir, capsys):
    cfg = RunConfig.load(run_dir / "run.cfg")
    model, _ = load_model(run_dir / "run" / "model.ckpt", cfg)
    utt = read_manifest(run_dir / "data" / "dev.jsonl", cfg.vocab)[0]
    spec = ChunkSpec(8, 8, 4)
    want = model.decode(make_batch([utt]), spec)[0]
    feat = next((run_dir / "data" / "dev_feats").glob("dev-00000.feat"))
    capsys.readouterr()
    assert main(["stream", *cfg_arg(run_dir), "--chunk", "8,8,4", "--features", str(feat)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1] == "latency: 40ms"
    chunks = [ln for ln in lines if ln.startswith("chunk ") and "[" in ln]
    assert len(chunks) == math.ceil(read_features(feat).shape[0] / 8)
    parts = [t for ln in chunks for t in ln.split(": ", 1)[1].split()]
    final = lines[-1].split(":", 1)[1].split()
    assert parts == final == cfg.vocab.decode(want)

    rec = StreamingRecognizer(model, spec)
    assert [lab for p in rec.run(utt.features) for lab in p.labels] == want


def test_stream_latency_header(run_dir, capsys):
    feat = run_dir / "data" / "dev_feats" / "dev-00001.feat"
    capsys.readouterr()
    assert main(["stream", *cfg_arg(run_dir), "--chunk", "96,64,32", "--features", str(feat)]) == 0
    assert "latency: 320ms" in capsys.readouterr().out.splitlines()[:2]


def test_lm_and_joint(run_dir, capsys):
    root = cfg_arg(run_dir)
    assert main(["lm", "train", *root]) == 0
    assert main(["lm", "eval", *root]) == 0
    assert "perplexity" in capsys.readouterr().out
    assert main(["train", *root, "--joint"]) == 0
    out = capsys.readouterr().out
    base, step0 = out.split()[3], out.split()[5]
    assert base == step0
    assert main(["eval", *root, "--joint"]) == 0


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--corrupt", "tanh"]) == 2
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "--corrupt", "bogus"]) == 1


def test_exit_codes(run_dir, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 1
    (tmp_path / "bad.cfg").write_text("model.width = 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 1
    (tmp_path / "nodata.cfg").write_text(f"preset = desk\ndata.train = none.jsonl\ndata.dev = none.jsonl\n"
                                         f"out.dir = {tmp_path / 'o'}\n")
    assert main(["train", "--config", str(tmp_path / "nodata.cfg")]) == 3
    assert main(["eval", *cfg_arg(run_dir), "--chunk", "2,8,4"]) == 1
    assert main(["eval", *cfg_arg(run_dir), "--checkpoint", str(tmp_path / "missing.ckpt")]) == 3
    assert main(["stream", *cfg_arg(run_dir), "--features", str(tmp_path / "x")]) == 1
    (tmp_path / "wide.cfg").write_text((run_dir / "run.cfg").read_text().replace("model.d = 16", "model.d = 32"))
    wide = ["--config", str(tmp_path / "wide.cfg"), "--checkpoint", str(run_dir / "run" / "model.ckpt")]
    assert main(["eval", *wide, "--manifest", str(run_dir / "data" / "dev.jsonl")]) == 3
