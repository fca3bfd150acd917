import csv
import json

import pytest

from gmattn import cli
from gmattn.errors import ConfigError

FAST = {
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ffn": 16, "src_vocab": 10, "tgt_vocab": 10, "max_len": 16},
    "gma": {"K": 2},
    "train": {"steps": 6, "batch_size": 8, "warmup_steps": 3, "eval_every": 3, "eval_size": 10},
    "task": {"vocab_size": 10, "min_len": 2, "max_len": 5, "size": 60},
}


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(FAST))
    return path


def test_empty_file_gives_toy_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = cli.parse_config(path)
    assert cfg.model.gma.K == 4 and cfg.model.d_model == 64
    assert cfg.model.n_layers == 2 and cfg.model.n_heads == 4 and cfg.model.d_ffn == 128
    assert cli.parse_config(None).raw == cfg.raw


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"gma": {"K": 4}}')
    assert cli.parse_config(path, ["gma.K=2"]).model.gma.K == 2
    assert cli.parse_config(path).model.gma.K == 4


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "gma": {"K": 2,}\n}')
    with pytest.raises(ConfigError, match=r"line 2, column 18"):
        cli.parse_config(path)
    assert cli.main(["train", "--config", str(path)]) == 1


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="did you mean 'gma.share_mean'"):
        cli.build_config({"gma": {"share_means": True}})
    with pytest.raises(ConfigError, match="did you mean 'train'"):
        cli.build_config({"trian": {}})


def test_type_mismatch_names_path():
    with pytest.raises(ConfigError, match=r"train\.steps"):
        cli.build_config({"train": {"steps": "many"}})
    with pytest.raises(ConfigError, match=r"gma\.share_var"):
        cli.build_config({}, [("gma.share_var", 1)])


def test_usage_errors_exit_one(capsys):
    assert cli.main(["nonsense"]) == 1
    assert cli.main(["analyze", "--ckpt", "x"]) == 1


def test_generate_writes_corpus_and_alignments(tmp_path):
    out = tmp_path / "c.jsonl"
    align = tmp_path / "g.align"
    assert cli.main(["generate", "--task", "reverse", "--size", "5", "--out", str(out), "--align", str(align)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 5
    first = json.loads(lines[0])
    assert first["tgt"] == first["src"][::-1]
    assert len(align.read_text().splitlines()) == 5


def _train(tmp_path, fast_config, name, monkeypatch, extra=()):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / name))
    assert cli.main(["train", "--config", str(fast_config), "--seed", "3", *extra]) == 0
    (run,) = list((tmp_path / name).iterdir())
    return run


def test_train_run_directory_and_reproducibility(tmp_path, fast_config, monkeypatch):
    a = _train(tmp_path, fast_config, "a", monkeypatch)
    b = _train(tmp_path, fast_config, "b", monkeypatch)
    for f in ("config.json", "metrics.csv", "model.ckpt", "model.ckpt.json", "report.json"):
        assert (a / f).exists()
    assert a.name.endswith("-train")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    echo = json.loads((a / "config.json").read_text())
    assert echo["train"]["seed"] == 3 and echo["model"]["seed"] == 3 and echo["gma"]["K"] == 2


def test_evaluate_and_analyze(tmp_path, fast_config, monkeypatch, capsys):
    run = _train(tmp_path, fast_config, "t", monkeypatch)
    corpus = tmp_path / "c.jsonl"
    cli.main(["generate", "--config", str(fast_config), "--size", "8", "--out", str(corpus)])
    capsys.readouterr()
    ckpt = str(run / "model.ckpt")
    assert cli.main(["evaluate", "--ckpt", ckpt, "--corpus", str(corpus)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert {"loss", "token_acc", "aer", "bleu"} <= set(res)
    files = {"entropy": "entropy.csv", "gates": "gates.svg", "aer": "predicted.align", "ngram": "ngram.csv", "buckets": "buckets.csv"}
    for report, fname in files.items():
        args = ["analyze", "--ckpt", ckpt, "--corpus", str(corpus), "--report", report, "--out", str(tmp_path / "an")]
        if report in ("ngram", "buckets"):
            args += ["--baseline", ckpt]
        assert cli.main(args) == 0
        out = json.loads(capsys.readouterr().out)
        assert (tmp_path / "an" / out["run_dir"].split("/")[-1] / fname).exists()
    gaps = json.loads((next((tmp_path / "an").glob("*ngram")) / "ngram.json").read_text())["gap"]
    assert all(v == 0.0 for v in gaps.values() if v is not None)


def test_runtime_failures_exit_two(tmp_path, fast_config, monkeypatch):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "o"))
    assert cli.main(["train", "--config", str(fast_config), "--set", "train.lr_factor=NaN"]) == 2
    corpus = tmp_path / "c.jsonl"
    corpus.write_text("")
    assert cli.main(["evaluate", "--ckpt", str(tmp_path / "missing.ckpt"), "--corpus", str(corpus)]) == 2


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_single_value_sweep_matches_plain_train(tmp_path, fast_config, monkeypatch):
    plain = _train(tmp_path, fast_config, "plain", monkeypatch, extra=["--set", "gma.K=3"])
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "sw"))
    assert cli.main(["sweep", "--config", str(fast_config), "--seed", "3", "--axis", "K=3"]) == 0
    (sweep_dir,) = list((tmp_path / "sw").iterdir())
    rows = _read_csv(sweep_dir / "sweep.csv")
    assert len(rows) == 1 and rows[0]["K"] == "3" and rows[0]["status"] == "ok"
    (point,) = [p for p in sweep_dir.iterdir() if p.is_dir()]
    assert (point / "metrics.csv").read_bytes() == (plain / "metrics.csv").read_bytes()


def test_ablation_sweeps_are_deterministic_and_parallel_safe(tmp_path, fast_config):
    base = cli.parse_config(fast_config)
    axes = [("gating", ["learned", "average", "dot_only", "gma_only"]), ("share", ["none", "all"])]
    seq = cli.run_sweep(base, axes, tmp_path / "seq")
    par = cli.run_sweep(base, axes, tmp_path / "par", parallel=2)
    assert len(seq) == 8
    assert [r["gating"] for r in seq[::2]] == ["learned", "average", "dot_only", "gma_only"]
    assert (tmp_path / "seq" / "sweep.csv").read_bytes() == (tmp_path / "par" / "sweep.csv").read_bytes()
    assert [r["seed"] for r in seq] == list(range(8))


def test_share_and_layer_axes():
    assert cli.axis_overrides("share", "mean") == [("gma.share_mean", True), ("gma.share_var", False), ("gma.share_weight", False)]
    assert cli.axis_overrides("gma_layers", "top2") == [("model.gma_layers", "top2")]
    assert cli.axis_overrides("gating", 0.3) == [("gma.gating", "fixed"), ("gma.fixed_gate", 0.3)]
    assert cli.parse_axis("K=1,2,4,8") == ("K", [1, 2, 4, 8])
    assert cli.parse_axis("gma_layers=none,bottom2") == ("gma_layers", ["none", "bottom2"])
    with pytest.raises(ConfigError):
        cli.axis_overrides("share", "sigma")
