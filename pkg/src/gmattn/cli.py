"""Command-line entry point: generate, train, evaluate, analyze and sweep.

Configuration is a JSON file with the sections ``model``, ``gma``, ``train``,
``task``, ``analysis`` and ``paths``; ``--set section.key=value`` overrides
individual fields. Exit codes are 0 on success, 1 for usage or configuration
errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import datetime as _dt
import difflib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as A
from .attention import GmaConfig
from .data import TaskSpec, generate, make_batch, read_corpus, write_alignment_file, write_corpus
from .errors import ConfigError, GmattnError, SpecError
from .model import ModelConfig
from .training import TrainConfig, evaluate, load_checkpoint, train

logger = logging.getLogger("gmattn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ANALYSIS_DEFAULTS = {
    "report": "entropy",
    "layer": None,
    "source": "gamma",
    "batch_size": 64,
    "eval_size": None,
}
PATH_DEFAULTS = {"corpus": None, "ckpt": None, "out_dir": "runs", "baseline_ckpt": None}

# sweep axis shorthands -> dotted config keys
AXIS_KEYS = {
    "K": "gma.K",
    "norm_mode": "gma.norm_mode",
    "gating": "gma.gating",
    "gma_layers": "model.gma_layers",
    "layers": "model.gma_layers",
}
SHARE_VALUES = ("none", "mean", "var", "weight", "all")


class UsageError(GmattnError):
    pass


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _schema() -> dict[str, dict]:
    model = _field_defaults(ModelConfig)
    model.pop("gma")
    gma = _field_defaults(GmaConfig)
    for k in ("d_model", "n_heads"):
        gma.pop(k)
    return {
        "model": model,
        "gma": gma,
        "train": _field_defaults(TrainConfig),
        "task": _field_defaults(TaskSpec),
        "analysis": dict(ANALYSIS_DEFAULTS),
        "paths": dict(PATH_DEFAULTS),
    }


def _all_keys(schema) -> list[str]:
    return [f"{s}.{k}" for s, fields in schema.items() for k in fields]


def _unknown(key: str, schema) -> ConfigError:
    close = difflib.get_close_matches(key, _all_keys(schema) + list(schema), n=1, cutoff=0.4)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def _check_type(path: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {type(value).__name__} {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {type(value).__name__} {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(value).__name__} {value!r}")
        value = float(value)
    elif isinstance(default, str) and path != "model.gma_layers":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__} {value!r}")
    return value


def parse_json_text(text: str, source: str = "<config>") -> dict:
    """Parse JSON, reporting line and column on failure."""
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return data


def parse_override(text: str) -> tuple[str, object]:
    """``"gma.K=2"`` -> ``("gma.K", 2)``; values are JSON when they parse, strings otherwise."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: TaskSpec
    analysis: dict = field(default_factory=lambda: dict(ANALYSIS_DEFAULTS))
    paths: dict = field(default_factory=lambda: dict(PATH_DEFAULTS))
    raw: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def merge_config(data: dict, overrides=()) -> dict:
    """Validated nested dict: defaults, then file values, then overrides."""
    schema = _schema()
    merged = copy.deepcopy(schema)
    for section, values in data.items():
        if section not in schema:
            raise _unknown(section, schema)
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in values.items():
            if key not in schema[section]:
                raise _unknown(f"{section}.{key}", schema)
            merged[section][key] = _check_type(f"{section}.{key}", value, schema[section][key])
    for key, value in overrides:
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in schema or parts[1] not in schema[parts[0]]:
            raise _unknown(key, schema)
        merged[parts[0]][parts[1]] = _check_type(key, value, schema[parts[0]][parts[1]])
    return merged


def build_config(data: dict | None = None, overrides=()) -> RunConfig:
    raw = merge_config(data or {}, overrides)
    try:
        model = ModelConfig(gma=GmaConfig(**raw["gma"]), **raw["model"])
        train_cfg = TrainConfig(**raw["train"])
        task = TaskSpec(**raw["task"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if task.vocab_size > min(model.src_vocab, model.tgt_vocab):
        raise ConfigError(
            f"task.vocab_size={task.vocab_size} exceeds model vocab ({model.src_vocab}, {model.tgt_vocab})"
        )
    if task.max_target_len + 1 > model.max_len:
        raise ConfigError(f"model.max_len={model.max_len} is too short for targets of length {task.max_target_len}")
    raw["model"]["gma_layers"] = list(model.gma_layers)
    raw["task"]["kind"] = task.kind
    raw["task"]["window"] = task.window
    raw["task"]["expand_p"] = task.expand_p
    return RunConfig(model, train_cfg, task, dict(raw["analysis"]), dict(raw["paths"]), raw)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Load ``path`` (may be None or an empty file) and apply dotted overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        data = parse_json_text(p.read_text(encoding="utf-8"), str(path))
    return build_config(data, [parse_override(o) if isinstance(o, str) else o for o in overrides])


# output directories -------------------------------------------------------------


def output_root(cfg_paths: dict | None = None, explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get("OUTPUT_DIR")
    if env:
        return Path(env)
    return Path((cfg_paths or {}).get("out_dir") or "runs")


def make_run_dir(root: Path, command: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    root.mkdir(parents=True, exist_ok=True)
    base = root / f"{stamp}-{command}"
    run, n = base, 1
    while run.exists():
        run = Path(f"{base}-{n}")
        n += 1
    run.mkdir()
    return run


def _echo(run_dir: Path, raw: dict) -> None:
    (run_dir / "config.json").write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")


def _load_corpus(cfg: RunConfig, path=None):
    path = path or cfg.paths.get("corpus")
    if path:
        if not Path(path).exists():
            raise ConfigError(f"corpus {path} does not exist")
        return read_corpus(path)
    return generate(cfg.task)


# commands ---------------------------------------------------------------------


def train_run(raw: dict, run_dir) -> dict:
    """One training run from a merged config dict; returns the final metrics row."""
    cfg = build_config({k: v for k, v in raw.items() if k in _schema()})
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _echo(run_dir, cfg.raw)
    corpus = _load_corpus(cfg)
    result = train(cfg.model, cfg.task, cfg.train, out_dir=run_dir, corpus=corpus)
    final = dict(result.final)
    final["clip_frac_total"] = result.clip_frac
    final["params"] = result.model.num_parameters()
    heldout = result.heldout[: cfg.train.eval_size]
    summary = evaluate(result.model, heldout, alignment=True)
    final["heldout_aer"] = summary["aer"]
    for kind in ("alpha", "beta", "gamma"):
        final[f"heldout_entropy_{kind}"] = summary[f"entropy_{kind}"]
    final["heldout_bleu"] = A.corpus_bleu(_decode(result.model, heldout, 64), [ex.tgt for ex in heldout])
    A.write_json(run_dir / "report.json", {"final": final, "metrics": result.metrics})
    return final


def cmd_generate(args) -> int:
    overrides = list(args.set or [])
    if args.task:
        overrides.append(f"task.kind={args.task}")
    for flag, key in (("size", "size"), ("seed", "seed"), ("min_len", "min_len"), ("max_len", "max_len"), ("vocab", "vocab_size")):
        if getattr(args, flag) is not None:
            overrides.append(f"task.{key}={getattr(args, flag)}")
    cfg = parse_config(args.config, overrides)
    corpus = generate(cfg.task)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, corpus)
    if args.align:
        write_alignment_file(args.align, (ex.gold for ex in corpus))
    print(json.dumps({"corpus": str(out), "examples": len(corpus), "task": cfg.raw["task"]}))
    return EXIT_OK


def _seeded_overrides(args) -> list:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}"]
    return overrides


def cmd_train(args) -> int:
    cfg = parse_config(args.config, _seeded_overrides(args))
    run_dir = make_run_dir(output_root(cfg.paths, args.out), "train")
    final = train_run(cfg.raw, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "final": final}, default=float))
    return EXIT_OK


def _model_and_corpus(args):
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    corpus = read_corpus(args.corpus)
    if args.limit:
        corpus = corpus[: args.limit]
    return ckpt, model, corpus


def _decode(model, corpus, batch_size):
    hyps = []
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i : i + batch_size]
        hyps.extend(model.greedy_decode_batch([ex.src for ex in chunk], max(2 * len(ex.src) for ex in chunk) + 2))
    return hyps


def _forced(model, corpus, batch_size):
    out = []
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i : i + batch_size]
        out.extend(zip(chunk, model.forced_records(make_batch(chunk))))
    return out


def cmd_evaluate(args) -> int:
    _, model, corpus = _model_and_corpus(args)
    res = evaluate(model, corpus, batch_size=args.batch_size, alignment=True)
    hyps = _decode(model, corpus, args.batch_size)
    res["bleu"] = A.corpus_bleu(hyps, [ex.tgt for ex in corpus])
    res["exact_match"] = float(np.mean([list(h) == list(ex.tgt) for h, ex in zip(hyps, corpus)]))
    res["examples"] = len(corpus)
    if args.out:
        run_dir = make_run_dir(output_root(None, args.out), "evaluate")
        A.write_json(run_dir / "report.json", res)
    print(json.dumps(res, default=float))
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt, model, corpus = _model_and_corpus(args)
    run_dir = make_run_dir(output_root(None, args.out), f"analyze-{args.report}")
    bs = args.batch_size
    if args.report == "entropy":
        rep = A.entropy_report([recs for _, recs in _forced(model, corpus, bs)])
        A.write_csv(run_dir / "entropy.csv", rep.to_rows())
        payload = dataclasses.asdict(rep)
    elif args.report == "gates":
        rep = A.gate_report([recs for _, recs in _forced(model, corpus, bs)])
        A.write_csv(run_dir / "gates.csv", rep.to_rows())
        A.write_gate_svg(run_dir / "gates.svg", rep)
        payload = {"means": rep.means, "counts": rep.counts, "edges": rep.edges, "histograms": rep.histograms}
    elif args.report == "aer":
        pairs = _forced(model, corpus, bs)
        payload = {"layer": args.layer, "source": args.source}
        payload.update(A.alignment_summary(pairs, layer=args.layer, source=args.source))
        preds = [A.extract_alignment(recs, len(ex.tgt), len(ex.src), layer=args.layer, source=args.source) for ex, recs in pairs]
        write_alignment_file(run_dir / "predicted.align", preds)
        write_alignment_file(run_dir / "gold.align", (ex.gold for ex, _ in pairs))
    elif args.report == "ngram":
        refs = [ex.tgt for ex in corpus]
        hyps = _decode(model, corpus, bs)
        payload = {
            "bleu": A.corpus_bleu(hyps, refs),
            "precision": {n: _corpus_precision(hyps, refs, n) for n in range(1, 5)},
        }
        if args.baseline:
            base = load_checkpoint(args.baseline).build_model()
            base_hyps = _decode(base, corpus, bs)
            payload["baseline_bleu"] = A.corpus_bleu(base_hyps, refs)
            payload["gap"] = A.ngram_gap(hyps, base_hyps, refs)
        A.write_csv(
            run_dir / "ngram.csv",
            [{"n": n, "precision": p, "gap": payload.get("gap", {}).get(n)} for n, p in payload["precision"].items()],
        )
    else:
        buckets = A.length_bucket_eval(model, corpus, batch_size=bs)
        payload = {"buckets": buckets}
        rows = [{"bucket": k, **v} for k, v in buckets.items()]
        if args.baseline:
            base = A.length_bucket_eval(load_checkpoint(args.baseline).build_model(), corpus, batch_size=bs)
            payload["baseline"] = base
            for row in rows:
                b = base.get(row["bucket"], {})
                row["baseline_bleu"] = b.get("bleu")
                row["baseline_entropy_gamma"] = b.get("entropy_gamma")
        A.write_csv(run_dir / "buckets.csv", rows)
    payload["checkpoint"] = str(args.ckpt)
    A.write_json(run_dir / f"{args.report}.json", payload)
    print(json.dumps({"run_dir": str(run_dir), "report": payload}, default=A._jsonable))
    return EXIT_OK


def _corpus_precision(hyps, refs, n):
    match, total = A.corpus_ngram_counts(hyps, refs, n)
    return match / total if total else None


def parse_axis(text: str) -> tuple[str, list]:
    """``"K=1,2,4"`` -> ``("K", [1, 2, 4])``; values keep their JSON type."""
    if "=" not in text:
        raise ConfigError(f"axis {text!r} must look like name=v1,v2,...")
    name, raw = text.split("=", 1)
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(json.loads(part))
        except json.JSONDecodeError:
            values.append(part)
    if not values:
        raise ConfigError(f"axis {name!r} has no values")
    return name.strip(), values


def axis_overrides(name: str, value) -> list[tuple[str, object]]:
    """Config overrides realizing one point on a sweep axis."""
    if name == "share":
        if value not in SHARE_VALUES:
            raise ConfigError(f"share axis value {value!r} not in {SHARE_VALUES}")
        flags = {"mean": False, "var": False, "weight": False}
        if value == "all":
            flags = dict.fromkeys(flags, True)
        elif value != "none":
            flags[value] = True
        return [("gma.share_mean", flags["mean"]), ("gma.share_var", flags["var"]), ("gma.share_weight", flags["weight"])]
    key = AXIS_KEYS.get(name, name)
    if "." not in key:
        raise _unknown(name, _schema())
    if key == "gma.gating" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return [("gma.gating", "fixed"), ("gma.fixed_gate", float(value))]
    return [(key, value)]


def _sweep_point(job):
    raw, run_dir = job
    try:
        return {"status": "ok", **train_run(raw, run_dir)}
    except GmattnError as exc:
        logger.error("sweep run %s failed: %s", run_dir, exc)
        return {"status": f"failed: {exc}", "step": getattr(exc, "step", None)}


def run_sweep(base: RunConfig, axes: list[tuple[str, list]], out_dir, parallel: int = 1) -> list[dict]:
    """Train once per axis value (cartesian over several axes); returns the comparison rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = [[]]
    for name, values in axes:
        points = [p + [(name, v)] for p in points for v in values]
    jobs, labels = [], []
    seed_m, seed_t = base.model.seed, base.train.seed
    for i, point in enumerate(points):
        overrides = [("model.seed", seed_m + i), ("train.seed", seed_t + i)]
        for name, value in point:
            overrides += axis_overrides(name, value)
        raw = build_config(base.raw, overrides).raw
        tag = "_".join(f"{n}-{json.dumps(v).strip(chr(34))}" for n, v in point).replace("/", "-") or "base"
        jobs.append((raw, out_dir / f"{i:03d}-{tag}"))
        labels.append(point)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            finals = list(pool.map(_sweep_point, jobs))
    else:
        finals = [_sweep_point(j) for j in jobs]
    rows = []
    for i, (point, final) in enumerate(zip(labels, finals)):
        row = {name: value for name, value in point}
        row["seed"] = seed_t + i
        row["run_dir"] = jobs[i][1].name
        row.update(final)
        rows.append(row)
    columns = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    A.write_csv(out_dir / "sweep.csv", [{k: row.get(k) for k in columns} for row in rows])
    return rows


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config, _seeded_overrides(args))
    axes = [parse_axis(a) for a in args.axis]
    for name, values in axes:
        for v in values:
            build_config(cfg.raw, axis_overrides(name, v))
    run_dir = make_run_dir(output_root(cfg.paths, args.out), "sweep")
    _echo(run_dir, cfg.raw)
    rows = run_sweep(cfg, axes, run_dir, parallel=args.parallel)
    print(json.dumps({"run_dir": str(run_dir), "rows": rows}, default=A._jsonable))
    failed = [r for r in rows if r["status"] != "ok"]
    return EXIT_RUNTIME if failed and len(failed) == len(rows) else EXIT_OK


# argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmattn", description="Gaussian-mixture cross-attention experiments on synthetic tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. gma.K=2")
        if out:
            sp.add_argument("--out", help="output root (default: OUTPUT_DIR or paths.out_dir)")

    g = sub.add_parser("generate", help="write a synthetic corpus")
    common(g, out=False)
    g.add_argument("--out", required=True, help="corpus path (JSON lines)")
    g.add_argument("--task", help="copy, reverse, window_permute(w) or expand(p)")
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--min-len", dest="min_len", type=int)
    g.add_argument("--max-len", dest="max_len", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--align", help="also write gold links in Pharaoh format")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--seed", type=int, help="sets model.seed and train.seed")
    t.set_defaults(func=cmd_train)

    for name, func in (("evaluate", cmd_evaluate), ("analyze", cmd_analyze)):
        e = sub.add_parser(name)
        common(e, config=False)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--corpus", required=True)
        e.add_argument("--limit", type=int, help="use only the first N examples")
        e.add_argument("--batch-size", dest="batch_size", type=int, default=64)
        e.set_defaults(func=func)
        if name == "analyze":
            e.add_argument("--report", required=True, choices=["entropy", "gates", "aer", "ngram", "buckets"])
            e.add_argument("--layer", type=int, help="decoder layer for alignment (default: penultimate)")
            e.add_argument("--source", default="gamma", choices=["alpha", "beta", "gamma"])
            e.add_argument("--baseline", help="second checkpoint for ngram/buckets comparisons")

    s = sub.add_parser("sweep", help="train across axis values and tabulate")
    common(s)
    s.add_argument("--axis", action="append", required=True, help="e.g. K=1,2,4,8 or gating=learned,average")
    s.add_argument("--seed", type=int)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GmattnError, OSError, ValueError) as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        print(f"runtime error{where}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
