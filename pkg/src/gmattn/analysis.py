"""Attention diagnostics: entropy, gate distributions, alignment quality, BLEU."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionRecord
from .errors import ContractError

INF = math.inf
ENTROPY_BUCKETS = ((0, 20), (20, 40), (40, INF))
LENGTH_BUCKETS = ((0, 10), (10, 20), (20, 30), (30, INF))
GATE_BIN_WIDTH = 0.05
KINDS = ("alpha", "beta", "gamma")


def bucket_label(bucket) -> str:
    lo, hi = bucket
    return f"({lo},inf)" if hi == INF else f"({lo},{hi}]"


def in_bucket(n: int, bucket) -> bool:
    lo, hi = bucket
    return lo < n <= hi


# entropy ----------------------------------------------------------------------


def row_entropy(row) -> float | None:
    """Entropy (nats) of a row renormalized to unit mass; None for zero mass."""
    p = np.asarray(row, dtype=np.float64)
    total = p.sum()
    if not total > 0:
        return None
    p = p / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def attention_entropy(rows: Iterable, return_counts: bool = False):
    """Mean entropy over rows; zero-mass rows are skipped and counted.

    With ``return_counts`` the result is ``(mean, n_used, n_skipped)``.
    """
    values = []
    skipped = 0
    for row in rows:
        h = row_entropy(row)
        if h is None:
            skipped += 1
        else:
            values.append(h)
    mean = float(np.mean(values)) if values else float("nan")
    if return_counts:
        return mean, len(values), skipped
    return mean


def _matrix(rec: AttentionRecord, kind: str):
    return getattr(rec, kind)


@dataclass
class EntropyReport:
    """Mean entropies per attention kind, overall and per source-length bucket."""

    buckets: list[str]
    overall: dict[str, float | None]
    by_bucket: dict[str, dict[str, float | None]]
    rows: dict[str, int]
    skipped: dict[str, int]

    def to_rows(self) -> list[dict]:
        out = [{"bucket": "all", **self.overall}]
        out.extend({"bucket": b, **self.by_bucket[b]} for b in self.buckets)
        return out


def entropy_report(sentences: Iterable[list[AttentionRecord]], buckets=ENTROPY_BUCKETS, layers=None) -> EntropyReport:
    """Entropy of alpha, beta and gamma rows bucketed by source length.

    ``layers`` restricts the records used (1-based layer indices).
    """
    labels = [bucket_label(b) for b in buckets]
    acc = {k: {"all": []} | {lab: [] for lab in labels} for k in KINDS}
    skipped = {k: 0 for k in KINDS}
    for records in sentences:
        for rec in records:
            if layers is not None and rec.layer not in layers:
                continue
            label = next((lab for lab, b in zip(labels, buckets) if in_bucket(rec.src_len, b)), None)
            for kind in KINDS:
                mat = _matrix(rec, kind)
                if mat is None:
                    continue
                for row in mat:
                    h = row_entropy(row)
                    if h is None:
                        skipped[kind] += 1
                        continue
                    acc[kind]["all"].append(h)
                    if label is not None:
                        acc[kind][label].append(h)

    def avg(xs):
        return float(np.mean(xs)) if xs else None

    return EntropyReport(
        buckets=labels,
        overall={k: avg(acc[k]["all"]) for k in KINDS},
        by_bucket={lab: {k: avg(acc[k][lab]) for k in KINDS} for lab in labels},
        rows={k: len(acc[k]["all"]) for k in KINDS},
        skipped=skipped,
    )


# gating -----------------------------------------------------------------------


@dataclass
class GateReport:
    """Per-layer histogram of gate values with fixed-width bins over [0, 1]."""

    edges: list[float]
    histograms: dict[int, list[float]]
    counts: dict[int, int]
    means: dict[int, float]

    def to_rows(self) -> list[dict]:
        rows = []
        for layer, hist in sorted(self.histograms.items()):
            for lo, hi, mass in zip(self.edges[:-1], self.edges[1:], hist):
                rows.append({"layer": layer, "bin_lo": lo, "bin_hi": hi, "mass": mass})
        return rows


def gate_report(sentences: Iterable[list[AttentionRecord]], bin_width: float = GATE_BIN_WIDTH) -> GateReport:
    """Gate distributions aggregated over heads and target positions per layer."""
    n_bins = int(round(1.0 / bin_width))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    values: dict[int, list[np.ndarray]] = {}
    for records in sentences:
        for rec in records:
            values.setdefault(rec.layer, []).append(np.asarray(rec.gate, dtype=np.float64).reshape(-1))
    hists, counts, means = {}, {}, {}
    for layer, chunks in sorted(values.items()):
        g = np.concatenate(chunks)
        counts[layer] = int(g.size)
        hist, _ = np.histogram(np.clip(g, 0.0, 1.0), bins=edges)
        hists[layer] = (hist / max(g.size, 1)).tolist()
        means[layer] = float(g.mean()) if g.size else float("nan")
    return GateReport(edges.tolist(), hists, counts, means)


# alignment --------------------------------------------------------------------


@dataclass
class AlignmentResult:
    predicted: frozenset
    aer: float
    precision: float
    recall: float


def extract_alignment(
    records: Sequence[AttentionRecord],
    I: int,
    J: int,
    layer: int | None = None,
    source: str = "gamma",
) -> frozenset[tuple[int, int]]:
    """Link each target position to the argmax source of head-averaged attention.

    Uses the penultimate decoder layer (the only one in a single-layer
    model) unless ``layer`` is given; ties go to the smaller source index.
    """
    if not records:
        raise ContractError("no attention records")
    if layer is None:
        layer = max(1, max(r.layer for r in records) - 1)
    chosen = [r for r in records if r.layer == layer]
    if not chosen:
        raise ContractError(f"records do not contain decoder layer {layer}")
    mats = [_matrix(r, source) for r in chosen]
    if any(m is None for m in mats):
        raise ContractError(f"layer {layer} has no {source} attention")
    avg = np.mean([np.asarray(m)[:I, :J] for m in mats], axis=0)
    return frozenset((i + 1, int(np.argmax(avg[i])) + 1) for i in range(min(I, avg.shape[0])))


def aer(predicted: Iterable, gold: Iterable) -> tuple[float, float, float]:
    """``(AER, precision, recall)`` with every gold link treated as sure."""
    A, S = set(predicted), set(gold)
    if not S:
        raise ContractError("gold alignment is empty")
    hit = len(A & S)
    precision = hit / len(A) if A else 0.0
    recall = hit / len(S)
    return 1.0 - 2.0 * hit / (len(A) + len(S)), precision, recall


def corpus_aer(pairs: Iterable[tuple[Iterable, Iterable]]) -> tuple[float, float, float]:
    """AER/P/R from link counts summed over the corpus."""
    hit = n_a = n_s = 0
    for pred, gold in pairs:
        A, S = set(pred), set(gold)
        hit += len(A & S)
        n_a += len(A)
        n_s += len(S)
    if n_s == 0:
        raise ContractError("gold alignment is empty")
    return 1.0 - 2.0 * hit / (n_a + n_s), (hit / n_a if n_a else 0.0), hit / n_s


def alignment_summary(sentences, n_layers: int | None = None, layer: int | None = None, source: str = "gamma") -> dict:
    """AER and mean entropies for ``(example, records)`` pairs."""
    pairs = []
    for ex, recs in sentences:
        pred = extract_alignment(recs, len(ex.tgt), len(ex.src), layer=layer, source=source)
        pairs.append((pred, ex.gold))
    a, p, r = corpus_aer(pairs)
    ent = entropy_report([recs for _, recs in sentences])
    return {
        "aer": a,
        "precision": p,
        "recall": r,
        "entropy_alpha": ent.overall["alpha"],
        "entropy_beta": ent.overall["beta"],
        "entropy_gamma": ent.overall["gamma"],
    }


# n-grams and BLEU -------------------------------------------------------------


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def ngram_precision(hyp, ref, n: int) -> float | None:
    """Clipped n-gram precision of one hypothesis; None when it has no n-grams."""
    if not 1 <= n <= 4:
        raise ContractError(f"n must be in [1, 4], got {n}")
    hyp, ref = _tokens(hyp), _tokens(ref)
    h = ngrams(hyp, n)
    total = sum(h.values())
    if total == 0:
        return None
    r = ngrams(ref, n)
    return sum(min(c, r[g]) for g, c in h.items()) / total


def corpus_ngram_counts(hyps, refs, n: int) -> tuple[int, int]:
    match = total = 0
    for hyp, ref in zip(hyps, refs):
        h = ngrams(_tokens(hyp), n)
        r = ngrams(_tokens(ref), n)
        match += sum(min(c, r[g]) for g, c in h.items())
        total += sum(h.values())
    return match, total


def corpus_bleu(hyps: Sequence, refs: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with add-one smoothing for n >= 2."""
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ContractError("empty corpus")
    c = sum(len(_tokens(h)) for h in hyps)
    r = sum(len(_tokens(x)) for x in refs)
    if c == 0:
        return 100.0 if r == 0 else 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        match, total = corpus_ngram_counts(hyps, refs, n)
        if n >= 2:
            match, total = match + 1, total + 1
        if match == 0:
            return 0.0
        log_p += math.log(match / total)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_n)


def ngram_gap(hyps_a: Sequence, hyps_b: Sequence, refs: Sequence, max_n: int = 4) -> dict[int, float | None]:
    """Corpus n-gram precision of system A minus system B, per n."""
    out = {}
    for n in range(1, max_n + 1):
        ma, ta = corpus_ngram_counts(hyps_a, refs, n)
        mb, tb = corpus_ngram_counts(hyps_b, refs, n)
        out[n] = (ma / ta - mb / tb) if ta and tb else None
    return out


# length buckets ---------------------------------------------------------------


def length_bucket_eval(model, corpus, buckets=LENGTH_BUCKETS, batch_size: int = 64) -> dict[str, dict]:
    """Greedy-decode BLEU and forced-decoding gamma entropy per source-length bucket.

    Empty buckets are left out.
    """
    from .data import make_batch

    out = {}
    for bucket in buckets:
        subset = [ex for ex in corpus if in_bucket(len(ex.src), bucket)]
        if not subset:
            continue
        hyps, refs, rows = [], [], []
        for i in range(0, len(subset), batch_size):
            chunk = subset[i : i + batch_size]
            max_len = max(2 * len(ex.src) for ex in chunk) + 2
            hyps.extend(model.greedy_decode_batch([ex.src for ex in chunk], max_len))
            refs.extend(ex.tgt for ex in chunk)
            for recs in model.forced_records(make_batch(chunk)):
                rows.extend(row for rec in recs for row in rec.gamma)
        out[bucket_label(bucket)] = {
            "n": len(subset),
            "bleu": corpus_bleu(hyps, refs),
            "entropy_gamma": attention_entropy(rows),
        }
    return out


# report writers ---------------------------------------------------------------


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    fields = list(rows[0].keys())
    for row in rows[1:]:
        fields.extend(k for k in row if k not in fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in fields})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def gate_histogram_svg(report: GateReport, panel_w: int = 240, panel_h: int = 140) -> str:
    """Bar chart per layer, laid out left to right."""
    layers = sorted(report.histograms)
    pad = 24
    width = max(1, len(layers)) * (panel_w + pad) + pad
    height = panel_h + 3 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for col, layer in enumerate(layers):
        x0 = pad + col * (panel_w + pad)
        y0 = pad
        hist = report.histograms[layer]
        top = max(hist) or 1.0
        bar_w = panel_w / len(hist)
        parts.append(f'<text x="{x0}" y="{y0 - 8}">L{layer}</text>')
        parts.append(
            f'<rect x="{x0}" y="{y0}" width="{panel_w}" height="{panel_h}" fill="none" stroke="#999"/>'
        )
        for k, mass in enumerate(hist):
            h = panel_h * mass / top
            parts.append(
                f'<rect x="{x0 + k * bar_w:.2f}" y="{y0 + panel_h - h:.2f}" '
                f'width="{bar_w * 0.9:.2f}" height="{h:.2f}" fill="#4c72b0"/>'
            )
        parts.append(f'<text x="{x0}" y="{y0 + panel_h + 14}">0</text>')
        parts.append(f'<text x="{x0 + panel_w - 6}" y="{y0 + panel_h + 14}">1</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_gate_svg(path, report: GateReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(gate_histogram_svg(report))
