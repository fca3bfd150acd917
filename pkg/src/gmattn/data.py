"""Synthetic parallel corpora with exact gold alignments, batching, and I/O.

Token ids 0, 1, 2 are reserved for PAD, BOS and EOS; content tokens start
at 3. Gold links are 1-based ``(target i, source j)`` pairs.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentParseError, ContractError, SpecError

PAD, BOS, EOS = 0, 1, 2
FIRST_TOKEN = 3

TASK_KINDS = ("copy", "reverse", "window_permute", "expand")

Link = tuple[int, int]


@dataclass(frozen=True)
class AlignedExample:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    gold: frozenset[Link]

    def __post_init__(self):
        object.__setattr__(self, "src", tuple(int(t) for t in self.src))
        object.__setattr__(self, "tgt", tuple(int(t) for t in self.tgt))
        object.__setattr__(self, "gold", frozenset((int(i), int(j)) for i, j in self.gold))

    def to_json(self) -> str:
        return json.dumps({"src": list(self.src), "tgt": list(self.tgt), "gold": sorted_links(self.gold)})

    @classmethod
    def from_json(cls, line: str) -> "AlignedExample":
        d = json.loads(line)
        return cls(d["src"], d["tgt"], frozenset(tuple(link) for link in d["gold"]))


def sorted_links(links: Iterable[Link]) -> list[list[int]]:
    return [list(link) for link in sorted(links)]


@dataclass
class TaskSpec:
    """Which synthetic transduction to generate and how much of it.

    ``vocab_size`` counts the three reserved ids. ``window`` is used by
    ``window_permute`` and ``expand_p`` by ``expand``.
    """

    kind: str = "copy"
    vocab_size: int = 24
    min_len: int = 3
    max_len: int = 12
    size: int = 2000
    seed: int = 0
    window: int = 3
    expand_p: float = 0.3

    def __post_init__(self):
        if isinstance(self.kind, str) and "(" in self.kind:
            parsed = parse_task_kind(self.kind)
            self.kind = parsed["kind"]
            self.window = parsed.get("window", self.window)
            self.expand_p = parsed.get("expand_p", self.expand_p)
        self.validate()

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise SpecError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise SpecError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.vocab_size <= FIRST_TOKEN + 1:
            raise SpecError(f"vocab_size {self.vocab_size} leaves fewer than two content tokens")
        if self.size < 1:
            raise SpecError("corpus size must be positive")
        if self.kind == "window_permute" and not 1 <= self.window <= self.max_len:
            raise SpecError(f"window {self.window} must be in [1, max_len={self.max_len}]")
        if self.kind == "expand" and not 0.0 < self.expand_p < 1.0:
            raise SpecError(f"expand_p must be in (0, 1), got {self.expand_p}")

    @property
    def max_target_len(self) -> int:
        return 2 * self.max_len if self.kind == "expand" else self.max_len


def parse_task_kind(text: str) -> dict:
    """``"window_permute(3)"`` -> ``{"kind": "window_permute", "window": 3}``."""
    m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*", text)
    if not m:
        raise SpecError(f"cannot parse task kind {text!r}")
    kind, arg = m.group(1), m.group(2)
    out: dict = {"kind": kind}
    if arg is not None:
        if kind == "window_permute":
            out["window"] = int(arg)
        elif kind == "expand":
            out["expand_p"] = float(arg)
        else:
            raise SpecError(f"task kind {kind!r} takes no argument")
    return out


def expansion_rule(spec: TaskSpec) -> dict[int, tuple[int, ...]]:
    """Token-level rule table of the ``expand`` task.

    Each content token is marked as doubling with probability ``expand_p``
    (drawn once from the task seed); a doubling token ``t`` emits ``t`` then a
    fixed partner token, other tokens emit themselves.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    tokens = np.arange(FIRST_TOKEN, spec.vocab_size)
    doubles = rng.random(tokens.size) < spec.expand_p
    partners = rng.permutation(tokens)
    return {
        int(t): (int(t), int(p)) if d else (int(t),)
        for t, d, p in zip(tokens, doubles, partners)
    }


def window_permutation(n: int, w: int) -> list[int]:
    """0-based source index for each target position: reverse inside each window."""
    order = []
    for start in range(0, n, w):
        order.extend(reversed(range(start, min(start + w, n))))
    return order


def transduce(src: Sequence[int], spec: TaskSpec, rule=None) -> AlignedExample:
    """Apply the task mapping to one source sentence."""
    src = list(src)
    n = len(src)
    if spec.kind == "copy":
        order = list(range(n))
    elif spec.kind == "reverse":
        order = list(reversed(range(n)))
    elif spec.kind == "window_permute":
        order = window_permutation(n, spec.window)
    else:
        rule = rule if rule is not None else expansion_rule(spec)
        tgt, gold = [], set()
        for j, tok in enumerate(src, start=1):
            for out_tok in rule[tok]:
                tgt.append(out_tok)
                gold.add((len(tgt), j))
        return AlignedExample(src, tgt, frozenset(gold))
    tgt = [src[j] for j in order]
    gold = frozenset((i + 1, j + 1) for i, j in enumerate(order))
    return AlignedExample(src, tgt, gold)


def generate(spec: TaskSpec) -> list[AlignedExample]:
    """Deterministic corpus for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rule = expansion_rule(spec) if spec.kind == "expand" else None
    corpus = []
    for _ in range(spec.size):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(FIRST_TOKEN, spec.vocab_size, size=n)
        corpus.append(transduce(src, spec, rule))
    return corpus


def split_corpus(corpus: Sequence[AlignedExample], heldout: float) -> tuple[list, list]:
    """Leading part for training, trailing ``heldout`` fraction for evaluation."""
    n_eval = max(1, int(round(len(corpus) * heldout))) if heldout > 0 else 0
    if n_eval >= len(corpus):
        raise ContractError("held-out split would leave no training data")
    cut = len(corpus) - n_eval
    return list(corpus[:cut]), list(corpus[cut:])


def write_corpus(path, corpus: Iterable[AlignedExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(ex.to_json() + "\n")


def read_corpus(path) -> list[AlignedExample]:
    with open(path, encoding="utf-8") as fh:
        return [AlignedExample.from_json(line) for line in fh if line.strip()]


# batching -------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id arrays with masks (True = real token) and true lengths.

    The decoder reads ``tgt_in = [BOS] + tgt`` and predicts
    ``tgt_out = tgt + [EOS]``.
    """

    src: np.ndarray
    src_mask: np.ndarray
    src_len: np.ndarray
    tgt: np.ndarray
    tgt_len: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    examples: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.src.shape[0]


def _pad(seqs: Sequence[Sequence[int]], width: int, pad_id: int) -> np.ndarray:
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out


def make_batch(examples: Sequence[AlignedExample], pad_id: int = PAD) -> Batch:
    if not examples:
        raise ContractError("cannot batch an empty list of examples")
    srcs = [ex.src for ex in examples]
    tgts = [ex.tgt for ex in examples]
    src_len = np.array([len(s) for s in srcs], dtype=np.int64)
    tgt_len = np.array([len(t) for t in tgts], dtype=np.int64)
    J = int(src_len.max())
    I = int(tgt_len.max())
    src = _pad(srcs, J, pad_id)
    tgt = _pad(tgts, I, pad_id)
    tgt_in = _pad([(BOS,) + t for t in tgts], I + 1, pad_id)
    tgt_out = _pad([t + (EOS,) for t in tgts], I + 1, pad_id)
    return Batch(
        src=src,
        src_mask=np.arange(J)[None, :] < src_len[:, None],
        src_len=src_len,
        tgt=tgt,
        tgt_len=tgt_len,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        tgt_mask=np.arange(I + 1)[None, :] < (tgt_len + 1)[:, None],
        examples=list(examples),
    )


def batchify(corpus: Sequence[AlignedExample], batch_size: int, pad_id: int = PAD) -> list[Batch]:
    """Consecutive fixed-size batches in corpus order."""
    if not corpus:
        raise ContractError("cannot batchify an empty corpus")
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    return [make_batch(corpus[i : i + batch_size], pad_id) for i in range(0, len(corpus), batch_size)]


# Pharaoh alignment files ----------------------------------------------------

_PAIR = re.compile(r"^(\d+)-(\d+)$")


def parse_alignment_line(line: str, lineno: int = 1) -> frozenset[Link]:
    links = set()
    for tok in line.split():
        m = _PAIR.match(tok)
        if not m:
            raise AlignmentParseError(f"malformed link {tok!r}", lineno)
        i, j = int(m.group(1)), int(m.group(2))
        if i < 1 or j < 1:
            raise AlignmentParseError(f"links are 1-based, got {tok!r}", lineno)
        links.add((i, j))
    return frozenset(links)


def format_alignment_line(links: Iterable[Link]) -> str:
    return " ".join(f"{i}-{j}" for i, j in sorted(links))


def read_alignment_file(path) -> list[frozenset[Link]]:
    """One link set per line; empty lines yield empty sets and a warning."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            links = parse_alignment_line(line, lineno)
            if not links:
                warnings.warn(f"{path}:{lineno}: empty alignment line", stacklevel=2)
            out.append(links)
    return out


def write_alignment_file(path, alignments: Iterable[Iterable[Link]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for links in alignments:
            fh.write(format_alignment_line(links) + "\n")
