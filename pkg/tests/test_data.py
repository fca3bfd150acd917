import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmattn.data import (
    BOS,
    EOS,
    PAD,
    AlignedExample,
    TaskSpec,
    batchify,
    expansion_rule,
    format_alignment_line,
    generate,
    parse_alignment_line,
    read_alignment_file,
    read_corpus,
    split_corpus,
    transduce,
    window_permutation,
    write_alignment_file,
    write_corpus,
)
from gmattn.errors import AlignmentParseError, SpecError


def test_copy_example():
    ex = transduce([3, 7, 5], TaskSpec(kind="copy"))
    assert ex.tgt == (3, 7, 5)
    assert ex.gold == {(1, 1), (2, 2), (3, 3)}


def test_reverse_example():
    ex = transduce([3, 7, 5], TaskSpec(kind="reverse"))
    assert ex.tgt == (5, 7, 3)
    assert ex.gold == {(1, 3), (2, 2), (3, 1)}


def test_window_permute_reverses_inside_windows():
    ex = transduce([3, 4, 5, 6, 7, 8, 9], TaskSpec(kind="window_permute(3)"))
    assert ex.tgt == (5, 4, 3, 8, 7, 6, 9)
    assert ex.gold == {(1, 3), (2, 2), (3, 1), (4, 6), (5, 5), (6, 4), (7, 7)}
    assert window_permutation(4, 1) == [0, 1, 2, 3]


def test_expand_forced_doubling():
    spec = TaskSpec(kind="expand(0.5)", seed=3)
    rule = expansion_rule(spec)
    doubled = next(t for t, out in rule.items() if len(out) == 2)
    single = next(t for t, out in rule.items() if len(out) == 1)
    ex = transduce([single, doubled, single], spec, rule)
    assert ex.tgt == (single, *rule[doubled], single)
    assert ex.gold == {(1, 1), (2, 2), (3, 2), (4, 3)}


def test_expand_rule_is_a_fixed_function_of_the_seed():
    spec = TaskSpec(kind="expand", expand_p=0.3, seed=11)
    assert expansion_rule(spec) == expansion_rule(TaskSpec(kind="expand", expand_p=0.3, seed=11))
    for t, out in expansion_rule(spec).items():
        assert out[0] == t and len(out) in (1, 2)


def test_task_parsing_and_spec_errors():
    spec = TaskSpec(kind="window_permute(4)")
    assert spec.kind == "window_permute" and spec.window == 4
    with pytest.raises(SpecError):
        TaskSpec(kind="window_permute(13)", max_len=12)
    with pytest.raises(SpecError):
        TaskSpec(kind="expand(1.5)")
    with pytest.raises(SpecError):
        TaskSpec(kind="shuffle")
    with pytest.raises(SpecError):
        TaskSpec(min_len=0)
    with pytest.raises(SpecError):
        TaskSpec(kind="copy(2)")


@pytest.mark.parametrize("kind", ["copy", "reverse", "window_permute(3)", "expand(0.3)"])
def test_generation_is_deterministic_and_total(kind, tmp_path):
    spec = TaskSpec(kind=kind, size=200, seed=5)
    a, b = generate(spec), generate(TaskSpec(kind=kind, size=200, seed=5))
    write_corpus(tmp_path / "a.jsonl", a)
    write_corpus(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_corpus(tmp_path / "a.jsonl") == a
    for ex in a:
        assert spec.min_len <= len(ex.src) <= spec.max_len
        assert {i for i, _ in ex.gold} == set(range(1, len(ex.tgt) + 1))
        assert all(1 <= j <= len(ex.src) for _, j in ex.gold)
        assert all(3 <= t < spec.vocab_size for t in ex.src + ex.tgt)
    assert generate(TaskSpec(kind=kind, size=200, seed=6)) != a


def test_split_keeps_trailing_heldout():
    corpus = generate(TaskSpec(size=50))
    train, held = split_corpus(corpus, 0.1)
    assert len(held) == 5 and train + held == corpus


def test_padding_contract():
    exs = [AlignedExample([3, 4, 5], [3], frozenset({(1, 1)})), AlignedExample([3, 4, 5, 6, 7], [4, 5], frozenset({(1, 1)}))]
    (batch,) = batchify(exs, batch_size=8, pad_id=PAD)
    assert batch.src.shape == (2, 5)
    assert batch.src_mask.astype(int).tolist() == [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]]
    assert batch.src_len.tolist() == [3, 5]
    assert batch.tgt_in.tolist() == [[BOS, 3, PAD], [BOS, 4, 5]]
    assert batch.tgt_out.tolist() == [[3, EOS, PAD], [4, 5, EOS]]


def test_single_batch_when_size_exceeds_corpus():
    corpus = generate(TaskSpec(size=7))
    assert len(batchify(corpus, 100)) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 17), st.integers(0, 1000))
def test_batching_preserves_tokens(size, batch_size, seed):
    corpus = generate(TaskSpec(size=size, seed=seed))
    batches = batchify(corpus, batch_size)
    assert sum(len(b) for b in batches) == size
    assert sum(int(b.src_mask.sum()) for b in batches) == sum(len(ex.src) for ex in corpus)
    assert sum(int((b.tgt != PAD).sum()) for b in batches) == sum(len(ex.tgt) for ex in corpus)


def test_pharaoh_parse():
    assert parse_alignment_line("1-1 2-3") == {(1, 1), (2, 3)}
    assert parse_alignment_line("") == frozenset()


def test_pharaoh_errors_carry_line_number(tmp_path):
    path = tmp_path / "a.align"
    path.write_text("1-1 2-2\n3-x\n")
    with pytest.raises(AlignmentParseError) as info:
        read_alignment_file(path)
    assert info.value.line == 2
    with pytest.raises(AlignmentParseError):
        parse_alignment_line("0-1")


def test_empty_line_is_flagged(tmp_path):
    path = tmp_path / "a.align"
    path.write_text("1-1\n\n2-2\n")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        links = read_alignment_file(path)
    assert links[1] == frozenset()
    assert any("empty" in str(w.message) for w in caught)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.frozensets(st.tuples(st.integers(1, 40), st.integers(1, 40)), min_size=1), min_size=1, max_size=8))
def test_pharaoh_round_trip(alignments):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.align"
        write_alignment_file(path, alignments)
        text = path.read_text()
        back = read_alignment_file(path)
        assert back == alignments
        write_alignment_file(path, back)
        assert path.read_text() == text
    assert format_alignment_line({(2, 1), (1, 3)}) == "1-3 2-1"
