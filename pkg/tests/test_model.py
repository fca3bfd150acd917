import numpy as np
import pytest

from gmattn import tensor as T
from gmattn.attention import GmaConfig
from gmattn.data import AlignedExample, make_batch
from gmattn.errors import ConfigError, ContractError, VocabError
from gmattn.model import ModelConfig, Transformer, count_parameters, gma_layer_parameters, resolve_gma_layers
from gmattn.training import cross_entropy

from oracles import plain_transformer_loss


def tiny(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ffn=12, src_vocab=9, tgt_vocab=9, max_len=16, gma=GmaConfig(K=2))
    base.update(kw)
    return ModelConfig(**base)


def randomize(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return model


def test_layer_presets():
    assert resolve_gma_layers("none", 6) == ()
    assert resolve_gma_layers("all", 3) == (1, 2, 3)
    assert resolve_gma_layers("bottom2", 6) == (1, 2)
    assert resolve_gma_layers("top2", 6) == (5, 6)
    assert resolve_gma_layers("middle2", 6) == (3, 4)
    assert resolve_gma_layers([2, 1, 2], 3) == (1, 2)
    with pytest.raises(ConfigError):
        resolve_gma_layers([0], 3)
    with pytest.raises(ConfigError):
        resolve_gma_layers("upper", 3)


def test_encode_shape_and_determinism():
    model = Transformer(tiny(d_model=32, n_heads=4))
    out = model.encode([3, 4, 5, 6, 7])
    assert out.shape == (5, 32)
    assert np.array_equal(out.data, model.encode([3, 4, 5, 6, 7]).data)


def test_encoder_sees_positions():
    model = Transformer(tiny())
    a = model.encode([3, 4, 5, 6]).data
    b = model.encode([4, 3, 5, 6]).data
    assert not np.allclose(a[0], b[1])
    assert not np.allclose(a[1], b[0])


def test_vocab_and_length_errors():
    model = Transformer(tiny())
    with pytest.raises(VocabError):
        model.encode([3, 9])
    with pytest.raises(VocabError):
        model.forward_teacher_forced([3, 4], [-1])
    with pytest.raises(ContractError):
        model.forward_teacher_forced([3] * 17, [3])


@pytest.mark.parametrize("gma_layers", ["all", "none"])
def test_causality(gma_layers):
    model = randomize(Transformer(tiny(gma_layers=gma_layers)))
    src, tgt = [3, 4, 5, 6], [5, 4, 3, 7, 8]
    base, _ = model.forward_teacher_forced(src, tgt, record=False)
    for i in range(len(tgt)):
        edited = list(tgt)
        edited[i] = 3 if tgt[i] != 3 else 4
        logits, _ = model.forward_teacher_forced(src, edited, record=False)
        assert np.array_equal(logits.data[: i + 1], base.data[: i + 1])
        assert not np.allclose(logits.data[i + 1], base.data[i + 1])


def test_baseline_records_have_no_mixture():
    model = Transformer(tiny(gma_layers="none"))
    _, recs = model.forward_teacher_forced([3, 4, 5], [4, 5])
    assert len(recs) == 2 * 2
    for r in recs:
        assert r.beta is None
        assert np.all(r.gate == 0.0)
        assert np.array_equal(r.gamma, r.alpha)


def test_full_model_gradient_check():
    model = randomize(Transformer(tiny(n_layers=1, d_model=4, n_heads=2, d_ffn=4, src_vocab=6, tgt_vocab=6)), seed=1)
    src, tgt = [3, 4, 5, 3], [5, 4, 3, 4]
    batch = make_batch([AlignedExample(src, tgt, frozenset())])

    def loss(_):
        logits, _ = model.forward(batch)
        return cross_entropy(logits, batch.tgt_out)

    assert T.finite_diff_check(loss, model.parameters()) < 1e-4


def test_greedy_decode_cap_and_determinism():
    model = randomize(Transformer(tiny()), seed=2)
    assert len(model.greedy_decode([3, 4, 5], max_len=1)) <= 1
    a = model.greedy_decode([3, 4, 5, 6], max_len=10)
    assert a == model.greedy_decode([3, 4, 5, 6], max_len=10)
    assert len(a) <= 10
    assert model.greedy_decode_batch([[3, 4], [5, 6, 7]], 6)[1] == model.greedy_decode([5, 6, 7], 6)


def test_forced_records_structure_and_strict_normalization():
    model = randomize(Transformer(tiny(n_layers=3, gma=GmaConfig(K=2, norm_mode="strict"))), seed=3)
    recs = model.forced_decode_attention([3, 4, 5, 6], [6, 5, 4])
    assert len(recs) == 3 * 2
    for r in recs:
        assert r.gamma.shape == (4, 4)
        assert np.allclose(r.gamma.sum(-1), 1.0, atol=1e-9)
    _, tf = model.forward_teacher_forced([3, 4, 5, 6], [6, 5, 4])
    for a, b in zip(recs, tf):
        assert np.array_equal(a.gamma, b.gamma)


def test_batched_records_match_single_sentence():
    model = randomize(Transformer(tiny()), seed=4)
    exs = [AlignedExample([3, 4, 5, 6, 7], [4, 5], frozenset()), AlignedExample([5, 6], [3, 4, 5, 6], frozenset())]
    batched = model.forced_records(make_batch(exs))
    for ex, recs in zip(exs, batched):
        single = model.forced_decode_attention(ex.src, ex.tgt)
        for a, b in zip(recs, single):
            assert a.gamma.shape == (len(ex.tgt) + 1, len(ex.src))
            assert np.allclose(a.gamma, b.gamma, atol=1e-12)
            assert np.allclose(a.beta, b.beta, atol=1e-12)


def test_source_eos_adds_one_position():
    model = Transformer(tiny(src_eos=True))
    assert model.encode([3, 4, 5]).shape == (4, 8)
    recs = model.forced_decode_attention([3, 4, 5], [4])
    assert all(r.src_len == 4 and r.gamma.shape == (2, 4) for r in recs)


def test_baseline_matches_independent_transformer():
    cfg = tiny(gma_layers="none")
    model = randomize(Transformer(cfg), seed=5)
    exs = [
        AlignedExample([3, 4, 5, 6, 7], [7, 6, 5], frozenset()),
        AlignedExample([8, 3], [3, 8, 4, 4, 5], frozenset()),
    ]
    batch = make_batch(exs)
    with T.no_grad():
        logits, _ = model.forward(batch)
        ours = cross_entropy(logits, batch.tgt_out).item()
    ref = plain_transformer_loss(model.state_dict(), cfg, batch.src, batch.src_len, batch.tgt_in, batch.tgt_out)
    assert abs(ours - ref) <= 1e-10


def test_dot_only_gating_equals_no_gma_layers():
    a = randomize(Transformer(tiny(gma_layers="none")), seed=6)
    b = Transformer(tiny(gma=GmaConfig(K=2, gating="dot_only")))
    b.load_state_dict(a.state_dict())
    batch = make_batch([AlignedExample([3, 4, 5], [5, 4, 3], frozenset())])
    with T.no_grad():
        assert np.array_equal(a.forward(batch)[0].data, b.forward(batch)[0].data)


@pytest.mark.parametrize(
    "cfg",
    [
        tiny(),
        tiny(gma_layers="none"),
        tiny(n_layers=4, gma_layers="middle2", gma=GmaConfig(K=3, gating="average")),
        tiny(gma=GmaConfig(K=1, gating="gma_only"), norm_style="post"),
    ],
)
def test_analytic_parameter_count(cfg):
    model = Transformer(cfg)
    counts = count_parameters(cfg)
    assert counts["total"] == model.num_parameters()
    gma = sum(p.size for n, p in model.named_parameters() if ".gma." in n)
    assert counts["gma"] == gma


def test_large_config_overhead_is_a_tenth_of_a_million():
    cfg = ModelConfig(n_layers=6, d_model=512, n_heads=8, d_ffn=2048, gma=GmaConfig(K=4))
    per_layer = gma_layer_parameters(cfg.gma)
    d_k, K = 64, 4
    assert per_layer == 3 * (d_k * d_k + d_k + d_k * K + K) + (d_k * d_k + d_k + d_k + 1)
    extra = count_parameters(cfg)["gma"]
    assert extra == 6 * per_layer
    # base models of 79.7M, 63.1M and 83.6M each grow by 0.1M
    for base_m, ours_m in ((79.7, 79.8), (63.1, 63.2), (83.6, 83.7)):
        assert round(base_m + extra / 1e6, 1) == ours_m
        assert extra / (base_m * 1e6) < 0.002
