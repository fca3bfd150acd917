"""Toy Transformer encoder-decoder with gated Gaussian-mixture cross-attention."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, CrossAttention, GmaConfig, LayerAttention, MultiHeadAttention
from .data import BOS, EOS, PAD, AlignedExample, Batch, make_batch
from .errors import ConfigError, ContractError, VocabError
from .nn import Embedding, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor

LAYER_PRESETS = ("none", "bottom2", "middle2", "top2", "all")


def resolve_gma_layers(spec, n_layers: int) -> tuple[int, ...]:
    """Turn a preset name or an iterable of 1-based indices into a sorted tuple."""
    if spec is None:
        spec = "all"
    if isinstance(spec, str):
        if spec not in LAYER_PRESETS:
            raise ConfigError(f"unknown gma_layers preset {spec!r}; expected one of {LAYER_PRESETS}")
        if spec == "none":
            return ()
        if spec == "all":
            return tuple(range(1, n_layers + 1))
        if n_layers < 2:
            raise ConfigError(f"preset {spec!r} needs at least 2 layers")
        if spec == "bottom2":
            return (1, 2)
        if spec == "top2":
            return (n_layers - 1, n_layers)
        lo = (n_layers - 2) // 2 + 1
        return (lo, lo + 1)
    layers = tuple(sorted({int(x) for x in spec}))
    if any(not 1 <= x <= n_layers for x in layers):
        raise ConfigError(f"gma_layers {layers} must lie within 1..{n_layers}")
    return layers


@dataclass
class ModelConfig:
    """Architecture of the toy model.

    ``gma_layers`` holds 1-based decoder layer indices whose cross-attention
    gets the mixture branch (a preset name is accepted and resolved).
    ``gma`` inherits ``d_model`` and ``n_heads`` from this config. With
    ``src_eos`` every source sentence is terminated by EOS inside the model,
    so encoder states and attention rows carry one extra source position.
    """

    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    src_vocab: int = 24
    tgt_vocab: int = 24
    max_len: int = 64
    gma_layers: object = "all"
    gma: GmaConfig = field(default_factory=GmaConfig)
    norm_style: str = "pre"
    dropout: float = 0.0
    src_eos: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.d_ffn < 1 or self.max_len < 1:
            raise ConfigError("n_layers, d_ffn and max_len must be positive")
        if self.norm_style not in ("pre", "post"):
            raise ConfigError(f"norm_style must be 'pre' or 'post', got {self.norm_style!r}")
        if isinstance(self.gma, dict):
            self.gma = GmaConfig(**self.gma)
        self.gma = dataclasses.replace(self.gma, d_model=self.d_model, n_heads=self.n_heads)
        self.gma_layers = resolve_gma_layers(self.gma_layers, self.n_layers)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gma_layers"] = list(self.gma_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        gma = d.pop("gma", {})
        return cls(gma=GmaConfig(**gma) if isinstance(gma, dict) else gma, **d)


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d_model // 2])
    return table


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng):
        self.fc1 = Linear(d_model, d_ffn, rng)
        self.fc2 = Linear(d_ffn, d_model, rng)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self._pre = cfg.norm_style == "pre"

    def __call__(self, x, mask, drop):
        if self._pre:
            h = self.norm1(x)
            x = x + drop(self.self_attn(h, h, mask)[0])
            return x + drop(self.ffn(self.norm2(x)))
        x = self.norm1(x + drop(self.self_attn(x, x, mask)[0]))
        return self.norm2(x + drop(self.ffn(x)))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, use_gma: bool):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.cross = CrossAttention(cfg.gma, rng, use_gma=use_gma)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.norm3 = LayerNorm(cfg.d_model)
        self._pre = cfg.norm_style == "pre"

    def __call__(self, y, memory, self_mask, src_mask, src_len, drop, record):
        if self._pre:
            h = self.norm1(y)
            y = y + drop(self.self_attn(h, h, self_mask)[0])
            ctx, rec = self.cross(self.norm2(y), memory, src_mask, src_len, record)
            y = y + drop(ctx)
            return y + drop(self.ffn(self.norm3(y))), rec
        y = self.norm1(y + drop(self.self_attn(y, y, self_mask)[0]))
        ctx, rec = self.cross(y, memory, src_mask, src_len, record)
        y = self.norm2(y + drop(ctx))
        return self.norm3(y + drop(self.ffn(y))), rec


class Transformer(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.src_embed = Embedding(config.src_vocab, d, rng)
        self.tgt_embed = Embedding(config.tgt_vocab, d, rng)
        self.encoder = ModuleList(EncoderLayer(config, rng) for _ in range(config.n_layers))
        self.decoder = ModuleList(
            DecoderLayer(config, rng, use_gma=(l + 1) in config.gma_layers) for l in range(config.n_layers)
        )
        if config.norm_style == "pre":
            self.enc_norm = LayerNorm(d)
            self.dec_norm = LayerNorm(d)
        self.out = Linear(d, config.tgt_vocab, rng)
        self._pe = sinusoid_table(config.max_len, d)
        self._drop_rng: np.random.Generator | None = None

    # dropout is active only while a generator is installed
    def train_mode(self, rng: np.random.Generator | None) -> None:
        self._drop_rng = rng

    def _drop(self, x):
        return T.dropout(x, self.config.dropout, self._drop_rng)

    def _embed(self, table: Embedding, ids: np.ndarray, vocab: int) -> Tensor:
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise VocabError(f"token id outside [0, {vocab})")
        L = ids.shape[1]
        if L > self.config.max_len:
            raise ContractError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        x = table(ids) * math.sqrt(self.config.d_model) + self._pe[:L]
        return self._drop(x)

    def encode_batch(self, src: np.ndarray, src_mask: np.ndarray) -> Tensor:
        x = self._embed(self.src_embed, np.asarray(src), self.config.src_vocab)
        mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask, self._drop)
        if self.config.norm_style == "pre":
            x = self.enc_norm(x)
        return x

    def decode_batch(self, tgt_in, tgt_mask, memory, src_mask, src_len, record: bool = False):
        """Logits ``[B, I, V]`` and, if ``record``, one LayerAttention per layer."""
        tgt_in = np.asarray(tgt_in)
        I = tgt_in.shape[1]
        causal = np.tril(np.ones((I, I), dtype=bool))
        self_mask = causal[None, None] & np.asarray(tgt_mask, dtype=bool)[:, None, None, :]
        y = self._embed(self.tgt_embed, tgt_in, self.config.tgt_vocab)
        records = []
        for layer in self.decoder:
            y, rec = layer(y, memory, self_mask, src_mask, src_len, self._drop, record)
            records.append(rec)
        if self.config.norm_style == "pre":
            y = self.dec_norm(y)
        return self.out(y), (records if record else None)

    def source(self, src, src_mask, src_len):
        """Source arrays as the encoder sees them (EOS appended if configured)."""
        src = np.asarray(src, dtype=np.int64)
        src_len = np.asarray(src_len, dtype=np.int64)
        if not self.config.src_eos:
            return src, np.asarray(src_mask, dtype=bool), src_len
        B, J = src.shape
        out = np.full((B, J + 1), PAD, dtype=np.int64)
        out[:, :J] = src
        out[np.arange(B), src_len] = EOS
        return out, np.arange(J + 1)[None, :] <= src_len[:, None], src_len + 1

    def forward(self, batch: Batch, record: bool = False):
        src, src_mask, src_len = self.source(batch.src, batch.src_mask, batch.src_len)
        memory = self.encode_batch(src, src_mask)
        return self.decode_batch(batch.tgt_in, batch.tgt_mask, memory, src_mask, src_len, record)

    # per-sentence API -------------------------------------------------------

    def encode(self, src_ids: Sequence[int]) -> Tensor:
        """Encoder states ``[J, d_model]`` for one sentence."""
        src = np.asarray([list(src_ids)], dtype=np.int64)
        src, mask, _ = self.source(src, np.ones_like(src, dtype=bool), [src.shape[1]])
        return T.reshape(self.encode_batch(src, mask), (src.shape[1], self.config.d_model))

    def forward_teacher_forced(self, src_ids, tgt_ids, record: bool = True):
        """Logits ``[len(tgt) + 1, V]`` and per-head records for one pair.

        The decoder reads ``[BOS] + tgt`` so row ``i`` predicts ``tgt[i]``
        (the last row predicts EOS).
        """
        batch = make_batch([AlignedExample(src_ids, tgt_ids, frozenset())])
        logits, layers = self.forward(batch, record=record)
        I, V = logits.shape[1], logits.shape[2]
        records = split_records(layers, batch, self.config.src_eos)[0] if record else []
        return T.reshape(logits, (I, V)), records

    def forced_decode_attention(self, src_ids, ref_tgt_ids) -> list[AttentionRecord]:
        with T.no_grad():
            return self.forward_teacher_forced(src_ids, ref_tgt_ids, record=True)[1]

    def forced_records(self, batch: Batch) -> list[list[AttentionRecord]]:
        with T.no_grad():
            _, layers = self.forward(batch, record=True)
        return split_records(layers, batch, self.config.src_eos)

    def greedy_decode(self, src_ids, max_len: int) -> list[int]:
        return self.greedy_decode_batch([src_ids], max_len)[0]

    def greedy_decode_batch(self, srcs: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
        """Greedy argmax decoding; each output excludes BOS and EOS."""
        if not srcs:
            return []
        batch = make_batch([AlignedExample(s, (), frozenset()) for s in srcs])
        cap = min(max_len, self.config.max_len - 1)
        B = len(srcs)
        with T.no_grad():
            src, src_mask, src_len = self.source(batch.src, batch.src_mask, batch.src_len)
            memory = self.encode_batch(src, src_mask)
            ys = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(cap):
                logits, _ = self.decode_batch(ys, np.ones_like(ys, dtype=bool), memory, src_mask, src_len)
                nxt = logits.data[:, -1, :].argmax(axis=-1)
                nxt = np.where(done, PAD, nxt)
                ys = np.concatenate([ys, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        out = []
        for row in ys[:, 1:]:
            seq = []
            for tok in row:
                if tok in (EOS, PAD):
                    break
                seq.append(int(tok))
            out.append(seq)
        return out


def split_records(layers: list[LayerAttention], batch: Batch, src_eos: bool = False) -> list[list[AttentionRecord]]:
    """Slice batched layer attention into per-sentence, per-head records."""
    out = []
    for b in range(len(batch)):
        J = int(batch.src_len[b]) + int(src_eos)
        I = int(batch.tgt_len[b]) + 1
        recs = []
        for l, la in enumerate(layers, start=1):
            for h in range(la.alpha.shape[1]):
                recs.append(
                    AttentionRecord(
                        layer=l,
                        head=h + 1,
                        alpha=la.alpha[b, h, :I, :J].copy(),
                        beta=None if la.beta is None else la.beta[b, h, :I, :J].copy(),
                        gamma=la.gamma[b, h, :I, :J].copy(),
                        gate=la.gate[b, h, :I].copy(),
                        src_len=J,
                        tgt_len=I,
                    )
                )
        out.append(recs)
    return out


# parameter accounting ---------------------------------------------------------


def gma_layer_parameters(gma: GmaConfig) -> int:
    """Parameters one decoder layer gains from the mixture and gate predictors."""
    if not gma.uses_mixture:
        return 0
    dk, K = gma.d_k, gma.K
    n = 3 * (dk * dk + dk + dk * K + K)
    if gma.learns_gate:
        n += dk * dk + dk + dk + 1
    return n


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Analytic parameter count: ``{"base", "gma", "total"}``."""
    d, f = cfg.d_model, cfg.d_ffn
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norm = 2 * d
    enc = cfg.n_layers * (attn + ffn + 2 * norm)
    dec = cfg.n_layers * (2 * attn + ffn + 3 * norm)
    base = cfg.src_vocab * d + cfg.tgt_vocab * d + enc + dec + d * cfg.tgt_vocab + cfg.tgt_vocab
    if cfg.norm_style == "pre":
        base += 2 * norm
    gma = len(cfg.gma_layers) * gma_layer_parameters(cfg.gma)
    return {"base": base, "gma": gma, "total": base + gma}


def gma_overhead_ratio(cfg: ModelConfig, base_params: int | None = None) -> float:
    counts = count_parameters(cfg)
    return counts["gma"] / (base_params if base_params is not None else counts["base"])
