"""Dot-product, Gaussian-mixture and gated cross-attention.

Shapes follow the convention ``[..., I, J]`` for attention matrices, where
``I`` indexes target positions and ``J`` source positions. Source positions
are 1-based inside the mixture density, so a mean ``mu`` in ``(0, J)``
brackets the valid index range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateDistributionError
from .nn import Linear, Module, parameter, xavier
from .tensor import Tensor

NORM_MODES = ("approximate", "strict", "synthesis")
GATING_MODES = ("learned", "fixed", "average", "dot_only", "gma_only")


@dataclass
class GmaConfig:
    """Mixture size, conversion mode, gating mode and head geometry.

    ``gating="fixed"`` uses ``fixed_gate`` as a constant mixing weight. The
    ``share_*`` flags tie the respective predicted vector to its first
    component, for the mean/variance/weight ablations.
    """

    K: int = 4
    norm_mode: str = "approximate"
    gating: str = "learned"
    fixed_gate: float = 0.5
    share_mean: bool = False
    share_var: bool = False
    share_weight: bool = False
    d_model: int = 64
    n_heads: int = 4
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.gating not in GATING_MODES:
            raise ConfigError(f"gating must be one of {GATING_MODES}, got {self.gating!r}")
        if not 0.0 <= self.fixed_gate <= 1.0:
            raise ConfigError(f"fixed_gate must lie in [0, 1], got {self.fixed_gate}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def uses_mixture(self) -> bool:
        return self.gating != "dot_only"

    @property
    def learns_gate(self) -> bool:
        return self.gating == "learned"


class GmaHeadParams(Module):
    """Two-layer tanh predictors for the mixture parameters and the gate.

    One instance per decoder layer; it is applied to every head's query
    slice, so the weights are shared across heads.
    """

    def __init__(self, d_k: int, K: int, rng: np.random.Generator, mixture: bool = True, gate: bool = True):
        self.d_k, self.K = d_k, K
        if mixture:
            for tag in ("omega", "mu", "sigma"):
                setattr(self, f"W_{tag}", xavier(rng, d_k, d_k))
                setattr(self, f"b_{tag}1", parameter(np.zeros(d_k)))
                setattr(self, f"V_{tag}", xavier(rng, d_k, K))
                setattr(self, f"b_{tag}2", parameter(np.zeros(K)))
        if gate:
            self.W_g = xavier(rng, d_k, d_k)
            self.b_g1 = parameter(np.zeros(d_k))
            self.V_g = xavier(rng, d_k, 1)
            self.b_g2 = parameter(np.zeros(1))

    @property
    def has_mixture(self) -> bool:
        return hasattr(self, "W_omega")

    @property
    def has_gate(self) -> bool:
        return hasattr(self, "W_g")


@dataclass
class MixtureParams:
    """Converted mixture parameters, each ``[..., K]``."""

    omega: Tensor
    mu: Tensor
    sigma: Tensor
    Z: Tensor


def _ffn(q: Tensor, W: Tensor, b1: Tensor, V: Tensor, b2: Tensor) -> Tensor:
    return T.matmul(T.tanh(T.matmul(q, W) + b1), V) + b2


def dot_product_attention(queries, keys, mask=None) -> Tensor:
    """Scaled dot-product weights ``softmax(q k^T / sqrt(d_k))``.

    ``mask`` is a boolean array over source positions (True = live),
    broadcastable to ``[..., J]``; padded columns get exactly zero weight.
    """
    queries, keys = T.as_tensor(queries), T.as_tensor(keys)
    d_k = queries.shape[-1]
    scores = T.matmul(queries, keys.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :]
        if not mask.any(axis=-1).all():
            raise ContractError("dot_product_attention: every source position is masked")
    return T.softmax(scores, axis=-1, mask=mask)


def predict_intermediate(query, params: GmaHeadParams):
    """Raw mixture parameters and raw gate logit from the projected query.

    Returns ``(omega_hat, mu_hat, sigma_hat, g_hat)``; the first three are
    ``[..., K]`` and ``g_hat`` is ``[..., 1]``. Entries the parameter set
    does not provide are None.
    """
    q = T.as_tensor(query)
    vector = q.ndim == 1
    if vector:
        q = T.reshape(q, (1, q.shape[0]))
    w_hat = mu_hat = s_hat = g_hat = None
    if params.has_mixture:
        w_hat = _ffn(q, params.W_omega, params.b_omega1, params.V_omega, params.b_omega2)
        mu_hat = _ffn(q, params.W_mu, params.b_mu1, params.V_mu, params.b_mu2)
        s_hat = _ffn(q, params.W_sigma, params.b_sigma1, params.V_sigma, params.b_sigma2)
    if params.has_gate:
        g_hat = _ffn(q, params.W_g, params.b_g1, params.V_g, params.b_g2)
    if vector:
        w_hat, mu_hat, s_hat, g_hat = (None if t is None else T.reshape(t, t.shape[1:]) for t in (w_hat, mu_hat, s_hat, g_hat))
    return w_hat, mu_hat, s_hat, g_hat


def tie_to_first(x: Tensor) -> Tensor:
    """Replace every component of the last axis with the first one."""
    K = x.shape[-1]
    return T.getitem(x, (Ellipsis, [0] * K))


def convert_params(
    w_hat,
    mu_hat,
    sigma_hat,
    J,
    mode: str = "approximate",
    prev_mu=None,
    time_axis: int | None = None,
    sigma_floor: float = 1e-6,
) -> MixtureParams:
    """Map raw predictor outputs to valid mixture parameters.

    ``J`` is the true source length: a number or an array broadcastable to
    the ``[..., K]`` inputs. In synthesis mode the means accumulate over
    target steps: pass either ``prev_mu`` (single step) or ``time_axis``
    (whole sequence, means start from zero before the first step).
    """
    w_hat, mu_hat, sigma_hat = T.as_tensor(w_hat), T.as_tensor(mu_hat), T.as_tensor(sigma_hat)
    J_arr = np.asarray(J, dtype=T.DTYPE)
    if J_arr.size == 0 or J_arr.min() < 1:
        raise ContractError(f"source length must be >= 1, got {J}")
    if mode not in NORM_MODES:
        raise ContractError(f"unknown normalization mode {mode!r}")

    if mode == "synthesis":
        omega = T.exp(w_hat)
        step = T.exp(mu_hat)
        if prev_mu is not None:
            mu = T.as_tensor(prev_mu) + step
        elif time_axis is not None:
            mu = T.cumsum(step, axis=time_axis)
        else:
            raise ContractError("synthesis mode needs prev_mu or time_axis")
        sigma = T.sqrt(T.exp(-sigma_hat) * 0.5)
        Z = Tensor(np.ones(sigma.shape))
        return MixtureParams(omega, mu, sigma, Z)

    omega = T.softmax(w_hat, axis=-1)
    mu = T.sigmoid(mu_hat) * J_arr
    if mode == "approximate":
        sigma = T.minimum(T.minimum(T.sigmoid(sigma_hat) * (J_arr / 6.0), mu * (1.0 / 3.0)), (J_arr - mu) * (1.0 / 3.0))
        sigma = T.maximum(sigma, sigma_floor)
    else:
        sigma = T.sigmoid(sigma_hat) * J_arr
    Z = T.sqrt(sigma * sigma * (2.0 * math.pi))
    return MixtureParams(omega, mu, sigma, Z)


def gaussian_mixture_weights(p: MixtureParams, J: int, mask=None, mode: str = "approximate") -> Tensor:
    """Mixture attention over source positions ``1..J``.

    ``beta_j = sum_k omega_k / Z_k * exp(-(j - mu_k)^2 / (2 sigma_k^2))``.
    ``mask`` (True = live) zeroes padded positions. Strict mode renormalizes
    each row to sum to one; the other modes leave it as is.
    """
    positions = np.arange(1, int(J) + 1, dtype=T.DTYPE)
    mu = T.reshape(p.mu, p.mu.shape + (1,))
    sigma = T.reshape(p.sigma, p.sigma.shape + (1,))
    diff = positions - mu
    dens = T.exp(-(diff * diff) / (sigma * sigma * 2.0))
    scale = T.reshape(p.omega / p.Z, p.omega.shape + (1,))
    beta = T.tsum(scale * dens, axis=-2)
    if mask is not None:
        beta = beta * np.asarray(mask, dtype=T.DTYPE)
    if mode == "strict":
        total = T.tsum(beta, axis=-1, keepdims=True)
        if total.data.min() < 1e-12:
            raise DegenerateDistributionError(
                f"strict normalization of a row with mass {total.data.min():.3e}"
            )
        beta = beta / total
    return beta


def gate_fuse(alpha, beta, g_hat=None, gating: str = "learned", fixed_gate: float = 0.5):
    """Blend the two attentions: ``gamma = (1 - g) * alpha + g * beta``.

    Returns ``(gamma, g)`` with ``g`` shaped like ``alpha`` minus its last
    axis plus a trailing singleton.
    """
    alpha = T.as_tensor(alpha)
    gate_shape = alpha.shape[:-1] + (1,)
    if gating == "dot_only":
        return alpha, Tensor(np.zeros(gate_shape))
    beta = T.as_tensor(beta)
    if gating == "gma_only":
        return beta, Tensor(np.ones(gate_shape))
    if gating == "learned":
        if g_hat is None:
            raise ContractError("learned gating needs a gate logit")
        g = T.sigmoid(g_hat)
        if g.shape != gate_shape:
            g = T.reshape(g, gate_shape)
    elif gating == "average":
        g = Tensor(np.full(gate_shape, 0.5))
    elif gating == "fixed":
        g = Tensor(np.full(gate_shape, float(fixed_gate)))
    else:
        raise ContractError(f"unknown gating mode {gating!r}")
    return (1.0 - g) * alpha + g * beta, g


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[B, L, d]`` to ``[B, H, L, d/H]``."""
    B, L, d = x.shape
    return T.reshape(x, (B, L, n_heads, d // n_heads)).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, H, L, dk = x.shape
    return T.reshape(x.transpose(0, 2, 1, 3), (B, L, H * dk))


@dataclass
class LayerAttention:
    """Batched attention tensors from one cross-attention call.

    ``alpha``/``beta``/``gamma`` are ``[B, H, I, J]`` numpy arrays, ``gate``
    is ``[B, H, I]``. ``beta`` is None when the layer has no mixture branch.
    """

    alpha: np.ndarray
    beta: np.ndarray | None
    gamma: np.ndarray
    gate: np.ndarray
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    omega: np.ndarray | None = None


class MultiHeadAttention(Module):
    """Plain multi-head scaled dot-product attention."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask) -> tuple[Tensor, Tensor]:
        """``mask`` broadcasts to ``[B, H, I, J]``; returns (output, alpha)."""
        q = split_heads(self.q(x_q), self.n_heads)
        k = split_heads(self.k(x_kv), self.n_heads)
        v = split_heads(self.v(x_kv), self.n_heads)
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
        alpha = T.softmax(scores, axis=-1, mask=mask)
        return self.o(merge_heads(T.matmul(alpha, v))), alpha


class CrossAttention(Module):
    """Decoder-to-encoder attention fusing dot-product and mixture attention.

    With ``use_gma=False`` or ``gating="dot_only"`` the layer holds exactly
    the parameters of :class:`MultiHeadAttention` and computes the same
    function.
    """

    def __init__(self, config: GmaConfig, rng: np.random.Generator, use_gma: bool = True):
        self.config = config
        self.use_gma = use_gma and config.uses_mixture
        d = config.d_model
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        if self.use_gma:
            self.gma = GmaHeadParams(config.d_k, config.K, rng, mixture=True, gate=config.learns_gate)

    def mixture(self, w_hat: Tensor, mu_hat: Tensor, s_hat: Tensor, src_len) -> MixtureParams:
        """Convert raw ``[B, H, I, K]`` predictions using each sentence's length."""
        cfg = self.config
        if cfg.share_weight:
            w_hat = tie_to_first(w_hat)
        if cfg.share_mean:
            mu_hat = tie_to_first(mu_hat)
        if cfg.share_var:
            s_hat = tie_to_first(s_hat)
        J = np.asarray(src_len, dtype=T.DTYPE).reshape(-1, 1, 1, 1)
        return convert_params(w_hat, mu_hat, s_hat, J, cfg.norm_mode, time_axis=-2, sigma_floor=cfg.sigma_floor)

    def __call__(self, s: Tensor, z: Tensor, src_mask, src_len, record: bool = False):
        """Fused cross-attention.

        ``s`` is ``[B, I, d]`` decoder states, ``z`` is ``[B, J, d]`` encoder
        states, ``src_mask`` is ``[B, J]`` booleans and ``src_len`` the true
        source lengths. Returns ``(context [B, I, d], LayerAttention | None)``.
        """
        cfg = self.config
        H = cfg.n_heads
        src_mask = np.asarray(src_mask, dtype=bool)
        q = split_heads(self.q(s), H)
        k = split_heads(self.k(z), H)
        v = split_heads(self.v(z), H)
        alpha = dot_product_attention(q, k, mask=src_mask[:, None, :])

        beta = None
        params = None
        if self.use_gma:
            w_hat, mu_hat, s_hat, g_hat = predict_intermediate(q, self.gma)
            params = self.mixture(w_hat, mu_hat, s_hat, src_len)
            beta = gaussian_mixture_weights(params, z.shape[1], mask=src_mask[:, None, None, :], mode=cfg.norm_mode)
            gamma, g = gate_fuse(alpha, beta, g_hat, cfg.gating, cfg.fixed_gate)
        else:
            gamma, g = gate_fuse(alpha, None, gating="dot_only")

        context = self.o(merge_heads(T.matmul(gamma, v)))
        rec = None
        if record:
            rec = LayerAttention(
                alpha=alpha.data.copy(),
                beta=None if beta is None else beta.data.copy(),
                gamma=gamma.data.copy(),
                gate=g.data[..., 0].copy(),
                mu=None if params is None else params.mu.data.copy(),
                sigma=None if params is None else params.sigma.data.copy(),
                omega=None if params is None else params.omega.data.copy(),
            )
        return context, rec


# per-sentence records and the JSON-lines dump --------------------------------


@dataclass
class AttentionRecord:
    """Attention of one head of one decoder layer for one sentence pair.

    ``layer`` and ``head`` are 1-based. Matrices are ``[tgt_len, src_len]``.
    """

    layer: int
    head: int
    alpha: np.ndarray
    beta: np.ndarray | None
    gamma: np.ndarray
    gate: np.ndarray
    src_len: int
    tgt_len: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def flat(a):
            return None if a is None else [float(x) for x in np.asarray(a).reshape(-1)]

        return {
            "layer": self.layer,
            "head": self.head,
            "alpha": flat(self.alpha),
            "beta": flat(self.beta),
            "gamma": flat(self.gamma),
            "gate": flat(self.gate),
            "src_len": self.src_len,
            "tgt_len": self.tgt_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionRecord":
        I, J = d["tgt_len"], d["src_len"]

        def mat(key):
            v = d.get(key)
            return None if v is None else np.asarray(v, dtype=T.DTYPE).reshape(I, J)

        return cls(
            layer=d["layer"],
            head=d["head"],
            alpha=mat("alpha"),
            beta=mat("beta"),
            gamma=mat("gamma"),
            gate=np.asarray(d["gate"], dtype=T.DTYPE).reshape(I),
            src_len=J,
            tgt_len=I,
        )


def write_attention_dump(path, sentences: Iterable[list[AttentionRecord]]) -> int:
    """One JSON line per (sentence, layer, head); returns the line count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for idx, records in enumerate(sentences):
            for rec in records:
                d = rec.to_dict()
                d["sentence"] = idx
                fh.write(json.dumps(d) + "\n")
                n += 1
    return n


def read_attention_dump(path) -> list[list[AttentionRecord]]:
    by_sentence: dict[int, list[AttentionRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            by_sentence.setdefault(d.get("sentence", 0), []).append(AttentionRecord.from_dict(d))
    return [by_sentence[k] for k in sorted(by_sentence)]
