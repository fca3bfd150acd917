"""Cross-entropy training with Adam, inverse-sqrt warmup, clipping and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import PAD, AlignedExample, TaskSpec, generate, make_batch, split_corpus
from .errors import ConfigError, ContractError, DegenerateDistributionError, DivergenceError
from .model import ModelConfig, Transformer
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step",
    "loss",
    "eval_loss",
    "lr",
    "token_acc",
    "clip_frac",
    "aer",
    "mean_entropy_alpha",
    "mean_entropy_beta",
    "mean_entropy_gamma",
]


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    warmup_steps: int = 400
    lr_factor: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    label_smoothing: float = 0.0
    seed: int = 0
    eval_every: int = 200
    heldout: float = 0.1
    eval_size: int = 200
    track_alignment: bool = False

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.warmup_steps <= 0:
            raise ConfigError("warmup_steps must be > 0")
        if self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("batch_size and eval_every must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")


def cross_entropy(logits: Tensor, targets, pad_id: int = PAD, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood (natural log) over non-pad targets."""
    V = logits.shape[-1]
    flat = T.reshape(logits, (-1, V))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    keep = np.flatnonzero(targets != pad_id)
    if keep.size == 0:
        raise ContractError("cross_entropy: every target is padding")
    logp = T.log_softmax(T.getitem(flat, keep), axis=-1)
    nll = -T.mean(T.getitem(logp, (np.arange(keep.size), targets[keep])))
    if label_smoothing > 0.0:
        smooth = -T.mean(logp)
        return nll * (1.0 - label_smoothing) + smooth * label_smoothing
    return nll


def lr_schedule(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """``factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def adam_step(param, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.98, eps=1e-9):
    """One bias-corrected Adam update; returns new ``(param, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, named_params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise DivergenceError(f"non-finite gradient in {name} ({bad} entries)", self.t)
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, g, self.m[name], self.v[name], self.t, lr, self.beta1, self.beta2, self.eps
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m/{k}"].copy()
            self.v[k] = arrays[f"adam.v/{k}"].copy()
        self.t = t


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
        return total, True
    return total, False


# checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    adam_t: int
    model_config: ModelConfig
    extra: dict = field(default_factory=dict)

    def build_model(self) -> Transformer:
        model = Transformer(self.model_config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, model: Transformer, optimizer: Adam | None, step: int, extra: dict | None = None) -> None:
    """Parameters plus optimizer moments in one file; the config also goes to ``<path>.json``."""
    arrays = {}
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(f"refusing to save non-finite parameter {name}", step)
        arrays[f"param/{name}"] = p.data
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {
        "step": step,
        "adam_t": optimizer.t if optimizer is not None else 0,
        "model_config": model.config.to_dict(),
        "extra": extra or {},
    }
    T.save_arrays(path, arrays, meta)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = T.load_arrays(path)
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return Checkpoint(
        params=params,
        optimizer=opt,
        step=int(meta["step"]),
        adam_t=int(meta.get("adam_t", 0)),
        model_config=ModelConfig.from_dict(meta["model_config"]),
        extra=meta.get("extra", {}),
    )


# evaluation -------------------------------------------------------------------


def evaluate(
    model: Transformer,
    examples: Sequence[AlignedExample],
    batch_size: int = 64,
    alignment: bool = False,
) -> dict:
    """Teacher-forced loss and token accuracy on ``examples``.

    With ``alignment`` the result also carries AER against the gold links and
    mean attention entropies.
    """
    from . import analysis

    nll = 0.0
    correct = 0
    count = 0
    sentences = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = make_batch(examples[i : i + batch_size])
            logits, layers = model.forward(batch, record=alignment)
            x = logits.data
            x = x - x.max(axis=-1, keepdims=True)
            logp = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
            keep = batch.tgt_mask
            tgt = batch.tgt_out
            picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
            nll -= float(picked[keep].sum())
            correct += int((logp.argmax(axis=-1) == tgt)[keep].sum())
            count += int(keep.sum())
            if alignment:
                from .model import split_records

                for ex, recs in zip(batch.examples, split_records(layers, batch, model.config.src_eos)):
                    sentences.append((ex, recs))
    out = {"loss": nll / count, "token_acc": correct / count}
    if alignment and sentences:
        out.update(analysis.alignment_summary(sentences, n_layers=model.config.n_layers))
    return out


# training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: Transformer
    optimizer: Adam
    step: int
    metrics: list[dict]
    losses: list[float]
    clipped: list[bool]
    train_set: list[AlignedExample]
    heldout: list[AlignedExample]

    @property
    def clip_frac(self) -> float:
        return float(np.mean(self.clipped)) if self.clipped else 0.0

    @property
    def final(self) -> dict:
        return self.metrics[-1]


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k])) for k in METRIC_COLUMNS})


def train(
    model_config: ModelConfig,
    task_spec: TaskSpec,
    train_config: TrainConfig,
    out_dir=None,
    corpus: Sequence[AlignedExample] | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a fresh model on the task corpus; fully determined by the seeds.

    Metric rows are produced every ``eval_every`` steps and at the end. With
    ``out_dir`` the metrics CSV, final checkpoint and config echo are written
    there.
    """
    cfg = train_config
    if corpus is None:
        corpus = generate(task_spec)
    train_set, heldout = split_corpus(corpus, cfg.heldout)
    eval_set = heldout[: cfg.eval_size]

    model = Transformer(model_config)
    named = dict(model.named_parameters())
    params = list(named.values())
    opt = Adam(named, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    model.train_mode(np.random.default_rng([cfg.seed, 1]) if model_config.dropout > 0 else None)

    losses: list[float] = []
    clipped: list[bool] = []
    metrics: list[dict] = []
    window_start = 0
    lr = 0.0
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(train_set), size=min(cfg.batch_size, len(train_set)), replace=False)
        batch = make_batch([train_set[i] for i in sorted(idx)])
        T.zero_grad(params)
        try:
            logits, _ = model.forward(batch)
        except DegenerateDistributionError as exc:
            raise DivergenceError(str(exc), step) from exc
        loss = cross_entropy(logits, batch.tgt_out, PAD, cfg.label_smoothing)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError("loss is not finite", step)
        T.backward(loss)
        _, was_clipped = clip_grad_norm(params, cfg.clip_norm)
        lr = lr_schedule(step, model_config.d_model, cfg.warmup_steps, cfg.lr_factor)
        opt.step(lr)
        losses.append(value)
        clipped.append(was_clipped)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            model.train_mode(None)
            try:
                ev = evaluate(model, eval_set, alignment=cfg.track_alignment)
            except DegenerateDistributionError as exc:
                raise DivergenceError(str(exc), step) from exc
            model.train_mode(np.random.default_rng([cfg.seed, 1, step]) if model_config.dropout > 0 else None)
            row = {
                "step": step,
                "loss": float(np.mean(losses[window_start:])),
                "eval_loss": ev["loss"],
                "lr": lr,
                "token_acc": ev["token_acc"],
                "clip_frac": float(np.mean(clipped[window_start:])),
                "aer": ev.get("aer"),
                "mean_entropy_alpha": ev.get("entropy_alpha"),
                "mean_entropy_beta": ev.get("entropy_beta"),
                "mean_entropy_gamma": ev.get("entropy_gamma"),
            }
            window_start = step
            metrics.append(row)
            logger.info("step %d loss %.4f eval_loss %.4f acc %.4f", step, row["loss"], row["eval_loss"], row["token_acc"])
            if callback is not None:
                callback(row)
    model.train_mode(None)

    result = TrainResult(model, opt, cfg.steps, metrics, losses, clipped, train_set, heldout)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", metrics)
        save_checkpoint(
            out / "model.ckpt",
            model,
            opt,
            cfg.steps,
            extra={"train_config": dataclasses.asdict(cfg), "task": dataclasses.asdict(task_spec)},
        )
    return result
