"""Optimization loop: combined loss, random budget per batch, Adam, cosine LR."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dropping import DropDecision, drop_loss
from .model import AdaptivePointTransformer, ModelConfig
from .numerics import RandomSource, Tensor
from .pointcloud import AugmentConfig, ConfigError, Dataset, augment

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 2.0
    batch_size: int = 64
    base_lr: float = 1e-3
    epochs: int = 60
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    eval_every: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        aug = d.get("augment", {})
        d["augment"] = None if aug is None else AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                                 for k, v in aug.items()})
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``base_lr`` toward 0 over ``cfg.epochs``, stepped per epoch."""
    if cfg.epochs <= 0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


class Adam:
    def __init__(self, params: Sequence[tuple[str, Tensor]], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


@dataclass
class TrainState:
    model: AdaptivePointTransformer
    optimizer: Adam
    cfg: TrainConfig
    epoch: int = 0
    rngs: dict[str, RandomSource] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    telemetry: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    model = AdaptivePointTransformer(cfg.model)
    opt = Adam(list(model.named_parameters()), cfg.betas, cfg.eps, cfg.weight_decay)
    rngs = {name: RandomSource(cfg.seed, sid)
            for sid, name in enumerate(("data", "gumbel", "budget", "augment", "ablation"), start=1)}
    return TrainState(model, opt, cfg, rngs=rngs)


def total_loss(logits: Tensor, labels: np.ndarray, decisions: Sequence[DropDecision],
               targets: Sequence[float], alpha: float) -> tuple[Tensor, Tensor, Tensor]:
    """``CE + alpha * L_drop``; returns ``(total, ce, l_drop)``."""
    ce = nx.cross_entropy(logits, labels)
    ld = drop_loss(decisions, targets)
    return ce + alpha * ld, ce, ld


def sample_budget(rng: RandomSource, budgets: int) -> int:
    return int(rng.integers(1, budgets + 1))


def train_step(state: TrainState, points: np.ndarray, labels: np.ndarray, b: int,
               lr: float | None = None, batch_id: str = "?") -> dict:
    """One forward/backward/update with drop-predictor bank ``b``."""
    model, cfg = state.model, state.cfg
    lr = lr_at(state.epoch, cfg) if lr is None else lr
    model.zero_grad()
    out = model.forward_train(points, b, rng=state.rngs["gumbel"])
    targets = model.schedule.row(b)
    loss, ce, ld = total_loss(out.logits, labels, out.decisions, targets, cfg.alpha)
    if not np.isfinite(loss.item()):
        raise NumericalError(f"non-finite loss {loss.item()} at epoch {state.epoch}, batch {batch_id}, "
                             f"budget {b}: ce={ce.item()}, l_drop={ld.item()}")
    nx.backward(loss)
    state.optimizer.step(lr)
    pred = np.argmax(out.logits.data, axis=1)
    return {
        "budget": b,
        "loss": loss.item(),
        "ce": ce.item(),
        "l_drop": ld.item(),
        "correct": int((pred == labels).sum()),
        "count": len(labels),
        "soft_d": [float(d.soft_dropped.data.mean()) for d in out.decisions],
        "hard_d": [float(d.dropped_fraction.mean()) for d in out.decisions],
        "targets": [float(t) for t in targets],
    }


def train_epoch(state: TrainState, data: Dataset) -> dict:
    cfg = state.cfg
    n = len(data)
    order = state.rngs["data"].permutation(n)
    lr = lr_at(state.epoch, cfg)
    steps = []
    for bi, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        clouds = [data.clouds[i] for i in idx]
        if cfg.augment is not None:
            clouds = [augment(c, cfg.augment, state.rngs["augment"]) for c in clouds]
        pts = np.stack([c.points for c in clouds])
        labels = np.array([c.label for c in clouds], dtype=np.int64)
        b = sample_budget(state.rngs["budget"], cfg.model.budgets)
        steps.append(train_step(state, pts, labels, b, lr, batch_id=f"{state.epoch}:{bi}"))

    ell = cfg.model.ell
    weights = np.array([s["count"] for s in steps], dtype=np.float64)
    summary = {
        "epoch": state.epoch,
        "lr": lr,
        "loss": float(np.average([s["loss"] for s in steps], weights=weights)),
        "ce": float(np.average([s["ce"] for s in steps], weights=weights)),
        "l_drop": float(np.average([s["l_drop"] for s in steps], weights=weights)),
        "train_acc": sum(s["correct"] for s in steps) / weights.sum(),
        "hard_d": [float(np.mean([s["hard_d"][i] for s in steps])) for i in range(ell)],
    }
    for s in steps:
        for i in range(ell):
            state.telemetry.append({"epoch": state.epoch, "budget": s["budget"], "slot": i + 1,
                                    "soft_d": s["soft_d"][i], "hard_d": s["hard_d"][i],
                                    "target": s["targets"][i]})
    state.epoch += 1
    return summary


@dataclass
class EvalReport:
    budget: int
    sampler: str
    accuracy: float
    kept_counts: list[int]
    per_cloud_kept: list[list[int]] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)


def evaluate(model: AdaptivePointTransformer, data: Dataset, b: int, sampler: str = "adaptive",
             batch_size: int = 64, rng: RandomSource | None = None) -> EvalReport:
    """Deterministic pruned inference over ``data`` with budget ``b``; no augmentation."""
    model.schedule.check_budget(b)
    preds, per_cloud = [], []
    counts: list[int] = []
    for start in range(0, len(data), batch_size):
        clouds = data.clouds[start : start + batch_size]
        pts = np.stack([c.points for c in clouds])
        out = model.forward_infer(pts, b, sampler=sampler, rng=rng)
        preds.extend(np.argmax(out.logits.data, axis=1).tolist())
        if model.cfg.selection == "threshold" and sampler == "adaptive":
            per_cloud.extend(np.stack([k.sum(axis=1) for k in out.kept_indices], axis=1).tolist())
        else:
            per_cloud.extend([list(out.kept_counts)] * len(clouds))
        counts = out.kept_counts
    labels = data.labels
    acc = float(np.mean(np.array(preds) == labels)) if len(labels) else float("nan")
    return EvalReport(b, sampler, acc, list(counts), per_cloud, preds)


def fit(state: TrainState, train: Dataset, evaluation: Dataset | None = None,
        on_epoch: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run the remaining epochs of ``state``."""
    cfg = state.cfg
    while state.epoch < cfg.epochs:
        summary = train_epoch(state, train)
        last = state.epoch == cfg.epochs
        if evaluation is not None and len(evaluation) and (last or (cfg.eval_every and state.epoch % cfg.eval_every == 0)):
            summary["eval_acc"] = [evaluate(state.model, evaluation, b).accuracy
                                   for b in range(1, cfg.model.budgets + 1)]
        state.history.append(summary)
        log.info("epoch %d loss %.4f ce %.4f l_drop %.4f train_acc %.3f%s", summary["epoch"], summary["loss"],
                 summary["ce"], summary["l_drop"], summary["train_acc"],
                 f" eval {summary['eval_acc']}" if "eval_acc" in summary else "")
        if on_epoch is not None:
            on_epoch(state, summary)
    return state


def metrics_header(budgets: int, ell: int) -> list[str]:
    return (["epoch", "loss", "ce", "l_drop"] + [f"acc_b{b}" for b in range(1, budgets + 1)]
            + [f"hard_d_slot{i}" for i in range(1, ell + 1)])


def metrics_row(summary: dict, budgets: int, ell: int) -> list:
    accs = summary.get("eval_acc") or [""] * budgets
    return [summary["epoch"], summary["loss"], summary["ce"], summary["l_drop"], *accs, *summary["hard_d"][:ell]]
