"""Token drop predictors, straight-through Gumbel selection and budget schedules.

A budget ``b`` in ``1..B`` picks one bank of drop predictors and one row of
target drop ratios.  ``b = 1`` is the most aggressive (drops ``rho`` of the
initial tokens by the last predictor) and ``b = B`` targets no dropping at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import numerics as nx
from .layers import Linear, Module, Norm
from .numerics import RandomSource, Tensor
from .pointcloud import ConfigError, farthest_point_indices


# --------------------------------------------------------------------------
# schedules


def default_placement(n_blocks: int, ell: int) -> list[int]:
    """Evenly spaced 0-based block indices that get a predictor in front of them.

    ``(8, 4) -> [2, 4, 6, 7]``; ``(4, 4) -> [0, 1, 2, 3]``.
    """
    if not 1 <= ell <= n_blocks:
        raise ConfigError(f"cannot place {ell} predictors in {n_blocks} blocks")
    return [min(i * n_blocks // ell, n_blocks - 1 - (ell - i)) for i in range(1, ell + 1)]


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass
class DropSchedule:
    ell: int
    rho: Fraction
    budgets: int
    targets: list[list[Fraction]]
    placement: list[int] = field(default_factory=list)

    def row(self, b: int) -> np.ndarray:
        self.check_budget(b)
        return np.array([float(t) for t in self.targets[b - 1]])

    def exact_row(self, b: int) -> list[Fraction]:
        self.check_budget(b)
        return list(self.targets[b - 1])

    def kept_counts(self, b: int, n_initial: int) -> list[int]:
        return [kept_count(t, n_initial) for t in self.exact_row(b)]

    def check_budget(self, b: int) -> None:
        if not (isinstance(b, (int, np.integer)) and 1 <= b <= self.budgets):
            valid = ", ".join(str(i) for i in range(1, self.budgets + 1))
            raise ConfigError(f"budget {b!r} out of range; valid budgets: {valid}")


def drop_targets(ell: int, rho, budgets: int, placement: Sequence[int] | None = None) -> DropSchedule:
    """Targets ``t[b][i] = (B - b) / (B - 1) * (i / ell) * rho`` as exact fractions."""
    rho = _exact(rho)
    if ell < 1:
        raise ConfigError("ell must be at least 1")
    if budgets < 2:
        raise ConfigError("need at least 2 budgets")
    if not 0 <= rho < 1:
        raise ConfigError(f"rho={rho} must lie in [0, 1); cannot drop every token")
    targets = [
        [Fraction(budgets - b, budgets - 1) * Fraction(i, ell) * rho for i in range(1, ell + 1)]
        for b in range(1, budgets + 1)
    ]
    return DropSchedule(ell, rho, budgets, targets, list(placement) if placement is not None else [])


def kept_count(target, n_initial: int) -> int:
    """``round((1 - t) * N)`` with halves rounded up, evaluated exactly."""
    return math.floor((1 - _exact(target)) * n_initial + Fraction(1, 2))


# --------------------------------------------------------------------------
# predictor


class DropPredictorParams(Module):
    def __init__(self, d_model: int, rng: RandomSource | None = None, dtype=np.float32):
        rng = rng or RandomSource(0, 0)
        f = d_model // 2
        self.norm = Norm(d_model, dtype)
        self.local = Linear(d_model, f, rng, dtype)
        self.glob = Linear(d_model, f, rng, dtype)
        self.dec1 = Linear(2 * f, f, rng, dtype)
        self.dec2 = Linear(f, 2, rng, dtype)


def predict_keep_logits(tokens: Tensor, keep, params: DropPredictorParams) -> Tensor:
    """Per-token ``(drop, keep)`` logits from local and mean-pooled global features.

    ``keep`` is None (all alive) or a ``(B, N)`` 0/1 array/Tensor; the global
    feature averages over kept tokens only.
    """
    x = params.norm.layer(tokens)
    z_local = nx.gelu(params.local(x))
    g = nx.gelu(params.glob(x))
    z_global = nx.mean(g, axis=1, keepdims=True) if keep is None else nx.masked_mean(g, keep, axis=1).reshape(
        g.shape[0], 1, g.shape[2])
    z_global = nx.broadcast_to(z_global, z_local.shape)
    z = nx.concat([z_local, z_global], axis=-1)
    return params.dec2(nx.gelu(params.dec1(z)))


@dataclass
class DropDecision:
    """Outcome of one predictor slot.

    ``keep`` is the cumulative 0/1 mask as a Tensor (straight-through in
    training); ``keep_probs`` is the predicted keep probability per token;
    ``soft_dropped`` is the differentiable drop fraction used by the loss.
    """

    keep_probs: Tensor
    keep: Tensor
    soft_onehot: Tensor | None
    soft_dropped: Tensor
    n_initial: int

    @property
    def hard_mask(self) -> np.ndarray:
        return self.keep.data > 0

    @property
    def dropped_fraction(self) -> np.ndarray:
        """Hard drop ratio per batch element relative to the initial count."""
        return 1.0 - self.hard_mask.sum(axis=-1) / self.n_initial


def gumbel_softmax_st(logits: Tensor, tau: float = 1.0, rng: RandomSource | None = None,
                      noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Straight-through Gumbel-Softmax over the last axis (size 2).

    Returns ``(onehot, soft)``: ``onehot`` is exactly one-hot in the forward
    pass and back-propagates through ``soft = softmax((log_softmax(logits) + g) / tau)``.
    Ties go to index 0 (drop).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if noise is None:
        if rng is None:
            raise ValueError("need either rng or explicit noise")
        noise = nx.gumbel_from_uniform(rng.uniform(size=logits.shape))
    g = Tensor(np.asarray(noise, dtype=logits.dtype))
    soft = nx.softmax((nx.log_softmax(logits) + g) * (1.0 / tau))
    keep = soft.data[..., 1] > soft.data[..., 0]
    hard = np.stack([~keep, keep], axis=-1).astype(logits.dtype)
    return nx.straight_through(hard, soft), soft


def soft_drop_fraction(keep_probs: Tensor, prev_keep: Tensor | None, n_initial: int) -> Tensor:
    """``1 - sum(keep_prob * alive) / N`` per batch element."""
    kept = keep_probs if prev_keep is None else keep_probs * prev_keep
    return 1.0 - nx.sum_(kept, axis=-1) * (1.0 / n_initial)


def drop_loss(decisions: Sequence[DropDecision], targets: Sequence[float]) -> Tensor:
    """Mean over slots of ``(d_i - t_i)^2``, ``d_i`` averaged over the batch."""
    if len(decisions) != len(targets):
        raise ValueError(f"{len(decisions)} decisions for {len(targets)} targets")
    terms = [(nx.mean(d.soft_dropped) - float(t)) ** 2 for d, t in zip(decisions, targets)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def drop_loss_values(d: Sequence[float], t: Sequence[float]) -> float:
    d, t = np.asarray(d, dtype=np.float64), np.asarray(t, dtype=np.float64)
    return float(np.mean((d - t) ** 2))


# --------------------------------------------------------------------------
# inference-time selection


def _target_m(keep_mask: np.ndarray, target_t, n_initial: int) -> int:
    m = kept_count(target_t, n_initial)
    alive = int(keep_mask.sum())
    if not 1 <= m <= alive:
        raise ValueError(f"target keeps {m} tokens but {alive} are alive")
    return m


def top_m(keep_probs: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest entries per row, ties to lower index, ascending."""
    order = np.argsort(-np.asarray(keep_probs), axis=-1, kind="stable")[..., :m]
    return np.sort(order, axis=-1)


def select_inference(keep_probs: np.ndarray, keep_mask: np.ndarray, target_t, n_initial: int) -> np.ndarray:
    """Keep exactly ``round((1 - t) * N_initial)`` alive tokens with the highest keep probability."""
    keep_mask = np.asarray(keep_mask, dtype=bool)
    m = _target_m(keep_mask, target_t, n_initial)
    scores = np.where(keep_mask, np.asarray(keep_probs, dtype=np.float64), -np.inf)
    out = np.zeros_like(keep_mask)
    out[top_m(scores, m)] = True
    return out


def select_threshold(keep_probs: np.ndarray, keep_mask: np.ndarray) -> np.ndarray:
    """Keep alive tokens whose keep probability beats the drop probability."""
    return np.asarray(keep_mask, dtype=bool) & (np.asarray(keep_probs) > 0.5)


def ablation_select(strategy: str, keep_mask: np.ndarray, target_t, n_initial: int,
                    positions: np.ndarray, rng: RandomSource) -> np.ndarray:
    """Same kept count as :func:`select_inference`, chosen without the predictor.

    ``random`` picks alive tokens uniformly; ``farthest_point`` runs FPS over the
    tokens' original xyz positions starting from the lowest alive index.
    """
    if strategy not in ("random", "farthest_point", "fps"):
        raise ConfigError(f"unknown ablation strategy {strategy!r}")
    keep_mask = np.asarray(keep_mask, dtype=bool)
    m = _target_m(keep_mask, target_t, n_initial)
    alive = np.flatnonzero(keep_mask)
    if strategy == "random":
        chosen = alive[rng.choice(len(alive), size=m, replace=False)]
    else:
        chosen = alive[farthest_point_indices(np.asarray(positions)[alive], m, start=0)]
    out = np.zeros_like(keep_mask)
    out[chosen] = True
    return out
