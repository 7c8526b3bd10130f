"""The full adaptive point transformer: ARPE tokens, blocks, budget banks, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import BlockParams, HeadParams, TokenBatch, block_forward, classify
from .dropping import (
    DropDecision,
    DropPredictorParams,
    DropSchedule,
    ablation_select,
    default_placement,
    drop_targets,
    gumbel_softmax_st,
    kept_count,
    predict_keep_logits,
    select_threshold,
    soft_drop_fraction,
    top_m,
)
from .embedding import ArpeParams, arpe_embed
from .layers import Module
from .numerics import RandomSource, Tensor
from .pointcloud import ConfigError

SAMPLERS = ("adaptive", "random", "fps")


@dataclass
class ModelConfig:
    in_features: int = 3
    num_classes: int = 40
    d_model: int = 256
    n_blocks: int = 8
    heads: int = 4
    mlp_ratio: int = 2
    k: int = 32
    groups: int = 4
    ell: int = 4
    rho: float = 0.8
    budgets: int = 4
    placement: list[int] | None = None
    tau: float = 1.0
    selection: str = "topk"
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        if self.placement is None:
            self.placement = default_placement(self.n_blocks, self.ell)
        self.placement = [int(p) for p in self.placement]
        if len(self.placement) != self.ell or sorted(set(self.placement)) != self.placement:
            raise ConfigError(f"placement {self.placement} must list {self.ell} increasing block indices")
        if self.placement[-1] >= self.n_blocks:
            raise ConfigError(f"placement {self.placement} exceeds {self.n_blocks} blocks")
        if self.selection not in ("topk", "threshold"):
            raise ConfigError(f"unknown selection mode {self.selection!r}")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced preset used for tests and laptop-scale runs."""
        base = dict(n_blocks=4, d_model=64, heads=2, k=16, num_classes=6)
        base.update(overrides)
        return cls(**base)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def schedule(self) -> DropSchedule:
        return drop_targets(self.ell, self.rho, self.budgets, self.placement)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainForward:
    logits: Tensor
    decisions: list[DropDecision]
    final: TokenBatch


@dataclass
class InferenceForward:
    logits: Tensor
    kept_counts: list[int]
    kept_indices: list[np.ndarray] = field(default_factory=list)


class AdaptivePointTransformer(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dt = cfg.np_dtype
        rng = RandomSource(cfg.init_seed, 7)
        self.embed = ArpeParams(cfg.in_features, cfg.d_model, cfg.k, groups=cfg.groups, rng=rng, dtype=dt)
        self.blocks = [BlockParams(cfg.d_model, cfg.heads, cfg.mlp_ratio, rng, dt) for _ in range(cfg.n_blocks)]
        self.banks = [[DropPredictorParams(cfg.d_model, rng, dt) for _ in range(cfg.ell)]
                      for _ in range(cfg.budgets)]
        self.head = HeadParams(cfg.d_model, cfg.num_classes, rng=rng, dtype=dt)
        self.schedule = cfg.schedule()

    def named_parameters(self, prefix: str = ""):
        for name in ("embed", "blocks", "banks", "head"):
            yield from _walk_named(getattr(self, name), prefix + name)

    def bank(self, b: int) -> list[DropPredictorParams]:
        self.schedule.check_budget(b)
        return self.banks[b - 1]

    def slot_of(self, block_index: int) -> int | None:
        try:
            return self.cfg.placement.index(block_index)
        except ValueError:
            return None

    # ------------------------------------------------------------------
    # training mode: tokens stay, dead ones are masked

    def forward_train(self, points: np.ndarray, b: int, rng: RandomSource | None = None,
                      noise: Sequence[np.ndarray] | None = None,
                      override_masks: Sequence[np.ndarray] | None = None,
                      probe: Sequence[tuple[np.ndarray, np.ndarray]] | None = None) -> TrainForward:
        """Masked forward pass with bank ``b``.

        Decisions come from straight-through Gumbel sampling using ``noise``
        (one ``(B, N, 2)`` array per slot) or fresh draws from ``rng``.
        ``override_masks`` forces each slot's cumulative hard mask instead.
        ``probe`` replaces each straight-through one-hot by
        ``hard0 + soft - soft0`` with frozen ``(hard0, soft0)``: a smooth
        function whose ordinary derivative is the straight-through gradient,
        used for finite-difference checks.
        """
        bank = self.bank(b)
        pts = np.asarray(points, dtype=self.cfg.np_dtype)
        tokens = arpe_embed(pts, self.embed)
        bsz, n = tokens.shape[:2]
        keep: Tensor | None = None
        decisions: list[DropDecision] = []
        tb = TokenBatch(tokens, None)
        for bi, block in enumerate(self.blocks):
            slot = self.slot_of(bi)
            if slot is not None:
                pred = bank[slot]
                logits = predict_keep_logits(tb.tokens, keep, pred)
                logp = nx.log_softmax(logits)
                keep_probs = nx.exp(logp)[..., 1]
                if override_masks is not None:
                    onehot, soft = None, None
                    new_keep = Tensor(np.asarray(override_masks[slot], dtype=pts.dtype))
                else:
                    if probe is not None:
                        hard0, soft0 = probe[slot]
                        g = Tensor(np.asarray(noise[slot], dtype=pts.dtype))
                        soft = nx.softmax((logp + g) * (1.0 / self.cfg.tau))
                        onehot = soft + Tensor(np.asarray(hard0) - np.asarray(soft0))
                    else:
                        onehot, soft = gumbel_softmax_st(
                            logits, self.cfg.tau, rng, None if noise is None else noise[slot])
                    st_keep = onehot[..., 1]
                    new_keep = st_keep if keep is None else keep * st_keep
                    if np.any(new_keep.data.sum(axis=1) == 0):
                        new_keep = _rescue(new_keep, keep_probs, keep)
                soft_d = soft_drop_fraction(keep_probs, keep, n)
                decisions.append(DropDecision(keep_probs, new_keep, soft, soft_d, n))
                keep = new_keep
                tb = TokenBatch(tb.tokens, keep)
            tb = block_forward(tb, block)
        return TrainForward(classify(tb, self.head), decisions, tb)

    # ------------------------------------------------------------------
    # inference: dropped tokens are physically removed

    def forward_infer(self, points: np.ndarray, b: int, sampler: str = "adaptive",
                      rng: RandomSource | None = None) -> InferenceForward:
        """Deterministic pruned forward pass (no Gumbel noise).

        Every cloud keeps exactly ``round((1 - t_i^b) * N)`` tokens after slot
        ``i``.  ``sampler`` swaps the learned choice for random or farthest-point
        sampling with the same counts.
        """
        if sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {sampler!r}; choose from {', '.join(SAMPLERS)}")
        if self.cfg.selection == "threshold" and sampler == "adaptive":
            return self._forward_threshold(points, b)
        bank = self.bank(b)
        targets = self.schedule.exact_row(b)
        pts = np.asarray(points, dtype=self.cfg.np_dtype)
        with nx.no_grad():
            tokens = arpe_embed(pts, self.embed)
            bsz, n = tokens.shape[:2]
            origin = np.tile(np.arange(n), (bsz, 1))
            counts, kept = [], []
            for bi, block in enumerate(self.blocks):
                slot = self.slot_of(bi)
                if slot is not None:
                    m = kept_count(targets[slot], n)
                    alive = tokens.shape[1]
                    if not 1 <= m <= alive:
                        raise ValueError(f"slot {slot}: target keeps {m} of {alive} tokens")
                    if m < alive:
                        sel = self._select(sampler, tokens, bank[slot], m, pts, origin, rng)
                        tokens = nx.gather_rows(tokens, sel)
                        origin = np.take_along_axis(origin, sel, axis=1)
                    counts.append(tokens.shape[1])
                    kept.append(origin.copy())
                tokens = block_forward(TokenBatch(tokens), block).tokens
            logits = classify(TokenBatch(tokens), self.head)
        return InferenceForward(logits, counts, kept)

    def _select(self, sampler, tokens, pred, m, pts, origin, rng) -> np.ndarray:
        if sampler == "adaptive":
            probs = nx.softmax(predict_keep_logits(tokens, None, pred)).data[..., 1]
            return top_m(probs, m)
        if rng is None:
            rng = RandomSource(0, 99)
        strategy = "random" if sampler == "random" else "farthest_point"
        n = pts.shape[1]
        rows = []
        for i in range(tokens.shape[0]):
            mask = np.zeros(n, dtype=bool)
            mask[origin[i]] = True
            target = 1 - Fraction(m, n)
            chosen = np.flatnonzero(ablation_select(strategy, mask, target, n, pts[i, :, :3], rng))
            rows.append(np.searchsorted(origin[i], chosen))
        return np.stack(rows)

    def _forward_threshold(self, points: np.ndarray, b: int) -> InferenceForward:
        bank = self.bank(b)
        pts = np.asarray(points, dtype=self.cfg.np_dtype)
        with nx.no_grad():
            tokens = arpe_embed(pts, self.embed)
            keep = np.ones(tokens.shape[:2], dtype=bool)
            counts, kept = [], []
            tb = TokenBatch(tokens, None)
            for bi, block in enumerate(self.blocks):
                slot = self.slot_of(bi)
                if slot is not None:
                    probs = nx.softmax(predict_keep_logits(tb.tokens, keep.astype(pts.dtype), bank[slot])).data[..., 1]
                    new = select_threshold(probs, keep)
                    # never empty a cloud: fall back to its most confident token
                    empty = ~new.any(axis=1)
                    if empty.any():
                        best = np.argmax(np.where(keep, probs, -np.inf), axis=1)
                        new[empty, best[empty]] = True
                    keep = new
                    counts.append(int(keep.sum(axis=1).max()))
                    kept.append(keep.copy())
                    tb = TokenBatch(tb.tokens, Tensor(keep.astype(pts.dtype)))
                tb = block_forward(tb, block)
            logits = classify(tb, self.head)
        return InferenceForward(logits, counts, kept)


def _rescue(new_keep: Tensor, keep_probs: Tensor, prev: Tensor | None) -> Tensor:
    """Re-admit the most confident alive token of any cloud that lost all tokens."""
    data = new_keep.data.copy()
    alive = np.ones_like(data, dtype=bool) if prev is None else prev.data > 0
    empty = data.sum(axis=1) == 0
    best = np.argmax(np.where(alive, keep_probs.data, -np.inf), axis=1)
    fix = np.zeros_like(data)
    fix[np.flatnonzero(empty), best[empty]] = 1.0
    return new_keep + Tensor(fix)


def _walk_named(val, name):
    if isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk_named(v, f"{name}.{i}")
    elif isinstance(val, Tensor) and val.requires_grad:
        yield name, val


def build_model(cfg: ModelConfig) -> AdaptivePointTransformer:
    return AdaptivePointTransformer(cfg)

