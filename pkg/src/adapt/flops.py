"""Analytic multiply-add accounting for the pruned inference pass.

Conventions match the counter built into :mod:`adapt.numerics`:
a matmul of ``m x k`` by ``k x n`` costs ``2mkn``; softmax costs 5 per
element, layer/group norm 8 per element, GELU/ELU 4 per element; additions,
bias, scaling, pooling, gathers and neighbor search are free.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

from .dropping import DropSchedule, kept_count
from .model import ModelConfig
from .numerics import ACTIVATION_FLOPS as ACT
from .numerics import NORM_FLOPS as NORM
from .numerics import SOFTMAX_FLOPS as SMAX

CONVENTIONS_VERSION = 1


@dataclass(frozen=True)
class CostModel:
    d_model: int
    heads: int
    mlp_ratio: int
    n_blocks: int
    placement: tuple[int, ...]
    in_features: int = 3
    k: int = 32
    embed_hidden: int | None = None
    head_hidden: int | None = None
    num_classes: int = 40

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "CostModel":
        return cls(cfg.d_model, cfg.heads, cfg.mlp_ratio, cfg.n_blocks, tuple(cfg.placement),
                   cfg.in_features, cfg.k, cfg.d_model // 2, cfg.d_model, cfg.num_classes)

    @property
    def fh(self) -> int:
        return self.embed_hidden or self.d_model // 2

    @property
    def hh(self) -> int:
        return self.head_hidden or self.d_model


def block_flops(n: int, cm: CostModel) -> int:
    """One transformer block over ``n`` live tokens."""
    if n < 1:
        raise ValueError("a block needs at least one token")
    d, h, r = cm.d_model, cm.heads, cm.mlp_ratio
    attention = 8 * n * d * d + 4 * n * n * d + SMAX * h * n * n
    mlp = 4 * r * n * d * d
    norms = 2 * NORM * n * d
    act = ACT * r * n * d
    return attention + mlp + norms + act


def embed_flops(n: int, cm: CostModel) -> int:
    rows = n * min(cm.k, n)
    fh, d = cm.fh, cm.d_model
    h = 2 * rows * 2 * cm.in_features * fh + (NORM + ACT) * rows * fh + 2 * rows * fh * fh
    gamma = 2 * n * fh * d + (NORM + ACT) * n * d + 2 * n * d * d
    return h + gamma


def predictor_flops(n: int, cm: CostModel) -> int:
    """One drop predictor scoring ``n`` tokens, including the keep softmax."""
    d, f = cm.d_model, cm.d_model // 2
    return (NORM * n * d + 2 * (2 * n * d * f + ACT * n * f)
            + 2 * n * 2 * f * f + ACT * n * f + 2 * n * f * 2 + SMAX * n * 2)


def head_flops(cm: CostModel) -> int:
    return 2 * cm.d_model * cm.hh + ACT * cm.hh + 2 * cm.hh * cm.num_classes


@dataclass
class FlopsReport:
    n_initial: int
    budget: int
    tokens_per_block: list[int]
    block: list[int]
    embedding: int
    predictors: int
    head: int
    total: int = field(init=False)

    def __post_init__(self):
        self.total = sum(self.block) + self.embedding + self.predictors + self.head

    @property
    def transformer(self) -> int:
        return sum(self.block)


def trajectory_flops(n_initial: int, schedule: DropSchedule, b: int, cm: CostModel) -> FlopsReport:
    """Cost of one cloud of ``n_initial`` points under budget ``b``.

    A predictor is billed only where it actually removes tokens, mirroring
    the pruned forward pass.
    """
    targets = schedule.exact_row(b)
    n = n_initial
    tokens, blocks, pred = [], [], 0
    for bi in range(cm.n_blocks):
        if bi in cm.placement:
            m = kept_count(targets[cm.placement.index(bi)], n_initial)
            if m < n:
                pred += predictor_flops(n, cm)
                n = m
        tokens.append(n)
        blocks.append(block_flops(n, cm))
    return FlopsReport(n_initial, b, tokens, blocks, embed_flops(n_initial, cm), pred, head_flops(cm))


CSV_FIELDS = ["n_initial", "budget", "total", "transformer", "embedding", "predictors", "head",
              "tokens_per_block", "flops_per_block"]


def report_rows(reports: Iterable[FlopsReport]) -> list[dict]:
    return [{
        "n_initial": r.n_initial, "budget": r.budget, "total": r.total, "transformer": r.transformer,
        "embedding": r.embedding, "predictors": r.predictors, "head": r.head,
        "tokens_per_block": ";".join(map(str, r.tokens_per_block)),
        "flops_per_block": ";".join(map(str, r.block)),
    } for r in reports]


def to_csv(reports: Iterable[FlopsReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(report_rows(reports))
    return buf.getvalue()


def sweep(sizes: Iterable[int], schedule: DropSchedule, cm: CostModel) -> list[FlopsReport]:
    return [trajectory_flops(n, schedule, b, cm) for n in sizes for b in range(1, schedule.budgets + 1)]
