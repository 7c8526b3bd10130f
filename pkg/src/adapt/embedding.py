"""Absolute-relative positional embedding (ARPE) tokenizer.

Each point becomes one token: its ``k`` nearest neighbors are encoded as
``[x_neighbor, x_neighbor - x_point]`` and passed through a per-neighbor MLP
``h``; the neighbor features are max-pooled channel-wise and mapped by an
outer MLP ``gamma`` to the model width.  Both MLPs are
``Linear -> GroupNorm -> ELU -> Linear``.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .layers import Linear, Module, Norm
from .numerics import RandomSource, Tensor
from .pointcloud import PointCloud, knn_indices


class ArpeParams(Module):
    def __init__(self, in_features: int, d_model: int, k: int = 32, hidden: int | None = None,
                 groups: int = 4, rng: RandomSource | None = None, dtype=np.float32):
        rng = rng or RandomSource(0, 0)
        hidden = hidden or d_model // 2
        self.k = k
        self.groups = groups
        self.in_features = in_features
        self.h1 = Linear(2 * in_features, hidden, rng, dtype)
        self.h_norm = Norm(hidden, dtype)
        self.h2 = Linear(hidden, hidden, rng, dtype)
        self.g1 = Linear(hidden, d_model, rng, dtype)
        self.g_norm = Norm(d_model, dtype)
        self.g2 = Linear(d_model, d_model, rng, dtype)

    @property
    def hidden(self) -> int:
        return self.h1.shape[1]

    @property
    def d_model(self) -> int:
        return self.g2.shape[1]

    def h(self, x: Tensor) -> Tensor:
        return self.h2(nx.elu(self.h_norm.group(self.h1(x), self.groups)))

    def gamma(self, x: Tensor) -> Tensor:
        return self.g2(nx.elu(self.g_norm.group(self.g1(x), self.groups)))


def neighbor_features(points: np.ndarray, k: int) -> np.ndarray:
    """``(B, N, F) -> (B, N, k, 2F)`` absolute and center-relative neighbor rows."""
    idx = knn_indices(points[..., :3], k)
    bidx = np.arange(points.shape[0])[:, None, None]
    neigh = points[bidx, idx]
    rel = neigh - points[:, :, None, :]
    return np.concatenate([neigh, rel], axis=-1)


def arpe_embed(points, params: ArpeParams) -> Tensor:
    """Tokens ``(B, N, d_model)`` for a batch ``(B, N, F)``, or ``(N, d_model)`` for one cloud."""
    single = isinstance(points, PointCloud) or np.ndim(points) == 2
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    if single:
        pts = pts[None]
    dtype = params.h1.weight.dtype
    feats = Tensor(neighbor_features(pts.astype(dtype, copy=False), params.k))
    pooled = nx.max_(params.h(feats), axis=2)
    tokens = params.gamma(pooled)
    return tokens[0] if single else tokens
