"""Pre-norm transformer blocks with key masking and the mean-pooled head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import Linear, Module, Norm
from .numerics import RandomSource, Tensor


class BlockParams(Module):
    def __init__(self, d_model: int, heads: int, mlp_ratio: int = 2,
                 rng: RandomSource | None = None, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        rng = rng or RandomSource(0, 0)
        self.heads = heads
        self.ln1 = Norm(d_model, dtype)
        self.q = Linear(d_model, d_model, rng, dtype)
        self.k = Linear(d_model, d_model, rng, dtype)
        self.v = Linear(d_model, d_model, rng, dtype)
        self.out = Linear(d_model, d_model, rng, dtype)
        self.ln2 = Norm(d_model, dtype)
        self.fc1 = Linear(d_model, mlp_ratio * d_model, rng, dtype)
        self.fc2 = Linear(mlp_ratio * d_model, d_model, rng, dtype)

    @property
    def d_model(self) -> int:
        return self.q.shape[0]


class HeadParams(Module):
    def __init__(self, d_model: int, num_classes: int, hidden: int | None = None,
                 rng: RandomSource | None = None, dtype=np.float32):
        rng = rng or RandomSource(0, 0)
        hidden = hidden or d_model
        self.fc1 = Linear(d_model, hidden, rng, dtype)
        self.fc2 = Linear(hidden, num_classes, rng, dtype)


@dataclass
class TokenBatch:
    """Tokens ``(B, N, D)`` with a keep mask ``(B, N)``.

    ``keep`` is either None (every token alive) or a 0/1 Tensor, which may
    carry straight-through gradients back to the drop predictors.
    """

    tokens: Tensor
    keep: Tensor | None = None

    def __post_init__(self):
        if self.keep is not None:
            if not isinstance(self.keep, Tensor):
                self.keep = Tensor(np.asarray(self.keep, dtype=self.tokens.dtype))
            if self.keep.shape != self.tokens.shape[:2]:
                raise nx.ShapeError(f"keep mask {self.keep.shape} does not match tokens {self.tokens.shape}")
            if np.any(self.keep.data.sum(axis=1) == 0):
                raise ValueError("every batch element needs at least one kept token")

    @property
    def keep_mask(self) -> np.ndarray:
        if self.keep is None:
            return np.ones(self.tokens.shape[:2], dtype=bool)
        return self.keep.data > 0


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(x.reshape(b, n, heads, d // heads), (0, 2, 1, 3))


def attention_weights(tb: TokenBatch, params: BlockParams) -> Tensor:
    """Attention probabilities ``(B, H, N, N)`` of the block's first sublayer."""
    return _attention(tb, params)[1]


def _attention(tb: TokenBatch, params: BlockParams) -> tuple[Tensor, Tensor]:
    x = tb.tokens
    b, n, d = x.shape
    h = params.ln1.layer(x)
    scale = 1.0 / math.sqrt(d // params.heads)
    q = _split_heads(params.q(h) * scale, params.heads)
    k = _split_heads(params.k(h), params.heads)
    v = _split_heads(params.v(h), params.heads)
    scores = q @ nx.swapaxes(k, -1, -2)
    if tb.keep is None:
        attn = nx.softmax(scores, axis=-1)
    else:
        attn = nx.masked_softmax(scores, tb.keep.reshape(b, 1, 1, n))
    ctx = nx.transpose(attn @ v, (0, 2, 1, 3)).reshape(b, n, d)
    return params.out(ctx), attn


def block_forward(tb: TokenBatch, params: BlockParams) -> TokenBatch:
    """One pre-norm block: ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``.

    Masked tokens are excluded as keys and values; their own rows are still
    computed but never read by a live token.  The mask passes through.
    """
    x = tb.tokens
    if x.shape[-1] != params.d_model:
        raise nx.ShapeError(f"block_forward: tokens {x.shape} vs d_model {params.d_model}")
    x = x + _attention(tb, params)[0]
    x = x + params.fc2(nx.gelu(params.fc1(params.ln2.layer(x))))
    return TokenBatch(x, tb.keep)


def pool(tb: TokenBatch) -> Tensor:
    if tb.keep is None:
        return nx.mean(tb.tokens, axis=1)
    return nx.masked_mean(tb.tokens, tb.keep, axis=1)


def classify(tb: TokenBatch, head: HeadParams) -> Tensor:
    """Class logits from the mean of the kept tokens."""
    return head.fc2(nx.gelu(head.fc1(pool(tb))))
