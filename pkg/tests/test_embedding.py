import numpy as np
import pytest

from adapt import numerics as nx
from adapt.embedding import ArpeParams, arpe_embed, neighbor_features
from adapt.numerics import RandomSource, Tensor
from adapt.pointcloud import PointCloud


def _params(k=4, d=8, dtype=np.float64, seed=0):
    p = ArpeParams(3, d, k=k, groups=2, rng=RandomSource(seed, 1), dtype=dtype)
    # non-trivial norm affine parameters so they are exercised
    rng = np.random.default_rng(seed)
    for norm in (p.h_norm, p.g_norm):
        norm.weight.data = rng.uniform(0.5, 1.5, size=norm.weight.shape).astype(dtype)
        norm.bias.data = rng.normal(scale=0.1, size=norm.bias.shape).astype(dtype)
    return p


def _gn(x, w, b, groups, eps=1e-5):
    g = x.reshape(groups, -1)
    out = (g - g.mean(axis=1, keepdims=True)) / np.sqrt(g.var(axis=1, keepdims=True) + eps)
    return out.reshape(-1) * w + b


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _arpe_oracle(points, p):
    """Per-point loop with brute-force neighbors."""
    n = len(points)
    tokens = []
    for i in range(n):
        d = ((points - points[i]) ** 2).sum(axis=1)
        order = sorted(range(n), key=lambda j: (j != i, d[j], j))[: p.k]
        rows = []
        for j in order:
            f = np.concatenate([points[j], points[j] - points[i]])
            z = f @ p.h1.weight.data + p.h1.bias.data
            z = _elu(_gn(z, p.h_norm.weight.data, p.h_norm.bias.data, p.groups))
            rows.append(z @ p.h2.weight.data + p.h2.bias.data)
        pooled = np.max(rows, axis=0)
        z = pooled @ p.g1.weight.data + p.g1.bias.data
        z = _elu(_gn(z, p.g_norm.weight.data, p.g_norm.bias.data, p.groups))
        tokens.append(z @ p.g2.weight.data + p.g2.bias.data)
    return np.array(tokens)


def test_arpe_matches_per_point_oracle():
    pts = np.random.default_rng(1).normal(size=(12, 3))
    p = _params()
    np.testing.assert_allclose(arpe_embed(pts, p).data, _arpe_oracle(pts, p), rtol=1e-10, atol=1e-12)


def test_arpe_shapes_and_inputs():
    p = _params(dtype=np.float32)
    pts = np.random.default_rng(2).normal(size=(2, 10, 3)).astype(np.float32)
    batched = arpe_embed(pts, p)
    assert batched.shape == (2, 10, 8) and batched.dtype == np.float32
    single = arpe_embed(PointCloud(pts[1]), p)
    np.testing.assert_allclose(single.data, batched.data[1], rtol=1e-6)


def test_neighbor_features_layout():
    pts = np.array([[[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]])
    f = neighbor_features(pts, 2)
    assert f.shape == (1, 3, 2, 6)
    # point 2: itself first, then point 1 at relative offset (-2, 0, 0)
    np.testing.assert_array_equal(f[0, 2, 0], [3, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(f[0, 2, 1], [1, 0, 0, -2, 0, 0])


def test_arpe_is_permutation_equivariant():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(16, 3))
    perm = rng.permutation(16)
    p = _params()
    np.testing.assert_allclose(arpe_embed(pts[perm], p).data, arpe_embed(pts, p).data[perm], rtol=1e-12)


def test_arpe_param_gradients_match_finite_differences():
    pts = np.random.default_rng(4).normal(size=(1, 7, 3))
    p = _params(k=3, d=4)
    w = np.random.default_rng(5).normal(size=(1, 7, 4))
    named = dict(p.named_parameters())
    loss = nx.sum_(arpe_embed(pts, p) * Tensor(w))
    nx.backward(loss)

    def f():
        with nx.no_grad():
            return float((arpe_embed(pts, p).data * w).sum())

    arrays = [t.data for t in named.values()]
    numeric = nx.numerical_gradient(f, arrays, h=1e-6)
    for (name, t), g in zip(named.items(), numeric):
        np.testing.assert_allclose(t.grad, g, rtol=1e-5, atol=1e-7, err_msg=name)


def test_arpe_rejects_k_above_n():
    with pytest.raises(ValueError, match="k=4"):
        arpe_embed(np.zeros((3, 3)), _params(k=4))
