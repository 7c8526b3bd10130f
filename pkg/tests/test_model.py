import numpy as np
import pytest

from adapt.model import AdaptivePointTransformer, ModelConfig
from adapt.numerics import RandomSource
from adapt.pointcloud import ConfigError


def _tiny(**kw):
    base = dict(n_blocks=4, d_model=16, heads=2, k=4, num_classes=3, dtype="float64")
    base.update(kw)
    return AdaptivePointTransformer(ModelConfig(**base))


def _points(b=2, n=20, seed=0):
    return np.random.default_rng(seed).normal(size=(b, n, 3))


def test_config_defaults_and_desk():
    cfg = ModelConfig()
    assert (cfg.n_blocks, cfg.d_model, cfg.heads, cfg.k, cfg.ell, cfg.budgets) == (8, 256, 4, 32, 4, 4)
    assert cfg.placement == [2, 4, 6, 7]
    desk = ModelConfig.desk()
    assert (desk.n_blocks, desk.d_model, desk.num_classes, desk.placement) == (4, 64, 6, [0, 1, 2, 3])


@pytest.mark.parametrize("kw, match", [
    (dict(placement=[0, 0, 1, 2]), "placement"),
    (dict(placement=[1, 2, 3, 4]), "exceeds"),
    (dict(selection="sometimes"), "selection"),
    (dict(d_model=10, heads=4), "divisible"),
])
def test_config_validation(kw, match):
    with pytest.raises(ConfigError, match=match):
        ModelConfig(**{**dict(n_blocks=4), **kw})


def test_train_forward_shapes_and_monotone_masks():
    model = _tiny()
    out = model.forward_train(_points(), 1, rng=RandomSource(0, 2))
    assert out.logits.shape == (2, 3)
    assert len(out.decisions) == 4
    prev = np.ones((2, 20), dtype=bool)
    for d in out.decisions:
        assert not np.any(d.hard_mask & ~prev)
        assert np.all(d.hard_mask.sum(axis=1) >= 1)
        prev = d.hard_mask


def test_infer_kept_counts_follow_schedule():
    model = _tiny()
    for b, expected in [(1, [16, 12, 8, 4]), (4, [20, 20, 20, 20])]:
        out = model.forward_infer(_points(), b)
        assert out.kept_counts == expected
        assert out.logits.shape == (2, 3)
        for earlier, later in zip(out.kept_indices, out.kept_indices[1:]):
            for row_e, row_l in zip(earlier, later):
                assert set(row_l) <= set(row_e)


@pytest.mark.parametrize("sampler", ["random", "fps"])
def test_ablation_samplers_use_same_counts(sampler):
    model = _tiny()
    out = model.forward_infer(_points(), 2, sampler=sampler, rng=RandomSource(0, 5))
    assert out.kept_counts == model.forward_infer(_points(), 2).kept_counts


def test_fps_sampler_picks_farthest_original_points():
    model = _tiny()
    pts = _points(b=1)
    out = model.forward_infer(pts, 1, sampler="fps")
    from adapt.pointcloud import farthest_point_indices

    first = sorted(farthest_point_indices(pts[0], 16).tolist())
    assert sorted(out.kept_indices[0][0].tolist()) == first


def test_bad_budget_and_sampler():
    model = _tiny()
    with pytest.raises(ConfigError, match="valid budgets"):
        model.forward_infer(_points(), 5)
    with pytest.raises(ConfigError, match="sampler"):
        model.forward_infer(_points(), 1, sampler="median")


def test_threshold_selection_mode():
    model = _tiny(selection="threshold")
    out = model.forward_infer(_points(), 1)
    assert out.logits.shape == (2, 3)
    prev = np.ones((2, 20), dtype=bool)
    for mask in out.kept_indices:
        assert mask.dtype == bool and not np.any(mask & ~prev)
        assert np.all(mask.sum(axis=1) >= 1)
        prev = mask


def test_banks_are_independent_parameters():
    model = _tiny()
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("banks.3.3.") for n in names)
    w0 = model.banks[0][0].dec2.weight.data
    w1 = model.banks[1][0].dec2.weight.data
    assert not np.array_equal(w0, w1)


def test_same_init_seed_same_weights():
    a, b = _tiny(), _tiny()
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    c = _tiny(init_seed=1)
    assert not np.array_equal(a.head.fc2.weight.data, c.head.fc2.weight.data)


def test_empty_cloud_is_rescued_in_training():
    model = _tiny()
    # noise that forces every token to drop at the first slot
    noise = [np.stack([np.full((2, 20), 50.0), np.full((2, 20), -50.0)], axis=-1)] + \
            [np.zeros((2, 20, 2))] * 3
    out = model.forward_train(_points(), 1, noise=noise)
    assert np.all(out.decisions[0].hard_mask.sum(axis=1) == 1)
    assert np.all(np.isfinite(out.logits.data))
