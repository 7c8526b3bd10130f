import math

import numpy as np
import pytest

from adapt import numerics as nx
from adapt.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from adapt.model import ModelConfig
from adapt.numerics import Tensor
from adapt.pointcloud import AugmentConfig, SynthConfig, synth_dataset
from adapt.training import (
    Adam,
    NumericalError,
    TrainConfig,
    evaluate,
    fit,
    init_state,
    lr_at,
    metrics_header,
    metrics_row,
    sample_budget,
    train_step,
)


def _cfg(**kw):
    model = ModelConfig.desk(d_model=16, k=4, num_classes=3, **kw.pop("model", {}))
    base = dict(model=model, batch_size=8, epochs=2, augment=AugmentConfig())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth_dataset(SynthConfig(classes=("sphere", "box", "torus"), count_per_class=10, points_per_cloud=24))
    return ds.subset("train"), ds.subset("eval")


def test_cosine_schedule():
    cfg = TrainConfig(epochs=60)
    assert lr_at(0, cfg) == pytest.approx(1e-3)
    assert lr_at(30, cfg) == pytest.approx(5e-4)
    assert lr_at(60, cfg) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(15, cfg) == pytest.approx(1e-3 * 0.5 * (1 + math.cos(math.pi / 4)))


def test_adam_matches_scalar_reference():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([("p", p)])
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t, g in enumerate([np.array([0.5, -1.0]), np.array([0.1, 2.0]), np.array([-0.3, 0.0])], start=1):
        p.grad = g
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_budget_sampling_covers_all():
    rng = nx.RandomSource(0, 3)
    seen = {sample_budget(rng, 4) for _ in range(200)}
    assert seen == {1, 2, 3, 4}


def test_train_step_reports_and_updates(tiny_data):
    train, _ = tiny_data
    state = init_state(_cfg())
    before = state.model.head.fc2.weight.data.copy()
    pts = train.stacked()[:8]
    labels = train.labels[:8]
    out = train_step(state, pts, labels, 2)
    assert out["loss"] == pytest.approx(out["ce"] + 2.0 * out["l_drop"], rel=1e-5)
    assert len(out["hard_d"]) == 4 and out["budget"] == 2
    assert not np.array_equal(before, state.model.head.fc2.weight.data)
    # only the chosen bank receives gradients
    assert state.model.banks[1][0].dec2.weight.grad is not None
    assert state.model.banks[0][0].dec2.weight.grad is None


def test_non_finite_loss_raises_with_context(tiny_data):
    train, _ = tiny_data
    state = init_state(_cfg())
    pts = train.stacked()[:8]
    state.model.head.fc2.bias.data[:] = np.nan
    with pytest.raises(NumericalError, match=r"epoch 0, batch 0:1, budget 3"):
        train_step(state, pts, train.labels[:8], 3, batch_id="0:1")


def test_fit_is_deterministic(tiny_data):
    train, ev = tiny_data
    a = fit(init_state(_cfg()), train, ev)
    b = fit(init_state(_cfg()), train, ev)
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(x.data, y.data)
    assert a.history[-1]["eval_acc"] == b.history[-1]["eval_acc"]
    assert len(a.history[-1]["eval_acc"]) == 4


def test_checkpoint_resume_matches_uninterrupted(tiny_data, tmp_path):
    train, _ = tiny_data
    full = fit(init_state(_cfg(epochs=2)), train)
    half = fit(init_state(_cfg(epochs=1)), train)
    save_checkpoint(half, tmp_path / "c.ckpt")
    resumed = load_checkpoint(tmp_path / "c.ckpt")
    assert resumed.epoch == 1 and resumed.optimizer.t == half.optimizer.t
    resumed.cfg.epochs = 2
    fit(resumed, train)
    for (n, x), (_, y) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=n)


def test_checkpoint_layout_and_errors(tiny_data, tmp_path):
    state = init_state(_cfg())
    path = save_checkpoint(state, tmp_path / "c.ckpt")
    header, payload = read_header(path)
    assert header["format_version"] == 1
    entry = next(e for e in header["tensors"] if e["group"] == "param")
    assert entry["dtype"] == "<f4"
    assert sum(e["nbytes"] for e in header["tensors"]) == len(payload)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    raw = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 9')
    bad.write_bytes(raw)
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(bad)


def test_evaluate_reports_counts(tiny_data):
    _, ev = tiny_data
    state = init_state(_cfg())
    rep = evaluate(state.model, ev, 1)
    assert rep.kept_counts == [19, 14, 10, 5]
    assert 0.0 <= rep.accuracy <= 1.0 and len(rep.predictions) == len(ev)


def test_metrics_row_layout():
    header = metrics_header(4, 4)
    assert header[:4] == ["epoch", "loss", "ce", "l_drop"] and len(header) == 12
    row = metrics_row({"epoch": 3, "loss": 1.0, "ce": 0.5, "l_drop": 0.25, "hard_d": [0.1, 0.2, 0.3, 0.4]}, 4, 4)
    assert len(row) == len(header) and row[4:8] == ["", "", "", ""]


def test_config_roundtrip():
    cfg = _cfg(seed=3)
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg
