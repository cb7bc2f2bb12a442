import dataclasses
import math

import numpy as np
import pytest

from xmodalseg.losses import DycrossConfig
from xmodalseg.micronet import Toggles, micronet_init
from xmodalseg.projection import UNPROJECTED
from xmodalseg.synthdata import make_sample
from xmodalseg.tensor_io import make_rng
from xmodalseg.training import (LOG_COLUMNS, SGDState, TrainConfig, evaluate, infer,
                                learning_rate, optimizer_step, sample_step, train, write_log)


@pytest.fixture(scope="module")
def samples():
    return [make_sample(77, i) for i in range(3)]


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(0, 100, cfg) == pytest.approx(1e-4)
    assert learning_rate(10, 100, cfg) == pytest.approx(1e-3)
    assert learning_rate(99, 100, cfg) == pytest.approx(0.0, abs=1e-12)
    assert learning_rate(100, 100, cfg) == pytest.approx(0.0, abs=1e-12)
    lrs = [learning_rate(s, 100, cfg) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.0)
    assert TrainConfig(guide_source="lidar-low").toggles.guide_source.value == "lidar-low"


def test_optimizer_step_momentum():
    p = micronet_init(make_rng(0), 3)
    before = p.copy()
    grads = {k: np.ones_like(v) for k, v in p.arrays.items()}
    cfg = TrainConfig()
    state = SGDState()
    v0 = p.version
    lr0 = optimizer_step(p, grads, 0, 100, cfg, state)
    lr1 = optimizer_step(p, grads, 1, 100, cfg, state)
    assert p.version == v0 + 2
    k = "fuse1.w"
    want = before[k] - lr0 * 1.0 - lr1 * (1.0 + cfg.momentum)
    np.testing.assert_allclose(p[k], want, rtol=1e-6)


def test_zero_epochs_leaves_params(samples):
    p = micronet_init(make_rng(0), 5)
    before = p.copy()
    out, rows = train(samples, TrainConfig(epochs=0), params=p)
    assert rows == []
    assert all(out[k].tobytes() == before[k].tobytes() for k in p.keys())


def test_loss_decreases_on_fixed_batch(samples):
    cfg = TrainConfig(epochs=20, batch_size=2, lr0=0.01, warmup_fraction=0.0)
    _, rows = train(samples[:2], cfg)
    assert len(rows) == 20 and rows[-1][1] == 20
    assert rows[-1][-1] < rows[0][-1]


def test_training_is_deterministic(samples):
    cfg = TrainConfig(epochs=2)
    a, ra = train(samples, cfg)
    b, rb = train(samples, cfg)
    assert ra == rb
    assert all(a[k].tobytes() == b[k].tobytes() for k in a.keys())


def test_log_columns_and_tau(samples, tmp_path):
    cfg = TrainConfig(epochs=3)
    _, rows = train(samples[:1], cfg, log_path=tmp_path / "log.csv")
    assert [r[3] for r in rows] == pytest.approx([0.7, 0.75, 0.8])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS) and len(lines) == 4


def test_dycross_toggle_only_changes_weighted_term(samples):
    p = micronet_init(make_rng(0), 5)
    dcfg = DycrossConfig()
    on, _ = sample_step(p, samples[0], Toggles(True, True), 0.0, dcfg)
    off, _ = sample_step(p, samples[0], Toggles(True, False), 0.0, dcfg)
    assert on.as_row()[:5] == off.as_row()[:5]
    assert on.total - off.total == pytest.approx(dcfg.alpha * on.dycross, rel=1e-9)
    zero, _ = sample_step(p, samples[0], Toggles(True, True), 0.0, dataclasses.replace(dcfg, alpha=0.0))
    assert zero.total == off.total


def test_infer_remaps_argmax(samples):
    p = micronet_init(make_rng(1), 5)
    s = samples[0]
    y2d, cls3d, index = infer(p, s.cloud, s.image, s.camera)
    v = index.valid
    assert np.array_equal(cls3d[v], np.argmax(y2d, axis=0)[index.rows[v], index.cols[v]])
    assert (cls3d[~v] == UNPROJECTED).all()
    y2, c2, _ = infer(p, s.cloud, s.image, s.camera)
    assert y2.tobytes() == y2d.tobytes() and c2.tobytes() == cls3d.tobytes()


def test_evaluate_reports_all_metrics(samples):
    p = micronet_init(make_rng(1), 5)
    r = evaluate(p, samples, Toggles())
    for v in (r.miou_2d, r.miou_empty, r.miou_3d, r.coverage_3d):
        assert 0.0 <= v <= 1.0
    assert 0.0 < r.coverage_3d < 1.0
    names = [row[0] for row in r.rows()]
    assert names[:4] == ["miou_2d", "miou_empty", "miou_3d", "coverage_3d"]


def test_divergence_is_reported(samples):
    p = micronet_init(make_rng(0), 5)
    p.arrays["lidar.dec2.b"] = np.full_like(p["lidar.dec2.b"], np.nan)
    with pytest.raises(FloatingPointError, match="epoch 0, step 0"):
        train(samples[:1], TrainConfig(epochs=1), params=p)


def test_write_log_format(tmp_path):
    write_log(tmp_path / "x.csv", [[0, 1, 1e-3, 0.7, 1, 2, 3, 4, 5, math.pi]])
    assert (tmp_path / "x.csv").read_text().splitlines()[1].startswith("0,1,0.001,0.7,")
