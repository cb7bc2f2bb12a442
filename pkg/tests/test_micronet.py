import numpy as np
import pytest

from xmodalseg import oracles
from xmodalseg.losses import dycross_loss, total_loss
from xmodalseg.micronet import (CAM_OFFSET, LAYERS, MicroNetParams, StaleTraceError, Toggles,
                                micronet_backward, micronet_forward, micronet_init)
from xmodalseg.tensor_io import make_rng
from xmodalseg.treefilter import GuideSource

TOGGLES = [Toggles(f, d) for f in (False, True) for d in (False, True)]


def inputs(rng, h=8, w=8):
    lmap = rng.random((5, h, w)) * 5
    lmap[:, rng.random((h, w)) < 0.5] = 0
    return lmap, rng.random((3, h, w))


def test_init_deterministic():
    a, b = micronet_init(make_rng(3), 5), micronet_init(make_rng(3), 5)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a.keys())
    c = micronet_init(make_rng(4), 5)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a.keys() if k.endswith(".w"))


def test_init_fan_in_bounds():
    p = micronet_init(make_rng(0), 5, guide_gain=1.0)
    for name, (cout, cin, k) in LAYERS.items():
        w = p[f"{name}.w"]
        assert w.dtype == np.float32
        assert np.abs(w).max() <= np.sqrt(6.0 / (cin * k * k))
        assert not p[f"{name}.b"].any()
    assert p["lidar.dec2.w"].shape[0] == 5


def test_zero_inputs_give_uniform_predictions():
    p = micronet_init(make_rng(0), 5)
    lmap = np.zeros((5, 8, 8))
    img = np.full((3, 8, 8), CAM_OFFSET)  # zero after input centring
    for t in TOGGLES:
        y_l, y_c, _, _ = micronet_forward(lmap, img, p, t)
        np.testing.assert_allclose(y_l, 0.2, rtol=1e-6)
        np.testing.assert_allclose(y_c, 0.2, rtol=1e-6)


def test_outputs_are_distributions(rng):
    p = micronet_init(rng, 4)
    lmap, img = inputs(rng, 12, 16)
    for t in TOGGLES:
        y_l, y_c, f_low, _ = micronet_forward(lmap, img, p, t)
        for y in (y_l, y_c):
            assert y.shape == (4, 12, 16) and (y >= 0).all()
            assert np.abs(y.sum(axis=0) - 1).max() < 1e-6
        assert f_low.shape == (16, 12, 16)


def test_filter_off_returns_raw_softmax(rng):
    p = micronet_init(rng, 4)
    lmap, img = inputs(rng)
    y_l, _, _, trace = micronet_forward(lmap, img, p, Toggles(use_filter=False))
    assert y_l is trace.y_lidar_raw
    y_f, _, _, trace_f = micronet_forward(lmap, img, p, Toggles(use_filter=True))
    assert np.array_equal(trace_f.y_lidar_raw, y_l) and not np.array_equal(y_f, y_l)


def test_zero_fusion_decouples_camera(rng):
    p = micronet_init(rng, 4)
    for name in ("fuse1", "fuse2"):
        p[f"{name}.w"] = np.zeros_like(p[f"{name}.w"])
    lmap, img = inputs(rng)
    a = micronet_forward(lmap, img, p, Toggles(False))[3]
    b = micronet_forward(lmap, rng.random(img.shape), p, Toggles(False))[3]
    assert a.y_lidar_raw.tobytes() == b.y_lidar_raw.tobytes()
    assert a.cache["pre2l"].tobytes() == b.cache["pre2l"].tobytes()


def test_zero_loss_gradient_gives_zero_grads(rng):
    p = micronet_init(rng, 4)
    lmap, img = inputs(rng)
    y_l, y_c, _, trace = micronet_forward(lmap, img, p, Toggles())
    grads = micronet_backward(trace, np.zeros_like(y_l), np.zeros_like(y_c), p)
    assert set(grads) == set(p.keys())
    assert all(not g.any() for g in grads.values())


def test_stale_trace_rejected(rng):
    p = micronet_init(rng, 4)
    lmap, img = inputs(rng)
    y_l, y_c, _, trace = micronet_forward(lmap, img, p)
    p.bump()
    with pytest.raises(StaleTraceError):
        micronet_backward(trace, y_l, y_c, p)
    with pytest.raises(StaleTraceError):
        micronet_backward(trace, y_l, y_c, p.copy())


@pytest.mark.parametrize("toggles", TOGGLES, ids=lambda t: f"filter{int(t.use_filter)}-cross{int(t.use_dycross)}")
def test_full_network_gradient(toggles):
    errs = oracles.network_gradient_errors(toggles, seed=11, n_params=20)
    worst = max(errs, key=lambda e: e[-1])
    assert worst[-1] < 1e-3, worst


@pytest.mark.parametrize("source", list(GuideSource))
def test_guide_sources_gradient(source):
    errs = oracles.network_gradient_errors(Toggles(True, True, source), seed=5, n_params=8)
    assert max(e[-1] for e in errs) < 1e-3


def test_l2c_only_leaves_camera_decoder_untouched(rng):
    p = micronet_init(rng, 3).astype(np.float64)
    lmap, img = inputs(rng)
    y_l, y_c, _, trace = micronet_forward(lmap, img, p, Toggles(True, True))
    # Sharpen the camera reference so only the camera-supervises-LiDAR direction is gated on.
    ref_c = 0.9 * (y_c == y_c.max(axis=0)) + 0.1 / 3
    _, g_l, g_c, (l2c, c2l) = dycross_loss(y_l, y_c, 0.7, ref_cam=ref_c)
    assert l2c > 0 and c2l == 0 and not g_c.any()
    grads = micronet_backward(trace, g_l, g_c, p)
    for name in ("cam.dec1.w", "cam.dec1.b", "cam.dec2.w", "cam.dec2.b"):
        assert not grads[name].any()
    assert grads["lidar.dec2.w"].any()


def test_input_validation(rng):
    p = micronet_init(rng, 3)
    with pytest.raises(ValueError):
        micronet_forward(np.zeros((4, 8, 8)), np.zeros((3, 8, 8)), p)
    with pytest.raises(ValueError):
        micronet_forward(np.zeros((5, 8, 8)), np.zeros((3, 8, 6)), p)
    with pytest.raises(ValueError):
        micronet_forward(np.zeros((5, 7, 8)), np.zeros((3, 7, 8)), p)


def test_params_save_load(tmp_path, rng):
    p = micronet_init(rng, 5)
    p.save(tmp_path / "ckpt")
    q = MicroNetParams.load(tmp_path / "ckpt")
    assert q.n_cls == 5 and list(q.keys()) == list(p.keys())
    assert all(q[k].tobytes() == p[k].tobytes() for k in p.keys())


def test_forward_deterministic(rng):
    p = micronet_init(rng, 4)
    lmap, img = inputs(rng)
    a = micronet_forward(lmap, img, p)
    b = micronet_forward(lmap, img, p)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
