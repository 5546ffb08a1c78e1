import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hnnrf import gridmath as gm
from hnnrf import hnn
from hnnrf.container import ContainerVersionError
from hnnrf.preprocess import SlicePair, boundary_from_mask

from oracles import balanced_bce_loops

SMALL = hnn.HnnConfig(num_stages=3, convs_per_stage=1, base_channels=2)


def blob_slices(n, size=32, seed=0):
    """Bright disks on a darker noisy background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = []
    for i in range(n):
        r = rng.uniform(0.15, 0.3) * size
        cy, cx = rng.uniform(0.35, 0.65, 2) * size
        gt = (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)
        img = np.clip(np.where(gt, 170.0, 90.0) + rng.normal(0, 12, gt.shape), 0, 255)
        out.append(SlicePair(img, gt, boundary_from_mask(gt), i, case_id=f"blob{i:02d}"))
    return out


def rand_params(cfg=SMALL, seed=0, fusion=None):
    rng = np.random.default_rng(seed)
    p = hnn.init_params(cfg, rng)
    # nonzero biases so every gradient path is exercised
    p = p.with_arrays([a + 0.1 * rng.normal(size=a.shape) for a in p.arrays()])
    return p if fusion is None else p.with_fusion(fusion)


# ---------------------------------------------------------------------------
# forward


def test_zero_fusion_gives_half_everywhere():
    p = rand_params(fusion=np.zeros(3))
    b, _ = hnn.forward(p, np.random.default_rng(0).uniform(0, 255, (16, 16)))
    assert np.all(b.fused_map == 0.5)


def test_single_stage_unit_fusion_equals_side():
    cfg = hnn.HnnConfig(num_stages=1, stage_strides=(1,), base_channels=3)
    p = rand_params(cfg, fusion=[1.0])
    b, _ = hnn.forward(p, np.random.default_rng(1).uniform(0, 255, (9, 11)))
    np.testing.assert_array_equal(b.fused_map, b.side_maps[0])


def test_random_params_map_contract():
    p = hnn.init_params(hnn.HnnConfig(seed=3))
    b, _ = hnn.forward(p, np.random.default_rng(2).uniform(0, 255, (32, 32)))
    assert len(b.side_maps) == 3 and len(b.maps()) == 4
    for m in b.maps():
        assert m.shape == (32, 32)
        assert np.all((m > 0) & (m < 1))


def test_forward_rejects_small_or_multichannel_input():
    p = hnn.init_params(hnn.HnnConfig())
    with pytest.raises(gm.ShapeError):
        hnn.forward(p, np.zeros((3, 40)))
    with pytest.raises(gm.ShapeError):
        hnn.forward(p, np.zeros((2, 20, 20)))


def test_config_validation():
    with pytest.raises(ValueError):
        hnn.HnnConfig(num_stages=0, stage_strides=())
    with pytest.raises(ValueError):
        hnn.HnnConfig(stage_strides=(1, 4, 8))
    with pytest.raises(ValueError):
        hnn.HnnConfig(learning_rate=-0.1)
    assert [hnn.HnnConfig().stage_channels(m) for m in range(4)] == [8, 16, 32, 32]


# ---------------------------------------------------------------------------
# losses


def test_two_pixel_example():
    loss, grad = hnn.class_balanced_bce(np.zeros(2), np.array([1, 0]))
    assert abs(loss - math.log(2)) < 1e-12
    np.testing.assert_allclose(grad, [-0.25, 0.25])


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_all_negative_gt_gives_zero(seed, h, w):
    a = np.random.default_rng(seed).normal(0, 5, (h, w))
    loss, grad = hnn.class_balanced_bce(a, np.zeros((h, w)))
    assert loss == 0.0 and not grad.any()


@given(st.integers(0, 10_000))
def test_matches_pixel_loop_and_beta_by_counting(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 3, (6, 7))
    gt = (rng.random((6, 7)) < rng.uniform(0.05, 0.95)).astype(int)
    loss, grad = hnn.class_balanced_bce(a, gt)
    assert loss == pytest.approx(balanced_bce_loops(a, gt), rel=1e-12)
    beta = sum(1 for v in gt.ravel() if v == 0) / gt.size
    p = 1 / (1 + np.exp(-a))
    np.testing.assert_allclose(grad[gt == 1], -beta * (1 - p[gt == 1]), rtol=1e-12)
    np.testing.assert_allclose(grad[gt == 0], (1 - beta) * p[gt == 0], rtol=1e-12)


def test_bce_gradient_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8))
    gt = rng.random((8, 8)) < 0.3
    _, g = hnn.class_balanced_bce(a, gt)
    assert gm.finite_diff_check(lambda v: hnn.class_balanced_bce(v, gt)[0], g, a) < 1e-3
    _, g = hnn.plain_bce(a, gt)
    assert gm.finite_diff_check(lambda v: hnn.plain_bce(v, gt)[0], g, a) < 1e-3


def test_bce_errors():
    with pytest.raises(ValueError):
        hnn.class_balanced_bce(np.zeros((0,)), np.zeros((0,)))
    with pytest.raises(gm.ShapeError):
        hnn.class_balanced_bce(np.zeros(3), np.zeros(4))


def test_side_loss_weights():
    p = rand_params()
    x = np.random.default_rng(1).uniform(0, 255, (12, 12))
    gt = np.zeros((12, 12))
    gt[3:8, 4:9] = 1
    assert hnn.side_loss(p, x, gt, [0, 0, 0]) == 0
    assert hnn.side_loss(p, x, gt, [2, 0, 0]) == pytest.approx(2 * hnn.side_loss(p, x, gt, [1, 0, 0]), rel=1e-15)
    with pytest.raises(ValueError):
        hnn.side_loss(p, x, gt, [1, 1])


def test_single_stage_side_loss_is_plain_balanced_loss():
    cfg = hnn.HnnConfig(num_stages=1, stage_strides=(1,))
    p = rand_params(cfg, fusion=[1.0])
    x = np.random.default_rng(1).uniform(0, 255, (10, 10))
    gt = np.eye(10)
    b, _ = hnn.forward(p, x)
    assert hnn.side_loss(p, x, gt, [1.0]) == hnn.class_balanced_bce(b.side_activations[0], gt)[0]


@given(st.integers(0, 1000))
def test_single_stage_fuse_equals_side(seed):
    rng = np.random.default_rng(seed)
    cfg = hnn.HnnConfig(num_stages=1, stage_strides=(1,), base_channels=2, seed=seed)
    p = rand_params(cfg, seed=seed, fusion=[1.0])
    x = rng.uniform(0, 255, (8, 9))
    gt = rng.random((8, 9)) < 0.4
    assert hnn.fuse_loss(p, x, gt) == hnn.side_loss(p, x, gt, [1.0])


def test_fuse_loss_examples():
    p = rand_params()
    x = np.random.default_rng(2).uniform(0, 255, (12, 12))
    assert hnn.fuse_loss(p, x, np.zeros((12, 12))) == 0
    gt = np.zeros((12, 12))
    gt[2:5, 2:9] = 1
    npos, nneg = gt.sum(), gt.size - gt.sum()
    beta = nneg / gt.size
    expect = (beta * npos + (1 - beta) * nneg) * math.log(2)
    assert hnn.fuse_loss(p.with_fusion(np.zeros(3)), x, gt) == pytest.approx(expect, rel=1e-12)


def _objective(p, x, gt, k):
    def f(v):
        arrays = p.arrays()
        arrays[k] = v
        ls, lf, _ = hnn.loss_and_grads(p.with_arrays(arrays), x, gt)
        return ls + lf

    return f


@pytest.mark.parametrize("balanced", [True, False])
def test_every_parameter_gradient(balanced):
    cfg = replace(SMALL, balanced_fuse=balanced, side_loss_weights=(1.0, 0.5, 2.0))
    p = rand_params(cfg, seed=7)
    rng = np.random.default_rng(8)
    x = rng.uniform(0, 255, (8, 8))
    gt = rng.random((8, 8)) < 0.3
    _, _, grads = hnn.loss_and_grads(p, x, gt)
    assert len(grads) == len(p.arrays())
    for k, (a, g) in enumerate(zip(p.arrays(), grads)):
        assert g.shape == a.shape
        assert gm.finite_diff_check(_objective(p, x, gt, k), g, a, n_probes=40, seed=k) < 1e-3, k


# ---------------------------------------------------------------------------
# training


def test_zero_learning_rate_leaves_params_unchanged():
    cfg = replace(SMALL, learning_rate=0.0, epochs=2, seed=4)
    res = hnn.train(cfg, blob_slices(3, 16))
    init = hnn.init_params(cfg)
    for a, b in zip(res.params.arrays(), init.arrays()):
        assert a.tobytes() == b.tobytes()


def test_training_is_seeded_and_order_free():
    data = blob_slices(5, 16, seed=1)
    cfg = replace(SMALL, epochs=2, seed=9, learning_rate=0.1, batch_size=2)
    a = hnn.train(cfg, data)
    b = hnn.train(cfg, data[::-1])
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert x.tobytes() == y.tobytes()
    assert a.loss_curve == b.loss_curve


def test_divergence_reports_epoch_and_rate():
    cfg = replace(SMALL, learning_rate=1e100, epochs=3)
    with pytest.raises(hnn.TrainingDivergence) as err:
        hnn.train(cfg, blob_slices(3, 16))
    assert err.value.learning_rate == 1e100 and err.value.epoch >= 1
    assert "epoch" in str(err.value)


def test_training_input_errors():
    with pytest.raises(ValueError):
        hnn.train(SMALL, [])
    empty = [SlicePair(np.zeros((16, 16)), np.zeros((16, 16), np.uint8), np.zeros((16, 16), np.uint8), 0)]
    with pytest.raises(ValueError, match="foreground"):
        hnn.train(SMALL, empty)
    with pytest.raises(ValueError):
        hnn.target_of(empty[0], "edges")


@pytest.fixture(scope="module")
def blob_run():
    data = blob_slices(50, 32, seed=11)
    return hnn.train(hnn.HnnConfig(epochs=30, seed=5), data)


@pytest.mark.slow
def test_blob_training_halves_the_loss(blob_run):
    assert blob_run.loss_curve[-1] < 0.5 * blob_run.initial_loss


@pytest.mark.slow
def test_trained_interior_map_separates_held_out_blob(blob_run):
    untrained = hnn.init_params(hnn.HnnConfig()).with_fusion(np.zeros(3))
    for sp in blob_slices(4, 32, seed=99):
        bi, bb = hnn.predict(blob_run.params, untrained, sp.image)
        inside = sp.interior_gt.astype(bool)
        assert bi.fused_map[inside].mean() > bi.fused_map[~inside].mean()
        assert np.all(bb.fused_map == 0.5)
        assert len(bi.maps()) == len(bb.maps()) == 4


# ---------------------------------------------------------------------------
# persistence


def test_model_file_round_trip(tmp_path):
    p = rand_params(replace(SMALL, learning_rate=0.3), seed=2)
    hnn.save_params(tmp_path / "m.hnn", p)
    q = hnn.load_params(tmp_path / "m.hnn", expected=SMALL)
    for a, b in zip(p.arrays(), q.arrays()):
        assert a.tobytes() == b.tobytes()
    assert q.config == p.config


def test_model_file_mismatches(tmp_path):
    path = tmp_path / "m.hnn"
    hnn.save_params(path, rand_params())
    with pytest.raises(ContainerVersionError, match="architecture"):
        hnn.load_params(path, expected=hnn.HnnConfig())
    raw = bytearray(path.read_bytes())
    raw[8] = 9  # format version
    (tmp_path / "v.hnn").write_bytes(bytes(raw))
    with pytest.raises(ContainerVersionError, match="version"):
        hnn.load_params(tmp_path / "v.hnn")
    (tmp_path / "t.hnn").write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ContainerVersionError):
        hnn.load_params(tmp_path / "t.hnn")
    (tmp_path / "x.hnn").write_bytes(b"nope" + path.read_bytes()[4:])
    with pytest.raises(ContainerVersionError, match="magic"):
        hnn.load_params(tmp_path / "x.hnn")
