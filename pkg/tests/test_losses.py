import numpy as np
import pytest
from types import SimpleNamespace

from depthcl import diffcore as dc
from depthcl import geometry as geo
from depthcl import losses
from depthcl.errors import ContractError


def const_ssim(a, b):
    """Closed-form SSIM of two constant images (variances and covariance 0)."""
    c1, c2 = losses.SSIM_C1, losses.SSIM_C2
    return ((2 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2)


def test_ssim_self_similarity():
    rng = np.random.default_rng(0)
    x = rng.random((3, 6, 7))
    out = losses.ssim(x, x)
    np.testing.assert_allclose(out.data, 1.0, atol=1e-12)


def test_ssim_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 5, 5)), rng.random((3, 5, 5))
    np.testing.assert_allclose(losses.ssim(a, b).data, losses.ssim(b, a).data, atol=1e-12)


def test_ssim_constant_images_closed_form():
    a = np.full((1, 4, 4), 0.25)
    b = np.full((1, 4, 4), 0.75)
    out = losses.ssim(a, b)
    np.testing.assert_allclose(out.data, const_ssim(0.25, 0.75), atol=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ContractError):
        losses.ssim(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_ssim_range():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        s = losses.ssim(a, b).data
        assert s.min() >= -1.0 - 1e-9 and s.max() <= 1.0 + 1e-9


# -- photometric ---------------------------------------------------------------


def test_photometric_identical_reconstruction_zero():
    rng = np.random.default_rng(3)
    img = rng.random((3, 6, 6))
    rec = dc.constant(img)
    valid = np.ones((6, 6))
    out = losses.photometric_loss(img, [(rec, valid), (rec, valid)], losses.LossWeights())
    assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_photometric_all_invalid_zero():
    rng = np.random.default_rng(4)
    img = rng.random((3, 6, 6))
    rec = dc.constant(rng.random((3, 6, 6)))
    zeros = np.zeros((6, 6))
    out = losses.photometric_loss(img, [(rec, zeros), (rec, zeros)], losses.LossWeights())
    assert out.item() == 0.0


def test_photometric_single_pixel_hand_value():
    c = 0.4
    target = np.full((1, 5, 5), c)
    rec = dc.constant(np.full((1, 5, 5), c + 0.1))
    valid = np.zeros((5, 5))
    valid[2, 2] = 1.0
    w = losses.LossWeights(w_co=0.15, w_st=0.85)
    out = losses.photometric_loss(target, [(rec, valid)], w)
    expected = 0.15 * 0.1 + 0.85 * (1.0 - const_ssim(c + 0.1, c))
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_photometric_tau_order_invariant():
    rng = np.random.default_rng(5)
    img = rng.random((3, 6, 6))
    r1 = dc.constant(rng.random((3, 6, 6)))
    r2 = dc.constant(rng.random((3, 6, 6)))
    v1 = (rng.random((6, 6)) > 0.3).astype(float)
    v2 = (rng.random((6, 6)) > 0.3).astype(float)
    w = losses.LossWeights()
    a = losses.photometric_loss(img, [(r1, v1), (r2, v2)], w).item()
    b = losses.photometric_loss(img, [(r2, v2), (r1, v1)], w).item()
    assert a == pytest.approx(b, abs=1e-14)


# -- sparse depth ---------------------------------------------------------------


def test_sparse_depth_exact_match_zero():
    sparse = np.array([[1.0, 0.0], [0.0, 2.0]])
    mask = (sparse > 0).astype(float)
    pred = np.array([[1.0, 9.0], [9.0, 2.0]])
    out = losses.sparse_depth_loss(pred, sparse, mask)
    assert out.item() == 0.0


def test_sparse_depth_omega_normalization():
    sparse = np.zeros((2, 2))
    sparse[0, 0] = 1.5
    mask = (sparse > 0).astype(float)
    pred = np.full((2, 2), 2.0)
    out = losses.sparse_depth_loss(pred, sparse, mask, losses.LossConfig(sz_norm="omega"))
    assert out.item() == pytest.approx(0.125)


def test_sparse_depth_valid_normalization():
    sparse = np.zeros((2, 2))
    sparse[0, 0] = 1.5
    mask = (sparse > 0).astype(float)
    pred = np.full((2, 2), 2.0)
    out = losses.sparse_depth_loss(pred, sparse, mask, losses.LossConfig(sz_norm="valid"))
    assert out.item() == pytest.approx(0.5)


def test_sparse_depth_mask_consistency_enforced():
    sparse = np.array([[1.0, 0.0]])
    bad_mask = np.array([[1.0, 1.0]])
    with pytest.raises(ContractError):
        losses.sparse_depth_loss(np.ones((1, 2)), sparse, bad_mask)


# -- smoothness ---------------------------------------------------------------


def test_smoothness_constant_depth_zero():
    guide = np.random.default_rng(6).random((3, 5, 7))
    out = losses.smoothness_loss(np.full((5, 7), 3.3), guide)
    assert out.item() == pytest.approx(0.0, abs=1e-15)


def test_smoothness_linear_ramp_hand_value():
    h, w, c = 5, 7, 0.3
    depth = np.tile(np.arange(w) * c, (h, 1))
    guide = np.full((3, h, w), 0.5)
    out = losses.smoothness_loss(depth, guide)
    assert out.item() == pytest.approx(h * (w - 1) * c / (h * w))


def test_smoothness_edge_suppression_strict():
    h, w, c = 5, 8, 0.4
    depth = np.tile(np.arange(w) * c, (h, 1))
    flat = np.full((3, h, w), 0.5)
    edged = flat.copy()
    edged[:, :, w // 2:] = 1.0  # a vertical intensity edge
    flat_loss = losses.smoothness_loss(depth, flat).item()
    edge_loss = losses.smoothness_loss(depth, edged).item()
    assert edge_loss < flat_loss


def test_smoothness_invariant_to_depth_offset():
    rng = np.random.default_rng(7)
    depth = rng.uniform(1, 3, size=(6, 6))
    guide = rng.random((3, 6, 6))
    a = losses.smoothness_loss(depth, guide).item()
    b = losses.smoothness_loss(depth + 4.2, guide).item()
    assert a == pytest.approx(b, abs=1e-12)


# -- totals ---------------------------------------------------------------


def test_weighted_total_hand_value():
    w = losses.LossWeights(w_ph=1.0, w_sz=1.0, w_sm=0.1)
    out = losses.weighted_total(dc.constant(0.2), dc.constant(0.1), dc.constant(0.05), w)
    assert out.item() == pytest.approx(0.305)


def test_weighted_total_projection():
    w = losses.LossWeights(w_ph=1.0, w_sz=0.0, w_sm=0.0)
    out = losses.weighted_total(dc.constant(0.7), dc.constant(9.0), dc.constant(9.0), w)
    assert out.item() == pytest.approx(0.7)


def make_sample(h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    img = 0.25 + 0.5 * rng.random((3, h, w))
    k = geo.Intrinsics(fx=float(w), fy=float(w), cx=(w - 1) / 2, cy=(h - 1) / 2)
    gt = 1.5 + 0.5 * rng.random((h, w))
    sparse = np.zeros((h, w))
    idx = rng.choice(h * w, size=6, replace=False)
    sparse.flat[idx] = gt.flat[idx]
    mask = (sparse > 0).astype(float)
    pose = geo.Pose.from_axis_angle([0, 1, 0], 0.01, [0.02, 0.0, 0.0])
    return SimpleNamespace(
        image=img,
        image_prev=0.25 + 0.5 * rng.random((3, h, w)),
        image_next=0.25 + 0.5 * rng.random((3, h, w)),
        sparse=sparse,
        mask=mask,
        intrinsics=k,
        pose_prev=pose,
        pose_next=pose.inverse(),
        gt=gt,
    )


def test_all_losses_nonnegative():
    sample = make_sample()
    rng = np.random.default_rng(1)
    for _ in range(10):
        depth = dc.constant(1.0 + rng.random((8, 8)))
        parts = losses.loss_components(sample, depth, losses.LossWeights())
        for name in ("photometric", "sparse", "smoothness", "total"):
            assert parts[name].item() >= 0.0, name


def test_total_loss_zero_when_components_zero():
    # identity warp, exact sparse agreement, constant depth
    h, w = 6, 6
    img = np.full((3, h, w), 0.5)
    k = geo.Intrinsics(fx=float(w), fy=float(w), cx=(w - 1) / 2, cy=(h - 1) / 2)
    depth_val = np.full((h, w), 2.0)
    sparse = np.zeros((h, w))
    sparse[2, 3] = 2.0
    sample = SimpleNamespace(
        image=img, image_prev=img, image_next=img,
        sparse=sparse, mask=(sparse > 0).astype(float),
        intrinsics=k, pose_prev=geo.Pose.identity(), pose_next=geo.Pose.identity(),
        gt=depth_val,
    )
    out = losses.total_loss(sample, dc.constant(depth_val), losses.LossWeights())
    assert out.item() == pytest.approx(0.0, abs=1e-10)


def test_total_loss_gradient_wrt_depth_matches_finite_differences():
    sample = make_sample(8, 8, seed=9)
    rng = np.random.default_rng(2)
    depth0 = 1.5 + 0.4 * rng.random((8, 8))
    w = losses.LossWeights()

    dt = dc.Tensor(depth0, requires_grad=True)
    dc.backward(losses.total_loss(sample, dt, w))

    eps = 1e-5
    worst = 0.0
    for i in range(0, 8, 2):
        for j in range(0, 8, 2):
            dp, dm = depth0.copy(), depth0.copy()
            dp[i, j] += eps
            dm[i, j] -= eps
            f_p = losses.total_loss(sample, dc.constant(dp), w).item()
            f_m = losses.total_loss(sample, dc.constant(dm), w).item()
            numeric = (f_p - f_m) / (2 * eps)
            err = abs(dt.grad[i, j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    assert worst < 1e-4
