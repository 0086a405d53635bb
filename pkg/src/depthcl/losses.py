"""Unsupervised depth-completion objective.

Three terms combined by nonnegative weights: photometric reconstruction
consistency against temporally adjacent frames (L1 + structural
similarity), sparse-depth consistency at the valid range points, and
edge-aware first-order smoothness guided by image gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from .errors import ContractError

log = logging.getLogger(__name__)

SSIM_C1 = (0.01) ** 2  # (0.01 * L)^2 with dynamic range L = 1
SSIM_C2 = (0.03) ** 2


@dataclass(frozen=True)
class LossWeights:
    w_ph: float = 1.0
    w_sz: float = 1.0
    w_sm: float = 0.1
    w_co: float = 0.15
    w_st: float = 0.85

    def __post_init__(self):
        for name in ("w_ph", "w_sz", "w_sm", "w_co", "w_st"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.w_co + self.w_st <= 0:
            raise ContractError("w_co + w_st must be positive")


@dataclass(frozen=True)
class LossConfig:
    """Normalization switches; defaults are the numerically sane modes."""

    photo_norm: str = "valid"   # "valid": mean over valid pixels, "omega": divide by H*W
    tau_reduce: str = "mean"    # "mean" or literal "sum" over the two temporal neighbors
    sz_norm: str = "omega"      # "omega": divide by H*W, "valid": mean over sparse points


def _box_mean(x: dc.Tensor, inv_counts: np.ndarray) -> dc.Tensor:
    """3x3 local mean with border windows normalized by their true size."""
    return dc.mul(dc.box_sum3(x), inv_counts)


_counts_cache: dict[tuple, np.ndarray] = {}


def _inv_window_counts(h: int, w: int) -> np.ndarray:
    key = (h, w)
    cached = _counts_cache.get(key)
    if cached is None:
        cached = 1.0 / dc._window_sum3(np.ones((h, w)))
        _counts_cache[key] = cached
    return cached


def _image_stats(img: np.ndarray):
    """Constant local statistics (mean, variance) of a plain image."""
    _, h, w = img.shape
    inv_counts = _inv_window_counts(h, w)
    mu = dc._window_sum3(img) * inv_counts
    var = dc._window_sum3(img * img) * inv_counts - mu * mu
    return mu, var


def ssim(a, b, b_stats=None) -> dc.Tensor:
    """Per-pixel structural similarity map in [-1, 1], channel-averaged.

    Local statistics use a 3x3 window (boundary windows shrink to the
    in-image support). Symmetric in its arguments; ssim(x, x) == 1.
    `b_stats` optionally carries precomputed (mean, variance) of b when
    b is a constant image reused across many calls.
    """
    a = a if isinstance(a, dc.Tensor) else dc.constant(a)
    b = b if isinstance(b, dc.Tensor) else dc.constant(b)
    if a.data.shape != b.data.shape:
        raise ContractError(f"ssim shape mismatch: {a.data.shape} vs {b.data.shape}")
    if a.data.ndim != 3:
        raise ContractError("ssim expects (C,H,W) images")
    _, h, w = a.data.shape
    inv_counts = _inv_window_counts(h, w)

    mu_a = _box_mean(a, inv_counts)
    if b_stats is not None and not b.requires_grad:
        mu_b_arr, var_b_arr = b_stats
        mu_b, var_b = dc.constant(mu_b_arr), dc.constant(var_b_arr)
    else:
        mu_b = _box_mean(b, inv_counts)
        var_b = dc.sub(_box_mean(dc.mul(b, b), inv_counts), dc.mul(mu_b, mu_b))
    var_a = dc.sub(_box_mean(dc.mul(a, a), inv_counts), dc.mul(mu_a, mu_a))
    cov = dc.sub(_box_mean(dc.mul(a, b), inv_counts), dc.mul(mu_a, mu_b))

    num = dc.mul(dc.add(dc.mul(dc.mul(mu_a, mu_b), 2.0), SSIM_C1),
                 dc.add(dc.mul(cov, 2.0), SSIM_C2))
    den = dc.mul(dc.add(dc.add(dc.mul(mu_a, mu_a), dc.mul(mu_b, mu_b)), SSIM_C1),
                 dc.add(dc.add(var_a, var_b), SSIM_C2))
    return dc.reduce_mean(dc.div(num, den), axis=0)


def photometric_loss(target: np.ndarray, reconstructions, weights: LossWeights,
                     config: LossConfig = LossConfig(), target_stats=None) -> dc.Tensor:
    """Masked L1 + (1 - SSIM) between the target frame and each warped neighbor.

    `reconstructions` is a sequence of (image Tensor, validity array)
    pairs, one per temporal neighbor. Pixels with validity 0 contribute
    nothing; a neighbor with no valid pixels contributes 0 and logs a
    warning.
    """
    target = np.asarray(target, dtype=np.float64)
    per_tau = []
    h, w = target.shape[-2:]
    for rec, valid in reconstructions:
        valid = np.asarray(valid, dtype=np.float64)
        n_valid = float(valid.sum())
        if n_valid == 0:
            log.warning("photometric_loss: reconstruction with no valid pixels, contributes 0")
            per_tau.append(dc.constant(0.0))
            continue
        if rec.data.shape != target.shape:
            raise ContractError("reconstruction/target shape mismatch")
        absdiff = dc.reduce_mean(dc.absolute(dc.sub(rec, target)), axis=0)
        dissim = dc.sub(1.0, ssim(rec, target, b_stats=target_stats))
        pixel = dc.add(dc.mul(absdiff, weights.w_co), dc.mul(dissim, weights.w_st))
        denom = n_valid if config.photo_norm == "valid" else float(h * w)
        per_tau.append(dc.mul(dc.reduce_sum(dc.mul(pixel, valid)), 1.0 / denom))
    if not per_tau:
        return dc.constant(0.0)
    total = per_tau[0]
    for term in per_tau[1:]:
        total = dc.add(total, term)
    if config.tau_reduce == "mean":
        total = dc.mul(total, 1.0 / len(per_tau))
    return total


def sparse_depth_loss(pred, sparse: np.ndarray, mask: np.ndarray,
                      config: LossConfig = LossConfig()) -> dc.Tensor:
    """L1 between prediction and the sparse range points."""
    pred = pred if isinstance(pred, dc.Tensor) else dc.constant(pred)
    sparse = np.asarray(sparse, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.data.shape != sparse.shape or sparse.shape != mask.shape:
        raise ContractError("pred/sparse/mask shapes disagree")
    if not np.array_equal(mask > 0, sparse > 0) or not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be binary and 1 exactly where sparse depth is valid")
    residual = dc.mul(dc.absolute(dc.sub(pred, sparse)), mask)
    if config.sz_norm == "valid":
        denom = max(float(mask.sum()), 1.0)
    else:
        denom = float(mask.size)
    return dc.mul(dc.reduce_sum(residual), 1.0 / denom)


_DIFF_KX = np.array([[[[-1.0, 1.0]]]])          # forward difference along width
_DIFF_KY = np.array([[[[-1.0], [1.0]]]])        # forward difference along height


def _forward_diff(t: dc.Tensor, axis: str) -> dc.Tensor:
    kernel = _DIFF_KX if axis == "x" else _DIFF_KY
    return dc.conv2d(t, dc.constant(kernel), stride=1, padding=0)


def edge_weights(guide: np.ndarray):
    """Exponential edge-awareness weights from image gradients."""
    gx = np.abs(np.diff(guide, axis=2)).mean(axis=0)   # (H, W-1)
    gy = np.abs(np.diff(guide, axis=1)).mean(axis=0)   # (H-1, W)
    return np.exp(-gx), np.exp(-gy)


def smoothness_loss(pred, guide: np.ndarray, weights_xy=None) -> dc.Tensor:
    """Edge-aware first-order smoothness: image edges lower the penalty."""
    pred = pred if isinstance(pred, dc.Tensor) else dc.constant(pred)
    guide = np.asarray(guide, dtype=np.float64)
    if guide.ndim != 3 or pred.data.shape != guide.shape[1:]:
        raise ContractError("guide must be (C,H,W) matching the depth map")
    h, w = pred.data.shape
    lam_x, lam_y = edge_weights(guide) if weights_xy is None else weights_xy

    dx = dc.absolute(_forward_diff(pred, "x"))   # (1, H, W-1)
    dy = dc.absolute(_forward_diff(pred, "y"))   # (1, H-1, W)
    term_x = dc.reduce_sum(dc.mul(dx, lam_x))
    term_y = dc.reduce_sum(dc.mul(dy, lam_y))
    return dc.mul(dc.add(term_x, term_y), 1.0 / float(h * w))


def weighted_total(l_ph, l_sz, l_sm, weights: LossWeights) -> dc.Tensor:
    """Weighted combination of the three terms."""
    total = dc.mul(l_ph, weights.w_ph)
    total = dc.add(total, dc.mul(l_sz, weights.w_sz))
    return dc.add(total, dc.mul(l_sm, weights.w_sm))


def _sample_constants(sample) -> dict:
    """Per-sample derived constants, memoized on the sample itself."""
    cache = getattr(sample, "cache", None)
    if cache is None:
        return {"target_stats": _image_stats(np.asarray(sample.image, dtype=np.float64)),
                "edge_weights": edge_weights(np.asarray(sample.image, dtype=np.float64))}
    if "loss_constants" not in cache:
        img = np.asarray(sample.image, dtype=np.float64)
        cache["loss_constants"] = {
            "target_stats": _image_stats(img),
            "edge_weights": edge_weights(img),
        }
    return cache["loss_constants"]


def loss_components(sample, depth, weights: LossWeights,
                    config: LossConfig = LossConfig()) -> dict:
    """All loss terms for one sample given its predicted dense depth."""
    consts = _sample_constants(sample)
    recs = [
        geo.reconstruct_image(sample.image_prev, depth, sample.pose_prev, sample.intrinsics),
        geo.reconstruct_image(sample.image_next, depth, sample.pose_next, sample.intrinsics),
    ]
    l_ph = photometric_loss(sample.image, recs, weights, config,
                            target_stats=consts["target_stats"])
    l_sz = sparse_depth_loss(depth, sample.sparse, sample.mask, config)
    l_sm = smoothness_loss(depth, sample.image, weights_xy=consts["edge_weights"])
    return {
        "photometric": l_ph,
        "sparse": l_sz,
        "smoothness": l_sm,
        "total": weighted_total(l_ph, l_sz, l_sm, weights),
    }


def total_loss(sample, depth, weights: LossWeights,
               config: LossConfig = LossConfig()) -> dc.Tensor:
    """Weighted training objective for one sample; differentiable end to end."""
    return loss_components(sample, depth, weights, config)["total"]
