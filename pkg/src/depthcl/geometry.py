"""Pinhole camera model, rigid motion, and differentiable image warping.

Pixel convention: (u, v) are column/row coordinates measured at pixel
centers with the origin at the top-left pixel center, so u runs over
[0, W-1] and v over [0, H-1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError

EPS_Z = 1e-6  # meters; smaller projective depth counts as behind-camera
ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; fx, fy, cx, cy in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy)


@dataclass(frozen=True)
class Pose:
    """Rigid motion x -> R x + t; rotation proper orthonormal, translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ContractError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ContractError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0:
            if angle != 0:
                raise ContractError("zero axis with nonzero angle")
            return cls(np.eye(3), np.asarray(translation, dtype=np.float64))
        k = axis / n
        kx = np.array([
            [0.0, -k[2], k[1]],
            [k[2], 0.0, -k[0]],
            [-k[1], k[0], 0.0],
        ])
        r = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
        return cls(r, np.asarray(translation, dtype=np.float64))

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self.compose(other))(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def backproject(pixel, depth: float, intrinsics: Intrinsics) -> np.ndarray:
    """Lift a pixel at a given depth to a 3-point: K^-1 (u,v,1) * depth."""
    if depth <= 0:
        raise ContractError("backproject requires positive depth")
    u, v = float(pixel[0]), float(pixel[1])
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    return np.array([x * depth, y * depth, depth])


def project(point, intrinsics: Intrinsics, eps_z: float = EPS_Z):
    """Perspective projection; returns (u, v, valid). Behind-camera -> invalid."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= eps_z:
        return 0.0, 0.0, False
    u = intrinsics.fx * p[0] / p[2] + intrinsics.cx
    v = intrinsics.fy * p[1] / p[2] + intrinsics.cy
    return float(u), float(v), True


def pixel_grid(height: int, width: int):
    """Constant (u, v) coordinate grids of shape (H, W)."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def reconstruct_image(source: np.ndarray, depth, pose: Pose, intrinsics: Intrinsics,
                      eps_z: float = EPS_Z):
    """Warp `source` into the target view given per-pixel target depth.

    For each target pixel: backproject with its depth, rigidly move by
    `pose` (target-to-source), project, and bilinearly sample `source`.
    Returns (reconstruction Tensor (C,H,W), validity (H,W) in {0,1}).
    Validity is 0 where the point lands behind the source camera or
    outside the source raster. Differentiable w.r.t. depth.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 3:
        raise ContractError(f"source image must be (C,H,W), got {source.shape}")
    d = depth if isinstance(depth, dc.Tensor) else dc.constant(depth)
    _, h, w = source.shape
    if d.data.shape != (h, w):
        raise ContractError(f"depth shape {d.data.shape} does not match image {source.shape}")

    fx, fy, cx, cy = intrinsics.as_tuple()
    u, v = pixel_grid(h, w)

    # camera-frame point at each pixel: K^-1 (u,v,1) * d
    x = dc.mul(d, (u - cx) / fx)
    y = dc.mul(d, (v - cy) / fy)
    r, t = pose.rotation, pose.translation
    xs = dc.add(dc.add(dc.mul(x, r[0, 0]), dc.mul(y, r[0, 1])), dc.add(dc.mul(d, r[0, 2]), t[0]))
    ys = dc.add(dc.add(dc.mul(x, r[1, 0]), dc.mul(y, r[1, 1])), dc.add(dc.mul(d, r[1, 2]), t[1]))
    zs = dc.add(dc.add(dc.mul(x, r[2, 0]), dc.mul(y, r[2, 1])), dc.add(dc.mul(d, r[2, 2]), t[2]))

    in_front = zs.data > eps_z
    # keep the division well-defined behind the camera; those pixels are masked out
    z_safe = dc.add(dc.mul(zs, in_front.astype(np.float64)), (~in_front).astype(np.float64))
    u_src = dc.add(dc.mul(dc.div(xs, z_safe), fx), cx)
    v_src = dc.add(dc.mul(dc.div(ys, z_safe), fy), cy)

    in_raster = ((u_src.data >= 0.0) & (u_src.data <= w - 1.0)
                 & (v_src.data >= 0.0) & (v_src.data <= h - 1.0))
    validity = (in_front & in_raster).astype(np.float64)

    # zero out coordinates at invalid pixels so sampling stays in range
    # and no gradient leaks through masked locations
    u_clamped = dc.mul(u_src, validity)
    v_clamped = dc.mul(v_src, validity)
    reconstruction = dc.bilinear_sample(source, u_clamped, v_clamped)
    return reconstruction, validity
