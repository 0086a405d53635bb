"""Procedural multi-domain sample generation and the dataset container.

Scenes are closed-form-raycastable worlds (room interiors, corridors
with boxes, terrain with mounds) textured by smooth sinusoid fields.
Each sample renders three frames of the same world under a small
camera motion, so the middle frame is exactly reconstructable from its
neighbors given the true depth and relative pose, up to resampling and
occlusion effects. Six presets span indoor-like and outdoor-like
domains with distinct depth statistics, textures, and range-sensor
sparsity patterns.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from .errors import (ChecksumError, ContractError, DataFormatError,
                     GenerationError, TruncatedFileError, VersionError)
from .geometry import Intrinsics, Pose

MAGIC = b"DCDS"
FORMAT_VERSION = 1
_RAY_EPS = 1e-9
_T_MIN = 1e-3


@dataclass(frozen=True)
class DomainSpec:
    name: str
    d_min: float
    d_max: float
    scene: str                 # planar-rooms | boxes-corridor | ridged-terrain
    freq_band: tuple = (0.3, 0.9)   # texture frequency band, cycles/meter
    contrast: float = 0.3
    pattern: str = "uniform-random"  # uniform-random | grid | corner-features
    density: float = 0.05
    motion_translation: float = 0.05  # meters/frame
    motion_rotation: float = 0.01     # radians/frame
    height: int = 48
    width: int = 64
    extent: float = 1.0              # scene size as a fraction of d_max

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ContractError("need 0 < d_min < d_max")
        if not (0 < self.density <= 1):
            raise ContractError("density must lie in (0, 1]")
        if self.height < 16 or self.width < 16:
            raise ContractError("image size must be at least 16x16")
        if self.scene not in ("planar-rooms", "boxes-corridor", "ridged-terrain"):
            raise ContractError(f"unknown scene style {self.scene!r}")
        if self.pattern not in ("uniform-random", "grid", "corner-features"):
            raise ContractError(f"unknown sparsity pattern {self.pattern!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["freq_band"] = tuple(d["freq_band"])
        return cls(**d)


@dataclass
class Sample:
    """One training/eval unit: frame triplet, sparse range, calibration, truth."""

    image_prev: np.ndarray   # (3,H,W)
    image: np.ndarray        # (3,H,W), the target frame
    image_next: np.ndarray   # (3,H,W)
    sparse: np.ndarray       # (H,W), 0 marks invalid
    mask: np.ndarray         # (H,W) binary
    intrinsics: Intrinsics
    pose_prev: Pose          # target-cam -> previous-cam
    pose_next: Pose          # target-cam -> next-cam
    gt: np.ndarray           # (H,W) dense metric depth, evaluation only
    cache: dict = field(default_factory=dict, repr=False, compare=False)  # derived constants


@dataclass
class Dataset:
    name: str
    samples: list
    spec: DomainSpec | None = None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


# ---------------------------------------------------------------------------
# scene primitives and ray casting
# ---------------------------------------------------------------------------


@dataclass
class _Scene:
    boxes: list = field(default_factory=list)     # (lo(3,), hi(3,), albedo(3,))
    spheres: list = field(default_factory=list)   # (center(3,), radius, albedo(3,))
    tex_freq: np.ndarray = None                   # (K,) cycles/meter
    tex_dirs: np.ndarray = None                   # (K,3) unit directions
    tex_phase: np.ndarray = None                  # (K,)
    tex_amp: np.ndarray = None                    # (K,)
    contrast: float = 0.3


def _ray_box(origin, dirs, lo, hi):
    """Slab intersection; returns entry t if positive else exit t (inf = miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[:, None] - origin[:, None]) / dirs
        t2 = (hi[:, None] - origin[:, None]) / dirs
    tmin = np.minimum(t1, t2).max(axis=0)
    tmax = np.maximum(t1, t2).min(axis=0)
    hit = (tmax >= tmin) & (tmax > _T_MIN)
    t = np.where(tmin > _T_MIN, tmin, tmax)
    return np.where(hit & (t > _T_MIN), t, np.inf)


def _ray_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = (dirs * dirs).sum(axis=0)
    b = 2.0 * (dirs * oc[:, None]).sum(axis=0)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    t = np.where(t1 > _T_MIN, t1, t2)
    return np.where(hit & (t > _T_MIN), t, np.inf)


def _texture(points, scene: _Scene):
    """Smooth scalar pattern in [-1, 1] evaluated at (3,N) world points."""
    phase = scene.tex_dirs @ points  # (K,N)
    waves = np.sin(2.0 * np.pi * scene.tex_freq[:, None] * phase + scene.tex_phase[:, None])
    pattern = (scene.tex_amp[:, None] * waves).sum(axis=0)
    norm = np.abs(scene.tex_amp).sum()
    return pattern / max(norm, 1e-12)


def _render(scene: _Scene, cam_rot, cam_pos, intr: Intrinsics, h, w):
    """Render color (3,H,W) and z-depth (H,W) from one camera."""
    v, u = np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([
        (u.ravel() - intr.cx) / intr.fx,
        (v.ravel() - intr.cy) / intr.fy,
        np.ones(h * w),
    ])
    dirs = cam_rot @ dirs_cam  # (3, N); z-component in cam frame stays 1

    ts = []
    albedos = []
    for lo, hi, alb in scene.boxes:
        ts.append(_ray_box(cam_pos, dirs, lo, hi))
        albedos.append(alb)
    for center, radius, alb in scene.spheres:
        ts.append(_ray_sphere(cam_pos, dirs, center, radius))
        albedos.append(alb)
    tstack = np.stack(ts)                    # (P, N)
    idx = tstack.argmin(axis=0)
    t = tstack[idx, np.arange(t_len := tstack.shape[1])]
    if not np.all(np.isfinite(t)):
        raise GenerationError("a ray escaped the scene; enclosing geometry is incomplete")

    points = cam_pos[:, None] + t * dirs     # (3, N)
    pattern = _texture(points, scene)
    albedo = np.stack(albedos)[idx].T        # (3, N)
    shade = 0.55 + scene.contrast * pattern
    color = np.clip(albedo * shade, 0.0, 1.0)
    return color.reshape(3, h, w), t.reshape(h, w)


# ---------------------------------------------------------------------------
# per-style scene construction
# ---------------------------------------------------------------------------


def _make_texture(rng, spec: DomainSpec, scene: _Scene):
    k = 5
    lo, hi = spec.freq_band
    scene.tex_freq = rng.uniform(lo, hi, size=k)
    d = rng.normal(size=(k, 3))
    scene.tex_dirs = d / np.linalg.norm(d, axis=1, keepdims=True)
    scene.tex_phase = rng.uniform(0, 2 * np.pi, size=k)
    scene.tex_amp = rng.uniform(0.5, 1.0, size=k)
    scene.contrast = spec.contrast


def _albedo(rng, base):
    return np.clip(base + rng.uniform(-0.15, 0.15, size=3), 0.15, 1.0)


def _build_planar_rooms(rng, spec: DomainSpec):
    scale = spec.d_max * spec.extent
    half = np.array([
        rng.uniform(0.30, 0.42),
        rng.uniform(0.24, 0.34),
        rng.uniform(0.30, 0.42),
    ]) * scale
    # keep the far corner inside d_max and walls beyond d_min
    diag = np.linalg.norm(half)
    if diag > 0.95 * scale:
        half *= 0.95 * scale / diag
    scene = _Scene()
    scene.boxes.append((-half, half, _albedo(rng, np.array([0.75, 0.72, 0.66]))))
    # one or two furniture-like boxes ahead of the camera
    for _ in range(rng.integers(1, 3)):
        size = rng.uniform(0.04, 0.1, size=3) * scale
        center = np.array([
            rng.uniform(-0.5, 0.5) * half[0],
            half[1] - size[1],
            rng.uniform(0.35, 0.8) * half[2],
        ])
        scene.boxes.append((center - size, center + size, _albedo(rng, rng.uniform(0.3, 0.9, size=3))))
    cam_pos = np.array([
        rng.uniform(-0.15, 0.15) * half[0],
        rng.uniform(-0.2, 0.0) * half[1],
        rng.uniform(-0.5, -0.25) * half[2],
    ])
    yaw = rng.uniform(-0.2, 0.2)
    pitch = rng.uniform(-0.08, 0.12)
    return scene, cam_pos, yaw, pitch


def _build_boxes_corridor(rng, spec: DomainSpec):
    scale = spec.d_max * spec.extent
    half = np.array([
        rng.uniform(0.16, 0.24) * scale,
        rng.uniform(0.14, 0.2) * scale,
        0.46 * scale,
    ])
    scene = _Scene()
    scene.boxes.append((-half, half, _albedo(rng, np.array([0.6, 0.65, 0.75]))))
    cam_z = -half[2] + max(2.5 * spec.d_min, 0.05 * scale)
    for _ in range(rng.integers(2, 5)):
        size = rng.uniform(0.03, 0.09, size=3) * scale
        center = np.array([
            rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.7) * half[0],
            half[1] - size[1],
            rng.uniform(cam_z + 0.15 * scale, half[2] - 0.1 * scale),
        ])
        scene.boxes.append((center - size, center + size, _albedo(rng, rng.uniform(0.25, 0.85, size=3))))
    cam_pos = np.array([
        rng.uniform(-0.25, 0.25) * half[0],
        rng.uniform(-0.25, 0.1) * half[1],
        cam_z,
    ])
    yaw = rng.uniform(-0.06, 0.06)
    pitch = rng.uniform(-0.02, 0.06)
    return scene, cam_pos, yaw, pitch


def _build_ridged_terrain(rng, spec: DomainSpec):
    scale = spec.d_max * spec.extent
    half = np.array([0.5 * scale, 0.3 * scale, 0.42 * scale])
    scene = _Scene()
    scene.boxes.append((-half, half, _albedo(rng, np.array([0.55, 0.6, 0.7]))))
    ground_y = 0.12 * scale
    cam_pos = np.array([rng.uniform(-0.05, 0.05) * scale, 0.0, -0.40 * scale])
    # mounds partially embedded in the ground, bulging toward the camera level
    for _ in range(rng.integers(5, 10)):
        radius = rng.uniform(0.03, 0.08) * scale
        center = np.array([
            rng.uniform(-0.3, 0.3) * scale,
            ground_y + 0.55 * radius,
            cam_pos[2] + rng.uniform(0.15, 0.65) * scale,
        ])
        scene.spheres.append((center, radius, _albedo(rng, rng.uniform(0.35, 0.8, size=3))))
    # the "ground" is a raised slab spanning the enclosure below camera level
    scene.boxes.append((np.array([-half[0], ground_y, -half[2]]),
                        np.array([half[0], half[1], half[2]]),
                        _albedo(rng, np.array([0.5, 0.55, 0.45]))))
    yaw = rng.uniform(-0.05, 0.05)
    pitch = rng.uniform(-0.12, -0.06)  # negative pitch looks down (y axis points down)
    return scene, cam_pos, yaw, pitch


_BUILDERS = {
    "planar-rooms": _build_planar_rooms,
    "boxes-corridor": _build_boxes_corridor,
    "ridged-terrain": _build_ridged_terrain,
}


def _yaw_pitch(yaw, pitch):
    return (Pose.from_axis_angle([0, 1, 0], yaw).rotation
            @ Pose.from_axis_angle([1, 0, 0], pitch).rotation)


def _generate_sample(spec: DomainSpec, rng) -> Sample:
    h, w = spec.height, spec.width
    intr = Intrinsics(fx=0.9 * w, fy=0.9 * w, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)
    scene, cam_pos, yaw, pitch = _BUILDERS[spec.scene](rng, spec)
    _make_texture(rng, spec, scene)
    rot = _yaw_pitch(yaw, pitch)

    step_dir = rng.normal(size=3)
    step_dir[2] = abs(step_dir[2]) + 1.0  # bias motion forward
    step = spec.motion_translation * step_dir / np.linalg.norm(step_dir)
    axis = rng.normal(size=3)
    drot = Pose.from_axis_angle(axis, spec.motion_rotation).rotation

    poses = {
        "prev": (rot @ drot.T, cam_pos - step),
        "t": (rot, cam_pos),
        "next": (rot @ drot, cam_pos + step),
    }
    frames = {}
    for key, (r, p) in poses.items():
        frames[key] = _render(scene, r, p, intr, h, w)

    gt = frames["t"][1]
    if gt.min() < spec.d_min or gt.max() > spec.d_max:
        raise GenerationError(
            f"rendered depth [{gt.min():.3f}, {gt.max():.3f}] escapes the declared "
            f"range [{spec.d_min}, {spec.d_max}] for domain {spec.name!r}")

    def relative(key):
        r_tau, p_tau = poses[key]
        r_t, p_t = poses["t"]
        return Pose(r_tau.T @ r_t, r_tau.T @ (p_t - p_tau))

    sparse, mask = sparsify(gt, spec.pattern, spec.density,
                            seed=int(rng.integers(0, 2**31 - 1)), guide=frames["t"][0])
    return Sample(
        image_prev=frames["prev"][0], image=frames["t"][0], image_next=frames["next"][0],
        sparse=sparse, mask=mask, intrinsics=intr,
        pose_prev=relative("prev"), pose_next=relative("next"), gt=gt,
    )


def generate_domain(spec: DomainSpec, count: int, seed: int) -> Dataset:
    """Deterministic procedural dataset; per-sample rng derives from seed ^ index."""
    if count < 1:
        raise ContractError("count must be at least 1")
    samples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.PCG64(seed ^ i))
        samples.append(_generate_sample(spec, rng))
    return Dataset(name=spec.name, samples=samples, spec=spec)


# ---------------------------------------------------------------------------
# sparsification
# ---------------------------------------------------------------------------


def _box3(x):
    p = np.pad(x, 1, mode="edge")
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + x.shape[0], dx:dx + x.shape[1]]
    return out / 9.0


def _corner_scores(guide):
    gray = np.asarray(guide, dtype=np.float64).mean(axis=0)
    gy, gx = np.gradient(gray)
    sxx, syy, sxy = _box3(gx * gx), _box3(gy * gy), _box3(gx * gy)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - 0.05 * trace * trace


def sparsify(dense: np.ndarray, pattern: str, density: float, seed: int,
             guide: np.ndarray | None = None):
    """Pick exactly floor(density*H*W) valid points from a dense depth map.

    Patterns: uniform-random (seeded choice), grid (regular lattice,
    row-major truncated to the exact count), corner-features (strongest
    corner responses of the guide image; requires `guide`).
    """
    dense = np.asarray(dense, dtype=np.float64)
    if not (0 < density <= 1):
        raise ContractError("density must lie in (0, 1]")
    h, w = dense.shape
    n = int(np.floor(density * h * w))
    if n == 0:
        raise ContractError("density too low: zero valid points")

    if pattern == "uniform-random":
        rng = np.random.default_rng(np.random.PCG64(seed))
        flat = rng.choice(h * w, size=n, replace=False)
    elif pattern == "grid":
        stride = max(1, int(np.floor(np.sqrt(h * w / n))))
        ii, jj = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
        flat = (ii * w + jj).ravel()[:n]
        if flat.size < n:
            raise ContractError("grid stride produced too few points")
    elif pattern == "corner-features":
        if guide is None:
            raise ContractError("corner-features pattern requires a guide image")
        scores = _corner_scores(guide).ravel()
        flat = np.argsort(-scores, kind="stable")[:n]
    else:
        raise ContractError(f"unknown sparsity pattern {pattern!r}")

    sparse = np.zeros_like(dense)
    sparse.flat[flat] = dense.flat[flat]
    mask = np.zeros_like(dense)
    mask.flat[flat] = 1.0
    return sparse, mask


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------


_FIELDS = ("image_prev", "image", "image_next", "sparse", "mask", "gt")


def _sample_blob(s: Sample) -> bytes:
    parts = [np.ascontiguousarray(getattr(s, f), dtype="<f8").tobytes() for f in _FIELDS]
    parts.append(np.asarray(s.intrinsics.as_tuple(), dtype="<f8").tobytes())
    for pose in (s.pose_prev, s.pose_next):
        parts.append(np.ascontiguousarray(pose.rotation, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(pose.translation, dtype="<f8").tobytes())
    return b"".join(parts)


def _sample_nbytes(h, w) -> int:
    return 8 * (3 * h * w * 3 + 3 * h * w + (4 + 2 * 12))


def save_dataset(dataset: Dataset, path) -> None:
    """Single-file container: magic, JSON header, checksummed payload."""
    if not dataset.samples:
        raise ContractError("refusing to save an empty dataset")
    h, w = dataset.samples[0].gt.shape
    payload = b"".join(_sample_blob(s) for s in dataset.samples)
    header = {
        "version": FORMAT_VERSION,
        "name": dataset.name,
        "spec": dataset.spec.to_dict() if dataset.spec else None,
        "count": len(dataset.samples),
        "height": h,
        "width": w,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_length": len(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: not a dataset container")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise TruncatedFileError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise TruncatedFileError(f"{path}: truncated header")
        header = json.loads(blob.decode())
        if header.get("version") != FORMAT_VERSION:
            raise VersionError(f"{path}: unsupported container version {header.get('version')}")
        payload = fh.read(header["payload_length"])
        if len(payload) != header["payload_length"]:
            raise TruncatedFileError(f"{path}: truncated payload")
        if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
            raise ChecksumError(f"{path}: payload checksum mismatch")

    h, w = header["height"], header["width"]
    step = _sample_nbytes(h, w)
    samples = []
    for i in range(header["count"]):
        samples.append(_decode_sample(payload[i * step:(i + 1) * step], h, w))
    spec = DomainSpec.from_dict(header["spec"]) if header["spec"] else None
    return Dataset(name=header["name"], samples=samples, spec=spec)


def _decode_sample(blob: bytes, h, w) -> Sample:
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        return arr

    fields = {f: take((3, h, w) if f.startswith("image") else (h, w)) for f in _FIELDS}
    k = take((4,))
    poses = []
    for _ in range(2):
        r = take((3, 3))
        t = take((3,))
        poses.append(Pose(r, t))
    return Sample(
        image_prev=fields["image_prev"], image=fields["image"], image_next=fields["image_next"],
        sparse=fields["sparse"], mask=fields["mask"],
        intrinsics=Intrinsics(*k), pose_prev=poses[0], pose_next=poses[1], gt=fields["gt"],
    )


def split_indices(count: int, eval_fraction: float, seed: int):
    """Deterministic (train, eval) index split."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    order = rng.permutation(count)
    n_eval = max(1, int(round(eval_fraction * count))) if eval_fraction > 0 else 0
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


# ---------------------------------------------------------------------------
# presets: three indoor-like and three outdoor-like domains
# ---------------------------------------------------------------------------


PRESETS: dict[str, DomainSpec] = {
    # dense RGB-D-style capture of cluttered rooms
    "rooms_dense": DomainSpec(
        name="rooms_dense", d_min=0.2, d_max=5.0, scene="planar-rooms",
        freq_band=(0.25, 0.7), contrast=0.35, pattern="uniform-random", density=0.05,
        motion_translation=0.05, motion_rotation=0.008),
    # feature-track-style sparse points in small rooms
    "rooms_tracks": DomainSpec(
        name="rooms_tracks", d_min=0.2, d_max=5.0, scene="planar-rooms",
        freq_band=(0.8, 1.8), contrast=0.5, pattern="corner-features", density=0.005,
        motion_translation=0.05, motion_rotation=0.012, extent=0.55),
    # room-scan style corridors with furniture boxes
    "scan_corridor": DomainSpec(
        name="scan_corridor", d_min=0.2, d_max=5.0, scene="boxes-corridor",
        freq_band=(0.4, 1.1), contrast=0.25, pattern="uniform-random", density=0.05,
        motion_translation=0.06, motion_rotation=0.006, extent=0.95),
    # lidar-scanline-style grid over wide-range terrain
    "terrain_scan": DomainSpec(
        name="terrain_scan", d_min=1.0, d_max=100.0, scene="ridged-terrain",
        freq_band=(0.01, 0.04), contrast=0.35, pattern="grid", density=0.05,
        motion_translation=0.5, motion_rotation=0.004),
    # wide-range terrain with a different sensor cap
    "terrain_wide": DomainSpec(
        name="terrain_wide", d_min=1.0, d_max=80.0, scene="ridged-terrain",
        freq_band=(0.02, 0.07), contrast=0.28, pattern="grid", density=0.05,
        motion_translation=0.8, motion_rotation=0.003),
    # noiseless synthetic-clean corridor world
    "corridor_clean": DomainSpec(
        name="corridor_clean", d_min=1.0, d_max=100.0, scene="boxes-corridor",
        freq_band=(0.01, 0.05), contrast=0.45, pattern="grid", density=0.05,
        motion_translation=0.6, motion_rotation=0.003),
}


def preset(name: str) -> DomainSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown domain preset {name!r}; have {sorted(PRESETS)}") from None
