"""Compact encoder-decoder depth completion network.

Input is a 5-channel stack (RGB, range-normalized sparse depth,
validity mask). Three stride-2 encoder stages feed a mirrored decoder
with skip connections; a sigmoid head maps logits into the configured
metric depth interval, so predictions are strictly inside
(d_min, d_max). The globally pooled bottleneck doubles as the sample
representation used for buffer-retention similarity checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .errors import ContractError


@dataclass(frozen=True)
class DepthNetConfig:
    widths: tuple = (16, 32, 64)
    d_min: float = 0.2
    d_max: float = 5.0
    in_channels: int = 5

    def __post_init__(self):
        if not (self.d_max > self.d_min > 0):
            raise ContractError("need d_max > d_min > 0")
        if len(self.widths) < 1:
            raise ContractError("at least one encoder stage required")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def repr_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DepthNetConfig":
        return cls(widths=tuple(d["widths"]), d_min=d["d_min"], d_max=d["d_max"],
                   in_channels=d.get("in_channels", 5))


def _layer_plan(config: DepthNetConfig):
    """(name, out_channels, in_channels, kernel) for every conv in forward order."""
    plan = []
    prev = config.in_channels
    for i, width in enumerate(config.widths):
        plan.append((f"enc{i}.{{}}", width, prev, 3))
        prev = width
    # decoder mirrors the encoder; skip source is the matching encoder input
    skips = [config.in_channels] + list(config.widths[:-1])
    for i in reversed(range(config.stages)):
        out_ch = config.widths[i - 1] if i > 0 else config.widths[0]
        plan.append((f"dec{i}.{{}}", out_ch, prev + skips[i], 3))
        prev = out_ch
    plan.append(("head.{}", 1, prev, 1))  # 1x1 projection to depth logits
    return plan


def init_params(config: DepthNetConfig, seed: int) -> dc.ParamVector:
    """Fan-in-scaled uniform initialization, deterministic in the seed."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    pairs = []
    for name, out_ch, in_ch, k in _layer_plan(config):
        fan_in = in_ch * k * k
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        b = rng.uniform(-bound, bound, size=(out_ch,))
        pairs.append((name.format("w"), w))
        pairs.append((name.format("b"), b))
    return dc.ParamVector(pairs)


def silu(x: dc.Tensor) -> dc.Tensor:
    return dc.silu(x)


def _as_param_tensors(params) -> dict:
    if isinstance(params, dc.ParamVector):
        return params.as_tensors(requires_grad=False)
    return params


def assemble_input(image: np.ndarray, sparse: np.ndarray, mask: np.ndarray,
                   config: DepthNetConfig) -> np.ndarray:
    """Channels-last (H,W,5) network input stack."""
    image = np.asarray(image, dtype=np.float64)
    sparse = np.asarray(sparse, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != config.in_channels - 2:
        raise ContractError(f"expected image with {config.in_channels - 2} channels")
    if sparse.shape != image.shape[1:] or mask.shape != image.shape[1:]:
        raise ContractError("image/sparse/mask spatial shapes disagree")
    return np.stack([*image, sparse / config.d_max, mask], axis=-1)


def _assemble_cached(sample, config: DepthNetConfig) -> np.ndarray:
    cache = getattr(sample, "cache", None)
    key = ("input_stack", config.d_max, config.in_channels)
    if cache is not None and key in cache:
        return cache[key]
    stack = assemble_input(sample.image, sample.sparse, sample.mask, config)
    if cache is not None:
        cache[key] = stack
    return stack


def _conv_block(x: dc.Tensor, p: dict, name: str, stride: int) -> dc.Tensor:
    pre = dc.add(dc.conv2d_nhwc(x, p[f"{name}.w"], stride=stride, padding=1), p[f"{name}.b"])
    return silu(pre)


def _encode(x_in: dc.Tensor, p: dict, config: DepthNetConfig):
    features = [x_in]
    h = x_in
    for i in range(config.stages):
        h = _conv_block(h, p, f"enc{i}", stride=2)
        features.append(h)
    return features  # [input, e0, e1, ..., bottleneck]


def _forward_stack(stack: np.ndarray, p: dict, config: DepthNetConfig) -> dc.Tensor:
    """(B,H,W,5) input stack -> (B,H,W,1) depth in (d_min, d_max)."""
    b, h, w, _ = stack.shape
    factor = 2 ** config.stages
    if h % factor or w % factor:
        raise ContractError(f"spatial size {h}x{w} must be divisible by {factor}")
    features = _encode(dc.constant(stack), p, config)
    out = features[-1]
    for i in reversed(range(config.stages)):
        up = dc.upsample_nearest(out, 2, axes=(1, 2))
        out = _conv_block(dc.concat([up, features[i]], axis=3), p, f"dec{i}", stride=1)
    logits = dc.add(dc.conv2d_nhwc(out, p["head.w"], stride=1, padding=0), p["head.b"])
    return dc.add(dc.mul(dc.sigmoid(logits), config.d_max - config.d_min), config.d_min)


def depth_net_forward(image, sparse, mask, params, config: DepthNetConfig) -> dc.Tensor:
    """Dense depth prediction (H,W); differentiable w.r.t. params."""
    p = _as_param_tensors(params)
    stack = assemble_input(image, sparse, mask, config)[None]
    out = _forward_stack(stack, p, config)
    return dc.reduce_sum(out, axis=(0, 3))  # (1,H,W,1) -> (H,W)


def depth_net_forward_batch(samples, params, config: DepthNetConfig) -> list:
    """Batched forward over a list of samples; returns per-sample (H,W) Tensors.

    The convolution stack runs once on the stacked batch; per-sample
    depth maps are then split back out so the warping losses (which
    need per-sample poses) can consume them individually.
    """
    p = _as_param_tensors(params)
    stack = np.stack([_assemble_cached(s, config) for s in samples])
    out = _forward_stack(stack, p, config)
    pieces = dc.split(out, [1] * len(samples), axis=0)  # each (1,H,W,1)
    return [dc.reduce_sum(piece, axis=(0, 3)) for piece in pieces]


def predict_depth(sample, params, config: DepthNetConfig) -> np.ndarray:
    """Inference-only forward pass on a sample."""
    out = depth_net_forward(sample.image, sample.sparse, sample.mask,
                            _as_param_tensors(params), config)
    return out.data


def predict_depth_batch(samples, params, config: DepthNetConfig) -> list:
    """Inference-only batched forward; list of (H,W) arrays."""
    if isinstance(params, dc.ParamVector):
        p = params.as_tensors(requires_grad=False)
    else:
        p = {n: dc.constant(t.data) for n, t in params.items()}
    return [o.data for o in depth_net_forward_batch(samples, p, config)]


def encode_representation(sample, params, config: DepthNetConfig) -> np.ndarray:
    """Globally pooled bottleneck activations; fixed length, deterministic."""
    p = _as_param_tensors(params)
    x = _assemble_cached(sample, config)[None]
    features = _encode(dc.constant(x), p, config)
    bottleneck = features[-1].data  # (1, h', w', C)
    return bottleneck.mean(axis=(0, 1, 2))


def save_checkpoint(path, params: dc.ParamVector, config: DepthNetConfig, seed: int,
                    extra: dict | None = None) -> None:
    """Bit-exact parameter snapshot with config and seed."""
    meta = {"config": config.to_dict(), "seed": int(seed), "extra": extra or {},
            "names": list(params.names)}
    arrays = {f"param/{name}": arr for name, arr in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path):
    """Returns (params, config, seed, extra)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        params = dc.ParamVector([(n, data[f"param/{n}"]) for n in meta["names"]])
    return params, DepthNetConfig.from_dict(meta["config"]), meta["seed"], meta["extra"]
