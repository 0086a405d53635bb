"""Reverse-mode automatic differentiation over dense float64 arrays.

Eager micrograd-style engine: every operation computes its value
immediately (forward memoization) and records a backward closure on the
output node. ``backward`` walks the acyclic graph once in reverse
topological order and accumulates gradients into every node that
requires them. All values are 64-bit; any NaN/Inf produced by an op is
an immediate error, not a silent state.

Op set: add, sub, mul, div, exp, log, sigmoid, abs, sqrt, strided 2-D
convolution, nearest-neighbor upsampling, bilinear sampling, sum/mean
reductions, concatenation. This is the closure needed for the warp,
the training losses and a small convolutional network; nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError

Array = np.ndarray


def _as_array(x) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(arr)


def _check_finite(data: Array, op: str) -> None:
    # a single reduction detects any NaN/Inf without a boolean temp
    if not np.isfinite(data.sum()):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Graph node: a float64 array plus backward plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.data = _as_array(data)
        _check_finite(self.data, op)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.op = op
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate(self, g: Array, owned: bool = False) -> None:
        if self.grad is None:
            if owned and g.shape == self.data.shape:
                self.grad = g
            else:
                # defensive copy: g may alias a consumer's gradient buffer
                self.grad = np.array(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad += g

    # operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False, op="const")


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True, op="param")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False, op="const")


def _unbroadcast(g: Array, shape) -> Array:
    """Sum a gradient back down to a broadcast operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)



def _acc_ub(t: "Tensor", g: Array, fresh: bool) -> None:
    """Accumulate after unbroadcasting; fresh arrays transfer ownership."""
    ag = _unbroadcast(g, t.data.shape)
    t.accumulate(ag, owned=fresh or ag is not g)

# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc_ub(a, g, False)
            if b.requires_grad:
                _acc_ub(b, g, False)
        out._backward_fn = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc_ub(a, g, False)
            if b.requires_grad:
                _acc_ub(b, -g, True)
        out._backward_fn = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc_ub(a, g * b.data, True)
            if b.requires_grad:
                _acc_ub(b, g * a.data, True)
        out._backward_fn = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data
    out = Tensor(value, a.requires_grad or b.requires_grad, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc_ub(a, g / b.data, True)
            if b.requires_grad:
                _acc_ub(b, -g * a.data / (b.data * b.data), True)
        out._backward_fn = _bw
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    out = Tensor(value, a.requires_grad, (a,), "exp")
    if out.requires_grad:
        def _bw(g, value=value):
            a.accumulate(g * value, owned=True)
        out._backward_fn = _bw
    return out


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    out = Tensor(value, a.requires_grad, (a,), "log")
    if out.requires_grad:
        def _bw(g):
            a.accumulate(g / a.data, owned=True)
        out._backward_fn = _bw
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    value = _sigmoid_value(a.data)
    out = Tensor(value, a.requires_grad, (a,), "sigmoid")
    if out.requires_grad:
        def _bw(g, value=value):
            a.accumulate(g * value * (1.0 - value), owned=True)
        out._backward_fn = _bw
    return out


def _sigmoid_value(x: Array) -> Array:
    # overflow-free: exp of a nonpositive argument only
    t = np.exp(-np.abs(x))
    inv = 1.0 / (1.0 + t)
    return np.where(x >= 0, inv, t * inv)


def silu(a) -> Tensor:
    """Fused x * sigmoid(x); same math as mul(a, sigmoid(a)) in one node."""
    a = _lift(a)
    s = _sigmoid_value(a.data)
    out = Tensor(a.data * s, a.requires_grad, (a,), "silu")
    if out.requires_grad:
        def _bw(g):
            a.accumulate(g * (s * (1.0 + a.data * (1.0 - s))), owned=True)
        out._backward_fn = _bw
    return out


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    a = _lift(a)
    out = Tensor(np.abs(a.data), a.requires_grad, (a,), "abs")
    if out.requires_grad:
        sgn = np.sign(a.data)

        def _bw(g):
            a.accumulate(g * sgn, owned=True)
        out._backward_fn = _bw
    return out


def sqrt(a) -> Tensor:
    a = _lift(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.data)
    out = Tensor(value, a.requires_grad, (a,), "sqrt")
    if out.requires_grad:
        def _bw(g, value=value):
            a.accumulate(g * 0.5 / value, owned=True)
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.data.shape))
        out._backward_fn = _bw
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(count))


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    req = any(p.requires_grad for p in parts)
    out = Tensor(data, req, tuple(parts), "concat")
    if req:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def _bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    p.accumulate(g[tuple(idx)])
        out._backward_fn = _bw
    return out


def split(x, sizes, axis: int = 0) -> list:
    """Inverse of concat: cut a tensor into consecutive blocks along an axis."""
    x = _lift(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ContractError(f"split sizes {sizes} do not cover axis extent {x.data.shape[axis]}")
    outs = []
    offset = 0
    for size in sizes:
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(offset, offset + size)
        idx = tuple(idx)
        piece = Tensor(x.data[idx], x.requires_grad, (x,), "split")
        if x.requires_grad:
            def _bw(g, idx=idx):
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[idx] += g
            piece._backward_fn = _bw
        outs.append(piece)
        offset += size
    return outs


def box_sum3(x) -> Tensor:
    """3x3 zero-padded window sum over the last two axes (integral-image form).

    Semantically a stride-1 convolution with an all-ones 3x3 kernel per
    channel; the windowing is self-adjoint, so backward reuses the same
    window sum on the incoming gradient.
    """
    x = _lift(x)
    out = Tensor(_window_sum3(x.data), x.requires_grad, (x,), "box_sum3")
    if out.requires_grad:
        def _bw(g):
            x.accumulate(_window_sum3(g), owned=True)
        out._backward_fn = _bw
    return out


def _window_sum3(a: Array) -> Array:
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(a, pad)
    integ = p.cumsum(axis=-2).cumsum(axis=-1)
    zero_pad = [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)]
    integ = np.pad(integ, zero_pad)  # exclusive prefix sums, shape (h+3, w+3)
    return (integ[..., 3:3 + h, 3:3 + w] - integ[..., :h, 3:3 + w]
            - integ[..., 3:3 + h, :w] + integ[..., :h, :w])


# ---------------------------------------------------------------------------
# spatial ops (single-sample form: channels first, no batch axis)
# ---------------------------------------------------------------------------


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 2-D cross-correlation with kernel w: (O,C,KH,KW).

    Input may be (H,W), (C,H,W), or batched (B,C,H,W); output has the
    matching (O,OH,OW) or (B,O,OH,OW) shape.
    """
    x, w = _lift(x), _lift(w)
    if w.data.ndim != 4 or x.data.ndim not in (2, 3, 4):
        raise ContractError(f"conv2d expects image-like input and (O,C,KH,KW), got {x.data.shape} and {w.data.shape}")
    in_ndim = x.data.ndim
    xdata = x.data
    if in_ndim == 2:
        xdata = xdata[None, None]
    elif in_ndim == 3:
        xdata = xdata[None]
    b, c, h, wdt = xdata.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ContractError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wdt + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ContractError("conv2d output would be empty")

    xp = np.pad(xdata, ((0, 0), (0, 0), (p, p), (p, p))) if p else xdata
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]  # (B,C,OH,OW,KH,KW)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    value = (cols @ wmat.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    if in_ndim != 4:
        value = value[0]
    out = Tensor(value, x.requires_grad or w.requires_grad, (x, w), "conv2d")
    if out.requires_grad:
        def _bw(g):
            g4 = g.reshape(b, o, oh, ow)
            gflat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
            if w.requires_grad:
                w.accumulate((gflat.T @ cols).reshape(o, c, kh, kw), owned=True)
            if x.requires_grad:
                if s == 1 and p <= kh - 1 and p <= kw - 1:
                    # transposed correlation: one im2col pass instead of a scatter
                    wt = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                    gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1 - p,) * 2, (kw - 1 - p,) * 2))
                    gx = _corr4d(gp, wt)
                else:
                    gcols = (gflat @ wmat).reshape(b, oh, ow, c, kh, kw)
                    gxp = np.zeros((b, c, h + 2 * p, wdt + 2 * p))
                    for ky in range(kh):
                        for kx in range(kw):
                            gxp[:, :, ky:ky + oh * s:s, kx:kx + ow * s:s] += gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
                    gx = gxp[:, :, p:p + h, p:p + wdt] if p else gxp
                if in_ndim == 2:
                    gx = gx[0, 0]
                elif in_ndim == 3:
                    gx = gx[0]
                x.accumulate(gx.reshape(x.data.shape), owned=True)
        out._backward_fn = _bw
    return out


def _corr4d(x4: Array, k4: Array) -> Array:
    """Plain stride-1 unpadded cross-correlation of (B,C,H,W) with (O,C,KH,KW)."""
    b, c, h, w = x4.shape
    o, _, kh, kw = k4.shape
    oh, ow = h - kh + 1, w - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x4, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)
    return (cols @ k4.reshape(o, c * kh * kw).T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)


def conv2d_nhwc(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last variant of conv2d: x (B,H,W,C), w (O,C,KH,KW) -> (B,OH,OW,O).

    Mathematically identical to conv2d; the layout keeps every im2col
    copy long-run contiguous, which is what the training loop runs on.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError(f"conv2d_nhwc expects (B,H,W,C) and (O,C,KH,KW), got {x.data.shape} and {w.data.shape}")
    b, h, wdt, c = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ContractError(f"conv2d_nhwc channel mismatch: input {c}, kernel {cw}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wdt + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ContractError("conv2d_nhwc output would be empty")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols = _cols_nhwc(xp, kh, kw, s, oh, ow)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(o, kh * kw * c)
    value = (cols @ wmat.T).reshape(b, oh, ow, o)
    out = Tensor(value, x.requires_grad or w.requires_grad, (x, w), "conv2d")
    if out.requires_grad:
        def _bw(g):
            gflat = g.reshape(b * oh * ow, o)
            if w.requires_grad:
                gw = (gflat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
                w.accumulate(np.ascontiguousarray(gw), owned=True)
            if x.requires_grad:
                if s == 1 and p <= kh - 1 and p <= kw - 1:
                    wt = np.ascontiguousarray(
                        w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                    wtmat = np.ascontiguousarray(wt.transpose(0, 2, 3, 1)).reshape(c, kh * kw * o)
                    gp = np.pad(g, ((0, 0), (kh - 1 - p,) * 2, (kw - 1 - p,) * 2, (0, 0)))
                    gcols = _cols_nhwc(gp, kh, kw, 1, h, wdt)
                    gx = (gcols @ wtmat.T).reshape(b, h, wdt, c)
                else:
                    gcols = (gflat @ wmat).reshape(b, oh, ow, kh, kw, c)
                    gxp = np.zeros((b, h + 2 * p, wdt + 2 * p, c))
                    for ky in range(kh):
                        for kx in range(kw):
                            gxp[:, ky:ky + oh * s:s, kx:kx + ow * s:s, :] += gcols[:, :, :, ky, kx, :]
                    gx = gxp[:, p:p + h, p:p + wdt, :] if p else gxp
                x.accumulate(gx, owned=True)
        out._backward_fn = _bw
    return out


def _cols_nhwc(xp: Array, kh: int, kw: int, s: int, oh: int, ow: int) -> Array:
    b, _, _, c = xp.shape
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::s, ::s]  # (B,OH,OW,C,KH,KW)
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(b * oh * ow, kh * kw * c)


def upsample_nearest(x, factor: int = 2, axes=(-2, -1)) -> Tensor:
    """Nearest-neighbor upsampling by an integer factor along two axes."""
    x = _lift(x)
    if x.data.ndim not in (3, 4):
        raise ContractError(f"upsample_nearest expects a 3-D or 4-D tensor, got {x.data.shape}")
    f = int(factor)
    a0, a1 = (ax % x.data.ndim for ax in axes)
    value = x.data.repeat(f, axis=a0).repeat(f, axis=a1)
    out = Tensor(value, x.requires_grad, (x,), "upsample_nearest")
    if out.requires_grad:
        def _bw(g):
            shape = []
            reduce_axes = []
            for i, n in enumerate(x.data.shape):
                if i in (a0, a1):
                    shape.extend([n, f])
                    reduce_axes.append(len(shape) - 1)
                else:
                    shape.append(n)
            x.accumulate(g.reshape(shape).sum(axis=tuple(reduce_axes)))
        out._backward_fn = _bw
    return out


def bilinear_sample(image: Array, u, v) -> Tensor:
    """Sample a constant image (C,H,W) at continuous pixel coordinates.

    u, v are (Ho,Wo) maps of column/row coordinates measured at pixel
    centers; gradients flow into the coordinates only. Coordinates are
    clamped for indexing, so callers must mask out-of-range pixels via
    their own validity mask. Exact integer coordinates reproduce the
    pixel value exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractError(f"bilinear_sample expects image (C,H,W), got {image.shape}")
    u, v = _lift(u), _lift(v)
    if u.data.shape != v.data.shape:
        raise ContractError("bilinear_sample coordinate shape mismatch")
    c, h, w = image.shape

    uc = np.clip(u.data, 0.0, w - 1.0)
    vc = np.clip(v.data, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(uc), w - 2).astype(np.intp) if w > 1 else np.zeros_like(uc, dtype=np.intp)
    v0 = np.minimum(np.floor(vc), h - 2).astype(np.intp) if h > 1 else np.zeros_like(vc, dtype=np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = uc - u0
    fv = vc - v0

    i00 = image[:, v0, u0]
    i01 = image[:, v0, u1]
    i10 = image[:, v1, u0]
    i11 = image[:, v1, u1]
    top = i00 + fu * (i01 - i00)
    bot = i10 + fu * (i11 - i10)
    value = top + fv * (bot - top)

    out = Tensor(value, u.requires_grad or v.requires_grad, (u, v), "bilinear_sample")
    if out.requires_grad:
        in_u = ((u.data >= 0.0) & (u.data <= w - 1.0)).astype(np.float64)
        in_v = ((v.data >= 0.0) & (v.data <= h - 1.0)).astype(np.float64)

        def _bw(g):
            if u.requires_grad:
                du = (1.0 - fv) * (i01 - i00) + fv * (i11 - i10)
                u.accumulate((g * du).sum(axis=0) * in_u, owned=True)
            if v.requires_grad:
                dv = bot - top
                v.accumulate((g * dv).sum(axis=0) * in_v, owned=True)
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# graph evaluation
# ---------------------------------------------------------------------------


def forward(root: Tensor) -> Array:
    """Value at the root; intermediates are memoized at construction."""
    return root.data


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into .grad of every grad-requiring node.

    The root must be scalar. Each reachable node is visited exactly once
    in reverse topological order. Leaves the root never depended on keep
    grad None (read as exact zeros).
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    root.accumulate(np.ones_like(root.data))
    for node in reversed(topo):
        fn = node._backward_fn
        if fn is not None:
            fn(node.grad)
            # single-use graph: release links and intermediate gradients so
            # memory frees by refcount as the sweep proceeds
            node._backward_fn = None
            node.parents = ()
            node.grad = None


def gradient_of(root: Tensor, leaves) -> list[Array]:
    """backward() then read leaf gradients, exact zeros where untouched."""
    backward(root)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


# ---------------------------------------------------------------------------
# named parameter vectors
# ---------------------------------------------------------------------------


class ParamVector:
    """Ordered named float64 segments; flatten/unflatten is a bijection."""

    def __init__(self, pairs):
        names = []
        arrays = {}
        for name, arr in pairs:
            if name in arrays:
                raise ContractError(f"duplicate segment name {name!r}")
            names.append(name)
            arrays[name] = _as_array(arr)
        self.names: tuple[str, ...] = tuple(names)
        self.arrays: dict[str, Array] = arrays

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def __getitem__(self, name: str) -> Array:
        return self.arrays[name]

    def items(self):
        for name in self.names:
            yield name, self.arrays[name]

    def flatten(self) -> Array:
        return np.concatenate([self.arrays[n].ravel() for n in self.names]) if self.names else np.zeros(0)

    def unflatten(self, flat: Array) -> "ParamVector":
        flat = _as_array(flat).ravel()
        if flat.size != self.size:
            raise ContractError(f"flat length {flat.size} != total segment length {self.size}")
        out = []
        offset = 0
        for name in self.names:
            shape = self.arrays[name].shape
            n = self.arrays[name].size
            out.append((name, flat[offset:offset + n].reshape(shape).copy()))
            offset += n
        return ParamVector(out)

    def copy(self) -> "ParamVector":
        return ParamVector([(n, a.copy()) for n, a in self.items()])

    def same_structure(self, other: "ParamVector") -> bool:
        return self.names == other.names and all(
            self.arrays[n].shape == other.arrays[n].shape for n in self.names
        )

    def as_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad=requires_grad, op="param") for n, a in self.items()}

    def __repr__(self):
        return f"ParamVector({len(self.names)} segments, {self.size} values)"


def grads_from_tensors(template: ParamVector, tensors: dict[str, Tensor]) -> ParamVector:
    """Collect leaf gradients into a ParamVector shaped like `template`."""
    pairs = []
    for name, arr in template.items():
        t = tensors[name]
        pairs.append((name, t.grad if t.grad is not None else np.zeros_like(arr)))
    return ParamVector(pairs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def check_gradients(fn, point: ParamVector, step: float, indices=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps a dict of named Tensors to a scalar Tensor. Error per
    coordinate is |analytic - numeric| / max(1, |numeric|); `indices`
    restricts the probe to a subset of flat coordinates.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    tensors = point.as_tensors(requires_grad=True)
    out = fn(tensors)
    if out.data.size != 1:
        raise ContractError("check_gradients function must return a scalar")
    backward(out)
    analytic = grads_from_tensors(point, tensors).flatten()

    flat = point.flatten()
    if indices is None:
        indices = range(flat.size)

    def feval(vec):
        p = point.unflatten(vec)
        value = fn(p.as_tensors(requires_grad=False)).item()
        if not np.isfinite(value):
            raise NumericError("non-finite function value during gradient check")
        return value

    worst = 0.0
    for i in indices:
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = feval(bumped)
        bumped[i] = flat[i] - step
        f_minus = feval(bumped)
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    method: str = "adam"  # "adam" | "sgd"

    def validate(self):
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.method not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer method {self.method!r}")


@dataclass
class OptimizerState:
    step: int = 0
    m: Array = field(default_factory=lambda: np.zeros(0))
    v: Array = field(default_factory=lambda: np.zeros(0))


def optimizer_step(params: ParamVector, grads: ParamVector, state: OptimizerState | None,
                   config: OptimizerConfig) -> tuple[ParamVector, OptimizerState]:
    """One deterministic update; returns fresh params and state."""
    config.validate()
    if not params.same_structure(grads):
        raise ContractError("params and grads have different structure")
    theta = params.flatten()
    g = grads.flatten()
    _check_finite(g, "optimizer_step(gradient)")

    if state is None:
        state = OptimizerState(step=0, m=np.zeros_like(theta), v=np.zeros_like(theta))
    if state.m.size != theta.size:
        raise ContractError("optimizer state does not match parameter length")

    if config.method == "sgd":
        new_theta = theta - config.lr * g
        new_state = OptimizerState(state.step + 1, state.m.copy(), state.v.copy())
    else:
        t = state.step + 1
        m = config.beta1 * state.m + (1.0 - config.beta1) * g
        v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        new_theta = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_state = OptimizerState(t, m, v)
    _check_finite(new_theta, "optimizer_step(update)")
    return params.unflatten(new_theta), new_state
