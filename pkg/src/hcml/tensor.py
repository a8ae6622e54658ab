"""Dense tensor value type and differentiable primitives.

Every primitive takes and returns :class:`Tensor` objects. When any input
requires a gradient the output records its parents together with a closure
mapping the output gradient to one gradient per parent; :mod:`hcml.autodiff`
walks those records in reverse topological order.

Video tensors are laid out ``(B, C, T, H, W)``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "no_grad", "is_grad_enabled", "as_tensor",
    "add", "sub", "mul", "scale", "neg", "sum", "mean", "mean_axes", "reshape",
    "transpose", "take", "concat", "concat_channels", "relu", "matmul", "linear",
    "conv1x1x1", "conv3x3_spatial", "channel_affine", "charbonnier",
    "normalize", "cosine_sim", "correlation", "bilinear_warp",
    "softmax", "cross_entropy", "gather_vectors", "COSINE_EPS",
]

#: Norm below which a feature vector is treated as dead (cosine similarity 0).
COSINE_EPS = 1e-12

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised on incompatible operand extents."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Immutable row-major array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Mean over ``axes`` (dropped from the result)."""
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / n,)

    return _make(out, (a,), backward, "mean_axes")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis``; repeated indices accumulate on the way back."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        sel = [slice(None)] * a.ndim
        sel[axis] = idx
        np.add.at(ga, tuple(sel), g)
        return (ga,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    axis = axis % tensors[0].ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
                other[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(
                f"concat: extent mismatch {tuple(tensors[0].shape)} vs {t.shape} off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Rows of ``x`` (N, C_in) mapped by ``weight`` (C_out, C_in) plus ``bias``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: dimension mismatch input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward, "linear")


# --------------------------------------------------------------------------
# convolutions


def conv1x1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel mixing of a ``(B, C, T, H, W)`` tensor."""
    if x.ndim != 5 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv1x1x1: dimension mismatch input {x.shape} vs weight {weight.shape}")
    w = weight.data
    out = np.einsum("oc,bcthw->bothw", w, x.data, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def backward(g):
        gx = np.einsum("oc,bothw->bcthw", w, g, optimize=True)
        gw = np.einsum("bothw,bcthw->oc", g, x.data, optimize=True)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward, "conv1x1x1")


def conv3x3_spatial(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                    stride: int = 1) -> Tensor:
    """Per-frame 3x3 cross-correlation, zero padding 1.

    ``weight`` is ``(C_out, C_in, 3, 3)``; output spatial extent is
    ``ceil(H / stride)``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 5 or weight.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(
            f"conv3x3_spatial: dimension mismatch input {x.shape} vs weight {weight.shape}")
    B, C, T, H, W = x.shape
    O = weight.shape[0]
    s = stride
    Ho, Wo = -(-H // s), -(-W // s)
    N, Hp, Wp = B * T, H + 2, W + 2
    # channel-last padded frames
    padded = np.pad(x.data.transpose(0, 2, 3, 4, 1).reshape(N, H, W, C),
                    ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [(k, (slice(None), slice(ki, ki + (Ho - 1) * s + 1, s),
                 slice(kj, kj + (Wo - 1) * s + 1, s)))
            for k, (ki, kj) in enumerate((i, j) for i in range(3) for j in range(3))]
    if 9 * O <= 2 * 9 * C:
        # one matmul per pixel against all 9 taps, then shift-and-sum the outputs
        wall = weight.data.transpose(1, 2, 3, 0).reshape(C, 9 * O)
        xflat = padded.reshape(-1, C)
        y = (xflat @ wall).reshape(N, Hp, Wp, 9, O)
        out = np.zeros((N, Ho, Wo, O), dtype=y.dtype)
        for k, sl in taps:
            out += y[sl + (k,)]
        cols = None
    else:
        cols = np.empty((N, Ho, Wo, 9, C), dtype=x.dtype)
        for k, sl in taps:
            cols[:, :, :, k] = padded[sl]
        cols = cols.reshape(-1, 9 * C)
        wmat = weight.data.transpose(2, 3, 1, 0).reshape(9 * C, O)
        out = (cols @ wmat).reshape(N, Ho, Wo, O)
    if bias is not None:
        out += bias.data
    out = out.reshape(B, T, Ho, Wo, O).transpose(0, 4, 1, 2, 3)

    def backward(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(N, Ho, Wo, O)
        if cols is None:
            gy = np.zeros((N, Hp, Wp, 9, O), dtype=g.dtype)
            for k, sl in taps:
                gy[sl + (k,)] = gn
            gy = gy.reshape(-1, 9 * O)
            gw = (xflat.T @ gy).reshape(C, 3, 3, O).transpose(3, 0, 1, 2)
            gpad = (gy @ wall.T).reshape(N, Hp, Wp, C)
        else:
            gflat = gn.reshape(-1, O)
            gw = (cols.T @ gflat).reshape(3, 3, C, O).transpose(3, 2, 0, 1)
            gcols = (gflat @ wmat.T).reshape(N, Ho, Wo, 9, C)
            gpad = np.zeros(padded.shape, dtype=g.dtype)
            for k, sl in taps:
                gpad[sl] += gcols[:, :, :, k]
        gx = gpad[:, 1: H + 1, 1: W + 1].reshape(B, T, H, W, C).transpose(0, 4, 1, 2, 3)
        grads = (gx, np.ascontiguousarray(gw))
        if bias is not None:
            grads += (gn.reshape(-1, O).sum(axis=0),)
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(np.ascontiguousarray(out), parents, backward, "conv3x3_spatial")


def channel_affine(x: Tensor, scale_: Tensor, shift: Tensor) -> Tensor:
    """``x * scale + shift`` with one scale/shift per channel (axis 1)."""
    if scale_.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine: dimension mismatch {x.shape} vs {scale_.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    s = scale_.data.reshape(view)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return g * s, (g * x.data).sum(axis=red), g.sum(axis=red)

    return _make(x.data * s + shift.data.reshape(view), (x, scale_, shift), backward,
                 "channel_affine")


# --------------------------------------------------------------------------
# robust penalty, similarity


def charbonnier(z: Tensor, alpha: float = 0.45, eps: float = 1e-3) -> Tensor:
    """Generalised Charbonnier penalty ``(z^2 + eps^2)^alpha``, elementwise."""
    base = z.data * z.data + z.dtype.type(eps * eps)
    out = base ** z.dtype.type(alpha)

    def backward(g):
        return (g * z.dtype.type(2 * alpha) * z.data * base ** z.dtype.type(alpha - 1),)

    return _make(out, (z,), backward, "charbonnier")


def normalize(x: Tensor, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    """Unit-normalise along ``axis``; vectors with norm < eps map to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    live = norm >= eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0).astype(x.dtype)
    u = x.data * inv

    def backward(g):
        dot = (g * u).sum(axis=axis, keepdims=True)
        return ((g - u * dot) * inv,)

    return _make(u, (x,), backward, "normalize")


def cosine_sim(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of two vectors; 0 if either norm is below ``eps``."""
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_sim: length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu < eps or nv < eps:
        return _make(np.asarray(0.0, dtype=u.dtype), (u, v),
                     lambda g: (np.zeros_like(u.data), np.zeros_like(v.data)), "cosine_sim")
    c = float(u.data @ v.data) / (nu * nv)

    def backward(g):
        gu = (v.data / (nu * nv) - c * u.data / nu ** 2) * g
        gv = (u.data / (nu * nv) - c * v.data / nv ** 2) * g
        return gu, gv

    return _make(np.asarray(c, dtype=u.dtype), (u, v), backward, "cosine_sim")


def displacements(max_disp: int, stride: int) -> list[tuple[int, int]]:
    """(dy, dx) offsets in channel order: row-major over dy then dx, negative first."""
    if max_disp < 0 or stride < 1:
        raise ValueError(f"invalid cost-volume params d={max_disp}, s={stride}")
    r = max_disp // stride
    steps = [k * stride for k in range(-r, r + 1)]
    return [(dy, dx) for dy in steps for dx in steps]


def correlation(a: Tensor, b: Tensor, max_disp: int, stride: int = 1) -> Tensor:
    """Channel dot products between ``a`` and displaced ``b``.

    Both operands are ``(B, C, T, H, W)``. Output channel ``m`` at (y, x)
    holds ``<a[..., y, x], b[..., y + dy_m, x + dx_m]>``; out-of-bounds
    targets contribute 0.
    """
    _check_same(a, b, "correlation")
    offs = displacements(max_disp, stride)
    D = (max_disp // stride) * stride
    B, C, T, H, W = a.shape
    bp = np.pad(b.data, ((0, 0), (0, 0), (0, 0), (D, D), (D, D)))
    out = np.empty((B, len(offs), T, H, W), dtype=np.result_type(a.dtype, b.dtype))
    for m, (dy, dx) in enumerate(offs):
        win = bp[:, :, :, D + dy: D + dy + H, D + dx: D + dx + W]
        out[:, m] = np.einsum("bcthw,bcthw->bthw", a.data, win, optimize=True)

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        gbp = np.zeros(bp.shape, dtype=g.dtype)
        for m, (dy, dx) in enumerate(offs):
            gm = g[:, m][:, None]
            ga += gm * bp[:, :, :, D + dy: D + dy + H, D + dx: D + dx + W]
            gbp[:, :, :, D + dy: D + dy + H, D + dx: D + dx + W] += gm * a.data
        return ga, np.ascontiguousarray(gbp[:, :, :, D: D + H, D: D + W])

    return _make(out, (a, b), backward, "correlation")


# --------------------------------------------------------------------------
# warping


def bilinear_warp(source: Tensor, flow: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample ``source`` at ``(x + U, y + V)`` with bilinear interpolation.

    ``source`` is ``(B, C, T, H, W)``, ``flow`` is ``(B, 2, T, H, W)`` with
    channel 0 horizontal. Returns the warped tensor and a ``(B, 1, T, H, W)``
    validity mask that is 0 where the sample leaves ``[0, W-1] x [0, H-1]``.
    Corners outside the image read as 0.
    """
    B, C, T, H, W = source.shape
    if flow.shape != (B, 2, T, H, W):
        raise ShapeError(f"bilinear_warp: flow {flow.shape} does not match source {source.shape}")
    dt = np.result_type(source.dtype, flow.dtype)
    ys, xs = np.meshgrid(np.arange(H, dtype=dt), np.arange(W, dtype=dt), indexing="ij")
    px = xs + flow.data[:, 0]
    py = ys + flow.data[:, 1]
    mask = ((px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1))
    x0f, y0f = np.floor(px), np.floor(py)
    wx, wy = px - x0f, py - y0f
    x0, y0 = x0f.astype(np.intp), y0f.astype(np.intp)

    # flat gather over a (B, T, H, W) plane; channel handled by broadcasting
    planes = source.data.transpose(0, 2, 3, 4, 1).reshape(B * T * H * W, C)
    bt = (np.arange(B)[:, None] * T + np.arange(T)[None, :])[:, :, None, None] * (H * W)

    corners = []
    for cy, cx, wgt, dwx, dwy in (
            (0, 0, (1 - wx) * (1 - wy), -(1 - wy), -(1 - wx)),
            (0, 1, wx * (1 - wy), (1 - wy), -wx),
            (1, 0, (1 - wx) * wy, -wy, (1 - wx)),
            (1, 1, wx * wy, wy, wx)):
        xi, yi = x0 + cx, y0 + cy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        flat = (bt + np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)).reshape(-1)
        corners.append((flat, ok.reshape(-1), wgt.reshape(-1), dwx.reshape(-1), dwy.reshape(-1)))

    out = np.zeros((B * T * H * W, C), dtype=dt)
    vals = []
    for flat, ok, wgt, _, _ in corners:
        v = planes[flat] * ok[:, None]
        vals.append(v)
        out += wgt[:, None] * v
    warped = out.reshape(B, T, H, W, C).transpose(0, 4, 1, 2, 3)

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, C)
        gsrc = np.zeros_like(planes, dtype=g.dtype)
        gu = np.zeros(gflat.shape[0], dtype=g.dtype)
        gv = np.zeros(gflat.shape[0], dtype=g.dtype)
        for (flat, ok, wgt, dwx, dwy), v in zip(corners, vals):
            contrib = gflat * (wgt * ok)[:, None]
            for c in range(C):
                gsrc[:, c] += np.bincount(flat, weights=contrib[:, c], minlength=planes.shape[0])
            gv_dot = (gflat * v).sum(axis=1)
            gu += gv_dot * dwx
            gv += gv_dot * dwy
        gsource = gsrc.reshape(B, T, H, W, C).transpose(0, 4, 1, 2, 3)
        gflow = np.stack([gu.reshape(B, T, H, W), gv.reshape(B, T, H, W)], axis=1)
        return np.ascontiguousarray(gsource), gflow

    result = _make(np.ascontiguousarray(warped), (source, flow), backward, "bilinear_warp")
    return result, mask[:, None].astype(dt)


# --------------------------------------------------------------------------
# classification / gathering


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the labelled class."""
    labels = np.asarray(labels, dtype=np.intp)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {N} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(N), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1
        return (p * (g / N),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def gather_vectors(x: Tensor, b, t, hw) -> Tensor:
    """Channel vectors of a ``(B, C, T, H, W)`` tensor at (b, t, flat h*W+w) triples -> (n, C)."""
    B, C, T, H, W = x.shape
    flat = (np.asarray(b) * T + np.asarray(t)) * (H * W) + np.asarray(hw)
    rows = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, C)

    def backward(g):
        grow = np.zeros(rows.shape, dtype=g.dtype)
        np.add.at(grow, flat, g)
        return (np.ascontiguousarray(grow.reshape(B, T, H, W, C).transpose(0, 4, 1, 2, 3)),)

    return _make(rows[flat], (x,), backward, "gather_vectors")
