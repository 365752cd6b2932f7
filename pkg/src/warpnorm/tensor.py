"""Dense NCHW array kernels and their hand-written adjoints.

Activations, images, flows and parameter maps are plain ``numpy.ndarray``
objects of rank 4 in (batch, channel, height, width) order.  Every forward
kernel here has a matching vector-Jacobian product reachable through
:func:`tensor_vjp`.

Flow fields carry two channels: channel 0 is the vertical offset ``dy`` and
channel 1 the horizontal offset ``dx``, both in pixels at the resolution of
the tensor being sampled.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError

_CHECKED = True


def is_checked():
    return _CHECKED


@contextlib.contextmanager
def checked_mode(enabled=True):
    """Temporarily switch value-level validation (finiteness, ranges) on or off."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = bool(enabled)
    try:
        yield
    finally:
        _CHECKED = previous


def as_tensor4(x, name="x"):
    """Validate ``x`` as a rank-4 array and return it as an ndarray.

    Integer input is promoted to float64.  In checked mode NaN/Inf raise.
    """
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise DimensionError(f"{name}: expected rank-4 (B, C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"{name}: all dimensions must be >= 1, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise ContractError(f"{name}: non-finite values")
    return arr


@dataclass(frozen=True)
class ConvKernel:
    """3x3 convolution weights ``(C_out, C_in, 3, 3)`` and bias ``(C_out,)``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise DimensionError(f"conv weights must be (C_out, C_in, 3, 3), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv bias must be ({w.shape[0]},), got {b.shape}")
        if _CHECKED and not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ContractError("conv kernel has non-finite values")

    @property
    def c_in(self):
        return self.weights.shape[1]

    @property
    def c_out(self):
        return self.weights.shape[0]

    @classmethod
    def init(cls, c_in, c_out, rng, gain=np.sqrt(2.0), bias=0.0, dtype=np.float64):
        """He-style normal init; ``bias`` fills the bias vector."""
        std = gain / np.sqrt(9 * c_in)
        w = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
        return cls(w, np.full(c_out, bias, dtype=dtype))

    @classmethod
    def identity(cls, channels, dtype=np.float64):
        w = np.zeros((channels, channels, 3, 3), dtype=dtype)
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls(w, np.zeros(channels, dtype=dtype))


# ----------------------------------------------------------------------------
# elementwise


def _check_pair(a, b, op):
    if np.ndim(b) == 0:
        return
    if a.shape == b.shape:
        return
    if (b.ndim == 4 and b.shape[1] == 1 and a.shape[0] == b.shape[0]
            and a.shape[2:] == b.shape[2:]):
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {np.shape(b)} are not compatible")


def _unbroadcast(grad, like):
    """Sum ``grad`` down to the shape of ``like`` (scalar or channel-broadcast)."""
    if np.ndim(like) == 0:
        return grad.sum()
    if grad.shape == like.shape:
        return grad
    return grad.sum(axis=1, keepdims=True)


def add(a, b):
    _check_pair(a, b, "add")
    return a + b


def sub(a, b):
    _check_pair(a, b, "sub")
    return a - b


def mul(a, b):
    _check_pair(a, b, "mul")
    return a * b


def scale(a, s):
    return a * s


def relu(a):
    return np.maximum(a, 0.0)


def lerp(a, b, m):
    """``a*m + b*(1-m)``; ``m`` may have a single channel."""
    _check_pair(a, b, "lerp")
    _check_pair(a, m, "lerp")
    return a * m + b * (1.0 - m)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "lerp": lerp}


def elementwise(op, a, b=None, m=None):
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    if op == "relu":
        return relu(a)
    if op == "lerp":
        return lerp(a, b, m)
    return _ELEMENTWISE[op](a, b)


# ----------------------------------------------------------------------------
# convolution, resampling


def _im2col(x):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(B, C * 9, H * W)


def conv2d(x, k, return_cols=False):
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation convention).

    With ``return_cols`` the im2col buffer is returned too, for reuse in
    :func:`conv2d_vjp`.
    """
    if x.ndim != 4 or x.shape[1] != k.c_in:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel C_in={k.c_in}")
    B, _, H, W = x.shape
    cols = _im2col(x)
    out = np.matmul(k.weights.reshape(k.c_out, -1), cols)
    out += k.bias[None, :, None]
    out = out.reshape(B, k.c_out, H, W)
    return (out, cols) if return_cols else out


def conv2d_vjp(x, k, g, cols=None, need_dx=True):
    """Returns ``(dx, ConvKernel(dW, db))``; ``dx`` is None when not needed."""
    B, C, H, W = x.shape
    if cols is None:
        cols = _im2col(x)
    gm = g.reshape(B, k.c_out, H * W)
    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.weights.shape)
    db = gm.sum(axis=(0, 2))
    dk = ConvKernel(dw.astype(k.weights.dtype), db.astype(k.bias.dtype))
    if not need_dx:
        return None, dk
    dcols = np.matmul(k.weights.reshape(k.c_out, -1).T, gm).reshape(B, C, 3, 3, H, W)
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += dcols[:, :, i, j]
    return dxp[:, :, 1:-1, 1:-1], dk


def upsample_nearest2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_vjp(g):
    B, C, H, W = g.shape
    return g.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def avgpool2x(x):
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avgpool2x: spatial dims must be even, got {x.shape}")
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avgpool_vjp(g):
    return upsample_nearest2x(g) * 0.25


def _axis_weights(pos, n):
    """Clamp-to-edge interpolation corners along one axis.

    Returns (i0, i1, frac, inside) where ``inside`` marks raw positions that
    were not clamped; derivatives w.r.t. the position vanish outside.
    """
    inside = (pos >= 0.0) & (pos <= n - 1)
    p = np.clip(pos, 0.0, n - 1)
    i0 = np.clip(np.floor(p), 0, max(n - 2, 0)).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = p - i0
    return i0, i1, frac, inside


def _check_flow(src, flow):
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise DimensionError(f"flow must have shape (B, 2, H, W), got {flow.shape}")
    if flow.shape[0] != src.shape[0] or flow.shape[2:] != src.shape[2:]:
        raise DimensionError(f"flow {flow.shape} does not match source {src.shape}")


def _sampling_matrices(flow, H, W, derivatives=False):
    """Per-batch sparse ``(HW, HW)`` operators for bilinear reads under ``flow``.

    Row ``p`` of the interpolation matrix holds the four corner weights of
    target pixel ``p``.  With ``derivatives`` the matrices of d/d(dy) and
    d/d(dx) of those weights are returned too, masked to unclamped rows.
    """
    B = flow.shape[0]
    n = H * W
    yy, xx = np.meshgrid(np.arange(H, dtype=flow.dtype), np.arange(W, dtype=flow.dtype),
                         indexing="ij")
    y0, y1, wy, in_y = _axis_weights(yy[None] + flow[:, 0], H)
    x0, x1, wx, in_x = _axis_weights(xx[None] + flow[:, 1], W)
    rows = np.tile(np.arange(n), 4)
    out = []
    for b in range(B):
        cols = np.concatenate([(y0[b] * W + x0[b]).ravel(), (y0[b] * W + x1[b]).ravel(),
                               (y1[b] * W + x0[b]).ravel(), (y1[b] * W + x1[b]).ravel()])
        ay, ax = wy[b].ravel(), wx[b].ravel()
        interp = np.concatenate([(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax])
        mats = [sparse.csr_matrix((interp, (rows, cols)), shape=(n, n))]
        if derivatives:
            my = in_y[b].ravel().astype(flow.dtype)
            mx = in_x[b].ravel().astype(flow.dtype)
            dy = np.concatenate([-(1 - ax), -ax, 1 - ax, ax]) * np.tile(my, 4)
            dx = np.concatenate([-(1 - ay), 1 - ay, -ay, ay]) * np.tile(mx, 4)
            mats.append(sparse.csr_matrix((dy, (rows, cols)), shape=(n, n)))
            mats.append(sparse.csr_matrix((dx, (rows, cols)), shape=(n, n)))
        out.append(mats)
    return out


def bilinear_sample(src, flow):
    """Read ``src`` at ``(y + dy, x + dx)`` with bilinear weights, clamping to the border."""
    _check_flow(src, flow)
    B, C, H, W = src.shape
    out = np.empty_like(src)
    for b, (S,) in enumerate(_sampling_matrices(flow, H, W)):
        out[b] = (S @ src[b].reshape(C, -1).T).T.reshape(C, H, W)
    return out


def bilinear_sample_vjp(src, flow, g):
    """Returns ``(dsrc, dflow)``.

    The flow derivative uses the one-sided slope picked by ``floor`` at
    integer coordinates and is zero where the coordinate was clamped.
    """
    _check_flow(src, flow)
    B, C, H, W = src.shape
    dsrc = np.empty_like(src)
    dflow = np.empty((B, 2, H, W), dtype=flow.dtype)
    for b, (S, Dy, Dx) in enumerate(_sampling_matrices(flow, H, W, derivatives=True)):
        sb = src[b].reshape(C, -1).T
        gb = g[b].reshape(C, -1).T
        dsrc[b] = (S.T @ gb).T.reshape(C, H, W)
        dflow[b, 0] = ((Dy @ sb) * gb).sum(axis=1).reshape(H, W)
        dflow[b, 1] = ((Dx @ sb) * gb).sum(axis=1).reshape(H, W)
    return dsrc, dflow


# ----------------------------------------------------------------------------
# adjoint dispatch


def _vjp_add(inputs, g):
    a, b = inputs
    return g, _unbroadcast(g, b)


def _vjp_sub(inputs, g):
    a, b = inputs
    return g, -_unbroadcast(g, b)


def _vjp_mul(inputs, g):
    a, b = inputs
    return g * b, _unbroadcast(g * a, b)


def _vjp_scale(inputs, g):
    a, s = inputs
    return g * s, np.sum(g * a)


def _vjp_relu(inputs, g):
    (a,) = inputs
    return (g * (a > 0),)


def _vjp_lerp(inputs, g):
    a, b, m = inputs
    return g * m, _unbroadcast(g * (1.0 - m), b), _unbroadcast(g * (a - b), m)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "relu": _vjp_relu,
    "lerp": _vjp_lerp,
    "conv2d": lambda inputs, g: conv2d_vjp(inputs[0], inputs[1], g),
    "upsample_nearest2x": lambda inputs, g: (upsample_vjp(g),),
    "avgpool2x": lambda inputs, g: (avgpool_vjp(g),),
    "bilinear_sample": lambda inputs, g: bilinear_sample_vjp(inputs[0], inputs[1], g),
}

FORWARDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "lerp": lerp,
    "conv2d": conv2d,
    "upsample_nearest2x": upsample_nearest2x,
    "avgpool2x": avgpool2x,
    "bilinear_sample": bilinear_sample,
}


def tensor_vjp(op_id, inputs, grad_out):
    """Vector-Jacobian product of ``op_id`` at ``inputs`` contracted with ``grad_out``.

    Returns a tuple with one gradient per input, in input order.
    """
    try:
        fn = _VJPS[op_id]
    except KeyError:
        raise ContractError(f"no adjoint registered for op {op_id!r}") from None
    return tuple(fn(tuple(inputs), grad_out))
