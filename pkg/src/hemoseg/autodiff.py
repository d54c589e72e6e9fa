"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operation set the 3D segmentation network needs:
3D convolution (optionally strided for downsampling), trilinear upsampling,
batch normalization, ReLU, residual add, channel concat/slice, channel
softmax, and the elementwise/reduction ops the losses are built from.
Data lives in row-major numpy buffers, float32 for training and inference,
float64 for gradient checking.

Forward/backward of one graph is single-threaded; tensors may move between
threads but a graph must not be mutated concurrently.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "OpRecord",
    "ShapeError",
    "set_finite_checks",
    "conv3d",
    "conv3d_strided_down",
    "upsample_trilinear",
    "BatchNormStats",
    "batch_norm3d",
    "relu",
    "add",
    "mul",
    "div",
    "concat_channels",
    "slice_channels",
    "softmax_channels",
    "log",
    "clamp_min",
]

_AXIS_NAMES = ("depth", "height", "width")

_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    """Enable NaN/Inf detection on every op output (costly; meant for tests)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class OpRecord:
    """Backward-graph node: op kind, parent tensors, saved-context closure.

    Records form a DAG; ``Tensor.backward`` visits each exactly once in
    reverse topological order.
    """

    __slots__ = ("op", "parents", "apply")

    def __init__(self, op, parents, apply):
        self.op = op
        self.parents = parents
        self.apply = apply


class Tensor:
    """N-dimensional float array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.record: OpRecord | None = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def sum(self) -> "Tensor":
        x = self

        def backward(g):
            _accum(x, np.full_like(x.data, g.reshape(())))

        return _result(np.asarray(self.data.sum(dtype=self.dtype)), (x,), "sum", backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        Gradients accumulate additively across multiple uses of a tensor.
        """
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss, got shape %r" % (self.shape,))
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.record is not None:
                for p in node.record.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.record is not None and node.grad is not None:
                node.record.apply(node.grad)

    # -- operator sugar (Tensor or python scalar on either side) --

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _scalar_add(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _scalar_mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, _scalar_mul(other, -1.0))
        return _scalar_add(self, -float(other))

    def __rsub__(self, other):
        return _scalar_add(_scalar_mul(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return _scalar_mul(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _scalar_error(t):
    raise ShapeError("item() requires a single-element tensor, got shape %r" % (t.shape,))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t.record is not None):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad or p.record is not None for p in parents):
        out.record = OpRecord(op, parents, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (residual connections)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), "div", backward)


def _scalar_add(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(a, g)

    return _result(a.data + a.data.dtype.type(s), (a,), "scalar_add", backward)


def _scalar_mul(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(a, g * a.data.dtype.type(s))

    return _result(a.data * a.data.dtype.type(s), (a,), "scalar_mul", backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0.  NaN inputs stay NaN."""
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _result(np.maximum(x.data, x.data.dtype.type(0)), (x,), "relu", backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, g / x.data)

    return _result(np.log(x.data), (x,), "log", backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo); gradient passes through where x >= lo."""
    mask = x.data >= lo

    def backward(g):
        _accum(x, g * mask)

    return _result(np.maximum(x.data, x.data.dtype.type(lo)), (x,), "clamp_min", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (1); other extents must match."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeError(f"concat_channels: ranks {a.ndim} vs {b.ndim}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shape mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def backward(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_channels", backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) along axis 1."""
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for C={x.shape[1]}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        _accum(x, gx)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), "slice_channels", backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-position distribution over the channel axis, max-subtracted for stability."""
    if x.ndim < 2:
        raise ShapeError("softmax_channels needs a channel axis (ndim >= 2)")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gy = g * y
        _accum(x, gy - y * gy.sum(axis=1, keepdims=True))

    return _result(y, (x,), "softmax_channels", backward)


# ---------------------------------------------------------------------------
# 3D convolution


def _conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """3D cross-correlation of [N,C,D,H,W] with [K,C,kd,kh,kw] kernels.

    Output extent per axis is floor((n + 2p - k) / s) + 1.  Differentiable
    w.r.t. input, weight, and bias.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: need 5-d input and weight, got {x.shape} and {weight.shape}")
    n, c, d, h, w = x.shape
    k, cw, kd, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv3d: input channels {c} != weight channels {cw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({k},)")
    sd, sh, sw = stride
    pd, ph, pw = padding
    if min(sd, sh, sw) < 1:
        raise ShapeError(f"conv3d: stride components must be >= 1, got {stride}")
    for name, ext, kk, pp in zip(_AXIS_NAMES, (d, h, w), (kd, kh, kw), (pd, ph, pw)):
        if ext + 2 * pp < kk:
            raise ShapeError(f"conv3d: kernel {kk} exceeds padded {name} extent {ext + 2 * pp}")
    do = _conv_out_extent(d, kd, sd, pd)
    ho = _conv_out_extent(h, kh, sh, ph)
    wo = _conv_out_extent(w, kw, sw, pw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    # (N*Do*Ho*Wo, C*kd*kh*kw) column matrix; the matmul is the hot path
    col = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c * kd * kh * kw)
    w2 = weight.data.reshape(k, -1)
    out2 = col @ w2.T
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(n, do, ho, wo, k).transpose(0, 4, 1, 2, 3)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(n * do * ho * wo, k)
        if bias is not None:
            _accum(bias, g2.sum(axis=0))
        if weight.requires_grad or weight.record is not None:
            _accum(weight, (g2.T @ col).reshape(weight.shape))
        if x.requires_grad or x.record is not None:
            gcol = g2 @ w2
            gwin = gcol.reshape(n, do, ho, wo, c, kd, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
            gxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        gxp[:, :, i : i + sd * do : sd, j : j + sh * ho : sh, l : l + sw * wo : sw] += gwin[
                            ..., i, j, l
                        ]
            _accum(x, gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w])

    return _result(np.ascontiguousarray(out), parents, "conv3d", backward)


def conv3d_strided_down(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    factors: tuple[int, int, int],
) -> Tensor:
    """Downsampling convolution: stride = per-axis factor, 'same' padding.

    Requires odd kernels and each spatial extent divisible by its factor, so
    that output extents are exactly input // factor (depth can stay unpooled
    with a factor of 1 while the in-plane axes halve).
    """
    kd, kh, kw = weight.shape[2:]
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d_strided_down: kernel must be odd per axis, got {(kd, kh, kw)}")
    for name, ext, f in zip(_AXIS_NAMES, x.shape[2:], factors):
        if f < 1:
            raise ShapeError(f"conv3d_strided_down: factor {f} < 1 on {name} axis")
        if ext % f != 0:
            raise ShapeError(f"conv3d_strided_down: {name} extent {ext} not divisible by factor {f}")
    return conv3d(x, weight, bias, stride=factors, padding=(kd // 2, kh // 2, kw // 2))


# ---------------------------------------------------------------------------
# trilinear upsampling


def _upsample_axis_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, align-corners-false.

    Output sample i reads the input at (i + 0.5)/f - 0.5, clamped to the
    valid range (edge replication at the borders).  Rows sum to 1, so
    constants are preserved exactly.
    """
    n_out = n_in * factor
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), i0] += 1.0 - w1
    m[np.arange(n_out), i1] += w1
    return m.astype(dtype)


def _apply_axis_matrix(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(a, m, axes=([axis], [1])), -1, axis)


def upsample_trilinear(x: Tensor, factors: tuple[int, int, int]) -> Tensor:
    """Upsample [N,C,D,H,W] spatial extents by integer factors, trilinearly."""
    if x.ndim != 5:
        raise ShapeError(f"upsample_trilinear: need 5-d input, got {x.shape}")
    if min(factors) < 1:
        raise ShapeError(f"upsample_trilinear: factors must be >= 1, got {factors}")
    mats = [_upsample_axis_matrix(x.shape[2 + i], factors[i], x.dtype) for i in range(3)]
    out = x.data
    for i, m in enumerate(mats):
        if factors[i] != 1:
            out = _apply_axis_matrix(out, m, 2 + i)

    def backward(g):
        gx = g
        for i, m in enumerate(mats):
            if factors[i] != 1:
                gx = _apply_axis_matrix(gx, m.T, 2 + i)
        _accum(x, gx)

    return _result(np.ascontiguousarray(out), (x,), "upsample_trilinear", backward)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormStats:
    """Running mean/variance buffers, exponentially averaged in train mode."""

    __slots__ = ("mean", "var", "batches_tracked")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.batches_tracked = 0


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    train: bool,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    Train mode normalizes by batch statistics, differentiates through them,
    and moves running stats by ``momentum`` toward the batch values.  Eval
    mode uses the running stats and errors if none were ever recorded.
    """
    if x.ndim != 5:
        raise ShapeError(f"batch_norm3d: need 5-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm3d: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    eps = x.data.dtype.type(epsilon)

    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean += momentum * (mean.astype(stats.mean.dtype) - stats.mean)
        stats.var += momentum * (var.astype(stats.var.dtype) - stats.var)
        stats.batches_tracked += 1
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
        m = x.data.size // c

        def backward(g):
            _accum(beta, g.sum(axis=axes))
            _accum(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad or x.record is not None:
                dxhat = g * gamma.data.reshape(bshape)
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                _accum(x, inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2))

        return _result(out, (x, gamma, beta), "batch_norm3d", backward)

    if stats.batches_tracked == 0:
        raise RuntimeError("batch_norm3d: eval mode before any running-stat update")
    inv_std = (1.0 / np.sqrt(stats.var.astype(x.data.dtype) + eps)).reshape(bshape)
    xhat = (x.data - stats.mean.astype(x.data.dtype).reshape(bshape)) * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward_eval(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad or x.record is not None:
            _accum(x, g * gamma.data.reshape(bshape) * inv_std)

    return _result(out, (x, gamma, beta), "batch_norm3d", backward_eval)
