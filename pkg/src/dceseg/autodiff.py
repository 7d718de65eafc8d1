"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it supports exactly the operations the two
segmentation networks need (dilated/same-padded convolution, 2x2 transposed
convolution, 2x2 max pooling, batch normalization, ReLU, channel softmax,
channel concatenation/slicing and a handful of elementwise primitives).

Every operation records its inputs and a backward rule on the output tensor,
so the computation graph doubles as the tape. ``backward(loss)`` walks the
graph once in reverse topological order and marks it consumed; running a
second backward pass over the same graph raises instead of silently
accumulating wrong gradients.

Production tensors are float32. Ops preserve the dtype of their inputs, so a
graph built from float64 tensors runs entirely in double precision; this is
used only to verify analytic gradients against finite differences.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class GraphConsumedError(RuntimeError):
    """Raised when a backward pass reuses an already consumed graph."""


def _check_finite(opname: str, data: np.ndarray) -> None:
    # Finite inputs must yield finite outputs; NaN/Inf means a broken op or
    # diverged parameters and is surfaced immediately.
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values in output of {opname}")


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph.

    ``data`` is row-major with the last axis fastest. ``grad`` is allocated
    lazily by the backward pass and always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Always copy on first write: backward rules may hand the same array
        # to several parents, and aliased grad buffers corrupt accumulation.
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Elementwise arithmetic; only same-shape tensors or python scalars, no
    # silent broadcasting.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        return div(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def _make_output(opname: str, data: np.ndarray, parents: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(opname, data)
    out = Tensor(data, dtype=data.dtype)
    # Intermediates always carry requires_grad, so this prunes true constants.
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
    return out


def _require_same_shape(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + a.dtype.type(b)

        def back_scalar(g):
            if a.requires_grad:
                a.accumulate_grad(g)

        return _make_output("add", data, (a,), back_scalar)

    _require_same_shape("add", a, b)
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make_output("add", data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scale = a.dtype.type(b)
        data = a.data * scale

        def back_scalar(g):
            if a.requires_grad:
                a.accumulate_grad(g * scale)

        return _make_output("mul", data, (a,), back_scalar)

    _require_same_shape("mul", a, b)
    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make_output("mul", data, (a, b), back)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    _require_same_shape("div", a, b)
    data = a.data / b.data

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g / b.data)
        if b.requires_grad:
            b.accumulate_grad(-g * a.data / (b.data * b.data))

    return _make_output("div", data, (a, b), back)


def tensor_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make_output("sum", data, (a,), back)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make_output("relu", data, (a,), back)


# ---------------------------------------------------------------------------
# convolution


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _patch_view(xp: np.ndarray, kh: int, kw: int, dilation: int,
                out_h: int, out_w: int) -> np.ndarray:
    """Strided [N,C,kh,kw,out_h,out_w] window view of a padded image."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh * dilation, sw * dilation, sh, sw),
        writeable=False,
    )


def _corr2d(x: np.ndarray, w: np.ndarray, dilation: int) -> np.ndarray:
    """Same-size cross-correlation with zero padding, stride 1."""
    kh, kw = w.shape[2], w.shape[3]
    pad = dilation * (kh - 1) // 2
    xp = _pad_spatial(x, pad)
    view = _patch_view(xp, kh, kw, dilation, x.shape[2], x.shape[3])
    # [K, C, kh, kw] x [N, C, kh, kw, H, W] -> [K, N, H, W]
    out = np.tensordot(w, view, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """2D cross-correlation (no kernel flip) preserving the spatial size.

    ``x`` is [N,C,H,W], ``weight`` [K,C,kh,kw] with kh == kw in {1, 3},
    ``bias`` [K]. Zero padding is dilation*(kh-1)/2 on each side, so the
    output is [N,K,H,W].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects a 4D input and a 4D weight")
    n, c, h, w_ = x.shape
    k, cw, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: kernel must be square 1x1 or 3x3, got {kh}x{kw}")
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    if bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {k} kernels")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"conv2d: dilation must be a positive integer, got {dilation!r}")
    dilation = int(dilation)

    data = _corr2d(x.data, weight.data, dilation)
    data += bias.data[None, :, None, None]

    def back(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            pad = dilation * (kh - 1) // 2
            xp = _pad_spatial(x.data, pad)
            view = _patch_view(xp, kh, kw, dilation, h, w_)
            # [N,K,H,W] x [N,C,kh,kw,H,W] -> [K,C,kh,kw]
            gw = np.tensordot(g, view, axes=([0, 2, 3], [0, 4, 5]))
            weight.accumulate_grad(gw)
        if x.requires_grad:
            # Adjoint of same-padded correlation: correlate the output
            # gradient with the spatially flipped, channel-swapped kernel.
            w_rot = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            x.accumulate_grad(_corr2d(g, w_rot, dilation))

    return _make_output("conv2d", data, (x, weight, bias), back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a fixed 2x2 kernel.

    ``x`` is [N,C,H,W], ``weight`` [C,K,2,2], ``bias`` [K]; the output is
    [N,K,2H,2W], the exact adjoint of a stride-2 2x2 convolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects a 4D input and a 4D weight")
    n, c, h, w_ = x.shape
    cw, k, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise ValueError(f"conv_transpose2d: kernel must be 2x2, got {kh}x{kw}")
    if cw != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {cw}")
    if bias.shape != (k,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} does not match {k} kernels")

    # out[n,k,2i+u,2j+v] = sum_c x[n,c,i,j] * w[c,k,u,v]
    out6 = np.einsum("nchw,ckuv->nkhuwv", x.data, weight.data)
    data = out6.reshape(n, k, 2 * h, 2 * w_)
    data += bias.data[None, :, None, None]

    def back(g):
        g6 = g.reshape(n, k, h, 2, w_, 2)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight.accumulate_grad(np.einsum("nkhuwv,nchw->ckuv", g6, x.data))
        if x.requires_grad:
            x.accumulate_grad(np.einsum("nkhuwv,ckuv->nchw", g6, weight.data))

    return _make_output("conv_transpose2d", data, (x, weight, bias), back)


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2(x: Tensor) -> Tensor:
    """Max over non-overlapping 2x2 windows; ties go to the first element in
    row-major window order."""
    if x.ndim != 4:
        raise ValueError("maxpool2x2 expects a 4D input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    argmax = windows.argmax(axis=-1)  # first maximum wins
    data = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def back(g):
        if x.requires_grad:
            gw = np.zeros_like(windows)
            np.put_along_axis(gw, argmax[..., None], g[..., None], axis=-1)
            gx = (
                gw.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            x.accumulate_grad(gx)

    return _make_output("maxpool2x2", data, (x,), back)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one batch-norm layer.

    ``updates`` counts training-mode forward passes; evaluation before the
    first update is an error because the running stats are still the
    (meaningless) initial values.
    """

    __slots__ = ("running_mean", "running_var", "momentum", "eps", "updates")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.updates = 0


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel normalization over the batch and spatial axes.

    Training mode normalizes with the batch statistics and blends them into
    ``state`` (new = momentum * old + (1 - momentum) * batch); eval mode uses
    the running statistics as constants.
    """
    if x.ndim != 4:
        raise ValueError("batchnorm2d expects a 4D input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    eps = x.dtype.type(state.eps)

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mean).astype(
            state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1.0 - m) * var).astype(
            state.running_var.dtype)
        state.updates += 1

        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        count = n * h * w

        def back_train(g):
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = g * gamma.data[None, :, None, None]
                sum_g = gxhat.sum(axis=(0, 2, 3))
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (gxhat - (sum_g[None, :, None, None]
                               + xhat * sum_gx[None, :, None, None]) / count)
                gx *= inv_std[None, :, None, None]
                x.accumulate_grad(gx)

        return _make_output("batchnorm2d", data, (x, gamma, beta), back_train)

    if state.updates == 0:
        raise RuntimeError("batchnorm2d: eval mode before any training update")
    inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
    mean = state.running_mean.astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back_eval(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x.accumulate_grad(g * (gamma.data * inv_std)[None, :, None, None])

    return _make_output("batchnorm2d", data, (x, gamma, beta), back_eval)


# ---------------------------------------------------------------------------
# channel ops


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of an [N,C,H,W] tensor."""
    if x.ndim != 4:
        raise ValueError("softmax_channels expects a 4D input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=1, keepdims=True)

    def back(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=1, keepdims=True)
            x.accumulate_grad(data * (g - dot))

    return _make_output("softmax_channels", data, (x,), back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [N,Ci,H,W] tensors along the channel axis, preserving order."""
    if not tensors:
        raise ValueError("concat_channels: empty input list")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ValueError(
                f"concat_channels: incompatible shapes {first.shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    return _make_output("concat_channels", data, tuple(tensors), back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) of an [N,C,H,W] tensor."""
    if x.ndim != 4:
        raise ValueError("slice_channels expects a 4D input")
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels: range [{start}, {stop}) invalid for {c} channels")
    data = np.ascontiguousarray(x.data[:, start:stop])

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x.accumulate_grad(gx)

    return _make_output("slice_channels", data, (x,), back)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise GraphConsumedError(
                "graph already consumed by a previous backward pass; rerun the forward computation")
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss on every requires_grad tensor.

    Visits each recorded operation exactly once (inputs always precede their
    consumers) and then marks the graph consumed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError(
            "backward already called on this graph; rerun the forward computation")
    if loss._backward is None and not loss._parents and not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any differentiable tensor")

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward
        if fn is not None and node.grad is not None:
            fn(node.grad)
        if node._parents:
            node._consumed = True
            node._backward = None
            if node is not loss:
                node.grad = None
