"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the segmentation network needs are provided: strided,
padded and dilated convolution, max pooling with retained argmax indices,
ReLU, fixed bilinear x2 upsampling, channel softmax, channel concatenation,
elementwise arithmetic and a fused softmax/negative-log-likelihood loss.

Arrays follow the (batch, channel, height, width) layout, row-major with the
width axis fastest.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidInputError

DTYPE = np.float64


class Tensor:
    """A float64 array that can take part in a differentiation graph.

    Leaves created with ``requires_grad=True`` receive gradients in ``grad``
    when :func:`backward` is called on a scalar that depends on them.
    Gradients accumulate across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise InvalidInputError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise InvalidInputError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate 4-D tensors along the channel axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    if not tensors:
        raise InvalidInputError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise InvalidInputError(f"concat_channels: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._from_op(data, tensors, lambda g: tuple(np.split(g, splits, axis=1)))


def softmax_channel(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (x,), _bw)


# convolution ------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int = 1) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kH, kW)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidInputError("conv2d expects 4-D input and kernel")
    if stride < 1 or pad < 0 or dilation < 1:
        raise InvalidInputError(f"conv2d: invalid stride={stride} pad={pad} dilation={dilation}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise InvalidInputError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh < 1 or kw < 1:
        raise InvalidInputError("conv2d: empty kernel")
    if bias is not None and bias.shape != (o,):
        raise InvalidInputError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise InvalidInputError(f"conv2d: kernel does not fit input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        back_pad = dilation * (kh - 1) - pad
        if x.requires_grad and stride == 1 and kh == kw and back_pad >= 0:
            # stride 1: input gradient is g correlated with the flipped, transposed kernel
            gp = np.pad(g, ((0, 0), (0, 0), (back_pad, back_pad), (back_pad, back_pad))) if back_pad else g
            gcols = _im2col(np.ascontiguousarray(gp), kh, kw, 1, dilation, h, w)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (wflip @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols =(wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    y0, x0 = i * dilation, j * dilation
                    gxp[:, :, y0 : y0 + hspan : stride, x0 : x0 + wspan : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw)


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None, pad: int = 0):
    """Max pooling returning ``(output, argmax)``.

    ``argmax`` holds, for every output cell, the row-major index ``y * W + x``
    of the winning input cell within its (H, W) plane; ties resolve to the
    first index in row-major window order.
    """
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise InvalidInputError("maxpool2d expects a 4-D input")
    if k < 1 or stride < 1 or pad < 0:
        raise InvalidInputError(f"maxpool2d: invalid k={k} stride={stride} pad={pad}")
    if pad > k // 2:
        raise InvalidInputError(f"maxpool2d: pad {pad} exceeds half the window {k}")
    n, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise InvalidInputError(f"maxpool2d: window {k} exceeds padded extent of {h}x{w}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    sn, sc, sh, sw = xp.strides
    windows = as_strided(xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    windows = windows.reshape(n, c, ho, wo, k * k)
    arg = windows.argmax(axis=-1)
    vals = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    oy = np.arange(ho)[:, None] * stride - pad
    ox = np.arange(wo)[None, :] * stride - pad
    index = (oy + arg // k) * w + (ox + arg % k)

    plane = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
    flat = (index + plane).ravel()

    def _bw(g):
        gx = np.bincount(flat, weights=g.ravel(), minlength=n * c * h * w)
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(np.ascontiguousarray(vals), (x,), _bw), index


def _upsample_matrix(size: int) -> np.ndarray:
    out = 2 * size
    m = np.zeros((out, size))
    if size == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(out) * (size - 1) / (out - 1)
    i0 = np.minimum(np.floor(src).astype(int), size - 2)
    frac = src - i0
    rows = np.arange(out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling with corner-aligned sampling positions."""
    if x.ndim != 4:
        raise InvalidInputError("bilinear_upsample2x expects a 4-D input")
    uh = _upsample_matrix(x.shape[2])
    uw = _upsample_matrix(x.shape[3])
    out = uh @ x.data @ uw.T
    return Tensor._from_op(out, (x,), lambda g: (uh.T @ g @ uw,))


# losses ------------------------------------------------------------------------


def nll_loss(logits: Tensor, target: np.ndarray, ignore_index: int = 255, reduction: str = "mean") -> Tensor:
    """Softmax over axis 1 followed by negative log likelihood at ``target``.

    ``target`` has the logits' shape minus the class axis. Entries equal to
    ``ignore_index`` contribute nothing. With no valid entries the result is
    a constant zero.
    """
    target = np.asarray(target)
    if logits.ndim < 2 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise InvalidInputError(f"nll_loss: logits {logits.shape} vs target {target.shape}")
    k = logits.shape[1]
    valid = target != ignore_index
    count = int(valid.sum())
    if count == 0:
        return Tensor(0.0)
    if np.any(target[valid] < 0) or np.any(target[valid] >= k):
        raise InvalidInputError("nll_loss: target label out of range")
    safe = np.where(valid, target, 0).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    total = -(picked * valid).sum()
    scale = 1.0 / count if reduction == "mean" else 1.0

    def _bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (float(g) * scale),)

    return Tensor._from_op(np.array(total * scale), (logits,), _bw)


# gradient checking ---------------------------------------------------------------


def finite_diff_grad(f: Callable, x: Tensor, eps: float = 1e-5, indices=None):
    """Central-difference gradient of the scalar evaluator ``f`` w.r.t. ``x``.

    ``f`` is called with ``x`` after its data has been perturbed in place and
    must return a float or a one-element Tensor. With ``indices`` (flat
    positions) only those coordinates are evaluated and a 1-D array is
    returned; otherwise a Tensor shaped like ``x``.
    """
    if eps <= 0:
        raise InvalidInputError("finite_diff_grad: eps must be positive")
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else [int(i) for i in indices]
    out = np.zeros(len(positions))

    def _eval() -> float:
        v = f(x)
        return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)

    for n, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _eval()
        flat[i] = orig - eps
        fm = _eval()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * eps)
    if indices is None:
        return Tensor(out.reshape(x.shape))
    return out


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
