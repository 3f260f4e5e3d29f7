"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray``. Every op that touches a tensor
with ``requires_grad`` records a node holding its parents and a closure that
maps the upstream gradient to one gradient per parent. :meth:`Tensor.backward`
walks that tape in reverse topological order.

Gradients accumulate into ``leaf.grad`` across backward passes until
:meth:`Tensor.zero_grad` is called. The tape is released after backward
unless ``retain_graph=True``.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError

ARCCOS_EPS = 1e-7


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def __len__(self):
        return len(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- backward -------------------------------------------------------
    def backward(self, grad=None, retain_graph=False):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"upstream grad {grad.shape} vs root {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


def _not_scalar(t):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager that disables tape recording in the current thread."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    """Record a tape node if any parent participates in differentiation."""
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        t = Tensor(data, op=op)
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        return t
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- elementwise unary --------------------------------------------------

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; the gradient is zero where the clip is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


def arccos(x, eps=ARCCOS_EPS):
    """arccos with the argument clamped to [-1+eps, 1-eps] first.

    The clamp keeps both value and gradient finite at |x| = 1.
    """
    x = as_tensor(x)
    c = np.clip(x.data, -1.0 + eps, 1.0 - eps)
    inside = (x.data >= -1.0 + eps) & (x.data <= 1.0 - eps)
    dc = -1.0 / np.sqrt(1.0 - c * c)
    return _make(np.arccos(c), (x,), lambda g: (g * dc * inside,), "arccos")


# -- reductions and shape ops -------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def trace(x):
    """Trace over the last two axes (batched)."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"trace: expected square matrices, got {x.shape}")
    eye = np.eye(x.shape[-1])

    def backward(g):
        return (np.asarray(g)[..., None, None] * eye,)

    return _make(np.trace(x.data, axis1=-2, axis2=-1), (x,), backward, "trace")


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 dims, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "permute")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def log_softmax(x, axis=0):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# -- convolution --------------------------------------------------------
# Images are channels-last (B, H, W, C) so every gather and scatter below
# touches contiguous channel vectors.

def _im2col(xp, k, stride, Ho, Wo):
    """(B, Hp, Wp, C) -> (B*Ho*Wo, k*k*C) patch matrix, columns ordered (i, j, c)."""
    B, C = xp.shape[0], xp.shape[3]
    v = sliding_window_view(xp, (k, k), axis=(1, 2))[:, :stride * (Ho - 1) + 1:stride, :stride * (Wo - 1) + 1:stride]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * C)


def _pad_hw(a, top, bottom, left, right):
    if not (top or bottom or left or right):
        return a
    out = np.zeros((a.shape[0], a.shape[1] + top + bottom, a.shape[2] + left + right, a.shape[3]))
    out[:, top:top + a.shape[1], left:left + a.shape[2]] = a
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, channels-last.

    x: (B, H, W, Cin); weight: (k, k, Cin, Cout); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    B, H, W, C = x.shape
    k, O = weight.shape[0], weight.shape[3]
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    xp = _pad_hw(x.data, padding, padding, padding, padding)
    if k == 1 and stride == 1:
        cols = xp.reshape(B * Ho * Wo, C)
    else:
        cols = _im2col(xp, k, stride, Ho, Wo)
    wmat = weight.data.reshape(k * k * C, O)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(B, Ho, Wo, O)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(B * Ho * Wo, O)
        gw = (cols.T @ gm).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if k == 1 and stride == 1:
                gx = (gm @ wmat.T).reshape(B, H, W, C)
            elif stride == 1 and padding <= k - 1 and O <= C:
                # input gradient = correlation of the padded output gradient
                # with the spatially flipped, channel-transposed kernel
                q = k - 1 - padding
                gp = _pad_hw(g, q, H + k - 1 - q - Ho, q, W + k - 1 - q - Wo)
                wflip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * O, C)
                gx = (_im2col(gp, k, 1, H, W) @ wflip).reshape(B, H, W, C)
            else:
                gcols = (gm @ wmat.T).reshape(B, Ho, Wo, k, k, C)
                gxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
                gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _make(out, parents, backward, "conv2d")


def conv_transpose2x2(x, weight, bias=None):
    """Stride-2, kernel-2 transposed convolution (exact 2x upsampling), channels-last.

    x: (B, H, W, Cin); weight: (2, 2, Cin, Cout) -> (B, 2H, 2W, Cout).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != x.shape[3] or weight.shape[:2] != (2, 2):
        raise DimensionError(f"conv_transpose2x2: input {x.shape} vs weight {weight.shape}")
    B, H, W, C = x.shape
    O = weight.shape[3]
    xm = x.data.reshape(B * H * W, C)
    wm = weight.data.transpose(2, 0, 1, 3).reshape(C, 4 * O)          # C x (di, dj, O)
    out = (xm @ wm).reshape(B, H, W, 2, 2, O).transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, O)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(B, H, 2, W, 2, O).transpose(0, 1, 3, 2, 4, 5).reshape(B * H * W, 4 * O)
        gx = (gm @ wm.T).reshape(B, H, W, C) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (xm.T @ gm).reshape(C, 2, 2, O).transpose(1, 2, 0, 3)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return _make(out, parents, backward, "conv_transpose2x2")
