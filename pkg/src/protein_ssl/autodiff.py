"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation on tracked tensors records its
parents and a VJP closure. :func:`grad` walks the recorded graph in reverse
topological order. Backward rules are themselves written in terms of the
operations in this module, so ``grad(..., create_graph=True)`` returns
gradients that can be differentiated again, which makes second-order
quantities (gradients of expressions that contain gradients) exact.

Broadcasting is deliberately narrow: binary operations accept equal shapes,
or a matrix paired with a row vector of matching width. Anything else
raises :class:`ShapeMismatch`. Python scalars enter through :func:`scale`
or as constant tensors of the right shape; shape changes are explicit ops
(`reshape`, `broadcast_to`, `concat`, slicing, gather/scatter) so that every
backward rule stays a plain linear map.
"""

from __future__ import annotations

import contextlib
import logging

import numpy as np

from .errors import NonFinite, ShapeMismatch

logger = logging.getLogger(__name__)

_grad_enabled = True
_checked = False

# Diagnostic only: total number of requested gradients that turned out to be
# unreachable from the differentiated output. Tests may reset this freely.
unreachable_count = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    """Re-enable graph recording inside the block (used by double backward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Raise :class:`NonFinite` as soon as an op produces inf or nan."""
    global _checked
    prev = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = prev


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = None
        self._vjp = None
        self.op = ""

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
    def tracked(self):
        return self.requires_grad or self.parents is not None

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = self.op or ("param" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)


def param(data):
    """Leaf tensor that :func:`grad` differentiates with respect to."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, op):
    arr = np.asarray(data, dtype=np.float64)
    if _checked and not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values produced by {op}")
    out = Tensor(arr)
    if _grad_enabled and any(p.tracked for p in parents):
        out.parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _aligned(a, b, op):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return a, b
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return a, broadcast_to(b, a.shape)
    if b.ndim == 2 and a.shape == (b.shape[1],):
        return broadcast_to(a, b.shape), b
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _aligned(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _aligned(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def neg(a):
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = _aligned(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def div(a, b):
    a, b = _aligned(a, b, "div")
    out = _node(a.data / b.data, (a, b), None, "div")
    if out.parents is not None:
        out._vjp = lambda g: (div(g, b), neg(mul(g, div(out, b))))
    return out


def scale(a, c):
    """Multiply by a Python float constant."""
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _node(a.data.reshape(shape).copy(), (a,), lambda g: (reshape(g, old),), "reshape")


def broadcast_to(a, shape):
    """Explicit broadcast: scalar to anything, or row vector to matrix."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    if a.shape == ():
        vjp = lambda g: (sum_all(g),)
    elif len(shape) == 2 and a.shape == (shape[1],):
        vjp = lambda g: (sum_axis0(g),)
    else:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}")
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), vjp, "broadcast")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    a = _as_tensor(a)
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def tanh(a):
    a = _as_tensor(a)
    out = _node(np.tanh(a.data), (a,), None, "tanh")
    if out.parents is not None:
        one = Tensor(np.ones_like(out.data))
        out._vjp = lambda g: (mul(g, sub(one, mul(out, out))),)
    return out


def exp(a):
    a = _as_tensor(a)
    out = _node(np.exp(a.data), (a,), None, "exp")
    if out.parents is not None:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    out = _node(_sigmoid_values(np.atleast_1d(a.data)).reshape(a.shape), (a,), None, "sigmoid")
    if out.parents is not None:
        one = Tensor(np.ones_like(out.data))
        out._vjp = lambda g: (mul(g, mul(out, sub(one, out))),)
    return out


def softplus(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _node(data, (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def softmax_rows(a):
    """Row-wise softmax of a matrix."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a matrix, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = _node(s, (a,), None, "softmax")
    if out.parents is not None:
        ones_mm = Tensor(np.ones((a.shape[1], a.shape[1])))

        def vjp(g):
            gs = mul(g, out)
            return (mul(out, sub(g, matmul(gs, ones_mm))),)

        out._vjp = vjp
    return out


def log_softmax_rows(a):
    """Row-wise log-softmax; the numerically safe way to feed cross-entropy."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"log_softmax_rows expects a matrix, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = _node(shifted - lse, (a,), None, "log_softmax")
    if out.parents is not None:
        ones_mm = Tensor(np.ones((a.shape[1], a.shape[1])))

        def vjp(g):
            return (sub(g, mul(exp(out), matmul(g, ones_mm))),)

        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape
    return _node(a.data.sum(), (a,), lambda g: (broadcast_to(g, shape),), "sum")


def sum_axis0(a):
    """Column sums of a matrix: (n, m) -> (m,)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"sum_axis0 expects a matrix, got {a.shape}")
    shape = a.shape
    return _node(a.data.sum(axis=0), (a,), lambda g: (broadcast_to(g, shape),), "sum0")


def mean_all(a):
    a = _as_tensor(a)
    return scale(sum_all(a), 1.0 / a.size)


def mean_axis0(a):
    a = _as_tensor(a)
    return scale(sum_axis0(a), 1.0 / a.shape[0])


def dot(a, b):
    """Scalar product of two equally shaped tensors."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# layout ops


def concat(parts, axis=1):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat of an empty list")
    if axis not in (0, 1):
        raise ShapeMismatch(f"concat axis must be 0 or 1, got {axis}")
    if any(p.ndim != 2 for p in parts):
        raise ShapeMismatch("concat expects matrices")
    other = 1 - axis
    ref = parts[0].shape[other]
    if any(p.shape[other] != ref for p in parts):
        raise ShapeMismatch(f"concat: mismatched sizes along axis {other}")
    widths = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def vjp(g):
        if axis == 1:
            return tuple(slice_cols(g, offsets[i], offsets[i + 1]) for i in range(len(parts)))
        return tuple(slice_rows(g, offsets[i], offsets[i + 1]) for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp, "concat")


def slice_cols(a, j0, j1):
    a = _as_tensor(a)
    if a.ndim != 2 or not (0 <= j0 <= j1 <= a.shape[1]):
        raise ShapeMismatch(f"slice_cols [{j0}:{j1}] of shape {a.shape}")
    width = a.shape[1]
    return _node(a.data[:, j0:j1].copy(), (a,), lambda g: (pad_cols(g, j0, width),), "slice_cols")


def pad_cols(a, j0, width):
    a = _as_tensor(a)
    if a.ndim != 2 or j0 + a.shape[1] > width:
        raise ShapeMismatch(f"pad_cols of {a.shape} at {j0} into width {width}")
    j1 = j0 + a.shape[1]
    data = np.zeros((a.shape[0], width))
    data[:, j0:j1] = a.data
    return _node(data, (a,), lambda g: (slice_cols(g, j0, j1),), "pad_cols")


def slice_rows(a, i0, i1):
    a = _as_tensor(a)
    if a.ndim != 2 or not (0 <= i0 <= i1 <= a.shape[0]):
        raise ShapeMismatch(f"slice_rows [{i0}:{i1}] of shape {a.shape}")
    height = a.shape[0]
    return _node(a.data[i0:i1, :].copy(), (a,), lambda g: (pad_rows(g, i0, height),), "slice_rows")


def pad_rows(a, i0, height):
    a = _as_tensor(a)
    if a.ndim != 2 or i0 + a.shape[0] > height:
        raise ShapeMismatch(f"pad_rows of {a.shape} at {i0} into height {height}")
    i1 = i0 + a.shape[0]
    data = np.zeros((height, a.shape[1]))
    data[i0:i1, :] = a.data
    return _node(data, (a,), lambda g: (slice_rows(g, i0, i1),), "pad_rows")


def gather_rows(a, index):
    """Select rows by integer index; repeated indices are allowed."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"gather_rows expects a matrix, got {a.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
        raise ShapeMismatch("gather_rows: index out of range")
    n_rows = a.shape[0]
    return _node(a.data[index].copy(), (a,), lambda g: (scatter_rows(g, index, n_rows),), "gather")


def scatter_rows(a, index, n_rows):
    """Sum rows of ``a`` into an (n_rows, m) matrix at positions ``index``."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeMismatch("scatter_rows: index length must match row count")
    data = np.zeros((int(n_rows), a.shape[1]))
    np.add.at(data, index, a.data)
    return _node(data, (a,), lambda g: (gather_rows(g, index),), "scatter")


# ---------------------------------------------------------------------------
# differentiation


def grad(output, wrt, create_graph=False):
    """Reverse-mode gradients of a scalar ``output`` for every tensor in ``wrt``.

    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned gradients support a further :func:`grad` call. Parameters that
    the output does not depend on receive zero gradients (counted in
    ``unreachable_count``, not an error).
    """
    output = _as_tensor(output)
    if output.shape != ():
        raise ShapeMismatch(f"grad expects a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    order = _topo(output)
    grads = {id(output): Tensor(1.0)}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for t in order:
            g = grads.get(id(t))
            if g is None or t.parents is None:
                continue
            for p, pg in zip(t.parents, t._vjp(g)):
                if pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    global unreachable_count
    result = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            unreachable_count += 1
            logger.debug("grad: parameter unreachable from output, returning zeros")
            g = Tensor(np.zeros_like(w.data))
        result.append(g)
    return result


def _topo(root):
    """Nodes reachable from ``root``, root first, parents after children."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.parents is not None:
            for p in t.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    order.reverse()
    return order
