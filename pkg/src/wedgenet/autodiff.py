"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape-based engine providing exactly the operations the point-cloud
network needs. Tensors wrap a numpy array; operations return new tensors
that remember how to push gradients back to their parents. Calling
``backward()`` on a scalar result walks the graph once in reverse
topological order.

Design notes:
  * Gradients are plain numpy arrays on ``Tensor.grad``, accumulated by
    addition so shared subexpressions work.
  * Operations only record backward closures when some input requires a
    gradient, so inference-only forward passes build no graph at all.
  * The heavy scatter in ``gather_rows`` uses a sparse matrix product,
    which is both deterministic and much faster than ``np.add.at``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import ConfigError, InputError, ShapeError

__all__ = [
    "Tensor",
    "matmul",
    "add",
    "sub",
    "concat",
    "reshape",
    "slice_rows",
    "gather_rows",
    "repeat_rows",
    "edge_combine",
    "leaky_relu",
    "group_norm",
    "reduce_max_with_argmax",
    "reduce_mean",
    "dropout",
    "weighted_cross_entropy",
]


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this tensor, which must hold a single value."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar tensor, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Iterative post-order walk over the subgraph that requires gradients."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accum(t, g, fresh):
    """Add ``g`` into ``t.grad``.

    ``fresh`` marks arrays the caller just allocated and will not reuse;
    anything else (views into another tensor's gradient, broadcasts) gets
    copied before it is stored so later in-place accumulation cannot
    corrupt a neighbour.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(a, b), _backward=backward)


def _row_broadcast(a_shape, b_shape):
    """True when ``b`` is a single row to add onto every row of ``a``."""
    if len(b_shape) == 1:
        return len(a_shape) >= 1 and a_shape[-1] == b_shape[0]
    if len(b_shape) == 2 and b_shape[0] == 1:
        return len(a_shape) == 2 and a_shape[1] == b_shape[1]
    return False


def add(a, b):
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
    if a.shape == b.shape:
        broadcast = False
    elif _row_broadcast(a.shape, b.shape):
        broadcast = True
    else:
        raise ShapeError(f"add cannot combine shapes {a.shape} and {b.shape}")
    out = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g):
        if a.requires_grad:
            _accum(a, g, fresh=False)
        if b.requires_grad:
            if broadcast:
                axes = tuple(range(g.ndim - 1))
                _accum(b, g.sum(axis=axes).reshape(b.shape), fresh=True)
            else:
                _accum(b, g, fresh=False)

    return Tensor(out, requires_grad=True, _parents=(a, b), _backward=backward)


def sub(a, b):
    """Elementwise difference of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"sub needs matching shapes, got {a.shape} and {b.shape}")
    out = a.data - b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g):
        if a.requires_grad:
            _accum(a, g, fresh=False)
        if b.requires_grad:
            _accum(b, -g, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(a, b), _backward=backward)


def concat(a, b, axis):
    """Concatenate two tensors along ``axis``."""
    if a.ndim != b.ndim:
        raise ShapeError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    axis = int(axis)
    if axis < 0:
        axis += a.ndim
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"concat axis {axis} out of range for rank {a.ndim}")
    for d in range(a.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeError(f"concat shapes disagree off-axis: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=axis)
    if not _needs_grad(a, b):
        return Tensor(out)
    split = a.shape[axis]
    sel_a = tuple(
        slice(None) if d != axis else slice(0, split) for d in range(a.ndim)
    )
    sel_b = tuple(
        slice(None) if d != axis else slice(split, None) for d in range(a.ndim)
    )

    def backward(g):
        if a.requires_grad:
            _accum(a, g[sel_a], fresh=False)
        if b.requires_grad:
            _accum(b, g[sel_b], fresh=False)

    return Tensor(out, requires_grad=True, _parents=(a, b), _backward=backward)


def reshape(x, shape):
    """Reshape without changing element count."""
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}: {exc}") from exc
    if not x.requires_grad:
        return Tensor(out)
    orig = x.data.shape

    def backward(g):
        _accum(x, g.reshape(orig), fresh=False)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def slice_rows(x, start, stop):
    """Contiguous row slice of a rank-2 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"slice_rows expects a rank-2 tensor, got {x.shape}")
    n = x.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for {n} rows")
    out = x.data[start:stop]
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accum(x, full, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def gather_rows(x, indices):
    """Select rows ``x[indices]``; duplicate indices are allowed.

    The backward pass scatter-adds gradient rows back to their sources.
    """
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a rank-2 tensor, got {x.shape}")
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.dtype.kind not in "iu":
        raise InputError("gather_rows indices must be a 1-d integer array")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InputError(f"gather_rows index out of range for {n} rows")
    out = x.data[idx]
    if not x.requires_grad:
        return Tensor(out)
    # Transpose of the row-selection operator; a CSR product is the fastest
    # deterministic scatter-add available here.
    r = idx.size
    mat_t = sp.csr_array(
        (np.ones(r, dtype=x.dtype), (idx.astype(np.int64), np.arange(r))),
        shape=(n, r),
    )

    def backward(g):
        _accum(x, mat_t @ g, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def repeat_rows(x, reps):
    """Repeat each row of a rank-2 tensor ``reps`` times in place."""
    if x.ndim != 2:
        raise ShapeError(f"repeat_rows expects a rank-2 tensor, got {x.shape}")
    reps = int(reps)
    if reps < 1:
        raise InputError(f"repeat_rows needs reps >= 1, got {reps}")
    out = np.repeat(x.data, reps, axis=0)
    if not x.requires_grad:
        return Tensor(out)
    n, c = x.shape

    def backward(g):
        _accum(x, g.reshape(n, reps, c).sum(axis=1), fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def edge_combine(center, offset, neighbors):
    """Edge rows ``center[i] + offset[neighbors[i, j]]`` flattened to
    ``(n * k, c)`` in row-major edge order.

    Fused equivalent of ``add(repeat_rows(center, k),
    gather_rows(offset, neighbors.ravel()))`` without the three
    materialized intermediates.
    """
    if center.ndim != 2 or offset.ndim != 2:
        raise ShapeError(
            f"edge_combine expects rank-2 tensors, got {center.shape} and {offset.shape}"
        )
    if center.shape[1] != offset.shape[1]:
        raise ShapeError(
            f"channel mismatch: center {center.shape} vs offset {offset.shape}"
        )
    nbr = np.asarray(neighbors)
    if nbr.ndim != 2 or nbr.dtype.kind not in "iu":
        raise InputError("edge_combine neighbors must be a 2-d integer array")
    if nbr.shape[0] != center.shape[0]:
        raise ShapeError(
            f"neighbors has {nbr.shape[0]} rows but center has {center.shape[0]}"
        )
    m = offset.shape[0]
    if nbr.size and (nbr.min() < 0 or nbr.max() >= m):
        raise InputError(f"edge_combine neighbor index out of range for {m} rows")
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    out = _kernels.edge_combine(
        np.ascontiguousarray(center.data), np.ascontiguousarray(offset.data), nbr
    )
    if not _needs_grad(center, offset):
        return Tensor(out)

    def backward(g):
        dcenter, doffset = _kernels.edge_combine_grad(np.ascontiguousarray(g), nbr, m)
        if center.requires_grad:
            _accum(center, dcenter, fresh=True)
        if offset.requires_grad:
            _accum(offset, doffset, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(center, offset), _backward=backward)


def leaky_relu(x, slope):
    """Elementwise ``x if x > 0 else slope * x``."""
    slope = float(slope)
    xd = np.ascontiguousarray(x.data)
    out = _kernels.leaky_forward(xd, slope)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        _accum(x, _kernels.leaky_backward(xd, np.ascontiguousarray(g), slope), fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def group_norm(x, groups, gamma, beta, eps=1e-8):
    """Normalize each row of ``x`` over contiguous channel groups.

    Every row is treated independently: its channels are split into
    ``groups`` equal contiguous blocks, each block is shifted to zero mean
    and scaled to unit variance (biased variance over the block), and the
    per-channel affine ``gamma``/``beta`` is applied.
    """
    if x.ndim != 2:
        raise ShapeError(f"group_norm expects a rank-2 tensor, got {x.shape}")
    rows, ch = x.shape
    groups = int(groups)
    if groups < 1 or ch % groups != 0:
        raise ConfigError(f"channel count {ch} is not divisible by groups={groups}")
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(
            f"gamma/beta must have shape ({ch},), got {gamma.shape} and {beta.shape}"
        )
    eps = float(eps)
    out, xhat, inv = _kernels.gn_forward(
        np.ascontiguousarray(x.data), groups, gamma.data, beta.data, eps
    )
    if not _needs_grad(x, gamma, beta):
        return Tensor(out)

    def backward(g):
        dx, dgamma, dbeta = _kernels.gn_backward(
            np.ascontiguousarray(g), gamma.data, xhat, inv, groups
        )
        if gamma.requires_grad:
            _accum(gamma, dgamma, fresh=True)
        if beta.requires_grad:
            _accum(beta, dbeta, fresh=True)
        if x.requires_grad:
            _accum(x, dx, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x, gamma, beta), _backward=backward)


def reduce_max_with_argmax(x, axis):
    """Maximum along ``axis`` plus the winning indices.

    Ties go to the lowest index. The backward pass routes gradient only to
    the winners; every other input position receives exactly zero.
    """
    axis = int(axis)
    if axis < 0:
        axis += x.ndim
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise ShapeError(f"cannot reduce empty axis {axis} of shape {x.shape}")
    if x.ndim == 3 and axis == 1:
        xd = np.ascontiguousarray(x.data)
        out, arg = _kernels.max_mid(xd)
        k = x.shape[1]
        if not x.requires_grad:
            return Tensor(out), arg

        def backward(g):
            _accum(x, _kernels.max_mid_grad(np.ascontiguousarray(g), arg, k), fresh=True)

        return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward), arg
    if x.ndim == 2 and axis == 0:
        xd = np.ascontiguousarray(x.data)
        out, arg = _kernels.max_head(xd)
        n = x.shape[0]
        if not x.requires_grad:
            return Tensor(out), arg

        def backward(g):
            _accum(x, _kernels.max_head_grad(np.ascontiguousarray(g), arg, n), fresh=True)

        return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward), arg
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    if not x.requires_grad:
        return Tensor(out), arg

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(x, full, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward), arg


def reduce_mean(x, axis):
    """Arithmetic mean along ``axis``."""
    axis = int(axis)
    if axis < 0:
        axis += x.ndim
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    count = x.shape[axis]
    if count == 0:
        raise ShapeError(f"cannot reduce empty axis {axis} of shape {x.shape}")
    out = x.data.mean(axis=axis)
    if not x.requires_grad:
        return Tensor(out)
    shape = x.data.shape

    def backward(g):
        expand = np.expand_dims(g, axis) / count
        _accum(x, np.broadcast_to(expand, shape), fresh=False)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def dropout(x, p, seed):
    """Zero each element with probability ``p`` and rescale the survivors.

    The mask is drawn from a generator seeded with ``seed`` so a forward
    pass is reproducible. ``p == 0`` is the identity.
    """
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= p).astype(x.dtype)
    mask /= 1.0 - p
    out = x.data * mask
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        _accum(x, g * mask, fresh=True)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def weighted_cross_entropy(logits, label, weight):
    """Cross-entropy of one sample against integer ``label``, scaled by ``weight``.

    ``logits`` holds one row of class scores (shape ``(C,)`` or ``(1, C)``).
    The implementation subtracts the max before exponentiating, so large
    scores do not overflow.
    """
    flat = logits.data.reshape(-1)
    c = flat.size
    if logits.ndim > 2 or (logits.ndim == 2 and logits.shape[0] != 1):
        raise ShapeError(f"expected a single row of logits, got shape {logits.shape}")
    if c < 2:
        raise InputError(f"need at least 2 classes, got {c}")
    label = int(label)
    if not 0 <= label < c:
        raise InputError(f"label {label} out of range for {c} classes")
    weight = float(weight)
    if not weight > 0:
        raise InputError(f"class weight must be positive, got {weight}")
    shifted = flat - flat.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = weight * (np.log(total) - shifted[label])
    out = np.asarray(loss, dtype=logits.dtype)
    if not logits.requires_grad:
        return Tensor(out)
    shape = logits.data.shape

    def backward(g):
        prob = exp / total
        prob[label] -= 1.0
        _accum(logits, (weight * float(g)) * prob.reshape(shape), fresh=True)

    return Tensor(out, requires_grad=True, _parents=(logits,), _backward=backward)
