"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: row-major arrays of at most two dimensions, explicit
backward rules per op, no broadcasting beyond bias-add and scalar tensors.
Every op validates that its output is finite and raises NonFiniteError
otherwise, so divergence surfaces at the op that produced it.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for tensor/graph errors."""


class DimensionError(AutodiffError):
    """Shapes do not conform to the op's contract."""


class NonFiniteError(AutodiffError):
    """A value produced or supplied to an op is NaN or infinite."""


class ContractError(AutodiffError):
    """An op precondition other than shape was violated."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in output of {op}")


class Tensor:
    """A node in the compute graph: cached forward value, backward closure.

    Leaves are created directly; interior nodes are created by ops.  `grad`
    on a leaf with requires_grad accumulates across backward() calls until
    explicitly zeroed (the optimizer owns zeroing).
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _prev=(), _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        if _op == "leaf":
            _check_finite(arr, "leaf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def values(self) -> np.ndarray:
        """Flat row-major copy of the forward value."""
        return self.data.reshape(-1).copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # Operator sugar for the common cases; module functions carry the rules.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, prev, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in prev)
    out._prev = tuple(prev)
    out._backward = None
    out._op = op
    return out


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b) -> Tensor:
    """a + b: same shape, matrix + row-vector bias, scalar tensor, or number."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out = _node(a.data + b, (a,), "add_const")

        def bw(g):
            return (g,)

        out._backward = bw
        return out
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = _node(a.data + b.data, (a, b), "add")

        def bw(g):
            return g, g

        out._backward = bw
        return out
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = _node(a.data + b.data[None, :], (a, b), "bias_add")

        def bw(g):
            return g, g.sum(axis=0)

        out._backward = bw
        return out
    if b.data.ndim == 0:
        out = _node(a.data + b.data, (a, b), "scalar_add")

        def bw(g):
            return g, np.asarray(g.sum())

        out._backward = bw
        return out
    raise DimensionError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    """a * b elementwise: same shape, scalar tensor, or number."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out = _node(a.data * b, (a,), "mul_const")

        def bw(g, b=float(b)):
            return (g * b,)

        out._backward = bw
        return out
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = _node(a.data * b.data, (a, b), "mul")

        def bw(g):
            return g * b.data, g * a.data

        out._backward = bw
        return out
    if b.data.ndim == 0:
        out = _node(a.data * b.data, (a, b), "scalar_mul")

        def bw(g):
            return g * b.data, np.asarray((g * a.data).sum())

        out._backward = bw
        return out
    raise DimensionError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul requires 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree ({a.data.shape} x {b.data.shape})"
        )
    out = _node(a.data @ b.data, (a, b), "matmul")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    out._backward = bw
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Sum of elementwise products of two same-shape tensors; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"dot: shapes differ {a.data.shape} vs {b.data.shape}")
    out = _node(np.asarray((a.data * b.data).sum()), (a, b), "dot")

    def bw(g):
        return g * b.data, g * a.data

    out._backward = bw
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose requires a 2-D tensor")
    out = _node(a.data.T.copy(), (a,), "transpose")

    def bw(g):
        return (g.T,)

    out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")

    def bw(g):
        return (g * (a.data > 0.0),)

    out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = _node(s, (a,), "sigmoid")

    def bw(g):
        return (g * s * (1.0 - s),)

    out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    out = _node(e, (a,), "exp")

    def bw(g):
        return (g * e,)

    out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0.0).any():
        raise ContractError("log requires strictly positive input")
    out = _node(np.log(a.data), (a,), "log")

    def bw(g):
        return (g / a.data,)

    out._backward = bw
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a fixed exponent; requires a > 0 unless p is a
    non-negative integer."""
    a = _as_tensor(a)
    if p != int(p) or p < 0:
        if (a.data <= 0.0).any():
            raise ContractError(f"pow_const({p}) requires strictly positive input")
    out = _node(a.data ** p, (a,), "pow_const")

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    out._backward = bw
    return out


def total(a: Tensor) -> Tensor:
    """Sum of all elements; scalar output."""
    a = _as_tensor(a)
    out = _node(np.asarray(a.data.sum()), (a,), "sum")

    def bw(g):
        return (np.full_like(a.data, float(g)),)

    out._backward = bw
    return out


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return mul(total(a), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise DimensionError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _node(p, (a,), "softmax")

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    out._backward = bw
    return out


def log_softmax(a: Tensor) -> Tensor:
    """log softmax over a 1-D tensor; safe for large-magnitude logits."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.data.size == 0:
        raise DimensionError("log_softmax requires a non-empty 1-D tensor")
    shifted = a.data - a.data.max()
    lse = np.log(np.exp(shifted).sum())
    out = _node(shifted - lse, (a,), "log_softmax")
    p = np.exp(shifted - lse)

    def bw(g):
        return (g - p * g.sum(),)

    out._backward = bw
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    n = a.data.shape[-1]
    if n < 2:
        raise DimensionError("layer_norm requires last-axis length >= 2")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise DimensionError("layer_norm gain/bias must be 1-D of the same width")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = _node(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm")

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# structural ops


def row(a: Tensor, i: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row requires a 2-D tensor")
    out = _node(a.data[i].copy(), (a,), "row")

    def bw(g):
        da = np.zeros_like(a.data)
        da[i] = g
        return (da,)

    out._backward = bw
    return out


def element(a: Tensor, i: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise DimensionError("element requires a 1-D tensor")
    out = _node(np.asarray(a.data[i]), (a,), "element")

    def bw(g):
        da = np.zeros_like(a.data)
        da[i] = g
        return (da,)

    out._backward = bw
    return out


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices accumulate on backward."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("take_rows requires a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    out = _node(a.data[idx].copy(), (a,), "take_rows")

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    out._backward = bw
    return out


def stack(items: list) -> Tensor:
    """Stack k same-shape tensors along a new leading axis (scalars -> vector,
    vectors -> matrix)."""
    if not items:
        raise DimensionError("stack of an empty list")
    items = [_as_tensor(t) for t in items]
    shape = items[0].data.shape
    if any(t.data.shape != shape for t in items):
        raise DimensionError("stack requires identical shapes")
    if len(shape) > 1:
        raise DimensionError("stack output would exceed 2-D")
    out = _node(np.stack([t.data for t in items]), tuple(items), "stack")

    def bw(g):
        return tuple(g[i] for i in range(len(items)))

    out._backward = bw
    return out


def cols(a: Tensor, lo: int, hi: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("cols requires a 2-D tensor")
    out = _node(a.data[:, lo:hi].copy(), (a,), "cols")

    def bw(g):
        da = np.zeros_like(a.data)
        da[:, lo:hi] = g
        return (da,)

    out._backward = bw
    return out


def concat_cols(items: list) -> Tensor:
    items = [_as_tensor(t) for t in items]
    if not items or any(t.data.ndim != 2 for t in items):
        raise DimensionError("concat_cols requires 2-D tensors")
    widths = [t.data.shape[1] for t in items]
    out = _node(np.concatenate([t.data for t in items], axis=1), tuple(items), "concat_cols")

    def bw(g):
        grads, at = [], 0
        for w in widths:
            grads.append(g[:, at : at + w])
            at += w
        return tuple(grads)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Visits the graph in reverse topological order exactly once.  Leaf tensors
    with requires_grad accumulate into .grad across calls; interior nodes get
    this sweep's gradient only.
    """
    if root.data.size != 1:
        raise ContractError("backward requires a scalar (single-element) root")

    order: list[Tensor] = []
    seen = {id(root)}
    stack_ = [(root, iter(root._prev))]
    while stack_:
        node, it = stack_[-1]
        child = next((c for c in it if id(c) not in seen and c.requires_grad), None)
        if child is None:
            order.append(node)
            stack_.pop()
        else:
            seen.add(id(child))
            stack_.append((child, iter(child._prev)))

    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flow.get(id(node))
        if g is None:
            continue
        if node._prev and node._backward is not None:
            for child, cg in zip(node._prev, node._backward(g)):
                if not child.requires_grad:
                    continue
                prior = flow.get(id(child))
                flow[id(child)] = cg.copy() if prior is None else prior + cg
        if node.requires_grad:
            if node._op == "leaf":
                node.grad = g.copy() if node.grad is None else node.grad + g
            else:
                node.grad = g


def zero_grads(params) -> None:
    """Clear gradients on an iterable (or dict) of parameter tensors."""
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None
