"""Dense float32 tensors with a reverse-mode tape.

Every differentiable operation records its parents and a vector-Jacobian
closure on the output tensor. Calling :meth:`Tensor.backward` walks the
reachable nodes in reverse creation order and accumulates gradients.

Broadcasting is limited to scalar-vs-tensor; the only other shape
coupling is :func:`add_rowvec`, used for dense-layer biases.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float32

_ids = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]
Operand = Union["Tensor", float, int]


class Tensor:
    """An immutable float32 array that can take part in autodiff.

    ``grad`` is populated by :meth:`backward` on every reachable node that
    requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_id")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        allow_nonfinite: bool = False,
    ):
        arr = np.array(data, dtype=DTYPE)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains NaN or Inf values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable] = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for reachable nodes.

        Without an explicit seed the tensor must hold a single element.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed needs a one-element tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.array(grad, dtype=DTYPE).reshape(self.shape)

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes or not node.requires_grad:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)

        grads = {self._id: seed}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node.grad = g.astype(DTYPE) if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)


class Parameter(Tensor):
    """A trainable leaf tensor whose value may be updated in place."""

    __slots__ = ("trainable",)

    def __init__(self, data: ArrayLike, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = bool(trainable)

    def assign(self, value: ArrayLike) -> None:
        arr = np.array(value, dtype=DTYPE).reshape(self.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter update produced NaN or Inf")
        self.data = arr

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str = "custom",
) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``vjp`` maps the upstream gradient to one gradient per parent (``None``
    for parents that receive nothing).
    """
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.shape == (1,)


def _binary_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(np.sum(g, dtype=np.float64), dtype=DTYPE).reshape(t.shape)


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return custom_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return custom_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    out = a.data / b.data
    return custom_op(
        out,
        (a, b),
        lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)),
        "div",
    )


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return custom_op(np.where(mask, a.data, 0).astype(DTYPE), (a,), lambda g: (g * mask,), "relu")


def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Operand) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
}


def elementwise(op: str, a: Operand, b: Optional[Operand] = None) -> Tensor:
    """Dispatch an elementwise operation by tag (``"add"``, ``"relu"``, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a) if b is None else fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} vs {b.shape}")
    return custom_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix (dense-layer bias)."""
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise ValueError(f"shape mismatch: {x.shape} vs {v.shape}")
    return custom_op(
        x.data + v.data,
        (x, v),
        lambda g: (g, np.sum(g, axis=0, dtype=np.float64)),
        "add_rowvec",
    )


def take(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), vjp, "take")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# -- reductions -----------------------------------------------------------


def _check_nonempty(a: Tensor) -> None:
    if a.size == 0:
        raise ValueError("reduction over an empty tensor")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    _check_nonempty(a)
    out = np.sum(a.data, dtype=np.float64)
    return custom_op(out, (a,), lambda g: (np.full(a.shape, g, dtype=DTYPE),), "sum")


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _check_nonempty(a)
    n = a.size
    out = np.mean(a.data, dtype=np.float64)
    return custom_op(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=DTYPE),), "mean")


def variance(a: Tensor) -> Tensor:
    """Population variance E[(x - E x)^2]."""
    a = as_tensor(a)
    _check_nonempty(a)
    x = a.data.astype(np.float64)
    centered = x - x.mean()
    out = np.mean(centered * centered)
    return custom_op(out, (a,), lambda g: (g * 2.0 * centered / a.size,), "variance")


def _arg_reduce(a: Tensor, idx: int, op: str) -> Tensor:
    flat = a.data.reshape(-1)

    def vjp(g):
        full = np.zeros(a.size, dtype=DTYPE)
        full[idx] = g
        return (full.reshape(a.shape),)

    return custom_op(flat[idx], (a,), vjp, op)


def max(a: Tensor) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first maximal element in flat order."""
    a = as_tensor(a)
    _check_nonempty(a)
    return _arg_reduce(a, int(np.argmax(a.data.reshape(-1))), "max")


def min(a: Tensor) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    _check_nonempty(a)
    return _arg_reduce(a, int(np.argmin(a.data.reshape(-1))), "min")


_REDUCTIONS = {"sum": sum, "mean": mean, "variance": variance, "max": max, "min": min}


def reduce(op: str, a: Tensor) -> Tensor:
    try:
        fn = _REDUCTIONS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(a)


# -- composite ops --------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        g = g.astype(np.float64)
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return custom_op(p, (a,), vjp, "softmax")


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-d, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return custom_op(loss, (logits,), vjp, "softmax_ce")


def custom_grad(
    forward: Callable[[np.ndarray], np.ndarray], x: Tensor, multiplier: float = 1.0
) -> Tensor:
    """Apply ``forward`` to ``x`` and pass gradients straight through.

    The backward pass scales the upstream gradient by ``multiplier`` and
    ignores the true Jacobian of ``forward``.
    """
    x = as_tensor(x)
    out = np.asarray(forward(x.data), dtype=DTYPE)
    if out.shape != x.shape:
        raise ValueError(f"custom_grad forward changed shape {x.shape} -> {out.shape}")
    m = DTYPE(multiplier)
    return custom_op(out, (x,), lambda g: (g * m,), "custom_grad")
