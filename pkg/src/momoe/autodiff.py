"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in reverse
topological order. Leaf gradients accumulate across calls; callers zero
them explicitly (``zero_grad``) between steps.

Broadcasting is limited to what ``_unbroadcast`` can sum back: scalars,
row vectors (bias add) and column vectors (per-token scales).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "DegenerateInputError",
    "TrainingDivergence",
    "tensor",
    "backward",
    "matmul",
    "softmax",
    "topk_mask",
    "index_add",
    "cross_entropy",
    "SGD",
    "Adam",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An op received NaN or +/-inf where only finite values are allowed."""


class DegenerateInputError(ValueError):
    """Softmax input with no finite entry."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite value in op input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"shapes {a} and {b} do not broadcast") from exc


class Tensor:
    """A float64 array that optionally participates in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ) -> None:
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        _check_finite(self.data, other.data)
        _broadcast_ok(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        _check_finite(self.data)
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        _check_finite(self.data, other.data)
        _broadcast_ok(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        _check_finite(self.data, other.data)
        _broadcast_ok(self.shape, other.shape)
        a, b = self.data, other.data
        sa, sb = self.shape, other.shape
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, sa), _unbroadcast(g * a, sb)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        _check_finite(self.data, other.data)
        _broadcast_ok(self.shape, other.shape)
        a, b = self.data, other.data
        sa, sb = self.shape, other.shape
        out = a / b
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, sa), _unbroadcast(-g * out / b, sb)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape
        out = self.data[idx]

        def bw(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.array(out, dtype=np.float64), (self,), bw)

    # -- elementwise functions -------------------------------------------
    def relu(self) -> "Tensor":
        _check_finite(self.data)
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def square(self) -> "Tensor":
        _check_finite(self.data)
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * a * g,))

    def sqrt(self) -> "Tensor":
        _check_finite(self.data)
        if np.any(self.data < 0):
            raise ContractError("sqrt of negative entry")
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def exp(self) -> "Tensor":
        _check_finite(self.data)
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        _check_finite(self.data)
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sigmoid(self) -> "Tensor":
        _check_finite(self.data)
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self) -> "Tensor":
        _check_finite(self.data)
        a = self.data
        out = np.logaddexp(0.0, a)
        sig = 0.5 * (1.0 + np.tanh(0.5 * a))
        return Tensor._make(out, (self,), lambda g: (g * sig,))

    def expm1_over(self) -> "Tensor":
        """(e^z - 1)/z elementwise, continuous at z = 0 with value 1."""
        _check_finite(self.data)
        z = self.data
        small = np.abs(z) < 1e-5
        zs = np.where(small, 1.0, z)
        out = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(zs) / zs)
        deriv = np.where(
            small,
            0.5 + z / 3.0 + z * z / 8.0,
            (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs),
        )
        return Tensor._make(out, (self,), lambda g: (g * deriv,))

    # -- reductions & reshaping --------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        _check_finite(self.data)
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def norm(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        """Euclidean norm; the gradient at an exactly-zero norm is taken as 0."""
        _check_finite(self.data)
        a = self.data
        out = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
        safe = np.where(out > 0, out, 1.0)
        if keepdims:
            res = out
        else:
            res = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

        def bw(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis) if axis is not None else g.reshape((1,) * a.ndim)
            return (np.where(out > 0, g * a / safe, 0.0),)

        return Tensor._make(res, (self,), bw)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError("transpose requires a 2-d tensor")
        return Tensor._make(self.data.T.copy(), (self,), lambda g: (g.T,))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    _check_finite(a.data, b.data)
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; -inf entries map to exactly 0."""
    v = _as_tensor(v)
    d = v.data
    if np.any(np.isnan(d)) or np.any(d == np.inf):
        raise NonFiniteError("softmax input contains NaN or +inf")
    finite = np.isfinite(d)
    if not np.all(np.any(finite, axis=axis)):
        raise DegenerateInputError("softmax input has no finite entry")
    shift = np.max(np.where(finite, d, -np.inf), axis=axis, keepdims=True)
    e = np.where(finite, np.exp(np.where(finite, d - shift, 0.0)), 0.0)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._make(out, (v,), bw)


def topk_mask(g: Tensor, k: int) -> Tensor:
    """Keep the ``k`` largest entries of each row (lowest index wins ties), -inf elsewhere.

    Selection is piecewise constant, so the gradient passes through kept
    entries only.
    """
    g = _as_tensor(g)
    n = g.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"K={k} outside [1, {n}]")
    _check_finite(g.data)
    keep = topk_indices(g.data, k)
    mask = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(mask, keep, True, axis=-1)
    out = np.where(mask, g.data, -np.inf)
    return Tensor._make(out, (g,), lambda grad: (np.where(mask, grad, 0.0),))


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ties to the lowest index."""
    # stable sort of the negated scores keeps equal scores in index order
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def index_add(base: Tensor, idx, src: Tensor) -> Tensor:
    """``base`` with ``src`` added into rows ``idx`` (repeated rows sum)."""
    base, src = _as_tensor(base), _as_tensor(src)
    _check_finite(base.data, src.data)
    out = base.data.copy()
    np.add.at(out, idx, src.data)
    return Tensor._make(out, (base, src), lambda g: (g, g[idx]))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax(logits)."""
    logits = _as_tensor(logits)
    _check_finite(logits.data)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    return Tensor._make(np.array(loss), (logits,), bw)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order  # parents precede children


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from scalar ``root``.

    Leaf gradients are added to any existing ``.grad`` (explicit zeroing policy).
    """
    if root.size != 1:
        raise ContractError("backward requires a scalar root")
    if not root.requires_grad:
        return
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


Tensor.backward = backward  # type: ignore[attr-defined]


# -- outer-loop optimizers -----------------------------------------------------

def _check_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergence(f"non-finite gradient in parameter {p.name or '?'}")


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        _check_grads(self.params)
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            p.data = p.data - self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction and decoupled weight decay (AdamW when weight_decay > 0)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        _check_grads(self.params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def numerical_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data`` (perturbed in place)."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise worst case."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

