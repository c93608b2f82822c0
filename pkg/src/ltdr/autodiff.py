"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape: every operation records its parents and a closure that maps the
output adjoint to parent adjoints. ``Tensor.backward()`` walks the recorded
graph once in reverse topological order and accumulates d(loss)/d(tensor)
into every gradient-tracking tensor it reaches. Gradients accumulate across
repeated backward calls; reset with ``zero_grad``.

Everything is float64. Graphs are single-threaded; distinct graphs share no
mutable state and may run in parallel threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "matmul",
    "add",
    "mul",
    "gelu",
    "softmax_rows",
    "cross_entropy",
    "variance_rows",
    "normalize_rows",
    "mix",
    "finite_difference_gradient",
]

# tanh-form gelu constants
_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(ValueError):
    """A graph-level contract was violated (e.g. backward on a non-scalar)."""


# An op's backward closure receives the output adjoint and yields
# (parent, adjoint, owned) triples. ``owned`` marks adjoints the closure
# created itself; unowned ones alias the output adjoint and are copied
# before being stored in a tensor's grad buffer.
_BackwardFn = Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray, bool]]]


class Tensor:
    """A dense float64 array with optional gradient tracking.

    ``grad`` is present (a same-shape buffer, lazily zero-initialised) iff
    ``requires_grad`` is set; it is None otherwise.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _BackwardFn | None = None

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def backward(self) -> None:
        """Accumulate d(self)/d(tensor) into every tracked tensor in the graph.

        ``self`` must be scalar (0-d). On a tensor with no tracked ancestry
        this is a no-op. Repeated calls without ``zero_grad`` accumulate.
        """
        if self.data.ndim != 0:
            raise GraphError(
                f"backward expects a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return

        # Postorder DFS (iterative; graphs can be long chains): parents land
        # before children, so reversed order visits the loss first.
        topo: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack[-1]
            parents = node._parents
            while i < len(parents) and (
                id(parents[i]) in visited or not parents[i].requires_grad
            ):
                i += 1
            if i < len(parents):
                stack[-1] = (node, i + 1)
                child = parents[i]
                visited.add(id(child))
                stack.append((child, 0))
            else:
                topo.append(node)
                stack.pop()

        # adjoints keyed by id; values are (array, owned)
        adjoints: dict[int, tuple[np.ndarray, bool]] = {
            id(self): (np.ones((), dtype=np.float64), True)
        }
        for node in reversed(topo):
            entry = adjoints.pop(id(node), None)
            if entry is None:
                continue
            g, owned = entry
            if node._backward is not None:
                for parent, pg, powned in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    cur = adjoints.get(key)
                    if cur is None:
                        adjoints[key] = (pg, powned)
                    else:
                        arr, arr_owned = cur
                        if arr_owned:
                            arr += pg
                        else:
                            adjoints[key] = (arr + pg, True)
            if node._grad is None:
                node._grad = g if owned else g.copy()
            else:
                node._grad += g

    def sum(self) -> Tensor:
        data = self.data.sum()
        out = _node(data, (self,))
        if out.requires_grad:
            shape = self.data.shape

            def backward(g):
                return [(self, np.full(shape, g), True)]

            out._backward = backward
        return out

    def mean(self) -> Tensor:
        data = self.data.mean()
        out = _node(data, (self,))
        if out.requires_grad:
            shape = self.data.shape
            n = self.data.size

            def backward(g):
                return [(self, np.full(shape, g / n), True)]

            out._backward = backward
        return out

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(self, other)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __sub__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul shapes {a.data.shape} and {b.data.shape} are incompatible"
        )
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            return [(a, g @ b.data.T, True), (b, a.data.T @ g, True)]

        out._backward = backward
    return out


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum. Accepts a same-shape tensor, a row bias (last-axis
    vector broadcast over rows), or a plain constant."""
    if not isinstance(b, Tensor):
        out = _node(a.data + np.asarray(b, dtype=np.float64), (a,))
        if out.requires_grad:
            out._backward = lambda g: [(a, g, False)]
        return out

    if a.data.shape == b.data.shape:
        out = _node(a.data + b.data, (a, b))
        if out.requires_grad:
            out._backward = lambda g: [(a, g, False), (b, g, False)]
        return out

    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = _node(a.data + b.data, (a, b))
        if out.requires_grad:
            def backward(g):
                return [(a, g, False), (b, g.sum(axis=0), True)]

            out._backward = backward
        return out

    raise ShapeError(f"add shapes {a.data.shape} and {b.data.shape} are incompatible")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor, a constant array
    (no gradient) or a scalar."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(
                f"mul shapes {a.data.shape} and {b.data.shape} are incompatible"
            )
        out = _node(a.data * b.data, (a, b))
        if out.requires_grad:
            def backward(g):
                return [(a, g * b.data, True), (b, g * a.data, True)]

            out._backward = backward
        return out

    const = np.asarray(b, dtype=np.float64)
    if const.ndim and const.shape != a.data.shape:
        raise ShapeError(
            f"mul constant shape {const.shape} does not match {a.data.shape}"
        )
    out = _node(a.data * const, (a,))
    if out.requires_grad:
        out._backward = lambda g: [(a, g * const, True)]
    return out


def gelu(x: Tensor) -> Tensor:
    """Smooth gelu nonlinearity (tanh form). Caches tanh for the backward."""
    xd = x.data
    u = xd * xd
    u *= _GELU_C1
    u += 1.0
    u *= xd
    u *= _GELU_C0
    np.tanh(u, out=u)  # u is now t = tanh(c0*(x + c1*x^3))
    y = u + 1.0
    y *= xd
    y *= 0.5
    out = _node(y, (x,))
    if out.requires_grad:
        t = u

        def backward(g):
            du = xd * xd
            du *= 3.0 * _GELU_C1
            du += 1.0
            du *= _GELU_C0
            dx = t * t
            np.subtract(1.0, dx, out=dx)
            dx *= du
            dx *= xd
            dx += 1.0
            dx += t
            dx *= 0.5
            dx *= g
            return [(x, dx, True)]

        out._backward = backward
    return out


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, computed with row-max subtraction."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    out = _node(z, (logits,))
    if out.requires_grad:
        p = z

        def backward(g):
            dot = (g * p).sum(axis=1, keepdims=True)
            dz = g - dot
            dz *= p
            return [(logits, dz, True)]

        out._backward = backward
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.data.shape}")
    m, n_classes = logits.data.shape
    if labels.shape != (m,):
        raise ShapeError(f"expected {m} labels, got shape {labels.shape}")
    if m == 0:
        raise ShapeError("cross_entropy needs at least one row")
    if labels.min() < 0 or labels.max() >= n_classes:
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise IndexError(f"label {bad} out of range [0, {n_classes})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(m), labels] - lse
    out = _node(np.asarray(-logp.mean()), (logits,))
    if out.requires_grad:
        def backward(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(m), labels] -= 1.0
            p *= g / m
            return [(logits, p, True)]

        out._backward = backward
    return out


def variance_rows(p: Tensor) -> Tensor:
    """Population variance (divide by the column count) of each row."""
    if p.data.ndim != 2:
        raise ShapeError(f"variance_rows expects a 2-d tensor, got {p.data.shape}")
    k = p.data.shape[1]
    centered = p.data - p.data.mean(axis=1, keepdims=True)
    out = _node((centered * centered).mean(axis=1), (p,))
    if out.requires_grad:
        def backward(g):
            dp = centered * (2.0 / k)
            dp *= g[:, None]
            return [(p, dp, True)]

        out._backward = backward
    return out


def normalize_rows(w: Tensor) -> Tensor:
    """Scale each row to sum to one. Rows must have a nonzero sum."""
    s = w.data.sum(axis=1, keepdims=True)
    out = _node(w.data / s, (w,))
    if out.requires_grad:
        p = out.data

        def backward(g):
            dw = g - (g * p).sum(axis=1, keepdims=True)
            dw /= s
            return [(w, dw, True)]

        out._backward = backward
    return out


def mix(weights: Tensor, outputs: Sequence[Tensor]) -> Tensor:
    """Weighted sum of expert outputs: column i of ``weights`` scales
    ``outputs[i]`` row-wise. Gradients flow into the weights and into every
    output exactly where its weight is nonzero."""
    m, k = weights.data.shape
    if len(outputs) != k:
        raise ShapeError(f"got {len(outputs)} outputs for {k} weight columns")
    for y in outputs:
        if y.data.shape[0] != m:
            raise ShapeError(
                f"output shape {y.data.shape} does not match {m} weight rows"
            )
    acc = weights.data[:, 0:1] * outputs[0].data
    for i in range(1, k):
        acc += weights.data[:, i : i + 1] * outputs[i].data
    out = _node(acc, (weights, *outputs))
    if out.requires_grad:
        def backward(g):
            dw = np.empty((m, k))
            grads: list[tuple[Tensor, np.ndarray, bool]] = []
            for i in range(k):
                yd = outputs[i].data
                dw[:, i] = np.einsum("md,md->m", g, yd)
                grads.append((outputs[i], weights.data[:, i : i + 1] * g, True))
            grads.append((weights, dw, True))
            return grads

        out._backward = backward
    return out


def finite_difference_gradient(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar-valued ``f`` at ``x``.

    Used as the independent oracle against ``backward``; it never touches the
    tape. ``f`` receives ``x`` (mutated in place coordinate by coordinate) and
    must return a scalar Tensor or float.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        f_plus = f_plus.item() if isinstance(f_plus, Tensor) else float(f_plus)
        f_minus = f_minus.item() if isinstance(f_minus, Tensor) else float(f_minus)
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.data.shape)
