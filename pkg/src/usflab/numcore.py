"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. The graph is rebuilt on each evaluation;
nothing is cached between calls. Operations check their output for
non-finite values eagerly and raise :class:`NonFiniteError` naming the
operation, so numerical blow-ups are reported where they happen.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Tensor",
    "Parameter",
    "NonFiniteError",
    "SingularMatrixError",
    "RngStream",
    "as_tensor",
    "backward",
    "zero_grad",
    "finite_diff_grad",
    "relative_error",
    "triangular_solve",
    "solve_triangular",
    "rng_normal",
    "no_grad",
]


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in the output of a named operation."""

    def __init__(self, op: str, where: str = "forward"):
        self.op = op
        self.where = where
        super().__init__(f"non-finite value produced by '{op}' ({where})")


class SingularMatrixError(np.linalg.LinAlgError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "const"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = op

    # -- bookkeeping -----------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
        out = Tensor(data, op=op)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, op={self.op!r})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x / y,
            (self, other),
            lambda g: (
                _unbroadcast(g / y, x.shape),
                _unbroadcast(-g * x / (y * y), y.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, k: float):
        x = self.data
        return Tensor._make(x**k, (self,), lambda g: (g * k * x ** (k - 1),), "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        return Tensor._make(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g), "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # -- shape -----------------------------------------------------------

    def transpose(self):
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back, "getitem")

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise -----------------------------------------------------

    def exp(self):
        with np.errstate(over="ignore"):
            y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(x)
        return Tensor._make(y, (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self):
        y = _sigmoid(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def softplus(self):
        x = self.data
        return Tensor._make(np.logaddexp(0.0, x), (self,), lambda g: (g * _sigmoid(x),), "softplus")

    def silu(self):
        x = self.data
        s = _sigmoid(x)
        return Tensor._make(x * s, (self,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")

    def leaky_relu(self, slope: float = 0.1):
        x = self.data
        d = np.where(x > 0, 1.0, slope)
        return Tensor._make(x * d, (self,), lambda g: (g * d,), "leaky_relu")

    def relu(self):
        return self.leaky_relu(0.0)

    def square(self):
        return self * self


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Parameter(Tensor):
    """Trainable leaf holding a value and an accumulated gradient."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, op="param")
        self.grad = np.zeros_like(self.data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable Parameter.

    Parameters not on the graph are left untouched; call :func:`zero_grad`
    beforehand to obtain fresh gradients.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError(loss.op, "loss")
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(node.op, "backward")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def finite_diff_grad(
    f: Callable[[], float], params: Sequence[Parameter], step: float = 1e-5
) -> list[np.ndarray]:
    """Central-difference gradient of ``f()`` w.r.t. each parameter entry.

    ``f`` is re-evaluated with each coordinate perturbed in place; values
    are restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f())
            flat[i] = orig - step
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _check_triangular(T: np.ndarray, unit_diagonal: bool) -> None:
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"triangular_solve needs a square matrix, got {T.shape}")
    if not unit_diagonal and np.any(np.diag(T) == 0.0):
        idx = int(np.flatnonzero(np.diag(T) == 0.0)[0])
        raise SingularMatrixError(f"zero diagonal entry at index {idx}")


def triangular_solve(T, rhs, lower: bool = True, unit_diagonal: bool = False) -> np.ndarray:
    """Solve ``T y = rhs`` for triangular ``T``.

    With ``unit_diagonal`` the stored diagonal is ignored and taken as 1.
    ``rhs`` may be a vector or a matrix of right-hand-side columns.
    """
    T = np.asarray(T, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    _check_triangular(T, unit_diagonal)
    return scipy.linalg.solve_triangular(
        T, rhs, lower=lower, unit_diagonal=unit_diagonal, check_finite=False
    )


def solve_triangular(T: Tensor, R: Tensor, lower: bool = True, unit_diagonal: bool = False) -> Tensor:
    """Differentiable ``T^{-1} R`` for a triangular matrix tensor ``T``."""
    T, R = as_tensor(T), as_tensor(R)
    _check_triangular(T.data, unit_diagonal)
    X = scipy.linalg.solve_triangular(
        T.data, R.data, lower=lower, unit_diagonal=unit_diagonal, check_finite=False
    )
    tri = np.tril if lower else np.triu

    def back(g):
        gR = scipy.linalg.solve_triangular(
            T.data, g, lower=lower, unit_diagonal=unit_diagonal, trans=1, check_finite=False
        )
        gX = gR if gR.ndim == 2 else gR[:, None]
        Xm = X if X.ndim == 2 else X[:, None]
        gT = tri(-gX @ Xm.T, -1 if unit_diagonal else 0)
        return gT, gR

    return Tensor._make(X, (T, R), back, "solve_triangular")


class RngStream:
    """Seeded PCG64 stream; same seed and call sequence give identical draws."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, p=None):
        return self.generator.choice(a, size=size, p=p)

    def spawn_seed(self) -> int:
        return int(self.generator.integers(0, 2**63 - 1))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, algorithm={self.algorithm!r})"


def rng_normal(stream: RngStream, shape) -> Tensor:
    return Tensor(stream.normal(shape))
