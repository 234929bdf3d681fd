"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records an
``_Op`` on its output.  :func:`backward` walks those records in reverse
topological order (the :class:`Tape`) exactly once, accumulating gradients
into leaf tensors.  Only scalar-vs-tensor broadcasting is supported; the few
row-wise patterns the layers need (bias add, row scaling) are explicit ops.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BatchTooSmallError, DoubleBackwardError, NumericError, ShapeError

NORM_EPS = 1e-5
L2_GUARD = 1e-12
BN_MOMENTUM = 0.9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Op:
    __slots__ = ("name", "inputs", "backward")

    def __init__(self, name: str, inputs: tuple, backward: Callable):
        self.name = name
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A row-major float64 array, optionally participating in autodiff.

    Leaf tensors with ``requires_grad`` own a same-shape ``grad`` buffer that
    starts at zero and accumulates across backward passes until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._op: _Op | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Scalar(Tensor):
    """A 0-d tensor used for learnable aggregation/scaling parameters."""

    __slots__ = ()

    def __init__(self, value: float, requires_grad: bool = False, name: str | None = None):
        super().__init__(float(value), requires_grad=requires_grad, name=name)

    @property
    def value(self) -> float:
        return float(self.data)

    @value.setter
    def value(self, v: float) -> None:
        self.data = np.array(float(v))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def make_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    Non-finite outputs raise :class:`NumericError` naming the op.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.name = None
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out._op = _Op(name, tuple(inputs), backward_fn) if needs else None
    return out


@dataclass
class Tape:
    """Recorded operations reachable from a loss, in forward order."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
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
            if node._op is not None:
                for inp in reversed(node._op.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def run(self, seed_grad: np.ndarray) -> None:
        if not self.ops:
            return
        grads: dict[int, np.ndarray] = {id(self.ops[-1]): seed_grad}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            in_grads = node._op.backward(g)
            for inp, ig in zip(node._op.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=np.float64).reshape(inp.shape)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
        for node in self.ops:
            if node._op is not None:
                node._op = None
                node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the 1-element ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a 1-element loss, got shape {loss.shape}")
    if loss._consumed:
        raise DoubleBackwardError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        loss._consumed = True
        return
    tape = Tape.from_loss(loss)
    tape.run(np.ones_like(loss.data))
    for node in tape.ops:
        if not np.all(np.isfinite(node.grad if node.grad is not None else 0.0)):
            raise NumericError(f"non-finite gradient in {node.name or 'parameter'}")
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def _check_same_or_scalar(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not _is_scalar(b) and not _is_scalar(a):
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.sum(g) if _is_scalar(t) and g.ndim > 0 else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), -_reduce_to(g, b)))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(
        "mul", ad * bd, (a, b),
        lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)),
    )


def scale(a, c) -> Tensor:
    """``a * c`` for a python float or :class:`Scalar` ``c``."""
    if isinstance(c, Tensor) and not _is_scalar(c):
        raise ShapeError(f"scale: factor must be scalar, got shape {c.shape}")
    return mul(a, c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply {w.shape} weight to {x.shape} input")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return make_op("linear", out, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape[1]}")
    return make_op(
        "linear", out + b.data, (x, w, b),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_op("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_op("mean", np.array(a.data.sum() / n), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_op("gather_rows", a.data[index], (a,), bw)


def scale_rows(a: Tensor, c: Tensor) -> Tensor:
    """Multiply row ``i`` of an N x D tensor by ``c[i]``."""
    if a.data.ndim != 2 or c.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: {a.shape} rows vs factors {c.shape}")
    ad, cd = a.data, c.data
    return make_op(
        "scale_rows", ad * cd[:, None], (a, c),
        lambda g: (g * cd[:, None], np.sum(g * ad, axis=1)),
    )


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=axis))

    def bw(g):
        denom = np.maximum(np.expand_dims(norm, axis), L2_GUARD)
        return (np.expand_dims(g, axis) * ad / denom,)

    return make_op("l2_norm", norm, (a,), bw)


def normalize_rows(a: Tensor, guard: float = L2_GUARD) -> Tensor:
    """``a / max(||a||, guard)`` row-wise; zero rows stay zero."""
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    denom = np.maximum(norm, guard)
    u = ad / denom
    active = norm > guard

    def bw(g):
        proj = np.sum(g * u, axis=-1, keepdims=True)
        return ((g - np.where(active, u * proj, 0.0)) / denom,)

    return make_op("normalize_rows", u, (a,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return make_op("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# normalization


def layer_norm(a: Tensor, gamma: Tensor, beta_shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-row standardization followed by a per-column affine map."""
    if a.data.ndim != 2 or gamma.shape != (a.shape[1],) or beta_shift.shape != (a.shape[1],):
        raise ShapeError(f"layer_norm: input {a.shape}, gamma {gamma.shape}, shift {beta_shift.shape}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * np.mean(gx * xhat, axis=1, keepdims=True))
        return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return make_op("layer_norm", xhat * gd + beta_shift.data, (a, gamma, beta_shift), bw)


@dataclass
class BatchNormState:
    """Running statistics; ``running = momentum * running + (1 - momentum) * batch``."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, dim: int, momentum: float = BN_MOMENTUM) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim), momentum)


def batch_norm(
    a: Tensor,
    state: BatchNormState,
    training: bool,
    gamma: Tensor | None = None,
    beta_shift: Tensor | None = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-column standardization with batch (training) or running (eval) stats.

    In training mode, running statistics are updated in place using the
    unbiased batch variance.
    """
    if a.data.ndim != 2 or state.running_mean.shape != (a.shape[1],):
        raise ShapeError(f"batch_norm: input {a.shape} vs state dim {state.running_mean.shape}")
    x = a.data
    n = x.shape[0]
    if gamma is None:
        gamma = Tensor(np.ones(x.shape[1]))
    if beta_shift is None:
        beta_shift = Tensor(np.zeros(x.shape[1]))
    gd = gamma.data

    if training:
        if n < 2:
            raise BatchTooSmallError(f"batch_norm in training mode needs >= 2 rows, got {n}")
        mu = x.mean(axis=0)
        xc = x - mu
        var = np.mean(xc * xc, axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mu
        state.running_var = m * state.running_var + (1.0 - m) * var * (n / (n - 1))

        def bw(g):
            gx = g * gd
            dx = inv * (gx - gx.mean(axis=0) - xhat * np.mean(gx * xhat, axis=0))
            return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x - state.running_mean) * inv

        def bw(g):
            return g * gd * inv, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return make_op("batch_norm", xhat * gd + beta_shift.data, (a, gamma, beta_shift), bw)


# ---------------------------------------------------------------------------
# finite-difference oracles


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise NumericError("finite_difference_check: non-finite input")
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if not np.isfinite(out.item()):
        raise NumericError("finite_difference_check: non-finite f(x)")
    backward(out)
    analytic = xt.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xm = base.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2.0 * h)
    return _relative_error(analytic, numeric)


def parameter_gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` with respect to each parameter.

    Parameters are perturbed in place and restored.  Returns the max relative
    error per parameter, keyed by name (or position).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    errors = {}
    with no_grad():
        for k, p in enumerate(params):
            analytic = p.grad.copy()
            numeric = np.zeros_like(p.data)
            flat_data = p.data.reshape(-1)
            flat_num = numeric.reshape(-1)
            for i in range(p.data.size):
                orig = flat_data[i]
                flat_data[i] = orig + h
                fp = loss_fn().item()
                flat_data[i] = orig - h
                fm = loss_fn().item()
                flat_data[i] = orig
                flat_num[i] = (fp - fm) / (2.0 * h)
            errors[p.name or str(k)] = _relative_error(analytic, numeric)
    return errors
