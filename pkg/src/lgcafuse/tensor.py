"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value flowing through the models is a (batch, channel, height, width)
array, float32 by default and float64 in gradient-check tests.  Operations
record a define-by-run graph on their outputs; ``Tensor.backward()`` walks it
once in reverse topological order, accumulates gradients additively into
every ``requires_grad`` tensor it reaches, and frees the graph afterwards.

Scalars (losses) are tensors of shape (1, 1, 1, 1).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import NumericError

DEFAULT_DTYPE = np.float32

_nan_checks = True
_grad_enabled = True


def set_nan_checks(enabled: bool) -> None:
    """Toggle the finite-output check run after every forward op."""
    global _nan_checks
    _nan_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen-model inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _nan_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class _Node:
    """One recorded forward op: parent tensors plus the local vjp."""

    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """A 4-D (n, c, h, w) array with an optional gradient buffer.

    Data is immutable once produced by an op except for ``grad``.  Inputs of
    lower rank are promoted by prepending singleton axes, so ``Tensor([1, 2])``
    has shape (1, 1, 1, 2).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not keep:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"tensors are at most 4-D, got shape {arr.shape}")
        while arr.ndim < 4:
            arr = arr[np.newaxis]
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    # -- backprop ---------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every requires_grad tensor reachable from self.

        Only scalar outputs can seed a backward pass.  The recorded graph is
        released once the traversal finishes.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            return  # constant loss: nothing reachable, nothing to do

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = flow.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad += g
            if t._node is None:
                continue
            for p, pg in zip(t._node.parents, t._node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in flow:
                    flow[id(p)] += pg
                else:
                    flow[id(p)] = pg
        for t in order:
            t._node = None


def _from_op(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward_fn)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- element-wise ops ------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _require_same_shape("add", a, b)
        # second grad copied: flow entries for distinct parents must not alias
        return _from_op(a.data + b.data, "add", (a, b), lambda g: (g, g.copy()))
    s = float(b)
    return _from_op(a.data + s, "scalar-add", (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _require_same_shape("sub", a, b)
        return _from_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))
    s = float(b)
    return _from_op(a.data - s, "scalar-add", (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _require_same_shape("mul", a, b)
        ad, bd = a.data, b.data
        return _from_op(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))
    s = float(b)
    return _from_op(a.data * s, "scalar-mul", (a,), lambda g: (g * s,))


# -- activations -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    # out > 0 iff x > 0, so the mask can be rebuilt from the saved output
    return _from_op(out, "relu", (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return _from_op(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _from_op(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind '{kind}'") from None


# -- linear map and loss -----------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected map: flatten x to (n, f), return x @ w.T + b.

    ``w`` is stored (c_out, f, 1, 1) and ``b`` (1, c_out, 1, 1); output is
    (n, c_out, 1, 1).
    """
    n = x.shape[0]
    f = x.data.size // n
    c_out, f_w = w.shape[0], w.shape[1] * w.shape[2] * w.shape[3]
    if f_w != f:
        raise ValueError(f"linear: weight expects {f_w} input features, x has {f}")
    if b.shape != (1, c_out, 1, 1):
        raise ValueError(f"linear: bias shape {b.shape} does not match {c_out} outputs")
    x2 = x.data.reshape(n, f)
    w2 = w.data.reshape(c_out, f)
    out = x2 @ w2.T + b.data.reshape(1, c_out)

    def backward_fn(g):
        g2 = g.reshape(n, c_out)
        gx = (g2 @ w2).reshape(x.shape)
        gw = (g2.T @ x2).reshape(w.shape)
        gb = g2.sum(axis=0).reshape(b.shape)
        return gx, gw, gb

    return _from_op(out.reshape(n, c_out, 1, 1), "linear", (x, w, b), backward_fn)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2, as a scalar tensor."""
    _require_same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.array(np.mean(diff * diff), dtype=diff.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        gp = g.reshape(()) * (2.0 / n) * diff
        return gp, -gp

    return _from_op(out, "mse_loss", (pred, target), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _from_op(out, "sum", (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype, copy=True),))


# -- structural ops ----------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _from_op(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel map x[n, c] by the gate s[n, c, 0, 0]."""
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError(f"scale_channels: gate shape {s.shape} does not match x {x.shape}")
    xd, sd = x.data, s.data
    n, c = x.shape[0], x.shape[1]

    def backward_fn(g):
        gs = np.einsum("nchw,nchw->nc", g, xd).reshape(n, c, 1, 1)
        return g * sd, gs

    return _from_op(xd * sd, "scale-channels", (x, s), backward_fn)
