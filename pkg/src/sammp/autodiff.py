"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent.  ``Tensor.backward`` walks the recorded graph in
reverse topological order and writes ``.grad`` on leaves that require it.

Values are checked for finiteness after every op and every backward rule;
a violation raises :class:`NumericError` naming the op.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it.

        The loss must be a scalar.  Leaves must have no accumulated gradient
        (reset with ``zero_grad``) and a graph can only be walked once.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise UsageError("backward already called on this graph")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        for node in order:
            if not node._parents and node.requires_grad and node.grad is not None:
                raise UsageError("leaf has a stale gradient; reset grads before backward")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NumericError(f"non-finite gradient in backward of '{node._op}'")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._consumed = True

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------------------
# elementwise unary


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def clip_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; gradient is zero wherever the floor is active."""
    keep = x.data > lo
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clip_min")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    keep = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * keep,), "clip")


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(n))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)

    def backward(g):
        w = np.exp(x.data - out_k)
        return (np.expand_dims(g, axis) * w,)

    return _make(np.squeeze(out_k, axis=axis), (x,), backward, "logsumexp")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def repeat_new_axis(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert an axis at ``axis`` and tile ``x`` ``n`` times along it."""
    expanded = reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) if axis >= 0 else None
    if expanded is None:
        raise UsageError("repeat_new_axis expects a non-negative axis")
    shape = list(expanded.shape)
    shape[axis] = n
    return broadcast_to(expanded, shape)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def conv1d_k3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving temporal convolution with a width-3 kernel.

    ``x`` is ``[..., T, c_in]``, ``w`` is ``[3, c_in, c_out]`` and ``b`` is
    ``[c_out]``.  One zero sample pads each end of the time axis.
    """
    if x.ndim < 2 or w.shape[0] != 3 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"conv1d_k3: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[2],):
        raise DimensionError(f"conv1d_k3: bias {b.shape} does not match kernel {w.shape}")
    T = x.shape[-2]
    c_in, c_out = w.shape[1], w.shape[2]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    out = b.data + sum(xp[..., k : k + T, :] @ w.data[k] for k in range(3))

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        g2 = g.reshape(-1, c_out)
        for k in range(3):
            gxp[..., k : k + T, :] += g @ w.data[k].T
            gw[k] = xp[..., k : k + T, :].reshape(-1, c_in).T @ g2
        return gxp[..., 1 : T + 1, :], gw, g2.sum(axis=0)

    return _make(out, (x, w, b), backward, "conv1d_k3")


def lstm_sequence(
    x: Tensor,
    params: Mapping[str, Tensor],
    h0: Tensor | None = None,
    c0: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM over axis -2 of ``x`` (``[..., T, d_in]``).

    ``params`` holds ``W`` ``[d_in, 4h]``, ``U`` ``[h, 4h]`` and ``b``
    ``[4h]`` with gate blocks ordered input, forget, output, candidate.
    Leading axes are independent batch axes.  Returns per-step hidden
    states ``[..., T, h]`` and the final ``(h, c)``.
    """
    W, U, bias = params["W"], params["U"], params["b"]
    d_h = U.shape[0]
    if x.ndim < 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"lstm_sequence: input {x.shape} does not match W {W.shape}")
    if W.shape[1] != 4 * d_h or U.shape != (d_h, 4 * d_h) or bias.shape != (4 * d_h,):
        raise DimensionError(f"lstm_sequence: inconsistent weights W{W.shape} U{U.shape} b{bias.shape}")
    T = x.shape[-2]
    batch = x.shape[:-2]
    h = h0 if h0 is not None else Tensor(np.zeros(batch + (d_h,)))
    c = c0 if c0 is not None else Tensor(np.zeros(batch + (d_h,)))
    if h.shape != batch + (d_h,) or c.shape != batch + (d_h,):
        raise DimensionError(f"lstm_sequence: initial state {h.shape}/{c.shape} expected {batch + (d_h,)}")

    xw = add(matmul(x, W), bias)
    outputs = []
    for t in range(T):
        z = add(getitem(xw, (Ellipsis, t, slice(None))), matmul(h, U))
        c, h = _lstm_gates(z, c, d_h)
        outputs.append(h)
    return stack(outputs, axis=-2), h, c


def lstm_cell(x: Tensor, params: Mapping[str, Tensor], h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Single LSTM step; returns ``(h, c)``."""
    d_h = params["U"].shape[0]
    z = add(add(matmul(x, params["W"]), params["b"]), matmul(h, params["U"]))
    c, h = _lstm_gates(z, c, d_h)
    return h, c


def _lstm_gates(z: Tensor, c: Tensor, d_h: int) -> tuple[Tensor, Tensor]:
    sig = sigmoid(getitem(z, (Ellipsis, slice(0, 3 * d_h))))
    cand = tanh(getitem(z, (Ellipsis, slice(3 * d_h, 4 * d_h))))
    i = getitem(sig, (Ellipsis, slice(0, d_h)))
    f = getitem(sig, (Ellipsis, slice(d_h, 2 * d_h)))
    o = getitem(sig, (Ellipsis, slice(2 * d_h, 3 * d_h)))
    c_new = add(mul(f, c), mul(i, cand))
    h_new = mul(o, tanh(c_new))
    return c_new, h_new


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterSet(Mapping[str, Tensor]):
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name: str, value) -> None:
        if name in self._tensors:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """View of the parameters under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self._tensors.items() if k.startswith(p)}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> ParameterSet:
        return ParameterSet({k: Tensor(v.data.copy()) for k, v in self._tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._tensors[k].data for k in self}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> AdamState:
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: ParameterSet,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients default to each parameter's ``.grad``.
    """
    if set(state.m) != set(params):
        raise UsageError("Adam state does not match the parameter set")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise UsageError(f"missing gradient for parameter {name!r}")
        if state.m[name].shape != p.data.shape:
            raise UsageError(f"Adam state shape mismatch for {name!r}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_grad(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. leaf ``x``.

    ``f`` rebuilds the graph on every call.  With ``indices`` only those
    entries are estimated and a flat array in the same order is returned.
    """
    flat_index = list(indices) if indices is not None else list(np.ndindex(x.shape))
    out = np.empty(len(flat_index))
    for n, idx in enumerate(flat_index):
        orig = x.data[idx]
        x.data[idx] = orig + h
        fp = f().item()
        x.data[idx] = orig - h
        fm = f().item()
        x.data[idx] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out if indices is not None else out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare backward gradients against central differences.

    Returns the relative error per named input.  With ``max_entries`` each
    input is checked on a random subset of at most that many entries.
    """
    for t in inputs.values():
        t.grad = None
    loss = f()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}
    for t in inputs.values():
        t.grad = None

    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, t in inputs.items():
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        num = numerical_grad(f, t, h=h, indices=idx)
        ana = np.array([analytic[name][i] for i in idx])
        errors[name] = relative_error(ana, num)
    return errors
