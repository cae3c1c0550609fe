"""Dense tensors with tape-based reverse-mode differentiation.

Real data is float64, complex data complex128 (interleaved real/imaginary
float64 pairs in memory). For a complex tensor ``z = a + ib`` feeding a real
loss ``L`` the stored gradient is ``dL/da + i dL/db``; every adjoint below
follows that convention, so products pick up a conjugate on the way back.

The graph is recorded during the forward pass and released by
:func:`backward` unless ``retain_graph=True``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's broadcasting/contraction rule."""


class GradientError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if np.iscomplexobj(arr):
        return arr.astype(np.complex128, copy=False)
    return arr.astype(np.float64, copy=False)


class DiffTensor:
    """A numpy array plus an optional gradient buffer and backward record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        op = f" op={self._op}" if self._op else ""
        return f"DiffTensor{tag}(shape={self.shape}, dtype={self.data.dtype}{op})"

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
        if isinstance(other, DiffTensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def make_op(op: str, data, parents: Sequence[DiffTensor], backward: Callable) -> DiffTensor:
    """Create a result node.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    Nothing is recorded unless some parent requires gradients.
    """
    out = DiffTensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _match(g: np.ndarray, like: DiffTensor) -> np.ndarray:
    g = _unbroadcast(g, like.shape)
    if not like.is_complex and np.iscomplexobj(g):
        g = g.real
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (_match(g, a), _match(g, b)))


def sub(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (_match(g, a), _match(-g, b)))


def neg(a) -> DiffTensor:
    a = _wrap(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)

    def back(g):
        ga = _match(g * np.conj(b.data), a) if a.requires_grad else None
        gb = _match(g * np.conj(a.data), b) if b.requires_grad else None
        return ga, gb

    return make_op("mul", a.data * b.data, (a, b), back)


def cmul(a, b) -> DiffTensor:
    """Complex pointwise product; at least one operand must be complex."""
    a, b = _wrap(a), _wrap(b)
    if not (a.is_complex or b.is_complex):
        raise ShapeError(f"cmul: expected a complex operand, got {a.data.dtype} and {b.data.dtype}")
    out = mul(a, b)
    out._op = "cmul" if out._op else None
    return out


def square(a) -> DiffTensor:
    a = _wrap(a)
    if a.is_complex:
        raise ShapeError("square: complex input, use cmul with the conjugate")
    return make_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> DiffTensor:
    """Exact (erf) GELU."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def back(g):
        return (g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI),)

    return make_op("gelu", x * cdf, (a,), back)


# contractions / reductions -----------------------------------------------------

def matmul(x, w) -> DiffTensor:
    """``x @ w`` with ``w`` two-dimensional; leading axes of ``x`` are batch axes."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot contract {x.shape} with {w.shape}")

    def back(g):
        gx = _match(g @ np.conj(w.data).T, x) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            xs = np.conj(x.data).reshape(-1, x.shape[-1])
            gw = _match(xs.T @ g.reshape(-1, g.shape[-1]), w)
        return gx, gw

    return make_op("matmul", x.data @ w.data, (x, w), back)


def mode_contract(x, r) -> DiffTensor:
    """Per-mode channel mixing ``out[b, m, o] = sum_i x[b, m, i] r[m, i, o]``."""
    x, r = _wrap(x), _wrap(r)
    if x.ndim != 3 or r.ndim != 3 or x.shape[1] != r.shape[0] or x.shape[2] != r.shape[1]:
        raise ShapeError(f"mode_contract: cannot contract {x.shape} with {r.shape}")
    xd = x.data.astype(np.complex128, copy=False)
    rd = r.data.astype(np.complex128, copy=False)

    def back(g):
        gx, gr = kernels.mode_contract_grads(xd, rd, g)
        return _match(gx, x), _match(gr, r)

    return make_op("mode_contract", kernels.mode_contract(xd, rd), (x, r), back)


def sum(a, axis=None) -> DiffTensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", a.data.sum(axis=axis), (a,), back)


def mean(a, axis=None) -> DiffTensor:
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_op("mean", a.data.mean(axis=axis), (a,), back)


# structural ----------------------------------------------------------------------

def reshape(a, shape) -> DiffTensor:
    a = _wrap(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_op("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> DiffTensor:
    a = _wrap(a)
    inv = np.argsort(axes)
    return make_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _unique_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    for p in parts:
        if isinstance(p, (np.ndarray, list)):
            arr = np.asarray(p)
            if arr.dtype == bool:
                continue
            if np.unique(arr).size != arr.size:
                return False
    return True


def getitem(a, idx) -> DiffTensor:
    a = _wrap(a)
    unique = _unique_index(idx)

    def back(g):
        z = np.zeros(a.shape, dtype=g.dtype)
        if unique:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return make_op("getitem", a.data[idx], (a,), back)


def embed(a, shape, idx) -> DiffTensor:
    """Place ``a`` at ``idx`` inside a zero array of ``shape`` (adjoint of gather)."""
    a = _wrap(a)
    out = np.zeros(shape, dtype=a.data.dtype)
    try:
        out[idx] = a.data
    except ValueError:
        raise ShapeError(f"embed: cannot place {a.shape} into {tuple(shape)}") from None
    return make_op("embed", out, (a,), lambda g: (g[idx],))


def concat(parts: Sequence, axis: int = -1) -> DiffTensor:
    parts = [_wrap(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return make_op("concat", data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# spectral ------------------------------------------------------------------------

def _fft_scale(n: int, norm: str, inverse: bool) -> float:
    if norm == "ortho":
        return 1.0 / math.sqrt(n)
    if norm == "backward":
        return 1.0 / n if inverse else 1.0
    if norm == "forward":
        return 1.0 if inverse else 1.0 / n
    raise ValueError(f"unknown FFT normalization {norm!r}")


def _half_weights(n_last: int, n_half: int) -> np.ndarray:
    # multiplicity of each retained last-axis column in the full Hermitian spectrum
    w = np.full(n_half, 2.0)
    w[0] = 1.0
    if n_last % 2 == 0:
        w[-1] = 1.0
    return w


def rfftn(a, axes: Sequence[int], norm: str = "ortho") -> DiffTensor:
    """Real-to-complex FFT over ``axes`` (last listed axis is halved)."""
    a = _wrap(a)
    if a.is_complex:
        raise ShapeError(f"rfftn: real input required, got {a.data.dtype}")
    axes = tuple(ax % a.ndim for ax in axes)
    sizes = tuple(a.shape[ax] for ax in axes)
    n = int(np.prod(sizes))
    scale = _fft_scale(n, norm, inverse=False)
    data = np.fft.rfftn(a.data, axes=axes, norm=norm)
    last = axes[-1]
    shape_w = [1] * a.ndim
    shape_w[last] = data.shape[last]
    w = _half_weights(sizes[-1], data.shape[last]).reshape(shape_w)

    def back(g):
        return (scale * n * np.fft.irfftn(g / w, s=sizes, axes=axes, norm="backward"),)

    return make_op("rfft", data, (a,), back)


def irfftn(c, s: Sequence[int], axes: Sequence[int], norm: str = "ortho") -> DiffTensor:
    """Inverse of :func:`rfftn`; ``s`` gives the real output sizes along ``axes``."""
    c = _wrap(c)
    axes = tuple(ax % c.ndim for ax in axes)
    s = tuple(int(v) for v in s)
    if c.shape[axes[-1]] != s[-1] // 2 + 1:
        raise ShapeError(f"irfft: half-spectrum axis has {c.shape[axes[-1]]} bins, output size {s[-1]} needs {s[-1] // 2 + 1}")
    n = int(np.prod(s))
    scale = _fft_scale(n, norm, inverse=True)
    data = np.fft.irfftn(c.data, s=s, axes=axes, norm=norm)
    shape_w = [1] * c.ndim
    shape_w[axes[-1]] = c.shape[axes[-1]]
    w = _half_weights(s[-1], c.shape[axes[-1]]).reshape(shape_w)

    def back(g):
        return (scale * w * np.fft.rfftn(g, axes=axes, norm="backward"),)

    return make_op("irfft", data, (c,), back)


# dispatcher --------------------------------------------------------------------------

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "gelu": gelu,
    "cmul": cmul,
    "rfft": rfftn,
    "irfft": irfftn,
    "mean": mean,
    "sum": sum,
    "square": square,
    "mode_contract": mode_contract,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "embed": embed,
}


def forward_op(kind: str, *inputs, **kwargs) -> DiffTensor:
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# backward ------------------------------------------------------------------------------

def _topo(root: DiffTensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def _released(g):
    raise GradientError("graph already released by an earlier backward; pass retain_graph=True")


def backward(loss: DiffTensor, retain_graph: bool = False) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires gradients")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = _released


# parameters + optimizer ------------------------------------------------------------------

class ParamSet(OrderedDict):
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self, items: Iterable = ()):
        super().__init__()
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, value in items:
            self[name] = value

    def __setitem__(self, name, value):
        if not isinstance(value, DiffTensor):
            value = DiffTensor(value)
        value.requires_grad = True
        value.name = name
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def count(self) -> int:
        """Number of real scalars (a complex entry counts twice)."""
        return int(np.sum([p.data.size * (2 if p.is_complex else 1) for p in self.values()]))

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ParamSet":
        out = type(self)((k, DiffTensor(v.data.copy())) for k, v in self.items())
        out.moments = {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()}
        return out


def _real_view(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.view(np.float64) if np.iscomplexobj(arr) else arr


def adam_step(params: ParamSet, lr: float, weight_decay: float = 0.0,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8, t: int = 1) -> None:
    """One Adam update with decoupled weight decay, applied in place.

    Complex parameters are updated as independent real/imaginary pairs.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise GradientError(f"no gradient for parameters: {', '.join(missing)}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        x = _real_view(p.data)
        g = _real_view(p.grad)
        m, v = params.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(x)
            v = np.zeros_like(x)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            x *= 1.0 - lr * weight_decay
        x -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.moments[name] = (m, v)
