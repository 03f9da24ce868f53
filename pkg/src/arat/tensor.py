"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules.  Outside a tape every operation is a plain numpy
computation and its result is a constant.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(w * w)
    >>> tape.gradient(loss, [w])[0]
    array([6.])
"""

from __future__ import annotations

import builtins
import contextvars
import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_current_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "arat_current_tape", default=None
)
_param_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array, optionally linked to a node of the active tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.param_id: int | None = next(_param_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __iter__(self):
        for i in range(len(self.data)):
            yield self[i]

    def __getitem__(self, idx):
        return index(self, idx)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item: expected a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; activate with ``with Tape() as tape:``.

    ``watch`` restricts which leaf tensors are differentiated.  When omitted,
    every tensor created with ``requires_grad=True`` is a leaf.
    """

    def __init__(self, watch: Iterable[Tensor] | None = None):
        self._inputs: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._leaf_of: dict[int, int] = {}
        self._watch = None if watch is None else {id(t) for t in watch}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._inputs)

    def _node_of(self, t: Tensor) -> int:
        if t.tape is self:
            return t.node_id
        if not t.requires_grad or (self._watch is not None and id(t) not in self._watch):
            return -1
        node = self._leaf_of.get(id(t))
        if node is None:
            node = len(self._inputs)
            self._inputs.append(())
            self._backward.append(None)
            self._leaf_of[id(t)] = node
        return node

    def _record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        ids = tuple(self._node_of(t) for t in inputs)
        out = Tensor(data)
        if all(i < 0 for i in ids):
            return out
        out.tape = self
        out.node_id = len(self._inputs)
        self._inputs.append(ids)
        self._backward.append(backward)
        return out

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. ``sources`` (zeros if unreachable)."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        wanted = []
        for s in sources:
            if s.tape is self:
                wanted.append(s.node_id)
            else:
                wanted.append(self._leaf_of.get(id(s), -1))
        out = [np.zeros_like(s.data) for s in sources]
        if loss.tape is not self:
            return out
        n = loss.node_id + 1
        grads: list[np.ndarray | None] = [None] * n
        grads[loss.node_id] = np.ones_like(loss.data)
        keep = {w for w in wanted if w >= 0}
        for node in range(n - 1, -1, -1):
            g = grads[node]
            if g is None:
                continue
            back = self._backward[node]
            if back is None:
                continue
            ids = self._inputs[node]
            if node not in keep:
                grads[node] = None
            needs = tuple(i >= 0 for i in ids)
            for i, gi in zip(ids, back(g, needs)):
                if i < 0 or gi is None:
                    continue
                if grads[i] is None:
                    grads[i] = gi
                else:
                    grads[i] = grads[i] + gi
        for k, w in enumerate(wanted):
            if 0 <= w < n and grads[w] is not None:
                out[k] = np.array(grads[w], dtype=np.float64).reshape(sources[k].shape)
        return out


def current_tape() -> Tape | None:
    return _current_tape.get()


def _op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _current_tape.get()
    if tape is None:
        return Tensor(data)
    return tape._record(data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )

    return _op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None,
        )

    return _op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g, needs):
        return (
            _unbroadcast(g / bd, ad.shape) if needs[0] else None,
            _unbroadcast(-g * out / bd, bd.shape) if needs[1] else None,
        )

    return _op(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _op(np.log(ad), (a,), lambda g, needs: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g, needs: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _op(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def stop_gradient(t) -> Tensor:
    """Forward identity that is a constant for every downstream gradient."""
    t = as_tensor(t)
    return Tensor(t.data)


# -- shape and reductions -------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    src = a.shape
    return _op(out, (a,), lambda g, needs: (g.reshape(src),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g, needs):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _op(a.data[idx], (a,), backward)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _op(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    src = a.shape

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src),)

    return _op(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    """Tensor-aware ``sum``; plain iterables fall back to the builtin."""
    if isinstance(a, Tensor):
        return sum_(a, axis=axis, keepdims=keepdims)
    return builtins.sum(a)


def l2_norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``."""
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def backward(g, needs):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, gk * ad / safe, 0.0),)

    return _op(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def backward(g, needs):
        return (np.expand_dims(g, axis) * soft,)

    return _op(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    shifted = ad - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g, needs):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _op(out, (a,), backward)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _op(ad @ bd, (a, b), backward)


def conv2d(x, w, padding: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation with symmetric zero padding.

    x: (N, C, H, W); w: (O, C, k, k).  Output (N, O, H + 2p - k + 1, W + 2p - k + 1).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = int(padding)
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    # channels-last internally so every window copy is a contiguous block
    xh = x.data.transpose(0, 2, 3, 1)
    if p:
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
        xp[:, p : p + h, p : p + wd, :] = xh
    else:
        xp = xh
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + ho, j : j + wo, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g, needs):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = None
        if needs[1]:
            gw = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if needs[0]:
            dcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, p : p + h, p : p + wd, :].transpose(0, 3, 1, 2)
        return gx, gw

    return _op(np.ascontiguousarray(out), (x, w), backward)


def avg_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping average pooling with window and stride ``size``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"avg_pool2d: shape {x.shape} not divisible by window {size}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(g, needs):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return _op(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got shape {x.shape}")
    return mean(x, axis=(2, 3))


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, eps: float = 1e-5):
    """Per-channel normalisation of (N, C, ...) input.

    With ``running_mean``/``running_var`` given, those statistics are used
    (inference form); otherwise batch statistics with biased variance.
    Returns ``(y, batch_mean, batch_var)``; the batch statistics are ``None``
    in inference form.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: incompatible shapes {x.shape} and {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if running_mean is None:
        if xd.shape[0] * int(np.prod(xd.shape[2:])) < 1:
            raise ShapeError("batch_norm: empty batch")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        batch_stats = (mu, var)
    else:
        mu, var = np.asarray(running_mean), np.asarray(running_var)
        batch_stats = (None, None)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    m = xd.size // xd.shape[1]
    train = running_mean is None

    def backward(g, needs):
        gx = None
        dxhat = g * gd
        if needs[0]:
            if train:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
        gbeta = g.sum(axis=axes) if needs[2] else None
        return gx, ggamma, gbeta

    y = _op(out, (x, gamma, beta), backward)
    return y, batch_stats[0], batch_stats[1]


# -- convenience -------------------------------------------------------------------


def backward(loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]) -> dict:
    """Gradient map for ``params`` (keyed like ``params``; by ``param_id`` for sequences)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if isinstance(params, Mapping):
        keys, tensors = list(params.keys()), list(params.values())
    else:
        tensors = list(params)
        keys = [t.param_id for t in tensors]
    tape = loss.tape
    if tape is None:
        return {k: np.zeros_like(t.data) for k, t in zip(keys, tensors)}
    return dict(zip(keys, tape.gradient(loss, tensors)))


def finite_difference_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> float:
    """Max coordinate-wise relative error between tape and central-difference gradients.

    ``f`` is re-evaluated with each coordinate of each parameter perturbed in
    place; relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as
    denominator.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    params = list(params)
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"finite_difference_check: f must return a scalar, got shape {out.shape}")
    analytic = tape.gradient(out, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * step)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
