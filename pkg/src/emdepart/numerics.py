"""Dense tensor kernels with reverse-mode gradients.

Every operation here records a closure that maps the upstream gradient to
gradients of its inputs. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates into the ``grad`` field of every
:class:`Parameter` it reaches.

Arrays are numpy ``float64`` by default; ``float32`` works for training but
gradient checks need the 64-bit headroom.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3
GELU_COEF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind in "biu":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Rank <= 3 real array that remembers how it was computed."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, check: bool = True):
        arr = _as_array(data)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.grad: np.ndarray | None = None

    # -- basic protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

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


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates across backward calls."""

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=_as_array(value).dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamStore:
    """Ordered collection of named parameters plus the seed that built them."""

    def __init__(self, rng_seed: int = 0, dtype=np.float64):
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(np.asarray(value, dtype=self.dtype), name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_entries(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, check=False)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):  # the Tensor check raises instead
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    """max(0, x); the kink at 0 takes the zero branch."""
    a = _wrap(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _wrap(x)
    d = x.data
    inner = SQRT_2_OVER_PI * (d + GELU_COEF * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


# -- shape ------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _result(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = _wrap(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, backward)


# -- reductions -------------------------------------------------------------

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _result(out, (a,),
                   lambda g: (_expand(g, a.shape, axis, keepdims) / count,))


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient goes to the first maximal entry."""
    a = _wrap(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
        return (full,)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), backward)


def norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean (Frobenius over several axes) norm; gradient 0 at the origin."""
    a = _wrap(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def backward(g):
        n = _expand(out, a.shape, axis, keepdims)
        gg = _expand(g, a.shape, axis, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * a.data / safe, 0.0),)

    return _result(out, (a,), backward)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit length. Zero slices are an error."""
    x = _wrap(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ZeroDivisionError("cannot normalize a zero-norm vector")
    u = x.data / n

    def backward(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / n,)

    return _result(u, (x,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = _unbroadcast(np.einsum("...i,...ij->...j", g, a.data), b.shape) \
                if a.ndim > 1 else g * a.data
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = _wrap(x), _wrap(W)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"affine: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and _wrap(b).shape != (W.shape[1],):
        raise DimensionError(f"affine: bias shape {_wrap(b).shape} != ({W.shape[1]},)")
    y = matmul(x, W)
    return y if b is None else add(y, b)


# -- normalizers ----------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis)

    def backward(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _result(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    r = x.shape[-1]
    if gain.shape != (r,) or bias.shape != (r,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} for width {r}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward)


def variance(x, axis: int) -> Tensor:
    """Population variance along ``axis``."""
    x = _wrap(x)
    c = sub(x, mean(x, axis=axis, keepdims=True))
    return mean(mul(c, c), axis=axis)


# -- attention / regularization ------------------------------------------------

def scaled_attention(Q, K, V) -> tuple[Tensor, Tensor]:
    """Single-head attention.

    Returns ``(out, logits)`` where ``logits = Q K^T / sqrt(r_h)`` is left
    un-softmaxed and ``out = softmax(logits over the K rows) V``. Leading
    batch axes broadcast.
    """
    Q, K, V = _wrap(Q), _wrap(K), _wrap(V)
    r_h = Q.shape[-1]
    if K.shape[-1] != r_h:
        raise DimensionError(f"attention: Q {Q.shape} and K {K.shape} disagree on head dim")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: K {K.shape} and V {V.shape} disagree on length")
    logits = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / math.sqrt(r_h))
    out = matmul(softmax(logits, axis=-1), V)
    return out, logits


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- gradient verification -----------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    passed: bool
    checked: int = 0
    worst: GradCheckEntry | None = None
    failures: list[GradCheckEntry] = field(default_factory=list)

    def summary(self) -> str:
        if self.worst is None:
            return f"{'PASS' if self.passed else 'FAIL'}: nothing checked"
        w = self.worst
        return (f"{'PASS' if self.passed else 'FAIL'}: {self.checked} entries, "
                f"{len(self.failures)} failing; worst {w.name}{list(w.index)} "
                f"analytic={w.analytic:.8g} numeric={w.numeric:.8g} err={w.error:.3g}")


def finite_diff_check(loss_fn: Callable[[], Tensor], store: ParamStore | Iterable[Parameter],
                      h: float = 1e-5, tol: float = 1e-4, max_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``max_per_param`` set, a random subsample of that many entries is
    checked for larger parameters (``rng`` picks them).
    """
    params = list(store)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    rng = rng if rng is not None else np.random.default_rng(0)

    report = GradCheckReport(passed=True)
    for p in params:
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                lp = float(loss_fn().data)
                flat[i] = orig - h
                lm = float(loss_fn().data)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = float(analytic[p.name].reshape(-1)[i])
            err = abs(ana - num) / max(1.0, abs(num))
            if not (np.isfinite(num) and np.isfinite(ana)):
                err = math.inf
            entry = GradCheckEntry(p.name, tuple(int(j) for j in np.unravel_index(i, p.shape)),
                                   ana, num, err)
            report.checked += 1
            if report.worst is None or err > report.worst.error:
                report.worst = entry
            if not err <= tol:
                report.failures.append(entry)
                report.passed = False
    for p in params:
        p.zero_grad()
    return report


# -- parameter initializers ---------------------------------------------------------

def init_affine(store: ParamStore, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, scale: float = 1.0, bias: bool = True):
    """Register ``name.W`` (scaled normal, std = scale / sqrt(d_in)) and ``name.b``."""
    W = store.add(f"{name}.W", scale * rng.standard_normal((d_in, d_out)) / math.sqrt(d_in))
    b = store.add(f"{name}.b", np.zeros(d_out)) if bias else None
    return W, b


def init_norm(store: ParamStore, name: str, r: int):
    return store.add(f"{name}.gain", np.ones(r)), store.add(f"{name}.bias", np.zeros(r))
