"""Dense float64 tensors with a reverse-mode tape.

Every differentiable primitive records its parents and a closure mapping the
output gradient to input gradients. :func:`backward` orders the recorded ops
topologically and sweeps them once in reverse.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonDeterministicError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "computation_record",
    "matmul",
    "softmax_family",
    "softmax",
    "log_softmax",
    "logsumexp",
    "logaddexp",
    "layer_norm",
    "relu",
    "concat",
    "stack",
    "embedding",
    "dropout",
    "where",
    "scaled_dot_product_attention",
    "attention_block",
    "finite_diff_check",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonDeterministicError(RuntimeError):
    """Raised when a loss function gives different values for identical inputs."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic protocol ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        return _make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        return _make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, self.shape), _unbroadcast(-g * a / (b * b), other.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self.data
        return _make(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), bw, "slice")

    # -- reductions / elementwise -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        with np.errstate(divide="ignore"):
            out = np.log(a)
        return _make(out, (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return _make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int):
        return _make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),), "swapaxes")

    @property
    def T(self):
        return self.transpose()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, bw: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- tape traversal ----------------------------------------------------------
def computation_record(root: Tensor) -> list[Tensor]:
    """Return the ops reachable from ``root`` in topological order (inputs first)."""
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


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(computation_record(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- primitives --------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    if B.ndim == 2 and A.ndim > 2:
        # activations x weight matrix: one flat GEMM each way
        lead = A.shape[:-1]
        A2 = A.reshape(-1, A.shape[-1])

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ B.T).reshape(A.shape), A2.T @ g2

        return _make((A2 @ B).reshape(*lead, B.shape[1]), (a, b), bw_flat, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _make(A @ B, (a, b), bw, "matmul")


def softmax_family(x: Tensor, log: bool = False, mask: np.ndarray | None = None) -> Tensor:
    """Stable (log-)softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) gives masked entries exactly
    zero probability; a row with nothing kept becomes all zeros. ``log`` and
    ``mask`` cannot be combined.
    """
    x = _lift(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        if log:
            raise ValueError("masked log-softmax is not supported")
        z = np.where(mask, z, -np.inf)
        m = np.max(z, axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(z - m)
        s = e.sum(axis=-1, keepdims=True)
        p = e / np.where(s > 0, s, 1.0)
    else:
        m = z.max(axis=-1, keepdims=True)
        shifted = z - m
        e = np.exp(shifted)
        s = e.sum(axis=-1, keepdims=True)
        if log:
            out = shifted - np.log(s)
            p = e / s
            return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")
        p = e / s

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return softmax_family(x, log=False, mask=mask)


def log_softmax(x: Tensor) -> Tensor:
    return softmax_family(x, log=True)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along ``axis``; an all ``-inf`` slice yields ``-inf``."""
    x = _lift(x)
    z = x.data
    m = np.max(z, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(z - m_safe).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.log(s) + m_safe
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.where(np.isfinite(out_k), np.exp(z - out_k), 0.0)
        return (g * w,)

    return _make(out, (x,), bw, "logsumexp")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    A, B = np.broadcast_arrays(a.data, b.data)
    out = np.logaddexp(A, B)

    def bw(g):
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isfinite(out), np.exp(A - out), 0.0)
            wb = np.where(np.isfinite(out), np.exp(B - out), 0.0)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _make(out, (a, b), bw, "logaddexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def bw(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (
            dx,
            _unbroadcast(g * xhat, G.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(xhat * G + bias.data, (x, gain, bias), bw, "layer_norm")


def relu(x: Tensor) -> Tensor:
    X = x.data
    keep = X > 0
    return _make(np.where(keep, X, 0.0), (x,), lambda g: (g * keep,), "relu")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts], axis=axis), tuple(parts), bw, "stack")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` (``[V, d]``) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    W = weight.data

    def bw(g):
        out = np.zeros_like(W)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, W.shape[1]))
        return (out,)

    return _make(W[ids], (weight,), bw, "gather")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- attention ---------------------------------------------------------------
def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v with boolean ``mask`` (True = may attend)."""
    dk = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    return matmul(softmax(scores, mask=mask), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, h * dk)


def attention_block(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None,
    heads: int,
    weights: Mapping[str, Tensor],
    cache: dict | None = None,
) -> Tensor:
    """Multi-head attention with input and output projections.

    ``weights`` holds ``wq bq wk bk wv bv wo bo``. Inputs are ``[..., T, d]``.
    ``mask`` has shape ``[..., T_q, T_k]`` (broadcast over heads).

    With ``cache`` (incremental decoding) new key/value rows are appended to
    ``cache["k"]``/``cache["v"]`` and attention runs over everything cached so
    far. A cache with ``static=True`` projects ``k``/``v`` once and reuses them.
    """
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"model dimension {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention dims disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    Q = _split_heads(q @ weights["wq"] + weights["bq"], heads)
    if cache is not None and cache.get("static") and "k" in cache:
        K, V = cache["k"], cache["v"]
    else:
        K = _split_heads(k @ weights["wk"] + weights["bk"], heads)
        V = _split_heads(v @ weights["wv"] + weights["bv"], heads)
        if cache is not None:
            if "k" in cache:
                K = concat([cache["k"], K], axis=-2)
                V = concat([cache["v"], V], axis=-2)
            cache["k"], cache["v"] = K, V
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (Q.shape[-2], K.shape[-2]):
            raise ShapeError(f"mask shape {mask.shape} does not match ({Q.shape[-2]}, {K.shape[-2]})")
        mask = np.expand_dims(mask, -3)
    ctx = scaled_dot_product_attention(Q, K, V, mask)
    return _merge_heads(ctx) @ weights["wo"] + weights["bo"]


# -- gradient checking -------------------------------------------------------
def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor] | Mapping[str, Tensor],
    eps: float = 1e-5,
    *,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and returns a scalar Tensor computed from
    ``params``. With ``sample`` set, that many (parameter, index) coordinates
    are drawn from ``rng`` instead of checking every element. The relative
    error uses ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-2]")
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in plist:
        p.grad = None
    loss = loss_fn()
    again = loss_fn()
    if not math.isfinite(loss.item()):
        raise ValueError(f"loss_fn returned a non-finite value {loss.item()!r}")
    if loss.item() != again.item():
        raise NonDeterministicError(f"loss_fn returned {loss.item()!r} then {again.item()!r}")
    backward(loss)

    coords = [(i, j) for i, p in enumerate(plist) for j in range(p.size)]
    if sample is not None and sample < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            p = plist[i]
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = loss_fn().item()
            flat[j] = orig - eps
            f_minus = loss_fn().item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst
