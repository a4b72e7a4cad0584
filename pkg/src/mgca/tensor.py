"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive builds its output eagerly with numpy and attaches a closure
that maps the output gradient to input gradients. ``backward`` linearises the
graph into a :class:`Tape` (topological order) and replays it in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateVectorError(ValueError):
    """Raised when a zero-norm vector reaches a cosine similarity."""


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered record of the ops reachable from one output.

    ``ops`` is topologically sorted: an op appears after every op that
    produced one of its inputs. ``replay`` walks it backwards once.
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.ops):
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


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it; grads accumulate."""
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("output is detached from every differentiable input")
    tape = Tape.record(output)
    tape.replay(output, np.ones_like(output.data))


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), grad_fn, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no rng is given."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# shape -----------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def gather_rows(table: Tensor, index) -> Tensor:
    """``table[index]`` along the first axis; also serves as embedding lookup."""
    idx = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"row index out of range for table with {rows} rows")
    tshape = table.shape

    def grad_fn(g):
        full = np.zeros(tshape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + tshape[1:]))
        return (full,)

    return _make(table.data[idx], (table,), grad_fn, "gather_rows")


embedding = gather_rows


# reductions ------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if bd.ndim > 1 \
                else np.multiply.outer(g, bd)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # stacked rows times one shared matrix: fold the batch axes
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif ad.ndim > 1:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if bd.ndim > 1 \
                    else np.swapaxes(ad, -1, -2) @ g
            else:
                gb = np.multiply.outer(ad, g)
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    width = xd.shape[-1]

    def grad_fn(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, width)
        return gx, (flat * xhat.reshape(-1, width)).sum(axis=0), flat.sum(axis=0)

    return _make(xhat * gd + bias.data, (x, gain, bias), grad_fn, "layer_norm")


def normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale each vector along ``axis`` to unit L2 norm; zero vectors are an error."""
    ad = a.data
    norm = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateVectorError("degenerate vector: zero norm in cosine similarity")
    out = ad / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), grad_fn, "normalize")


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between two vectors, as a scalar tensor."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape or u.shape[0] < 1:
        raise ValueError(f"expected two equal-length vectors, got {u.shape} and {v.shape}")
    return sum(mul(normalize(u), normalize(v)))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    return matmul(normalize(a), transpose(normalize(b)))


def softmax_cross_entropy(logits, target, candidates=None) -> Tensor:
    """Negative log-softmax probability of ``target``.

    ``logits`` may be a single score vector with an integer target (returns a
    scalar) or an ``(M, K)`` matrix with ``M`` targets (returns ``M`` losses).
    ``candidates`` optionally restricts each row's softmax to a boolean subset
    of columns; the target column must be a candidate.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    m, k = z.shape
    if tgt.shape != (m,):
        raise ValueError(f"expected {m} targets, got shape {tgt.shape}")
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise IndexError(f"target out of range for {k} classes")
    rows = np.arange(m)
    if candidates is None:
        allowed = None
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
    else:
        allowed = np.asarray(candidates, dtype=bool).reshape(m, k)
        if not np.all(allowed[rows, tgt]):
            raise ValueError("target column excluded from its candidate set")
        zmax = np.where(allowed, z, -np.inf).max(axis=1, keepdims=True)
        e = np.where(allowed, np.exp(np.where(allowed, z - zmax, 0.0)), 0.0)
    total = e.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(total[:, 0])
    loss = lse - z[rows, tgt]
    probs = e / total

    def grad_fn(g):
        gz = probs * g[:, None]
        gz[rows, tgt] -= g
        return (gz[0] if single else gz,)

    if single:
        return _make(loss.reshape(()), (logits,), lambda g: grad_fn(g.reshape(1)), "cross_entropy")
    return _make(loss, (logits,), grad_fn, "cross_entropy")


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


# checking ----------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5,
                 indices: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. flat entries of ``target``.

    Returns ``(flat_indices, estimates)``. ``target.data`` is perturbed in place
    and restored.
    """
    flat = target.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    out = np.empty(idx.size, dtype=DTYPE)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        out[j] = (plus - minus) / (2.0 * h)
    return idx, out


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              fraction: float = 1.0, rng: np.random.Generator | None = None,
              floor: float = 1e-8) -> float:
    """Max relative error between analytic and finite-difference gradients.

    With ``fraction < 1`` a random subset of each parameter's entries (at
    least one) is checked.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        if fraction >= 1.0:
            chosen = None
        else:
            k = max(1, int(round(fraction * n)))
            chosen = np.sort(rng.choice(n, size=k, replace=False))
        idx, numeric = numeric_grad(fn, p, h, chosen)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric, floor))
    return worst
