"""Dense float64 tensors with reverse-mode differentiation.

The op set is deliberately closed: exactly the operations the pipeline
composes (matrix product, additions, concat/slice/transpose/reshape,
row softmax, layer norm, GELU, top-k mean pooling, L2 row normalization,
pairwise hinge, L1 distance, mean). There is no broadcasting engine.

Every tensor is verified finite at construction, so a NaN/Inf produced
anywhere surfaces immediately instead of propagating.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFinite(ValueError):
    pass


class KOutOfRange(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DoubleBackward(RuntimeError):
    pass


class MissingGrad(RuntimeError):
    pass


_ids = itertools.count()


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Tensors produced by ops remember their parents and a backward rule;
    creation order doubles as the topological order of the graph, so
    `backward` visits nodes in exactly the reverse of forward order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_id", "_parents", "_vjp", "_spent")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor holds NaN/Inf values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = _vjp
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = "param" if self.requires_grad and self._vjp is None else "node"
        return f"Tensor({tag}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad)


def _result(data, parents: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    The seed gradient is 1. Grads accumulate into leaves, so per-image
    losses of a batch may be backwarded one by one.
    """
    if loss.data.shape != ():
        raise NotScalar(f"backward needs a scalar, got shape {loss.data.shape}")
    if loss._spent:
        raise DoubleBackward("backward already ran for this graph output")
    loss._spent = True

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for t in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._vjp is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ----------------------------------------------------------------------
# ops
# ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_rowvec shapes: {x.shape} + {b.shape}")
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose needs 2-D, got {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat of nothing")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeMismatch(f"slice_rows [{start}:{stop}] out of {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows needs 2-D, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), vjp)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"layer_norm needs 2-D input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine shapes {gain.shape}/{bias.shape} for width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Elementwise tanh-form GELU."""
    d = x.data
    t = np.tanh(_GELU_C * (d + 0.044715 * d**3))

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du),)

    return _result(0.5 * d * (1.0 + t), (x,), vjp)


def _topk_index(data: np.ndarray, k: int, axis: int = 0) -> np.ndarray:
    # stable argsort on the negated values: ties resolve to the lower index
    return np.argsort(-data, axis=axis, kind="stable").take(range(k), axis=axis)


def topk_mean(v: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries of a vector; ties go to lower indices."""
    if v.data.ndim != 1:
        raise ShapeMismatch(f"topk_mean needs a vector, got {v.shape}")
    n = v.shape[0]
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    idx = _topk_index(v.data, k)

    def vjp(g):
        out = np.zeros_like(v.data)
        out[idx] = g / k
        return (out,)

    return _result(v.data[idx].mean(), (v,), vjp)


def topk_mean_cols(x: Tensor, k: int) -> Tensor:
    """Column-wise topk_mean of an n-by-d matrix, returning a d-vector."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"topk_mean_cols needs 2-D, got {x.shape}")
    n, d = x.shape
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    idx = _topk_index(x.data, k, axis=0)
    cols = np.arange(d)

    def vjp(g):
        out = np.zeros_like(x.data)
        out[idx, cols] = g / k
        return (out,)

    return _result(x.data[idx, cols].mean(axis=0), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _result(x.data.mean(), (x,), lambda g: (np.full(shape, g / n),))


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a vector to unit L2 norm."""
    if v.data.ndim != 1:
        raise ShapeMismatch(f"l2_normalize needs a vector, got {v.shape}")
    n = float(np.linalg.norm(v.data))
    if n < 1e-30:
        raise NonFinite("cannot normalize a zero vector")
    y = v.data / n

    def vjp(g):
        return ((g - y * (y @ g)) / n,)

    return _result(y, (v,), vjp)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute elementwise differences; subgradient at ties is 0."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1_distance shapes differ: {a.shape} vs {b.shape}")
    s = np.sign(a.data - b.data)
    return _result(np.abs(a.data - b.data).sum(), (a, b), lambda g: (g * s, -g * s))


def pairwise_hinge(scores: Tensor, pos_idx: np.ndarray, neg_idx: np.ndarray) -> Tensor:
    """Sum over (p, n) pairs of max(1 + s_n - s_p, 0).

    Subgradient at the kink is 0: only strictly violated pairs carry
    gradient.
    """
    if scores.data.ndim != 1:
        raise ShapeMismatch(f"pairwise_hinge needs a score vector, got {scores.shape}")
    pos_idx = np.asarray(pos_idx, dtype=np.intp)
    neg_idx = np.asarray(neg_idx, dtype=np.intp)
    s = scores.data
    margins = 1.0 + s[neg_idx][None, :] - s[pos_idx][:, None]
    active = margins > 0.0

    def vjp(g):
        out = np.zeros_like(s)
        np.subtract.at(out, pos_idx, g * active.sum(axis=1))
        np.add.at(out, neg_idx, g * active.sum(axis=0))
        return (out,)

    return _result(np.where(active, margins, 0.0).sum(), (scores,), vjp)


# ----------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------


def finite_difference_check(
    build: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    rel_tol: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    `build` must reconstruct the scalar loss from the current leaf data
    on every call. Steps are 1e-6 * max(1, |x|) per coordinate; the error
    measure is |a - n| / max(1, |a|, |n|). Returns the worst error seen
    and raises AssertionError if it exceeds `rel_tol`.
    """
    for leaf in leaves:
        leaf.zero_grad()
    backward(build())
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            h = 1e-6 * max(1.0, abs(x0))
            flat[i] = x0 + h
            up = build().item()
            flat[i] = x0 - h
            down = build().item()
            flat[i] = x0
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    if worst > rel_tol:
        raise AssertionError(f"gradient mismatch: worst relative error {worst:.3e} > {rel_tol:g}")
    return worst
