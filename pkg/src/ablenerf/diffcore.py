"""Minimal reverse-mode automatic differentiation over numpy arrays.

The primitive set is deliberately small and closed: dense affine maps,
relu, masked softmax, layer normalization, elementwise arithmetic,
exp/log, reductions, and shape plumbing (reshape / swapaxes / concat /
slice / broadcast).  Everything else in the package is composed from
these so that every backward rule stays auditable.

Training and rendering run in float32; gradient-check tests build the
same graphs in float64 (finite differences are unreliable in single
precision).  Dtype follows the arrays passed in, there is no global
switch.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InvariantError, ShapeError

__all__ = [
    "Tensor",
    "ComputeGraph",
    "backward",
    "no_grad",
    "set_finiteness_checks",
    "constant",
    "affine",
    "matmul",
    "relu",
    "exp",
    "log",
    "tsum",
    "tmean",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "concat",
    "softmax_masked",
    "layer_norm",
    "softplus",
    "clamp01",
]

_grad_enabled = True
_check_finite = False


def set_finiteness_checks(enabled: bool) -> None:
    """Debug mode: raise InvariantError when any op produces NaN/Inf."""
    global _check_finite
    _check_finite = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional value with an optional gradient slot.

    ``grad`` is ``None`` until a backward pass deposits something; a
    missing gradient means zero.  Repeated backward calls accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # always copy on first store: ops may hand the same buffer to
        # several parents, and += later would corrupt the shared array
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; scalars become constants of the partner dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self, dtype_hint=self.data.dtype)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, opname: str) -> Tensor:
    """Wrap an op result; attaches the backward closure when grads are on."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise InvariantError(f"non-finite values produced by {opname}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so grad matches the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = _coerce(a, getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b, dtype_hint=None):
    a = _coerce(a, dtype_hint or getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a = _coerce(a, getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make(np.where(mask, x.data, 0), (x,), bwd, "relu")


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data)

    return _make(out_data, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _make(np.log(x.data), (x,), bwd, "log")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(gg, x.shape).astype(x.data.dtype, copy=False))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            gg = np.broadcast_to(g, x.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gg, x.shape)
        x.accumulate_grad((gg / count).astype(x.data.dtype, copy=False))

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd, "mean")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bwd, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.swapaxes(a, b)))

    return _make(np.ascontiguousarray(x.data.swapaxes(a, b)), (x,), bwd, "swapaxes")


def broadcast_to(x: Tensor, shape) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(_reduce_to(g, x.shape))

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bwd, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def tslice(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing. Fancy indexing is intentionally absent."""

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.accumulate_grad(full)

    return _make(x.data[idx].copy(), (x,), bwd, "slice")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a.accumulate_grad(_reduce_to(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b.accumulate_grad(_reduce_to(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis; the workhorse of every MLP."""
    if w.ndim != 2:
        raise ShapeError(f"affine weight must be 2-d, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: input extent {x.shape[-1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
    n_in, n_out = w.shape

    def bwd(g):
        g2 = g.reshape(-1, n_out)
        if x.requires_grad:
            x.accumulate_grad((g @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w.accumulate_grad(x.data.reshape(-1, n_in).T @ g2)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), bwd, "affine")


# ---------------------------------------------------------------------------
# normalization and attention weights
# ---------------------------------------------------------------------------

def softmax_masked(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    Disallowed entries come out exactly 0 and receive exactly zero
    gradient.  Stabilized by subtracting the row maximum over allowed
    entries, so adding a constant to a row's allowed scores is a no-op.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        bmask = np.broadcast_to(mask, scores.shape)
    except ValueError as e:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {scores.shape}") from e
    if not bmask.any(axis=-1).all():
        raise InvariantError("softmax_masked: a row has no allowed entries")

    neg_inf = np.array(-np.inf, dtype=scores.data.dtype)
    shifted = np.where(bmask, scores.data, neg_inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if scores.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            scores.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (scores,), bwd, "softmax_masked")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) zero mean / unit variance, then gain and shift."""
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs a last axis of at least 2, got {d}")
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm gain/shift must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + shift.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=lead))
        if shift.requires_grad:
            shift.accumulate_grad(g.sum(axis=lead))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gy - m1 - xhat * m2))

    return _make(out_data, (x, gain, shift), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# composed helpers (not primitives; built from the closed set above)
# ---------------------------------------------------------------------------

def softplus(x: Tensor) -> Tensor:
    # stable form: max(x, 0) + log(1 + exp(-|x|))
    ax = add(relu(x), relu(-x))
    return add(relu(x), log(add(exp(-ax), 1.0)))


def clamp01(x: Tensor) -> Tensor:
    # min(max(x, 0), 1) written with relu so the subgradient is 0 outside
    return sub(1.0, relu(sub(1.0, relu(x))), dtype_hint=x.data.dtype)


# ---------------------------------------------------------------------------
# graph traversal and backward
# ---------------------------------------------------------------------------

class ComputeGraph:
    """Topologically ordered view of every node a root value depends on."""

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        leaves: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._parents:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in visited:
                        stack.append((p, False))
            else:
                leaves.append(node)
                order.append(node)
        return cls(order, leaves)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; leaf grads accumulate."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputeGraph.from_root(loss)
    # seed with a fresh unit gradient each call so repeated backward
    # passes deposit exactly one extra d(loss)/d(leaf) into the leaves
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior activations are not reused; free the buffer
            node.grad = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
