"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps one ndarray (float32 in production; float64 graphs are allowed
so test oracles can accumulate in 64-bit). Non-leaf tensors remember their
parents and a backward closure; graphs are per-expression, there is no global
tape, so independent graphs can be built and backpropagated concurrently.

The supported op set is closed: matmul, add/sub/mul (broadcasting), softmax,
rmsnorm, embedding gather, cross-entropy, abs, sigmoid, log, relu, sum/mean,
reshape/transpose/slice/concat/stack/take_rows. Anything else is a build-time
extension, not runtime dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ShapeMismatch

Array = np.ndarray

_FLOAT_TYPES = (np.float32, np.float64)


def _as_array(value, dtype) -> Array:
    arr = np.asarray(value, dtype=dtype)
    return arr


class Tensor:
    """One node of a computation graph.

    Leaves are created directly (requires_grad set by the caller); interior
    nodes get requires_grad = any(parent.requires_grad) and carry the closure
    that maps the output gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOAT_TYPES else np.float32
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph history, no gradient."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractViolation("tensor/tensor division is outside the supported op set")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum grad over axes that were broadcast to reach `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# elementwise -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bwd)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def bwd(g):
        # sign(0) = 0: the stated subgradient choice for |.| at the kink
        return (g * np.sign(x.data),)

    return _node(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _node(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _node(out, (x,), bwd)


# reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype),)

    return _node(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_abs(x: Tensor) -> Tensor:
    """Per-element mean absolute value; the L_align normalization."""
    return tmean(absolute(x))


# shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    out = x.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _node(out, (x,), bwd)


def take(x: Tensor, idx) -> Tensor:
    """Basic slicing / integer indexing with scatter-add backward."""
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), bwd)


def take_rows(x: Tensor, idx: Array) -> Tensor:
    """out[b] = x[b, idx[b]] for a batched (B, T, ...) tensor."""
    b = np.arange(x.shape[0])
    out = x.data[b, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b, idx), g)
        return (gx,)

    return _node(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _node(out, tuple(parts), bwd)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _node(out, tuple(parts), bwd)


# linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), bwd)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / rms(x) * weight over the last axis."""
    n = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    inv = ms ** -0.5
    normed = x.data * inv
    out = normed * weight.data

    def bwd(g):
        gw = _unbroadcast(g * normed, weight.shape)
        gy = g * weight.data
        dot = (gy * x.data).sum(axis=-1, keepdims=True)
        gx = inv * gy - (inv ** 3 / n) * x.data * dot
        return gx.astype(x.dtype), gw.astype(weight.dtype)

    return _node(out, (x, weight), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"token id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), bwd)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of `targets` over unmasked positions.

    logits: (..., V); targets: int array (...); mask: optional (...) of 0/1.
    Accumulates the reduction in float64, returns a scalar in the graph dtype.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if mask is None:
        mask_arr = np.ones(targets.shape, dtype=logits.dtype)
    else:
        mask_arr = np.asarray(mask, dtype=logits.dtype)
    count = float(mask_arr.sum(dtype=np.float64))
    if count <= 0:
        raise ContractViolation("cross_entropy needs at least one unmasked position")

    m = logits.data.max(axis=-1, keepdims=True)
    ex = np.exp(logits.data - m)
    z = ex.sum(axis=-1, keepdims=True, dtype=np.float64)
    gathered = np.take_along_axis(logits.data - m, targets[..., None], axis=-1)[..., 0]
    logp_target = gathered - np.log(z[..., 0])
    loss = -(logp_target * mask_arr).sum(dtype=np.float64) / count
    out = np.asarray(loss, dtype=logits.dtype)

    probs = (ex / z).astype(logits.dtype)

    def bwd(g):
        gl = probs.copy()
        np.add.at(gl, tuple(np.indices(targets.shape)) + (targets,), -1.0)
        gl *= (mask_arr / count)[..., None]
        return (gl * g,)

    return _node(out, (logits,), bwd)


# backward pass ------------------------------------------------------------


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Array]:
    """Backpropagate from a scalar loss.

    Returns a map from every requires_grad leaf reachable from `loss` to its
    gradient. Leaves passed explicitly that the graph never touched get zeros;
    requires_grad=False leaves never get an entry (no gradient is allocated).
    """
    if loss.data.ndim != 0:
        raise ContractViolation(f"backward expects a scalar loss, got shape {loss.shape}")

    # iterative topological order over the requires_grad subgraph
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(loss, iter(loss._parents))]
    visited.add(id(loss))
    while stack:
        node, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            topo.append(node)
            stack.pop()
        elif id(nxt) not in visited and nxt.requires_grad:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))

    grads: dict[int, Array] = {id(loss): np.ones((), dtype=loss.dtype)}
    result: dict[Tensor, Array] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                result[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf not in result:
                result[leaf] = np.zeros(leaf.shape, dtype=leaf.dtype)
    return result


# optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name (weight_decay 0 => plain Adam)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_update(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, Array]) -> None:
    """One bias-corrected Adam step over named leaves, in place.

    Deterministic: identical (state, leaves, grads) produce bit-identical
    parameters and moments. Missing grads are treated as zero.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


# numeric gradient oracle ---------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-4) -> Array:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Perturbs x.data in place and restores it; f must be a pure function of x.
    """
    if h <= 0:
        raise ContractViolation("finite_diff_grad needs h > 0")

    def evaluate() -> float:
        out = f(x)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: Array, numeric: Array) -> float:
    """max |a - n| / max(1e-8, |a| + |n|), the grad-check metric."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
    return float(np.max(np.abs(a - n) / denom))
