"""Dense float64 tensor core with reverse-mode autodiff.

Small by design: exactly the ops a byte-level decoder transformer needs,
each with a hand-written backward rule. Arrays are C-contiguous float64;
reductions use numpy's fixed traversal order, so replaying a forward pass
on identical inputs is bit-identical and same-seed training runs reproduce
losses exactly.

Broadcasting is limited to scalars and trailing-row vectors ([d] against
[..., d]); anything else raises DimensionError.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

DTYPE = np.float64

# When True (default) every recorded op validates that finite inputs gave
# finite outputs, so NaN/Inf surfaces at the op that created it.
STRICT_FINITE = True


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense array plus an optional grad slot and a recorded compute graph.

    Graph nodes are the tensors themselves: an op output keeps its parent
    tensors and a backward closure. ``backward()`` topologically sorts the
    DAG and calls each closure exactly once.
    """

    __slots__ = ("data", "grad", "requires_grad", "_op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, inputs: Sequence["Tensor"], op: str,
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        if STRICT_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"op '{op}' produced non-finite values")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._op = op
            out._inputs = tuple(inputs)
            out._backward = backward
        else:
            out.requires_grad = False
            out._op = "leaf"
            out._inputs = ()
            out._backward = None
        return out

    # -- shape plumbing ---------------------------------------------------

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar root")
        order = toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def toposort(root: Tensor) -> list[Tensor]:
    """Topological order of the DAG below ``root`` (each node once)."""
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
        for parent in node._inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (scalar or trailing-row broadcast only)."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return np.sum(g).reshape(shape)
    # trailing-row: [d] broadcast against [..., d]
    if len(shape) == 1 and g.shape[-1] == shape[0]:
        return g.reshape(-1, shape[0]).sum(axis=0)
    raise DimensionError(f"cannot reduce grad of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.size == 1 or a.size == 1:
        return
    # trailing-row broadcast in either direction
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not "
                         "scalar- or row-broadcastable")


# -- elementwise ops ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return Tensor._from_op(out_data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), "mul", backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (no grad flows to the constant)."""
    a = _coerce(a)
    c = float(c)
    out_data = a.data * c

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * c)

    return Tensor._from_op(out_data, (a,), "scale", backward)


def square(a) -> Tensor:
    a = _coerce(a)
    out_data = a.data * a.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return Tensor._from_op(out_data, (a,), "square", backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable two-sided form
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _coerce(a)
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return Tensor._from_op(out_data, (a,), "silu", backward)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    out_data = np.ascontiguousarray(a.data.reshape(shape))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), "reshape", backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return Tensor._from_op(out_data, (a,), "transpose", backward)


# -- contractions ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: [m,k]@[k,n]; [...,k]@[k,n] (shared right operand);
    [...,m,k]@[...,k,n] with identical leading dims. Accumulation order is
    numpy's fixed contraction order, so results replay bit-identically.
    """
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.ndim == 2:
        raise DimensionError(f"matmul: batched right operand needs batched left, "
                             f"{a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(ga.reshape(a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._from_op(out_data, (a, b), "matmul", backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding: ids must be integers")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise IndexError("embedding: id out of range")
    out_data = np.ascontiguousarray(table.data[ids])

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return Tensor._from_op(out_data, (table,), "embedding", backward)


# -- fused neural-net ops -------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2, last) + eps) * gain."""
    x, gain = _coerce(x), _coerce(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rmsnorm: gain shape {gain.shape} != ({d},)")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    out_data = x.data * inv * gain.data

    def backward(g: np.ndarray) -> None:
        gg = g * gain.data
        if x.requires_grad:
            s = np.sum(gg * x.data, axis=-1, keepdims=True) / d
            x._accumulate(inv * gg - (inv ** 3) * x.data * s)
        if gain.requires_grad:
            gain._accumulate(np.sum(g * x.data * inv,
                                    axis=tuple(range(g.ndim - 1))))

    return Tensor._from_op(out_data, (x, gain), "rmsnorm", backward)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last axis by position-dependent angles.

    x: [..., T, d_head] with d_head even; cos/sin: [T, d_head//2] tables.
    Pair (x[..., 2i], x[..., 2i+1]) is rotated by the angle at (t, i).
    Backward applies the inverse rotation (rotations are isometries).
    """
    x = _coerce(x)
    dh = x.shape[-1]
    if dh % 2 != 0:
        raise DimensionError("rope: head dim must be even")
    if cos.shape != (x.shape[-2], dh // 2):
        raise DimensionError(f"rope: table shape {cos.shape} != {(x.shape[-2], dh // 2)}")
    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = even * cos - odd * sin
    out_data[..., 1::2] = even * sin + odd * cos

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            ge, go = g[..., 0::2], g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            x._accumulate(gx)

    return Tensor._from_op(out_data, (x,), "rope", backward)


def repeat_heads(x: Tensor, repeats: int) -> Tensor:
    """Tile KV heads along axis 1: [B, H, T, d] -> [B, H*repeats, T, d]."""
    x = _coerce(x)
    if repeats == 1:
        return x
    if x.ndim != 4:
        raise DimensionError("repeat_heads expects [B, H, T, d]")
    out_data = np.ascontiguousarray(np.repeat(x.data, repeats, axis=1))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            B, H, T, d = x.shape
            x._accumulate(g.reshape(B, H, repeats, T, d).sum(axis=2))

    return Tensor._from_op(out_data, (x,), "repeat_heads", backward)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis restricted to positions j <= i.

    scores: [..., T, T]. Masked entries get probability exactly 0 and their
    logits receive zero gradient; no -inf arithmetic is involved.
    """
    scores = _coerce(scores)
    T = scores.shape[-1]
    if scores.shape[-2] != T:
        raise DimensionError("causal_softmax expects square trailing dims")
    allowed = np.tril(np.ones((T, T), dtype=bool))
    z = np.where(allowed, scores.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if scores.requires_grad:
            dot = np.sum(g * out_data, axis=-1, keepdims=True)
            scores._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (scores,), "causal_softmax", backward)


def softmax_xent(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood with max-subtraction stabilization.

    logits: [N, V]; targets: int [N]. Backward is (softmax - onehot) / N.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise DimensionError("softmax_xent expects [N, V] logits")
    targets = np.asarray(targets).reshape(-1)
    N, V = logits.shape
    if targets.shape[0] != N:
        raise DimensionError("softmax_xent: target count mismatch")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= V:
        raise IndexError("softmax_xent: target id out of vocab range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    nll = lse - z[np.arange(N), targets]
    out_data = np.array(np.mean(nll))

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(N), targets] -= 1.0
            logits._accumulate(p * (float(g) / N))

    return Tensor._from_op(out_data, (logits,), "softmax_xent", backward)


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple[str, int]
    n_checked: int
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= 1e-4


def grad_check(f: Callable[[dict[str, Tensor]], Tensor],
               params: dict[str, Tensor],
               eps: float = 1e-4,
               samples_per_param: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` with central differences.

    ``f`` must run a fresh forward pass each call and return a scalar Tensor.
    When ``samples_per_param`` is set, a deterministic random subset of
    coordinates per tensor is probed; otherwise every coordinate is.
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise ValueError(f"param {name!r} has non-finite entries")

    loss = f(params)
    if not np.isfinite(loss.data):
        raise ValueError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = ("", -1)
    n_checked = 0
    per_param: dict[str, float] = {}
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples_per_param, replace=False)
        worst_here = 0.0
        for i in idxs:
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            up = f(params).data.item()
            flat[i] = orig - h
            dn = f(params).data.item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(dn)):
                raise ValueError(f"non-finite loss while probing {name}[{i}]")
            numeric = (up - dn) / (2 * h)
            ana = analytic[name].reshape(-1)[i]
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            n_checked += 1
            if rel > worst_here:
                worst_here = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(i))
        per_param[name] = worst_here
    return GradCheckReport(max_rel, worst, n_checked, per_param)
