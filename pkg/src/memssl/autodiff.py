"""Reverse-mode automatic differentiation over dense float arrays.

The engine is a tape of :class:`Tensor` nodes. Forward math runs through the
kernel backend (compiled or numpy); ``backward`` walks the graph in reverse
topological order and accumulates gradients additively across fan-out.
Training arrays are float32; building the same graph from float64 inputs is
the shadow mode used by :func:`grad_check`.

Shape alignment is explicit: apart from ``multiply_scalar`` there is no
implicit broadcasting. The broadcast-like patterns the encoder needs exist as
dedicated ops (``add_bias``, ``add_shared``, ``broadcast_rows``) with fixed
contracts.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend as K
from .errors import ConfigError, DegenerateEmbeddingError

EPS_NORM = 1e-8
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher forward, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float array participating in the gradient graph.

    ``grad`` is populated on requires_grad leaves by :func:`backward`;
    intermediate nodes do not retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"mixed dtypes in op: {dt} vs {t.data.dtype}")


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar; fills .grad of reachable requires_grad leaves."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, contrib in node._backward(g):
            if not parent.requires_grad:
                continue
            buf = grads.get(id(parent))
            if buf is None:
                grads[id(parent)] = contrib
            else:
                buf += contrib


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
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
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _node(a.data @ b.data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on stacks of matrices with identical leading dims."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm inner-dim mismatch: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)

    def bwd(g):
        return [
            (a, g @ np.swapaxes(b.data, -1, -2)),
            (b, np.swapaxes(a.data, -1, -2) @ g),
        ]

    return _node(a.data @ b.data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    _check_same_dtype(a, b)

    def bwd(g):
        return [(a, g), (b, g.copy())]

    return _node(a.data + b.data, (a, b), bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"multiply shape mismatch: {a.shape} * {b.shape}")
    _check_same_dtype(a, b)

    def bwd(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _node(a.data * b.data, (a, b), bwd)


def multiply_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return [(a, g * s)]

    return _node(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-d vector to every row of a (..., d) array."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    _check_same_dtype(x, bias)

    def bwd(g):
        return [(x, g), (bias, g.reshape(-1, bias.shape[0]).sum(axis=0))]

    return _node(x.data + bias.data, (x, bias), bwd)


def add_shared(x: Tensor, y: Tensor) -> Tensor:
    """Add one (N, d) array to every leading-axis slice of a (B, N, d) array."""
    if x.data.ndim != 3 or y.data.ndim != 2 or x.shape[1:] != y.shape:
        raise ValueError(f"add_shared shape mismatch: {x.shape} + {y.shape}")
    _check_same_dtype(x, y)

    def bwd(g):
        return [(x, g), (y, g.sum(axis=0))]

    return _node(x.data + y.data, (x, y), bwd)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (1, d) row n times; gradient sums back over the copies."""
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ValueError(f"broadcast_rows expects a (1, d) input, got {x.shape}")

    def bwd(g):
        return [(x, g.sum(axis=0, keepdims=True))]

    return _node(np.repeat(x.data, n, axis=0), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""

    def bwd(g):
        return [(x, K.gelu_bwd(x.data, g))]

    return _node(K.gelu_fwd(x.data), (x,), bwd)


def softmax_rows(x: Tensor, temperature: float) -> Tensor:
    """Row softmax of x / temperature, max-subtracted for stability."""
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D input, got {x.shape}")
    inv_t = 1.0 / float(temperature)
    p = K.softmax_fwd(x.data, inv_t)

    def bwd(g):
        return [(x, K.softmax_bwd(p, g, inv_t))]

    return _node(p, (x,), bwd)


def log_softmax_rows(x: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    if x.data.ndim != 2:
        raise ValueError(f"log_softmax_rows expects a 2-D input, got {x.shape}")
    inv_t = 1.0 / float(temperature)
    logp = K.log_softmax_fwd(x.data, inv_t)

    def bwd(g):
        return [(x, K.log_softmax_bwd(logp, g, inv_t))]

    return _node(logp, (x,), bwd)


def l2_normalize_rows(x: Tensor, eps_norm: float = EPS_NORM) -> Tensor:
    """Scale every row to unit Euclidean norm; rows at or below eps_norm are
    an error rather than clamped, to surface embedding collapse early."""
    if x.data.ndim != 2:
        raise ValueError(f"l2_normalize_rows expects a 2-D input, got {x.shape}")
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms <= eps_norm):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {norms[bad]:.3e} <= {eps_norm:g} before normalization"
        )
    norms = norms.astype(x.dtype)[:, None]
    y = x.data / norms

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return [(x, (g - dot * y) / norms)]

    return _node(y, (x,), bwd)


def cross_entropy_rows(target_p: Tensor, log_q: Tensor) -> Tensor:
    """Mean over rows of -sum(target * log_q). Targets are detached: the
    gradient flows only into log_q."""
    if target_p.shape != log_q.shape or log_q.data.ndim != 2:
        raise ValueError(
            f"cross_entropy_rows shape mismatch: targets {target_p.shape} vs log_q {log_q.shape}"
        )
    t = target_p.data
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"target row {bad} sums to {sums[bad]:.6f}, expected 1")
    rows = t.shape[0]
    value = -(t.astype(np.float64) * log_q.data.astype(np.float64)).sum() / rows

    def bwd(g):
        return [(log_q, (-float(g) / rows) * t)]

    return _node(np.asarray(value, dtype=log_q.dtype), (log_q,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    _check_same_dtype(x, gamma, beta)
    x2 = x.data.reshape(-1, d)
    y2, mu, rstd = K.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def bwd(g):
        gx2, ggamma, gbeta = K.layer_norm_bwd(x2, gamma.data, mu, rstd, g.reshape(-1, d))
        return [(x, gx2.reshape(x.shape)), (gamma, ggamma), (beta, gbeta)]

    return _node(y2.reshape(x.shape), (x, gamma, beta), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        return [(x, np.full_like(x.data, float(g) / n))]

    return _node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"slice_axis axis {axis} out of range for {x.shape}")
    axis %= nd
    if not 0 <= start < stop <= x.shape[axis]:
        raise ValueError(f"slice_axis [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(nd))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return [(x, full)]

    return _node(x.data[idx].copy(), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    _check_same_dtype(*tensors)
    axis %= tensors[0].data.ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        parts = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = tuple(slice(None) if i != axis else slice(lo, hi) for i in range(g.ndim))
            parts.append((t, g[idx].copy()))
        return parts

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        return [(x, g.reshape(x.shape))]

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        return [(x, np.ascontiguousarray(g.transpose(inv)))]

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


# every differentiable op, for coverage sweeps in the test suite
ALL_OPS = (
    "matmul",
    "bmm",
    "add",
    "multiply",
    "multiply_scalar",
    "add_bias",
    "add_shared",
    "broadcast_rows",
    "gelu",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize_rows",
    "cross_entropy_rows",
    "layer_norm",
    "mean_all",
    "slice_axis",
    "concat",
    "reshape",
    "transpose",
)


def grad_check(
    op_closure: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-4,
) -> float:
    """Max discrepancy between backward() and central finite differences.

    ``op_closure`` maps a Tensor to a scalar Tensor. Runs in float64; the
    per-coordinate discrepancy is |analytic - numeric| / max(1, |analytic|,
    |numeric|), so it reads as relative error for O(1) gradients and absolute
    error for vanishing ones.
    """
    x64 = np.array(x, dtype=np.float64)
    t = Tensor(x64.copy(), requires_grad=True)
    loss = op_closure(t)
    if loss.data.size != 1:
        raise ValueError("grad_check closure must return a scalar")
    backward(loss)
    analytic = t.grad.copy() if t.grad is not None else np.zeros_like(x64)

    flat = x64.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = op_closure(Tensor(x64.copy())).item()
            flat[i] = orig - h
            f_minus = op_closure(Tensor(x64.copy())).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(x64.shape)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / scale).max())
