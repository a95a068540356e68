"""Reverse-mode differentiation over a recorded graph of NHWC float64 arrays.

A :class:`Graph` is an append-only list of :class:`Node` records. Leaves are
parameters, inputs, or gradient-blocked constants; every other node is the
result of one primitive applied to earlier nodes. ``backward`` walks the list
in reverse, and ``replay`` re-executes it with substituted leaf values, which
is what the finite-difference oracle uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import kernels
from .rng import Rng

PRIMITIVES = (
    "conv2d",
    "relu",
    "sigmoid",
    "channel_mean",
    "spatial_mul",
    "global_avg_pool",
    "dense",
    "softmax_xent",
    "maxpool2x2",
)
LEAF_ROLES = ("param", "input", "constant")


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's shape rule."""

    def __init__(self, kind: str, *shapes: tuple[int, ...], detail: str = ""):
        self.kind = kind
        self.shapes = shapes
        msg = f"{kind}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonDeterministicGraphError(RuntimeError):
    """Raised when a gradient check is attempted on a graph with unpinned randomness."""


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    operands: tuple[int, ...]
    value: np.ndarray
    params: dict[str, Any] = field(default_factory=dict)
    blocked: bool = False
    name: str | None = None
    cache: Any = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    tolerance: float
    checked: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


# ---------------------------------------------------------------------------
# forward / backward rules


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv2d_fwd(x, w, b, *, stride=1, padding=0):
    n, h, wd, c = x.shape
    k = w.shape[0]
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = kernels.im2col(xp, k, stride, ho, wo)
    out = cols.reshape(n * ho * wo, k * k * c) @ w.reshape(k * k * c, -1) + b
    return out.reshape(n, ho, wo, -1), (cols, xp.shape)


def _conv2d_bwd(g, node, x, w, b):
    cols, (_, hp, wp, _) = node.cache
    stride, pad = node.params["stride"], node.params["padding"]
    n, ho, wo, cout = g.shape
    k, _, cin, _ = w.shape
    g2 = g.reshape(-1, cout)
    cols2 = cols.reshape(-1, k * k * cin)
    dw = (cols2.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
    dxp = kernels.col2im(dcols, hp, wp, stride)
    dx = dxp[:, pad:hp - pad, pad:wp - pad, :] if pad else dxp
    return dx, dw, db


def _check_shapes(kind: str, vals: list[np.ndarray], params: dict[str, Any]) -> None:
    shp = [v.shape for v in vals]
    if kind == "conv2d":
        x, w, b = vals
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise ShapeError(kind, *shp, detail="expected NHWC input, (k,k,Cin,Cout) kernel, (Cout,) bias")
        if w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ShapeError(kind, *shp, detail="kernel must be square and odd-sized")
        if w.shape[2] != x.shape[3] or b.shape[0] != w.shape[3]:
            raise ShapeError(kind, *shp, detail="channel counts disagree")
        stride, pad = params.get("stride", 1), params.get("padding", 0)
        if stride < 1 or pad < 0:
            raise ValueError(f"conv2d: invalid stride={stride} padding={pad}")
        if _conv_out(x.shape[1], w.shape[0], stride, pad) < 1 or _conv_out(x.shape[2], w.shape[0], stride, pad) < 1:
            raise ShapeError(kind, *shp, detail="kernel larger than padded input")
    elif kind == "channel_mean":
        if vals[0].ndim != 4 or vals[0].shape[1] == 0 or vals[0].shape[2] == 0 or vals[0].shape[3] == 0:
            raise ShapeError(kind, *shp, detail="expected non-empty NHWC input")
    elif kind == "spatial_mul":
        m, x = vals
        if x.ndim != 4 or m.shape != x.shape[:3]:
            raise ShapeError(kind, *shp, detail="map must be (N,H,W) matching features (N,H,W,C)")
    elif kind == "global_avg_pool":
        if vals[0].ndim != 4:
            raise ShapeError(kind, *shp, detail="expected NHWC input")
    elif kind == "dense":
        x, w, b = vals
        if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise ShapeError(kind, *shp, detail="expected (N,D) @ (D,K) + (K,)")
    elif kind == "softmax_xent":
        labels = np.asarray(params.get("labels"))
        if vals[0].ndim != 2 or labels.shape != (vals[0].shape[0],):
            raise ShapeError(kind, vals[0].shape, labels.shape, detail="logits (N,K) need N integer labels")
        if labels.size and (labels.min() < 0 or labels.max() >= vals[0].shape[1]):
            raise ValueError("softmax_xent: label out of range")
    elif kind == "maxpool2x2":
        x = vals[0]
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(kind, *shp, detail="spatial size must be even")


def _arity(kind: str) -> int:
    return {"conv2d": 3, "dense": 3, "spatial_mul": 2}.get(kind, 1)


def _forward(kind: str, vals: list[np.ndarray], params: dict[str, Any]) -> tuple[np.ndarray, Any]:
    if kind == "conv2d":
        return _conv2d_fwd(*vals, stride=params["stride"], padding=params["padding"])
    if kind == "relu":
        return np.maximum(vals[0], 0.0), None
    if kind == "sigmoid":
        x = vals[0]
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return out, None
    if kind == "channel_mean":
        return vals[0].mean(axis=3), None
    if kind == "spatial_mul":
        m, x = vals
        return m[..., None] * x, None
    if kind == "global_avg_pool":
        return vals[0].mean(axis=(1, 2)), None
    if kind == "dense":
        x, w, b = vals
        return x @ w + b, None
    if kind == "softmax_xent":
        z = vals[0]
        labels = np.asarray(params["labels"], dtype=np.int64)
        zs = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(zs).sum(axis=1))
        logp = zs - logsum[:, None]
        loss = -logp[np.arange(len(labels)), labels].mean()
        return np.asarray(loss, dtype=np.float64), np.exp(logp)
    if kind == "maxpool2x2":
        out, arg = kernels.maxpool2x2(vals[0])
        return out, arg
    raise ValueError(f"unknown primitive kind: {kind!r}")


def _backward(node: Node, g: np.ndarray, vals: list[np.ndarray]) -> tuple[np.ndarray | None, ...]:
    kind = node.kind
    if kind == "conv2d":
        return _conv2d_bwd(g, node, *vals)
    if kind == "relu":
        return (g * (vals[0] > 0.0),)
    if kind == "sigmoid":
        s = node.value
        return (g * s * (1.0 - s),)
    if kind == "channel_mean":
        c = vals[0].shape[3]
        return (np.repeat(g[..., None] / c, c, axis=3),)
    if kind == "spatial_mul":
        m, x = vals
        return (g * x).sum(axis=3), g * m[..., None]
    if kind == "global_avg_pool":
        n, h, w, c = vals[0].shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).copy(),)
    if kind == "dense":
        x, w, _ = vals
        return g @ w.T, x.T @ g, g.sum(axis=0)
    if kind == "softmax_xent":
        probs = node.cache
        labels = np.asarray(node.params["labels"], dtype=np.int64)
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return (d * (g / len(labels)),)
    if kind == "maxpool2x2":
        x = vals[0]
        return (kernels.maxpool2x2_backward(g, node.cache, x.shape[1], x.shape[2]),)
    raise ValueError(f"unknown primitive kind: {kind!r}")


# ---------------------------------------------------------------------------


class Graph:
    """Append-only record of a computation, differentiable in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.stochastic: list[str] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, role: str, value, name: str | None, blocked: bool) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), role, (), arr, blocked=blocked, name=name)
        self.nodes.append(node)
        return node

    def param(self, value, name: str | None = None) -> Node:
        return self._leaf("param", value, name, blocked=False)

    def input(self, value, name: str | None = None) -> Node:
        return self._leaf("input", value, name, blocked=False)

    def constant(self, value, name: str | None = None) -> Node:
        """Gradient-blocked literal: adjoints are never propagated through it."""
        return self._leaf("constant", value, name, blocked=True)

    def mark_stochastic(self, what: str) -> None:
        """Record that the graph depends on an unpinned random draw."""
        self.stochastic.append(what)

    def apply(self, kind: str, operands: list[Node] | tuple[Node, ...], name: str | None = None, **params) -> Node:
        """Apply primitive ``kind`` to ``operands`` and append the result."""
        if kind not in PRIMITIVES:
            raise ValueError(f"unknown primitive kind: {kind!r}")
        operands = tuple(operands)
        if len(operands) != _arity(kind):
            raise ValueError(f"{kind}: expected {_arity(kind)} operands, got {len(operands)}")
        for op in operands:
            if op.id >= len(self.nodes) or self.nodes[op.id] is not op:
                raise ValueError(f"{kind}: operand node {op.id} does not belong to this graph")
        if kind == "conv2d":
            params.setdefault("stride", 1)
            params.setdefault("padding", 0)
        vals = [op.value for op in operands]
        _check_shapes(kind, vals, params)
        out, cache = _forward(kind, vals, params)
        node = Node(len(self.nodes), kind, tuple(op.id for op in operands), out, params, name=name, cache=cache)
        self.nodes.append(node)
        return node

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "param"]

    def backward(self, loss: Node, wrt: str = "param") -> dict[int, np.ndarray]:
        """Adjoints of ``loss`` for every leaf of role ``wrt`` ("param", "input" or "all")."""
        if loss.value.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        return self.vjp(loss, np.ones_like(loss.value), wrt)

    def vjp(self, out: Node, cotangent: np.ndarray, wrt: str = "param") -> dict[int, np.ndarray]:
        """Vector-Jacobian product: leaf adjoints given the adjoint of ``out``."""
        adj = self.adjoints(out, cotangent)
        result = {}
        for node in self.nodes:
            if node.operands or node.blocked:
                continue
            if wrt == "all" or node.kind == wrt:
                result[node.id] = adj.get(node.id, np.zeros_like(node.value))
        return result

    def adjoints(self, out: Node, cotangent: np.ndarray) -> dict[int, np.ndarray]:
        """Adjoint of every node that ``out`` depends on through unblocked edges."""
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != out.shape:
            raise ValueError(f"cotangent shape {cotangent.shape} != output shape {out.shape}")
        adj: dict[int, np.ndarray] = {out.id: cotangent}
        for node in reversed(self.nodes[: out.id + 1]):
            g = adj.get(node.id)
            if g is None or node.blocked or not node.operands:
                continue
            vals = [self.nodes[i].value for i in node.operands]
            for op_id, d in zip(node.operands, _backward(node, g, vals)):
                if d is None or self.nodes[op_id].blocked:
                    continue
                if op_id in adj:
                    adj[op_id] = adj[op_id] + d
                else:
                    adj[op_id] = d
        return adj

    def replay(self, overrides: dict[int, np.ndarray]) -> list[np.ndarray]:
        """Re-execute every primitive with some leaf values replaced; returns all node values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if not node.operands:
                values.append(overrides.get(node.id, node.value))
                continue
            vals = [values[i] for i in node.operands]
            out, _ = _forward(node.kind, vals, node.params)
            values.append(out)
        return values


def backward(graph: Graph, loss: Node) -> dict[int, np.ndarray]:
    return graph.backward(loss)


def finite_difference_check(
    graph: Graph,
    loss: Node,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    samples_per_param: int = 20,
    seed: int = 0,
    wrt: str = "param",
) -> GradReport:
    """Compare ``graph.backward`` against central differences on sampled entries.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if graph.stochastic:
        raise NonDeterministicGraphError(
            "graph contains unpinned stochastic nodes: " + ", ".join(graph.stochastic)
        )
    analytic = graph.backward(loss, wrt=wrt)
    rng = Rng(seed)
    errors: dict[str, float] = {}
    checked = 0
    for nid, grad in analytic.items():
        node = graph.nodes[nid]
        flat_size = node.value.size
        if flat_size <= samples_per_param:
            idx = np.arange(flat_size)
        else:
            idx = np.array(sorted({rng.integer(flat_size) for _ in range(samples_per_param)}))
        worst = 0.0
        base = node.value
        for i in idx:
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += step
            minus[i] -= step
            fp = graph.replay({nid: plus.reshape(base.shape)})[loss.id]
            fm = graph.replay({nid: minus.reshape(base.shape)})[loss.id]
            numeric = float((fp - fm) / (2.0 * step))
            a = float(grad.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            checked += 1
        errors[node.name or f"node{nid}"] = worst
    return GradReport(errors, tolerance, checked)


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        grad.reshape(-1)[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2.0 * step)
    return grad
