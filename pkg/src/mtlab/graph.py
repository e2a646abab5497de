"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is declared once (inputs, parameter references, primitive
op nodes in topological order) and then evaluated any number of times.
Activation nodes carry an implicit leading batch axis at run time; their
declared ``shape`` is per-sample. Parameters, constants and reductions over
the batch are unbatched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Precision, Tensor


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    batched: bool
    attrs: dict = field(default_factory=dict, hash=False, compare=False)
    name: str | None = None
    integer: bool = False

    def label(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"node {self.id} ({self.kind}{tag})"


@dataclass(frozen=True)
class OpDef:
    infer: Callable  # (list[Node], attrs) -> (shape, batched)
    forward: Callable  # (list[ndarray], attrs) -> (out, ctx)
    backward: Callable | None  # (g, list[ndarray], out, ctx, attrs) -> list[ndarray | None]


OPS: dict[str, OpDef] = {}


def register(kind: str, infer, forward, backward=None):
    if kind in OPS:
        raise KeyError(f"op '{kind}' already registered")
    OPS[kind] = OpDef(infer, forward, backward)


class Graph:
    """Declarative op list. Building methods return node ids."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.outputs: dict[str, int] = {}

    def _append(self, **kw) -> int:
        node = Node(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node.id

    def input(self, name: str, shape, batched=True, integer=False) -> int:
        if name in self.inputs:
            raise GraphError(f"duplicate input '{name}'")
        nid = self._append(kind="input", inputs=(), shape=tuple(shape), batched=batched,
                           name=name, integer=integer)
        self.inputs[name] = nid
        return nid

    def param(self, name: str, shape) -> int:
        if name in self.params:
            return self.params[name]
        nid = self._append(kind="param", inputs=(), shape=tuple(shape), batched=False, name=name)
        self.params[name] = nid
        return nid

    def const(self, value, batched=False) -> int:
        value = np.asarray(value, dtype=np.float64)
        shape = value.shape[1:] if batched else value.shape
        return self._append(kind="const", inputs=(), shape=tuple(shape), batched=batched,
                            attrs={"value": value})

    def apply(self, kind: str, *inputs: int, **attrs) -> int:
        if kind not in OPS:
            raise GraphError(f"unknown op '{kind}'")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"op '{kind}' references undefined node {i}")
        try:
            shape, batched = OPS[kind].infer([self.nodes[i] for i in inputs], attrs)
        except GraphError as exc:
            raise GraphError(f"node {len(self.nodes)} ({kind}): {exc}") from None
        return self._append(kind=kind, inputs=tuple(inputs), shape=tuple(shape),
                            batched=batched, attrs=attrs)

    def output(self, name: str, node: int) -> int:
        self.outputs[name] = node
        return node

    def shape_of(self, node: int) -> tuple[int, ...]:
        return self.nodes[node].shape

    def ancestors(self, targets) -> list[int]:
        """Ids of every node needed to compute ``targets``, ascending."""
        need = set()
        stack = list(targets)
        while stack:
            n = stack.pop()
            if n in need:
                continue
            need.add(n)
            stack.extend(self.nodes[n].inputs)
        return sorted(need)

    def __len__(self):
        return len(self.nodes)


@dataclass
class Trace:
    """Forward values (and op contexts) of one evaluation."""
    graph: Graph
    values: dict[int, np.ndarray]
    ctx: dict[int, Any]
    order: list[int]
    dtype: Any


def _as_array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def forward(graph: Graph, inputs: Mapping[str, Any], params: Mapping[str, Any] | None = None,
            targets=None, precision: Precision = Precision.TRAIN32, check_finite=True) -> Trace:
    params = params or {}
    dtype = precision.dtype
    if targets is None:
        targets = list(graph.outputs.values())
    order = graph.ancestors(targets)
    values: dict[int, np.ndarray] = {}
    ctx: dict[int, Any] = {}
    batch = None
    for nid in order:
        node = graph.nodes[nid]
        if node.kind == "input":
            if node.name not in inputs:
                raise GraphError(f"missing input '{node.name}'")
            arr = _as_array(inputs[node.name])
            arr = arr.astype(np.int64) if node.integer else arr.astype(dtype, copy=False)
            want = node.shape
            got = arr.shape[1:] if node.batched else arr.shape
            if got != want or (node.batched and arr.ndim != len(want) + 1):
                raise GraphError(f"{node.label()}: expected shape "
                                 f"{('N',) + want if node.batched else want}, got {arr.shape}")
            if node.batched:
                if batch is None:
                    batch = arr.shape[0]
                elif arr.shape[0] != batch:
                    raise GraphError(f"{node.label()}: batch size {arr.shape[0]} != {batch}")
            out = arr
        elif node.kind == "param":
            if node.name not in params:
                raise GraphError(f"missing parameter '{node.name}'")
            out = _as_array(params[node.name]).astype(dtype, copy=False)
            if out.shape != node.shape:
                raise GraphError(f"{node.label()}: parameter shape {out.shape} != declared {node.shape}")
        elif node.kind == "const":
            out = node.attrs["value"].astype(dtype)
        else:
            op = OPS[node.kind]
            ins = [values[i] for i in node.inputs]
            try:
                # non-finite results are caught below with the node named
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    out, c = op.forward(ins, node.attrs)
            except GraphError as exc:
                raise GraphError(f"{node.label()}: {exc}") from None
            ctx[nid] = c
            exp = node.shape
            got = out.shape[1:] if node.batched else out.shape
            if got != exp:
                raise GraphError(f"{node.label()}: produced shape {out.shape}, declared {exp}")
        if check_finite and out.dtype.kind == "f" and not np.isfinite(out).all():
            raise NonFiniteError(f"non-finite value produced at {node.label()}")
        values[nid] = out
    return Trace(graph, values, ctx, order, dtype)


def eval_graph(graph: Graph, inputs: Mapping[str, Any], params: Mapping[str, Any] | None = None,
               outputs=None, precision: Precision = Precision.TRAIN32) -> dict[str, np.ndarray]:
    """Evaluate named graph outputs. Pure: no state survives the call."""
    names = list(graph.outputs) if outputs is None else list(outputs)
    for n in names:
        if n not in graph.outputs:
            raise GraphError(f"unknown output '{n}'")
    trace = forward(graph, inputs, params, [graph.outputs[n] for n in names], precision)
    return {n: trace.values[graph.outputs[n]] for n in names}


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g.reshape(shape)


def backward(graph: Graph, inputs: Mapping[str, Any] | None, seed, params=None,
             precision: Precision = Precision.TRAIN32, trace: Trace | None = None,
             wrt=None) -> dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every parameter.

    ``seed`` is a node id or output name. Parameters the seed does not
    depend on receive exact zeros. ``wrt`` optionally restricts the
    returned names (defaults to all parameters).
    """
    if isinstance(seed, str):
        seed = graph.outputs[seed]
    snode = graph.nodes[seed]
    if snode.batched or snode.shape != ():
        raise GraphError(f"backward seed {snode.label()} is not a scalar (shape {snode.shape})")
    if trace is None:
        trace = forward(graph, inputs or {}, params, [seed], precision)
    values = trace.values
    grads: dict[int, np.ndarray] = {seed: np.ones((), dtype=trace.dtype)}
    live = set(graph.ancestors([seed]))
    for nid in reversed([n for n in trace.order if n in live]):
        node = graph.nodes[nid]
        if node.kind in ("param", "input", "const"):
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        op = OPS[node.kind]
        if op.backward is None:
            continue
        ins = [values[i] for i in node.inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            parts = op.backward(g, ins, values[nid], trace.ctx.get(nid), node.attrs)
        for src, part in zip(node.inputs, parts):
            if part is None:
                continue
            part = _unbroadcast(part, values[src].shape)
            if src in grads:
                grads[src] = grads[src] + part
            else:
                grads[src] = part
    names = graph.params if wrt is None else wrt
    out = {}
    for name in names:
        nid = graph.params[name]
        if nid in grads:
            g = np.asarray(grads[nid], dtype=trace.dtype)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        else:
            g = np.zeros(graph.nodes[nid].shape, dtype=trace.dtype)
        out[name] = g
    return out


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tolerance: float
    checked_entries: int

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.per_param.values())


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(graph: Graph, inputs: Mapping[str, Any], params: Mapping[str, Any], seed,
               tolerance: float = 1e-4, h: float = 1e-5, max_entries: int = 10_000,
               rng_seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences at 64-bit precision.

    Above ``max_entries`` entries per parameter, a seeded random subsample
    of entries is checked.
    """
    if isinstance(seed, str):
        seed = graph.outputs[seed]
    p64 = {k: np.array(_as_array(v), dtype=np.float64) for k, v in params.items()}
    analytic = backward(graph, inputs, seed, p64, precision=Precision.CHECK64)
    rng = np.random.default_rng(rng_seed)

    def f(p):
        tr = forward(graph, inputs, p, [seed], Precision.CHECK64)
        return float(tr.values[seed])

    per_param = {}
    checked = 0
    for name, arr in p64.items():
        if name not in graph.params:
            continue
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(p64)
            flat[i] = orig - h
            fm = f(p64)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = float(relative_error(ga[i], num))
            if math.isnan(err):
                err = math.inf
            worst = max(worst, err)
        per_param[name] = worst
        checked += len(idx)
    return GradCheckReport(per_param, tolerance, checked)
