"""Seeded gradient-check cases for every differentiable op.

Each case builder draws a small random graph around one op, with inputs
kept away from kinks (relu at 0, max-pool ties, the Huber threshold) so
that central differences are meaningful. The loss is ``sum(r * op(...))``
with a random ``r`` so every output entry carries weight.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .graph import Graph, grad_check

Case = tuple[Graph, dict, dict, str]

N, C, H, W = 2, 2, 4, 4


def _lifted(g: Graph, feeds: dict, params: dict, name: str, value: np.ndarray) -> int:
    """Batched node ``x + p`` so the per-sample value is a checked parameter."""
    x = g.input(f"{name}_in", value.shape[1:])
    p = g.param(name, value.shape[1:])
    feeds[f"{name}_in"] = np.zeros_like(value)
    feeds[f"{name}_in"][1:] = value[1:] - value[:1]
    params[name] = value[0].copy()
    return g.apply("add", x, p)


def _weighted_loss(g: Graph, y: int, rng) -> None:
    node = g.nodes[y]
    if node.shape == () and not node.batched:
        g.output("L", y)
        return
    r = rng.standard_normal(node.shape)
    g.output("L", g.apply("sum", g.apply("mul", y, g.const(r))))


def _away(rng, shape, lo=0.05):
    return rng.uniform(lo, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _unary_case(kind, positive=False, kink=False, **attrs):
    def build(rng) -> Case:
        g, feeds, params = Graph(), {}, {}
        if positive:
            v = rng.uniform(0.2, 2.0, (N, C, H, W))
        elif kink:
            v = _away(rng, (N, C, H, W))
        else:
            v = rng.standard_normal((N, C, H, W))
        y = g.apply(kind, _lifted(g, feeds, params, "p", v), **attrs)
        _weighted_loss(g, y, rng)
        return g, feeds, params, "L"
    return build


def _binary_case(kind):
    def build(rng) -> Case:
        g, feeds, params = Graph(), {}, {}
        a = _lifted(g, feeds, params, "a", rng.standard_normal((N, C, H, W)))
        b = g.param("b", (C, H, W))
        params["b"] = rng.standard_normal((C, H, W))
        _weighted_loss(g, g.apply(kind, a, b), rng)
        return g, feeds, params, "L"
    return build


def _reduction_case(kind):
    def build(rng) -> Case:
        g, feeds, params = Graph(), {}, {}
        y = g.apply(kind, _lifted(g, feeds, params, "p", rng.standard_normal((N, C, H, W))))
        if g.nodes[y].batched:
            y = g.apply("sum", g.apply("mul", y, g.const(rng.standard_normal(()))))
        g.output("L", g.apply("square", y))
        return g, feeds, params, "L"
    return build


def _slice_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    x = _lifted(g, feeds, params, "p", rng.standard_normal((N, 4, H, W)))
    lo = int(rng.integers(0, 3))
    hi = int(rng.integers(lo + 1, 5))
    _weighted_loss(g, g.apply("slice_channels", x, start=lo, stop=hi), rng)
    return g, feeds, params, "L"


def _concat_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    a = _lifted(g, feeds, params, "a", rng.standard_normal((N, 2, H, W)))
    b = _lifted(g, feeds, params, "b", rng.standard_normal((N, 3, H, W)))
    _weighted_loss(g, g.apply("concat_channels", a, b), rng)
    return g, feeds, params, "L"


def _conv_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    x = _lifted(g, feeds, params, "x", rng.standard_normal((N, c_in, 5, 5)))
    y = L.conv2d(g, x, L.Conv2dParams("c", c_in, c_out, k, stride))
    params["c/w"] = rng.standard_normal((c_out, c_in, k, k))
    params["c/b"] = rng.standard_normal(c_out)
    _weighted_loss(g, y, rng)
    return g, feeds, params, "L"


def _pool_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    # distinct values spaced far beyond the difference step: no ties, no argmax flips
    v = rng.permuted(np.tile(np.arange(C * H * W, dtype=np.float64), (N, 1)), axis=1)
    v = v.reshape(N, C, H, W) * 0.1 + rng.uniform(-0.01, 0.01, (N, C, H, W))
    _weighted_loss(g, g.apply("max_pool2d", _lifted(g, feeds, params, "p", v)), rng)
    return g, feeds, params, "L"


def _upsample_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    f = int(rng.choice([2, 4, 8]))
    x = _lifted(g, feeds, params, "p", rng.standard_normal((N, C, 2, 3)))
    _weighted_loss(g, g.apply("upsample_bilinear", x, factor=f), rng)
    return g, feeds, params, "L"


def _lstm_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    x = _lifted(g, feeds, params, "x", rng.standard_normal((N, 2, 3, 3)))
    h0 = _lifted(g, feeds, params, "h", rng.standard_normal((N, 2, 3, 3)))
    c0 = _lifted(g, feeds, params, "c", rng.standard_normal((N, 2, 3, 3)))
    cell = L.conv_lstm_cell("lstm", 2, 2)
    h, state = L.conv_lstm_step(g, x, L.ConvLstmState(h0, c0), cell)
    params["lstm/w"] = rng.standard_normal(cell.kernel_shape) * 0.3
    params["lstm/b"] = rng.standard_normal(cell.c_out)
    _weighted_loss(g, g.apply("add", h, state.cell), rng)
    return g, feeds, params, "L"


def _seg_ce_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    c = int(rng.integers(2, 5))
    x = _lifted(g, feeds, params, "p", rng.standard_normal((N, c, H, W)))
    t = g.input("t", (H, W), integer=True)
    feeds["t"] = rng.integers(0, c, (N, H, W))
    per = g.apply("seg_ce", x, t, ignore_id=None)
    _weighted_loss(g, per, rng)
    return g, feeds, params, "L"


def _det_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    ch = 5 + int(rng.integers(1, 4))
    x = _lifted(g, feeds, params, "p", rng.standard_normal((N, ch, 2, 2)))
    tgt = rng.uniform(0, 1, (N, ch, 2, 2))
    tgt[:, 0] = rng.integers(0, 2, (N, 2, 2))
    t = g.input("t", (ch, 2, 2))
    feeds["t"] = tgt
    _weighted_loss(g, g.apply("det_sq_error", x, t, lambda_coord=5.0, lambda_noobj=0.5), rng)
    return g, feeds, params, "L"


def _huber_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    delta = float(rng.uniform(0.3, 1.5))
    v = rng.standard_normal((N, 1, H, W))
    # residuals well inside one branch or the other
    mag = np.where(rng.random(v.shape) < 0.5, rng.uniform(0.05, 0.8, v.shape) * delta,
                   rng.uniform(1.2, 3.0, v.shape) * delta)
    t = g.input("t", (1, H, W))
    # one residual sign per pixel across the batch: the linear branch has a constant
    # slope, so opposite signs would cancel to an exact zero in the shared gradient
    feeds["t"] = v - rng.choice([-1.0, 1.0], v.shape[1:]) * mag
    _weighted_loss(g, g.apply("huber", _lifted(g, feeds, params, "p", v), t, delta=delta), rng)
    return g, feeds, params, "L"


def _masked_mean_case(rng) -> Case:
    g, feeds, params = Graph(), {}, {}
    n = 4
    x = g.input("x", ())
    p = g.param("p", ())
    feeds["x"] = rng.standard_normal(n)
    params["p"] = rng.standard_normal(())
    m = g.input("m", ())
    feeds["m"] = (rng.random(n) < 0.6).astype(np.float64)
    per = g.apply("square", g.apply("add", x, p))
    g.output("L", g.apply("masked_mean", per, m))
    return g, feeds, params, "L"


def _combine_case(kind):
    def build(rng) -> Case:
        g, feeds, params = Graph(), {}, {}
        n = int(rng.integers(2, 4))
        losses = []
        for i in range(n):
            params[f"l{i}"] = rng.uniform(0.3, 2.0, 1)
            losses.append(g.apply("sum", g.apply("square", g.param(f"l{i}", (1,)))))
        pres = g.input("present", (n,), batched=False)
        present = np.ones(n)
        if n == 3 and rng.random() < 0.3:
            present[int(rng.integers(0, n))] = 0.0
        feeds["present"] = present
        attrs = ({"weights": tuple(rng.uniform(0.1, 10.0, n))} if kind == "weighted_sum" else {"eps": 1e-8})
        g.output("L", g.apply(kind, *losses, pres, **attrs))
        return g, feeds, params, "L"
    return build


CASES: dict[str, Callable] = {
    "identity": _unary_case("identity"),
    "neg": _unary_case("neg"),
    "scale": _unary_case("scale", factor=-1.7),
    "square": _unary_case("square"),
    "exp": _unary_case("exp"),
    "log": _unary_case("log", positive=True),
    "sigmoid": _unary_case("sigmoid"),
    "tanh": _unary_case("tanh"),
    "relu": _unary_case("relu", kink=True),
    "add": _binary_case("add"),
    "sub": _binary_case("sub"),
    "mul": _binary_case("mul"),
    "sum": _reduction_case("sum"),
    "mean": _reduction_case("mean"),
    "sample_sum": _reduction_case("sample_sum"),
    "sample_mean": _reduction_case("sample_mean"),
    "slice_channels": _slice_case,
    "concat_channels": _concat_case,
    "conv2d": _conv_case,
    "max_pool2d": _pool_case,
    "upsample_bilinear": _upsample_case,
    "softmax_channels": _unary_case("softmax_channels"),
    "log_softmax_channels": _unary_case("log_softmax_channels"),
    "conv_lstm": _lstm_case,
    "seg_ce": _seg_ce_case,
    "det_sq_error": _det_case,
    "huber": _huber_case,
    "masked_mean": _masked_mean_case,
    "weighted_sum": _combine_case("weighted_sum"),
    "geometric_mean": _combine_case("geometric_mean"),
}


@dataclass(frozen=True)
class OpCheckResult:
    op: str
    cases: int
    failures: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def check_op(op: str, cases: int = 100, tolerance: float = 1e-4, seed: int = 0) -> OpCheckResult:
    build = CASES[op]
    t0 = time.perf_counter()
    failures, worst = 0, 0.0
    for i in range(cases):
        rng = np.random.default_rng([seed, i, sorted(CASES).index(op)])
        g, feeds, params, out = build(rng)
        rep = grad_check(g, feeds, params, out, tolerance)
        worst = max(worst, rep.max_error)
        failures += not rep.passed
    return OpCheckResult(op, cases, failures, worst, time.perf_counter() - t0)


def check_all(cases: int = 100, tolerance: float = 1e-4, seed: int = 0, ops=None) -> list[OpCheckResult]:
    return [check_op(op, cases, tolerance, seed) for op in (ops or CASES)]
