"""Elementwise, reduction and channel-indexing primitives."""
from __future__ import annotations

import numpy as np

from .graph import GraphError, register


def _elementwise(nodes, attrs):
    shapes = {n.shape for n in nodes if n.shape != () or len(nodes) == 1}
    if len(shapes) > 1:
        raise GraphError(f"shape mismatch {[n.shape for n in nodes]}")
    shape = shapes.pop() if shapes else ()
    return shape, any(n.batched for n in nodes)


def _unary(nodes, attrs):
    return nodes[0].shape, nodes[0].batched


register("identity", _unary, lambda x, a: (x[0], None), lambda g, x, y, c, a: [g])
register("add", _elementwise, lambda x, a: (x[0] + x[1], None), lambda g, x, y, c, a: [g, g])
register("sub", _elementwise, lambda x, a: (x[0] - x[1], None), lambda g, x, y, c, a: [g, -g])
register("mul", _elementwise, lambda x, a: (x[0] * x[1], None),
         lambda g, x, y, c, a: [g * x[1], g * x[0]])
register("neg", _unary, lambda x, a: (-x[0], None), lambda g, x, y, c, a: [-g])
register("scale", _unary, lambda x, a: (x[0] * a["factor"], None),
         lambda g, x, y, c, a: [g * a["factor"]])
register("square", _unary, lambda x, a: (x[0] * x[0], None), lambda g, x, y, c, a: [2 * g * x[0]])
register("exp", _unary, lambda x, a: (np.exp(x[0]), None), lambda g, x, y, c, a: [g * y])


def _log_fwd(x, a):
    if (x[0] <= 0).any():
        raise GraphError("log of non-positive value")
    return np.log(x[0]), None


register("log", _unary, _log_fwd, lambda g, x, y, c, a: [g / x[0]])


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


register("sigmoid", _unary, lambda x, a: (_sigmoid(x[0]), None),
         lambda g, x, y, c, a: [g * y * (1 - y)])
register("tanh", _unary, lambda x, a: (np.tanh(x[0]), None),
         lambda g, x, y, c, a: [g * (1 - y * y)])
register("relu", _unary, lambda x, a: (np.maximum(x[0], 0), None),
         lambda g, x, y, c, a: [g * (x[0] > 0)])


def _scalar(nodes, attrs):
    return (), False


def _batch_scalar(nodes, attrs):
    if not nodes[0].batched:
        raise GraphError("per-sample reduction needs a batched input")
    return (), True


register("sum", _scalar, lambda x, a: (np.asarray(x[0].sum()), None),
         lambda g, x, y, c, a: [np.broadcast_to(g, x[0].shape)])
register("mean", _scalar, lambda x, a: (np.asarray(x[0].mean()), None),
         lambda g, x, y, c, a: [np.broadcast_to(g / x[0].size, x[0].shape)])


def _sample_axes(x):
    return tuple(range(1, x.ndim))


register("sample_sum", _batch_scalar, lambda x, a: (x[0].sum(axis=_sample_axes(x[0])), None),
         lambda g, x, y, c, a: [np.broadcast_to(g.reshape((-1,) + (1,) * (x[0].ndim - 1)), x[0].shape)])
register("sample_mean", _batch_scalar,
         lambda x, a: (x[0].mean(axis=_sample_axes(x[0])), None),
         lambda g, x, y, c, a: [np.broadcast_to(
             g.reshape((-1,) + (1,) * (x[0].ndim - 1)) / max(1, x[0][0].size), x[0].shape)])


def _slice_infer(nodes, attrs):
    shape = nodes[0].shape
    lo, hi = attrs["start"], attrs["stop"]
    if not 0 <= lo < hi <= shape[0]:
        raise GraphError(f"channel slice [{lo}:{hi}] out of range for {shape}")
    return (hi - lo,) + shape[1:], nodes[0].batched


def _slice_fwd(x, a):
    ax = x[0].ndim - 3
    idx = [slice(None)] * x[0].ndim
    idx[ax] = slice(a["start"], a["stop"])
    return x[0][tuple(idx)], None


def _slice_bwd(g, x, y, c, a):
    ax = x[0].ndim - 3
    full = np.zeros(x[0].shape, dtype=g.dtype)
    idx = [slice(None)] * x[0].ndim
    idx[ax] = slice(a["start"], a["stop"])
    full[tuple(idx)] = g
    return [full]


register("slice_channels", _slice_infer, _slice_fwd, _slice_bwd)


def _concat_infer(nodes, attrs):
    a, b = nodes
    if len(a.shape) != 3 or len(b.shape) != 3:
        raise GraphError("concat_channels expects [C,H,W] operands")
    if a.shape[1:] != b.shape[1:]:
        raise GraphError(f"spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    if a.batched != b.batched:
        raise GraphError("cannot concatenate batched with unbatched tensors")
    return (a.shape[0] + b.shape[0],) + a.shape[1:], a.batched


def _concat_fwd(x, a):
    return np.concatenate(x, axis=x[0].ndim - 3), x[0].shape[x[0].ndim - 3]


def _concat_bwd(g, x, y, split, a):
    ax = g.ndim - 3
    first, second = np.split(g, [split], axis=ax)
    return [first, second]


register("concat_channels", _concat_infer, _concat_fwd, _concat_bwd)
