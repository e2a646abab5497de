"""Neural-network primitives registered as differentiable graph ops.

Activations are ``[N, C, H, W]`` at run time (declared ``[C, H, W]``).
The module-level helpers (``conv2d``, ``conv_lstm_step``, ...) emit nodes
into a :class:`~mtlab.graph.Graph` and return node ids.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import Graph, GraphError, register


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# --- conv2d ---------------------------------------------------------------

def _conv_infer(nodes, attrs):
    x, w, b = nodes
    if not x.batched or len(x.shape) != 3:
        raise GraphError(f"conv2d input must be batched [C,H,W], got {x.shape}")
    if len(w.shape) != 4:
        raise GraphError(f"conv2d kernel must be [C_out,C_in,k_h,k_w], got {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if c_in != x.shape[0]:
        raise GraphError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise GraphError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if b.shape != (c_out,):
        raise GraphError(f"conv2d bias must be [{c_out}], got {b.shape}")
    s, p = attrs.get("stride", 1), attrs.get("padding", 0)
    ho = conv_out_size(x.shape[1], kh, s, p)
    wo = conv_out_size(x.shape[2], kw, s, p)
    if ho < 1 or wo < 1:
        raise GraphError("conv2d output would be empty")
    return (c_out, ho, wo), True


def _im2col(x, kh, kw, s, p):
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (n, ho, wo)


def _conv_fwd(ins, attrs):
    x, w, b = ins
    c_out, c_in, kh, kw = w.shape
    s, p = attrs.get("stride", 1), attrs.get("padding", 0)
    if kh == 1 and kw == 1 and p == 0:
        xs = x[:, :, ::s, ::s]
        n, _, ho, wo = xs.shape
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c_in)
    else:
        cols, (n, ho, wo) = _im2col(x, kh, kw, s, p)
    out = cols @ w.reshape(c_out, -1).T + b
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_bwd(g, ins, out, cols, attrs):
    x, w, b = ins
    c_out, c_in, kh, kw = w.shape
    s, p = attrs.get("stride", 1), attrs.get("padding", 0)
    n, _, ho, wo = g.shape
    go = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (go.T @ cols).reshape(w.shape)
    db = go.sum(axis=0)
    dcols = go @ w.reshape(c_out, -1)
    if kh == 1 and kw == 1 and p == 0:
        dx = np.zeros_like(x)
        dx[:, :, ::s, ::s][:, :, :ho, :wo] = dcols.reshape(n, ho, wo, c_in).transpose(0, 3, 1, 2)
        return [dx, dw, db]
    dcols = dcols.reshape(n, ho, wo, c_in, kh, kw)
    hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
    dxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:hp - p, p:wp - p] if p else dxp
    return [dx, dw, db]


register("conv2d", _conv_infer, _conv_fwd, _conv_bwd)


# --- max pooling ----------------------------------------------------------

def _pool_infer(nodes, attrs):
    c, h, w = nodes[0].shape
    if h % 2 or w % 2:
        raise GraphError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    return (c, h // 2, w // 2), nodes[0].batched


def _pool_fwd(ins, attrs):
    x = ins[0]
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GraphError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum: row-major tie-break inside the window
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_bwd(g, ins, out, arg, attrs):
    x = ins[0]
    n, c, h, w = x.shape
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    dx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return [dx]


register("max_pool2d", _pool_infer, _pool_fwd, _pool_bwd)


# --- bilinear upsampling --------------------------------------------------

UPSAMPLE_FACTORS = (2, 4, 8)


def interp_matrix(size: int, factor: int) -> np.ndarray:
    """Row i holds the weights of output pixel i (half-pixel centres, edge clamp)."""
    out = size * factor
    m = np.zeros((out, size))
    for i in range(out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def _up_infer(nodes, attrs):
    f = attrs["factor"]
    if f not in UPSAMPLE_FACTORS:
        raise GraphError(f"unsupported upsample factor {f}; expected one of {UPSAMPLE_FACTORS}")
    c, h, w = nodes[0].shape
    return (c, h * f, w * f), nodes[0].batched


def _up_fwd(ins, attrs):
    x = ins[0]
    f = attrs["factor"]
    a = interp_matrix(x.shape[-2], f).astype(x.dtype)
    b = interp_matrix(x.shape[-1], f).astype(x.dtype)
    return np.matmul(np.matmul(a, x), b.T), (a, b)


def _up_bwd(g, ins, out, ab, attrs):
    a, b = ab
    return [np.matmul(np.matmul(a.T, g), b)]


register("upsample_bilinear", _up_infer, _up_fwd, _up_bwd)


# --- softmax over channels ------------------------------------------------

def _softmax_infer(nodes, attrs):
    if nodes[0].shape[0] < 2:
        raise GraphError("softmax over channels needs C >= 2")
    return nodes[0].shape, nodes[0].batched


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_fwd(ins, attrs):
    x = ins[0]
    return _softmax(x, x.ndim - 3), None


def _softmax_bwd(g, ins, y, ctx, attrs):
    ax = y.ndim - 3
    return [y * (g - (g * y).sum(axis=ax, keepdims=True))]


def _log_softmax_fwd(ins, attrs):
    x = ins[0]
    ax = x.ndim - 3
    z = x - x.max(axis=ax, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=ax, keepdims=True)), None


def _log_softmax_bwd(g, ins, y, ctx, attrs):
    ax = y.ndim - 3
    return [g - np.exp(y) * g.sum(axis=ax, keepdims=True)]


register("softmax_channels", _softmax_infer, _softmax_fwd, _softmax_bwd)
register("log_softmax_channels", _softmax_infer, _log_softmax_fwd, _log_softmax_bwd)


def _zeros_infer(nodes, attrs):
    ref = nodes[0]
    return (attrs["channels"],) + ref.shape[1:], ref.batched


def _zeros_fwd(ins, attrs):
    ref = ins[0]
    shape = ref.shape[:-3] + (attrs["channels"],) + ref.shape[-2:]
    return np.zeros(shape, dtype=ref.dtype), None


register("zeros_like_spatial", _zeros_infer, _zeros_fwd, lambda g, x, y, c, a: [None])


# --- graph-building helpers ----------------------------------------------

@dataclass(frozen=True)
class Conv2dParams:
    """Parameter names and geometry of one convolution."""
    name: str
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.k % 2 == 0:
            raise ValueError(f"{self.name}: kernel size must be odd, got {self.k}")
        if self.stride < 1:
            raise ValueError(f"{self.name}: stride must be positive")

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2 if self.padding is None else self.padding

    @property
    def kernel_shape(self):
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def param_count(self) -> int:
        return self.k * self.k * self.c_in * self.c_out + self.c_out


def conv2d(g: Graph, x: int, spec: Conv2dParams) -> int:
    w = g.param(f"{spec.name}/w", spec.kernel_shape)
    b = g.param(f"{spec.name}/b", (spec.c_out,))
    return g.apply("conv2d", x, w, b, stride=spec.stride, padding=spec.pad)


def relu(g: Graph, x: int) -> int:
    return g.apply("relu", x)


def max_pool2d(g: Graph, x: int) -> int:
    return g.apply("max_pool2d", x)


def bilinear_upsample(g: Graph, x: int, factor: int) -> int:
    return g.apply("upsample_bilinear", x, factor=factor)


def concat_channels(g: Graph, a: int, b: int) -> int:
    return g.apply("concat_channels", a, b)


def softmax_channels(g: Graph, x: int) -> int:
    return g.apply("softmax_channels", x)


@dataclass(frozen=True)
class ConvLstmState:
    hidden: int
    cell: int


def conv_lstm_cell(name: str, c_in: int, hidden: int) -> Conv2dParams:
    """One 3x3 convolution producing the four gates (i, f, o, g) over [input ‖ hidden]."""
    return Conv2dParams(name, c_in + hidden, 4 * hidden, k=3)


def conv_lstm_zero_state(g: Graph, like: int, hidden: int) -> ConvLstmState:
    z = g.apply("zeros_like_spatial", like, channels=hidden)
    return ConvLstmState(z, z)


def conv_lstm_step(g: Graph, x: int, state: ConvLstmState, cell: Conv2dParams):
    hidden = cell.c_out // 4
    if g.shape_of(state.hidden)[0] != hidden or g.shape_of(state.cell) != g.shape_of(state.hidden):
        raise GraphError(f"{cell.name}: state shape does not match {hidden} hidden channels")
    if g.shape_of(x)[0] + hidden != cell.c_in:
        raise GraphError(f"{cell.name}: input has {g.shape_of(x)[0]} channels, "
                         f"cell expects {cell.c_in - hidden}")
    z = conv2d(g, concat_channels(g, x, state.hidden), cell)
    gate = lambda k: g.apply("slice_channels", z, start=k * hidden, stop=(k + 1) * hidden)
    i = g.apply("sigmoid", gate(0))
    f = g.apply("sigmoid", gate(1))
    o = g.apply("sigmoid", gate(2))
    cand = g.apply("tanh", gate(3))
    c_new = g.apply("add", g.apply("mul", f, state.cell), g.apply("mul", i, cand))
    h_new = g.apply("mul", o, g.apply("tanh", c_new))
    return h_new, ConvLstmState(h_new, c_new)
