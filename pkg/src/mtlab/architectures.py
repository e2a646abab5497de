"""Shared-encoder / multi-decoder model family and parameter accounting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from .graph import Graph, GraphError
from .layers import Conv2dParams
from .losses import LossConfig, ScalarizationStrategy, scalarize

SEGMENTATION = "segmentation"
DETECTION = "detection"
DEPTH = "depth"
MOTION = "motion"
DECODER_KINDS = (SEGMENTATION, DETECTION, DEPTH, MOTION)

FUSION_NONE = "none"
FUSION_CONCAT = "concat"
FUSION_CONVLSTM = "convlstm"


class SpecError(ValueError):
    """Invalid architecture specification; the message names the field."""


@dataclass(frozen=True)
class EncoderSpec:
    base_width: int = 16
    input_channels: int = 3
    input_size: int = 64

    def __post_init__(self):
        if self.base_width < 1:
            raise SpecError("base_width must be positive")
        if self.input_size % 32 or self.input_size < 32:
            raise SpecError(f"input_size must be a positive multiple of 32, got {self.input_size}")


@dataclass(frozen=True)
class DecoderSpec:
    kind: str
    name: str
    num_classes: int | None = None
    grid: int | None = None
    fused: bool = False  # consume fused two-frame taps (always true for motion)

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise SpecError(f"decoder '{self.name}': unknown kind '{self.kind}'")
        if self.kind == SEGMENTATION and (self.num_classes or 0) < 2:
            raise SpecError(f"decoder '{self.name}': num_classes must be >= 2 for segmentation")
        if self.kind == DETECTION and (self.num_classes or 0) < 1:
            raise SpecError(f"decoder '{self.name}': num_classes must be >= 1 for detection")

    @property
    def uses_fusion(self) -> bool:
        return self.kind == MOTION or self.fused


@dataclass(frozen=True)
class StreamSpec:
    num_streams: int = 1
    fusion: str = FUSION_NONE
    share_encoder: bool = True

    def __post_init__(self):
        if self.num_streams not in (1, 2):
            raise SpecError("num_streams must be 1 or 2")
        if self.fusion not in (FUSION_NONE, FUSION_CONCAT, FUSION_CONVLSTM):
            raise SpecError(f"unknown fusion '{self.fusion}'")
        if self.num_streams == 1 and self.fusion != FUSION_NONE:
            raise SpecError("fusion requires num_streams == 2")
        if self.num_streams == 2 and self.fusion == FUSION_NONE:
            raise SpecError("two streams need a fusion (concat or convlstm)")
        if self.num_streams == 2 and not self.share_encoder:
            raise SpecError("share_encoder must be true for two streams")


@dataclass(frozen=True)
class ArchitectureSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    streams: StreamSpec = field(default_factory=StreamSpec)
    decoders: tuple[DecoderSpec, ...] = ()
    auxiliary: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "decoders", tuple(self.decoders))
        object.__setattr__(self, "auxiliary", frozenset(self.auxiliary))
        names = [d.name for d in self.decoders]
        if len(set(names)) != len(names):
            raise SpecError("decoders: names must be unique")
        if not self.auxiliary <= set(names):
            raise SpecError(f"auxiliary: unknown decoders {sorted(self.auxiliary - set(names))}")
        if not [n for n in names if n not in self.auxiliary]:
            raise SpecError("decoders: at least one non-auxiliary decoder required")
        grid = self.encoder.input_size // 8
        for d in self.decoders:
            if d.kind == DETECTION and d.grid not in (None, grid):
                raise SpecError(f"decoder '{d.name}': grid must equal input_size/8 = {grid}")
            if d.uses_fusion and self.streams.num_streams != 2:
                raise SpecError(f"decoder '{d.name}': {d.kind} decoder requires a two-stream model")

    def decoder(self, name: str) -> DecoderSpec:
        for d in self.decoders:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def tasks(self) -> list[str]:
        return [d.name for d in self.decoders]

    def to_json(self) -> dict:
        return {
            "encoder": asdict(self.encoder),
            "streams": asdict(self.streams),
            "decoders": [{k: v for k, v in asdict(d).items() if v is not None} for d in self.decoders],
            "auxiliary": sorted(self.auxiliary),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(encoder=EncoderSpec(**d.get("encoder", {})),
                       streams=StreamSpec(**d.get("streams", {})),
                       decoders=tuple(DecoderSpec(**x) for x in d["decoders"]),
                       auxiliary=frozenset(d.get("auxiliary", ())))
        except TypeError as exc:
            raise SpecError(f"architecture JSON: {exc}") from None

    def fingerprint(self) -> dict:
        return self.to_json()


# --- encoder --------------------------------------------------------------

def encoder_layers(spec: EncoderSpec, prefix="encoder") -> list[Conv2dParams]:
    """The conv layer list, projections included (named ``.../proj``)."""
    w = spec.base_width
    plan = [(w, 2 * w), (2 * w, 4 * w), (4 * w, 8 * w), (8 * w, 8 * w)]
    out = [Conv2dParams(f"{prefix}/stem", spec.input_channels, w, 3, 2)]
    for i, (cin, cout) in enumerate(plan, 1):
        out.append(Conv2dParams(f"{prefix}/block{i}/conv1", cin, cout, 3, 2))
        out.append(Conv2dParams(f"{prefix}/block{i}/conv2", cout, cout, 3, 1))
        out.append(Conv2dParams(f"{prefix}/block{i}/proj", cin, cout, 1, 2))
    out.append(Conv2dParams(f"{prefix}/final", 8 * w, 8 * w, 1, 1))
    return out


def tap_channels(spec: EncoderSpec) -> dict[int, int]:
    w = spec.base_width
    return {8: 4 * w, 16: 8 * w, 32: 8 * w}


@dataclass
class _Builder:
    g: Graph
    convs: list = field(default_factory=list)  # (component, Conv2dParams, out_h, out_w)

    def conv(self, x, spec: Conv2dParams, component: str) -> int:
        y = L.conv2d(self.g, x, spec)
        _, h, w = self.g.shape_of(y)
        self.convs.append((component, spec, h, w))
        return y


def build_encoder(b: _Builder, x: int, spec: EncoderSpec, prefix="encoder") -> dict[int, int]:
    """Emit the residual encoder; returns tap node ids keyed by stride."""
    g = b.g
    if g.shape_of(x)[1] % 32:
        raise GraphError("encoder input size must be divisible by 32")
    layers = {c.name.split("/", 1)[1]: c for c in encoder_layers(spec, prefix)}
    h = L.relu(g, b.conv(x, layers["stem"], "encoder"))
    taps = {}
    for i in range(1, 5):
        c1, c2, pj = (layers[f"block{i}/{n}"] for n in ("conv1", "conv2", "proj"))
        y = L.relu(g, b.conv(h, c1, "encoder"))
        y = b.conv(y, c2, "encoder")
        skip = b.conv(h, pj, "encoder")
        h = L.relu(g, g.apply("add", y, skip))
        if i == 2:
            taps[8] = h
        elif i == 3:
            taps[16] = h
    taps[32] = L.relu(g, b.conv(h, layers["final"], "encoder"))
    return taps


# --- decoders -------------------------------------------------------------

def fcn8_layers(prefix: str, channels: dict[int, int], c_out: int) -> list[Conv2dParams]:
    return [Conv2dParams(f"{prefix}/score{s}", channels[s], c_out, 1) for s in (32, 16, 8)]


def build_fcn8(b: _Builder, taps: dict[int, int], channels, c_out: int, prefix: str, component: str) -> int:
    for s in (8, 16, 32):
        if s not in taps:
            raise GraphError(f"{component}: missing stride-{s} tap")
    g = b.g
    s32, s16, s8 = fcn8_layers(prefix, channels, c_out)
    y = L.bilinear_upsample(g, b.conv(taps[32], s32, component), 2)
    y = L.bilinear_upsample(g, g.apply("add", y, b.conv(taps[16], s16, component)), 2)
    y = g.apply("add", y, b.conv(taps[8], s8, component))
    return L.bilinear_upsample(g, y, 8)


def det_head_layers(prefix: str, c_tap: int, base_width: int, num_classes: int) -> list[Conv2dParams]:
    return [Conv2dParams(f"{prefix}/conv", c_tap, 2 * base_width, 3),
            Conv2dParams(f"{prefix}/pred", 2 * base_width, 5 + num_classes, 1)]


def build_det_decoder(b: _Builder, taps, c_tap: int, base_width: int, num_classes: int, grid: int,
                      prefix: str, component: str) -> int:
    g = b.g
    if 8 not in taps:
        raise GraphError(f"{component}: missing stride-8 tap")
    if g.shape_of(taps[8])[1] != grid:
        raise GraphError(f"{component}: grid {grid} != stride-8 tap size {g.shape_of(taps[8])[1]}")
    conv, pred = det_head_layers(prefix, c_tap, base_width, num_classes)
    raw = b.conv(L.relu(g, b.conv(taps[8], conv, component)), pred, component)
    sl = lambda lo, hi: g.apply("slice_channels", raw, start=lo, stop=hi)
    head = g.apply("sigmoid", sl(0, 3))
    size = sl(3, 5)
    cls = sl(5, 5 + num_classes)
    cls = g.apply("softmax_channels", cls) if num_classes >= 2 else g.apply("sigmoid", cls)
    return L.concat_channels(g, L.concat_channels(g, head, size), cls)


# --- model ----------------------------------------------------------------

def decoder_out_channels(d: DecoderSpec) -> int:
    return {SEGMENTATION: d.num_classes, DEPTH: 1, MOTION: 2}.get(d.kind, 5 + (d.num_classes or 0))


@dataclass
class Model:
    spec: ArchitectureSpec
    graph: Graph
    convs: list
    outputs: dict[str, int]
    training_nodes: dict[str, int] = field(default_factory=dict)
    strategy: ScalarizationStrategy | None = None

    @property
    def param_shapes(self) -> dict[str, tuple]:
        return {n: self.graph.nodes[i].shape for n, i in self.graph.params.items()}

    def component_of(self, param: str) -> str:
        head, rest = param.split("/", 1)
        return rest.split("/", 1)[0] if head == "dec" else head

    @property
    def inference_outputs(self) -> list[str]:
        return [d.name for d in self.spec.decoders if d.name not in self.spec.auxiliary]

    def init_params(self, seed: int = 0, zero: bool = False, dtype=np.float32) -> dict[str, np.ndarray]:
        """He (fan-in) normal kernels, zero biases; ordered by name for determinism."""
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in sorted(self.param_shapes.items()):
            if zero or name.endswith("/b"):
                out[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return out

    def input_names(self) -> list[str]:
        return ["frame_curr"] + (["frame_prev"] if self.spec.streams.num_streams == 2 else [])

    def target_shape(self, d: DecoderSpec):
        s = self.spec.encoder.input_size
        if d.kind == DETECTION:
            return (5 + d.num_classes, s // 8, s // 8)
        if d.kind == DEPTH:
            return (1, s, s)
        return (s, s)


def _build_forward(spec: ArchitectureSpec, g: Graph, unshare_prev=False):
    enc = spec.encoder
    b = _Builder(g)
    size = enc.input_size
    x = g.input("frame_curr", (enc.input_channels, size, size))
    taps = build_encoder(b, x, enc)
    ch = tap_channels(enc)
    fused, fused_ch = None, None
    if spec.streams.num_streams == 2:
        xp = g.input("frame_prev", (enc.input_channels, size, size))
        taps_prev = build_encoder(b, xp, enc, prefix="encoder_prev" if unshare_prev else "encoder")
        if spec.streams.fusion == FUSION_CONCAT:
            fused = {s: L.concat_channels(g, taps_prev[s], taps[s]) for s in taps}
            fused_ch = {s: 2 * c for s, c in ch.items()}
        else:
            cell = L.conv_lstm_cell("fusion/lstm", ch[32], ch[32])
            state = L.conv_lstm_zero_state(g, taps[32], ch[32])
            _, state = _lstm(b, taps_prev[32], state, cell)
            h, state = _lstm(b, taps[32], state, cell)
            fused = {8: taps[8], 16: taps[16], 32: h}
            fused_ch = dict(ch)
    outputs = {}
    for d in spec.decoders:
        t, c = (fused, fused_ch) if d.uses_fusion else (taps, ch)
        prefix = f"dec/{d.name}"
        if d.kind == DETECTION:
            grid = d.grid or size // 8
            out = build_det_decoder(b, t, c[8], enc.base_width, d.num_classes, grid, prefix, d.name)
        else:
            out = build_fcn8(b, t, c, decoder_out_channels(d), prefix, d.name)
        outputs[d.name] = g.output(d.name, out)
    return b, outputs


def _lstm(b: _Builder, x, state, cell):
    h, new = L.conv_lstm_step(b.g, x, state, cell)
    _, hh, ww = b.g.shape_of(h)
    b.convs.append(("fusion", cell, hh, ww))
    return h, new


def assemble_model(spec: ArchitectureSpec, strategy: ScalarizationStrategy | None = None,
                   loss_config: LossConfig = LossConfig(), _unshare_prev=False) -> Model:
    """Build the forward graph, plus per-task losses and the total when ``strategy`` is given."""
    g = Graph()
    b, outputs = _build_forward(spec, g, _unshare_prev)
    model = Model(spec, g, b.convs, outputs, strategy=strategy)
    if strategy is not None:
        _attach_losses(model, strategy, loss_config)
    return model


def _attach_losses(model: Model, strategy: ScalarizationStrategy, cfg: LossConfig):
    g = model.graph
    task_nodes = []
    for d in model.spec.decoders:
        pred = model.outputs[d.name]
        tgt = g.input(f"target/{d.name}", model.target_shape(d),
                      integer=d.kind in (SEGMENTATION, MOTION))
        mask = g.input(f"mask/{d.name}", ())
        if d.kind in (SEGMENTATION, MOTION):
            per = g.apply("seg_ce", pred, tgt, ignore_id=None)
        elif d.kind == DETECTION:
            per = g.apply("det_sq_error", pred, tgt, lambda_coord=cfg.lambda_coord,
                          lambda_noobj=cfg.lambda_noobj)
        else:
            per = g.apply("huber", pred, tgt, delta=cfg.huber_delta)
        node = g.output(f"loss/{d.name}", g.apply("masked_mean", per, mask))
        task_nodes.append(node)
    present = g.input("present", (len(task_nodes),), batched=False)
    total = scalarize(g, model.spec.tasks, task_nodes, present, strategy)
    model.training_nodes = {"total": g.output("loss/total", total)}


# --- accounting -----------------------------------------------------------

@dataclass(frozen=True)
class ParamBudget:
    per_component: dict[str, int]
    total: int
    shared: int
    macs: dict[str, int]

    def __post_init__(self):
        if self.total != sum(self.per_component.values()):
            raise ValueError("total must equal the sum of per-component counts")
        if self.shared > self.total:
            raise ValueError("shared cannot exceed total")

    def to_json(self) -> dict:
        return {"per_component": dict(self.per_component), "total": self.total,
                "shared": self.shared, "macs": dict(self.macs)}

    @classmethod
    def from_json(cls, d) -> "ParamBudget":
        return cls(dict(d["per_component"]), int(d["total"]), int(d["shared"]), dict(d["macs"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "params", "macs"])
        for k in self.per_component:
            w.writerow([k, self.per_component[k], self.macs.get(k, 0)])
        w.writerow(["total", self.total, sum(self.macs.values())])
        w.writerow(["shared", self.shared, ""])
        return buf.getvalue()


def count_params(model: Model) -> ParamBudget:
    per: dict[str, int] = {}
    for name, shape in model.param_shapes.items():
        comp = model.component_of(name)
        per[comp] = per.get(comp, 0) + int(np.prod(shape))
    order = ["encoder", "fusion"] + model.spec.tasks
    per = {k: per[k] for k in order if k in per}
    macs: dict[str, int] = {k: 0 for k in per}
    for comp, c, h, w in model.convs:
        macs[comp] = macs.get(comp, 0) + h * w * c.c_out * c.c_in * c.k * c.k
    n_dec = len(model.spec.decoders)
    n_fused = sum(d.uses_fusion for d in model.spec.decoders)
    shared = (per.get("encoder", 0) if n_dec > 1 else 0) + (per.get("fusion", 0) if n_fused > 1 else 0)
    return ParamBudget(per, sum(per.values()), shared, macs)


@dataclass(frozen=True)
class SharingReport:
    shared_fraction: float
    savings: int
    reclaim_per_task: float

    def to_json(self):
        return asdict(self)


def reclaim_per_task(shared_fraction: float, n_tasks: int) -> float:
    """Fraction of one task's budget freed by sharing: s(n-1)/n."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    return shared_fraction * (n_tasks - 1) / n_tasks


def sharing_analysis(stl_budgets: Sequence[ParamBudget], mtl_budget: ParamBudget) -> SharingReport:
    if not stl_budgets or mtl_budget is None:
        raise ValueError("sharing_analysis needs at least one STL budget and an MTL budget")
    stl_total = sum(b.total for b in stl_budgets)
    n = len(stl_budgets)
    s = mtl_budget.shared / stl_total if n > 1 else 0.0
    return SharingReport(s, stl_total - mtl_budget.total, reclaim_per_task(s, n))


# --- canned variants --------------------------------------------------------

def seg_decoder(n_classes=5, name=SEGMENTATION, fused=False):
    return DecoderSpec(SEGMENTATION, name, num_classes=n_classes, fused=fused)


def variant(name: str, width=16, size=64, seg_classes=5, det_classes=2) -> ArchitectureSpec:
    """Architectures behind the comparison-table rows."""
    enc = EncoderSpec(width, 3, size)
    one = StreamSpec()
    concat = StreamSpec(2, FUSION_CONCAT)
    lstm = StreamSpec(2, FUSION_CONVLSTM)
    seg = seg_decoder(seg_classes)
    det = DecoderSpec(DETECTION, DETECTION, num_classes=det_classes)
    depth = DecoderSpec(DEPTH, DEPTH)
    motion = DecoderSpec(MOTION, MOTION)
    table = {
        "stl_seg": (one, (seg,), ()),
        "stl_det": (one, (det,), ()),
        "stl_depth": (one, (depth,), ()),
        "stl_motion": (concat, (motion,), ()),
        "mtl": (one, (seg, det), ()),
        "auxnet": (one, (seg, depth), (DEPTH,)),
        "msnet2": (concat, (seg_decoder(seg_classes, fused=True),), ()),
        "rnnet2": (lstm, (seg_decoder(seg_classes, fused=True),), ()),
        "three_task": (concat, (seg, depth, motion), ()),
        "three_task_lstm": (lstm, (seg, depth, motion), ()),
    }
    if name not in table:
        raise SpecError(f"unknown variant '{name}'")
    streams, decs, aux = table[name]
    return ArchitectureSpec(enc, streams, decs, frozenset(aux))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
