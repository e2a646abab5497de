"""Optimizers, the training loop, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import graph as G
from .architectures import DEPTH, MOTION, SEGMENTATION, Model
from .losses import GEOMETRIC_MEAN, LossConfig, ScalarizationStrategy
from .metrics import (MetricsReport, confusion_matrix, decode_detections, detection_ap,
                      encode_boxes, iou_from_confusion)
from .synthdata import Dataset, Sample
from .tensor import NonFiniteError, Precision, read_tns, write_tns

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


# --- optimizers -------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.0005
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.kind}'")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping, state: OptimizerState, cfg: OptimizerConfig):
    """Bias-corrected Adam update, in place; returns ``(params, state)``."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return params, state


def sgd_step(params: dict, grads: Mapping, state: OptimizerState, cfg: OptimizerConfig):
    state.step += 1
    for name, g in grads.items():
        vel = state.m.setdefault(name, np.zeros_like(params[name]))
        vel *= cfg.momentum
        vel += g
        params[name] -= (cfg.lr * vel).astype(params[name].dtype, copy=False)
    return params, state


def optimizer_step(params, grads, state, cfg: OptimizerConfig):
    return (adam_step if cfg.kind == "adam" else sgd_step)(params, grads, state, cfg)


# --- batching ---------------------------------------------------------------

def make_feeds(model: Model, samples: Sequence[Sample], with_targets=True) -> dict[str, np.ndarray]:
    spec = model.spec
    feeds = {"frame_curr": np.stack([s.frame_curr for s in samples])}
    if spec.streams.num_streams == 2:
        feeds["frame_prev"] = np.stack([s.frame_prev for s in samples])
    if not with_targets:
        return feeds
    present = []
    for d in spec.decoders:
        mask = np.array([d.kind in s.task_labels_present for s in samples], dtype=np.float64)
        if d.kind == SEGMENTATION:
            tgt = np.stack([s.seg_mask for s in samples])
        elif d.kind == MOTION:
            tgt = np.stack([s.motion_mask for s in samples])
        elif d.kind == DEPTH:
            tgt = np.stack([s.depth[None] for s in samples])
        else:
            grid = spec.encoder.input_size // 8
            tgt = np.stack([encode_boxes(s.boxes, d.num_classes, grid) for s in samples])
        feeds[f"target/{d.name}"] = tgt
        feeds[f"mask/{d.name}"] = mask
        present.append(1.0 if mask.any() else 0.0)
    feeds["present"] = np.array(present)
    return feeds


def shuffled_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    strategy: ScalarizationStrategy = field(default_factory=ScalarizationStrategy)
    eval_every: int = 0
    precision: Precision = Precision.TRAIN32
    grad_clip: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    lr_schedule: str = "constant"  # or "cosine": per-epoch decay to zero over ``epochs``
    hflip: bool = False  # mirror each training sample with probability 1/2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule '{self.lr_schedule}'")

    def lr_factor(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
                "strategy": self.strategy.to_json(), "eval_every": self.eval_every,
                "precision": self.precision.value, "grad_clip": self.grad_clip,
                "loss": asdict(self.loss), "lr_schedule": self.lr_schedule, "hflip": self.hflip}

    @classmethod
    def from_json(cls, d) -> "TrainConfig":
        return cls(epochs=int(d.get("epochs", 30)), batch_size=int(d.get("batch_size", 8)),
                   seed=int(d.get("seed", 0)),
                   strategy=ScalarizationStrategy.from_json(d.get("strategy", {})),
                   eval_every=int(d.get("eval_every", 0)),
                   precision=Precision(d.get("precision", "train32")),
                   grad_clip=d.get("grad_clip"), loss=LossConfig(**d.get("loss", {})),
                   lr_schedule=d.get("lr_schedule", "constant"), hflip=bool(d.get("hflip", False)))


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    opt_state: OptimizerState
    log: list[dict]
    epochs_done: int


def _grad_norms(model: Model, grads) -> dict[str, float]:
    sq: dict[str, float] = {}
    for name, g in grads.items():
        comp = model.component_of(name)
        sq[comp] = sq.get(comp, 0.0) + float(np.sum(np.square(g, dtype=np.float64)))
    return {k: math.sqrt(v) for k, v in sq.items()}


def train(model: Model, dataset: Dataset, config: TrainConfig, optimizer: OptimizerConfig = OptimizerConfig(),
          params: dict | None = None, opt_state: OptimizerState | None = None, start_epoch: int = 0,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs (resuming at ``start_epoch``).

    Each epoch visits the training split in a seeded shuffled order. The
    returned log has one record per epoch.
    """
    if model.strategy is None or "total" not in model.training_nodes:
        raise ValueError("model was assembled without a scalarization strategy")
    dtype = config.precision.dtype
    if params is None:
        params = model.init_params(config.seed, dtype=dtype)
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    opt_state = opt_state or OptimizerState()
    g = model.graph
    train_samples = dataset.split("train")
    tasks = model.spec.tasks
    loss_nodes = [g.outputs[f"loss/{t}"] for t in tasks]
    total_node = model.training_nodes["total"]
    eps = model.strategy.epsilon
    records = []
    for epoch in range(start_epoch, config.epochs):
        step_cfg = replace(optimizer, lr=optimizer.lr * config.lr_factor(epoch))
        sums = {t: 0.0 for t in tasks}
        counts = {t: 0 for t in tasks}
        total_sum, n_batches, clamps, skipped = 0.0, 0, 0, 0
        norm_sum: dict[str, float] = {}
        for b, idx in enumerate(shuffled_batches(len(train_samples), config.batch_size, config.seed, epoch)):
            batch = [train_samples[i] for i in idx]
            if config.hflip:
                flip = np.random.default_rng([config.seed, epoch, b, 0xF11]).random(len(batch)) < 0.5
                batch = [s.flipped() if f else s for s, f in zip(batch, flip)]
            feeds = make_feeds(model, batch)
            if not feeds["present"].any():
                log.warning("epoch %d batch %d: no task labels present; batch skipped", epoch, b)
                skipped += 1
                continue
            try:
                trace = G.forward(g, feeds, params, [total_node] + loss_nodes, config.precision)
                grads = G.backward(g, None, total_node, params, config.precision, trace=trace)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from None
            if config.grad_clip:
                norm = math.sqrt(sum(float(np.sum(np.square(x, dtype=np.float64))) for x in grads.values()))
                if norm > config.grad_clip:
                    grads = {k: v * (config.grad_clip / norm) for k, v in grads.items()}
            optimizer_step(params, grads, opt_state, step_cfg)
            for t, nid in zip(tasks, loss_nodes):
                if feeds[f"mask/{t}"].any():
                    sums[t] += float(trace.values[nid])
                    counts[t] += 1
                    if model.strategy.kind == GEOMETRIC_MEAN and float(trace.values[nid]) <= eps:
                        clamps += 1
            total_sum += float(trace.values[total_node])
            n_batches += 1
            for k, v in _grad_norms(model, grads).items():
                norm_sum[k] = norm_sum.get(k, 0.0) + v
        rec = {
            "epoch": epoch,
            "losses": {t: (sums[t] / counts[t] if counts[t] else None) for t in tasks},
            "total": total_sum / max(n_batches, 1),
            "grad_norm": {k: v / max(n_batches, 1) for k, v in norm_sum.items()},
            "eps_clamps": clamps,
            "skipped_batches": skipped,
        }
        if not all(math.isfinite(v) for v in [rec["total"]] + [x for x in rec["losses"].values() if x is not None]):
            raise TrainingDiverged(f"epoch {epoch}: non-finite epoch loss")
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            rec["metrics"] = evaluate(model, params, dataset.split("val"), dataset.spec.seg_classes).to_json()
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
    return TrainResult(params, opt_state, records, config.epochs)


# --- evaluation -------------------------------------------------------------

@dataclass
class Predictions:
    seg: dict[str, np.ndarray] = field(default_factory=dict)  # name -> [N,H,W] ids
    det: dict[str, np.ndarray] = field(default_factory=dict)  # name -> [N,5+C,S,S]
    depth: dict[str, np.ndarray] = field(default_factory=dict)  # name -> [N,H,W]
    motion: dict[str, np.ndarray] = field(default_factory=dict)  # name -> [N,H,W] ids


def predict(model: Model, params, samples: Sequence[Sample], batch_size=32,
            precision=Precision.TRAIN32) -> Predictions:
    """Inference over non-auxiliary decoders, in sample order."""
    names = model.inference_outputs
    chunks: dict[str, list] = {n: [] for n in names}
    for i in range(0, len(samples), batch_size):
        feeds = make_feeds(model, samples[i:i + batch_size], with_targets=False)
        out = G.eval_graph(model.graph, feeds, params, outputs=names, precision=precision)
        for n in names:
            chunks[n].append(out[n])
    pred = Predictions()
    for n in names:
        kind = model.spec.decoder(n).kind
        arr = np.concatenate(chunks[n]) if chunks[n] else np.zeros((0,))
        if kind == SEGMENTATION:
            pred.seg[n] = arr.argmax(axis=1)
        elif kind == MOTION:
            pred.motion[n] = arr.argmax(axis=1)
        elif kind == DEPTH:
            pred.depth[n] = arr[:, 0]
        else:
            pred.det[n] = arr
    return pred


def score_predictions(pred: Predictions, samples: Sequence[Sample], num_seg_classes: int,
                      conf_threshold=0.25, nms_iou=0.45, iou_threshold=0.5) -> MetricsReport:
    rep = MetricsReport()
    for name, ids in pred.seg.items():
        cm = np.zeros((num_seg_classes, num_seg_classes), dtype=np.int64)
        for p, s in zip(ids, samples):
            if "segmentation" in s.task_labels_present:
                cm += confusion_matrix(p, s.seg_mask, num_seg_classes)
        rep.per_class_iou, rep.mean_iou = iou_from_confusion(cm)
    for name, grids in pred.det.items():
        boxes_p, boxes_g = [], []
        for grid, s in zip(grids, samples):
            if "detection" in s.task_labels_present:
                boxes_p.append(decode_detections(grid, conf_threshold, nms_iou))
                boxes_g.append(s.boxes)
        rep.per_class_ap, rep.mean_ap = detection_ap(boxes_p, boxes_g, iou_threshold)
    for name, maps in pred.depth.items():
        hits = total = 0
        for p, s in zip(maps, samples):
            pp = np.maximum(p.astype(np.float64), 1e-3)
            gg = np.maximum(s.depth.astype(np.float64), 1e-3)
            hits += int((np.maximum(pp / gg, gg / pp) < 1.25).sum())
            total += pp.size
        rep.depth_accuracy = hits / total if total else None
    for name, ids in pred.motion.items():
        cm = np.zeros((2, 2), dtype=np.int64)
        for p, s in zip(ids, samples):
            cm += confusion_matrix(p, s.motion_mask, 2)
        _, rep.motion_iou = iou_from_confusion(cm)
    return rep


def evaluate(model: Model, params, samples: Sequence[Sample], seg_classes: Sequence[str] | int = 5,
             conf_threshold=0.25, nms_iou=0.45, with_losses=True) -> MetricsReport:
    n_seg = seg_classes if isinstance(seg_classes, int) else len(seg_classes)
    rep = score_predictions(predict(model, params, samples), samples, n_seg, conf_threshold, nms_iou)
    if with_losses and model.training_nodes and samples:
        rep.losses = split_losses(model, params, samples)
    return rep


def split_losses(model: Model, params, samples, batch_size=32) -> dict[str, float]:
    """Sample-weighted mean task losses over non-auxiliary decoders."""
    names = model.inference_outputs
    sums = {n: 0.0 for n in names}
    counts = {n: 0.0 for n in names}
    g = model.graph
    for i in range(0, len(samples), batch_size):
        feeds = make_feeds(model, samples[i:i + batch_size])
        tr = G.forward(g, feeds, params, [g.outputs[f"loss/{n}"] for n in names])
        for n in names:
            k = float(feeds[f"mask/{n}"].sum())
            sums[n] += float(tr.values[g.outputs[f"loss/{n}"]]) * k
            counts[n] += k
    return {n: (sums[n] / counts[n] if counts[n] else None) for n in names}


# --- checkpoints ------------------------------------------------------------

def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            for i, x in enumerate(v):
                out.update(_flatten(x, f"{key}[{i}]."))
        else:
            out[key] = v
    return out


def fingerprint_diff(a: dict, b: dict) -> list[str]:
    fa, fb = _flatten(a), _flatten(b)
    return sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))


def _fname(name: str) -> str:
    return name.replace("/", ".") + ".tns"


def save_checkpoint(model: Model, params, path, opt_state: OptimizerState | None = None,
                    epoch: int = 0, config: dict | None = None) -> Path:
    """Write ``index.json`` plus one TNS1 file per tensor; the directory appears atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    index = {"fingerprint": model.spec.fingerprint(), "epoch": epoch, "config": config or {},
             "params": {}, "optimizer": None}
    for name in sorted(params):
        write_tns(tmp / _fname(name), params[name])
        index["params"][name] = _fname(name)
    if opt_state is not None:
        opt = {"step": opt_state.step, "m": {}, "v": {}}
        for key in ("m", "v"):
            for name, arr in sorted(getattr(opt_state, key).items()):
                fn = f"opt.{key}.{_fname(name)}"
                write_tns(tmp / fn, arr)
                opt[key][name] = fn
        index["optimizer"] = opt
    (tmp / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_state: OptimizerState | None
    epoch: int
    fingerprint: dict
    config: dict


def load_checkpoint(path, model: Model | None = None) -> Checkpoint:
    path = Path(path)
    ipath = path / "index.json"
    try:
        index = json.loads(ipath.read_text())
    except (OSError, ValueError) as exc:
        raise ValueError(f"{ipath}: cannot read checkpoint index ({exc})") from None
    if model is not None:
        diff = fingerprint_diff(index["fingerprint"], model.spec.fingerprint())
        if diff:
            raise CheckpointMismatch("architecture fingerprint mismatch in fields: " + ", ".join(diff))
    params = {name: read_tns(path / fn) for name, fn in index["params"].items()}
    if model is not None:
        want = model.param_shapes
        if set(want) != set(params):
            raise CheckpointMismatch("parameter set differs from model")
        for k, arr in params.items():
            if arr.shape != want[k]:
                raise CheckpointMismatch(f"parameter '{k}' has shape {arr.shape}, model expects {want[k]}")
    opt = None
    if index.get("optimizer"):
        o = index["optimizer"]
        opt = OptimizerState(int(o["step"]),
                             {k: read_tns(path / fn) for k, fn in o["m"].items()},
                             {k: read_tns(path / fn) for k, fn in o["v"].items()})
    return Checkpoint(params, opt, int(index["epoch"]), index["fingerprint"], index.get("config", {}))


def checkpoint_io(model: Model, path, direction: str, params=None, **kw):
    """``save`` writes ``params`` (returns the path); ``load`` returns a :class:`Checkpoint`."""
    if direction == "save":
        return save_checkpoint(model, params, path, **kw)
    if direction == "load":
        return load_checkpoint(path, model)
    raise ValueError(f"direction must be 'save' or 'load', got {direction!r}")
