"""Per-task losses, partial-label masking and loss scalarization.

Every loss exists twice: as a graph op producing one value per sample
(``seg_ce``, ``det_sq_error``, ``huber``), and as a plain function returning
a :class:`TaskLoss` for direct use and testing. Both share the same kernels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import Graph, GraphError, register

log = logging.getLogger(__name__)

WEIGHTED_SUM = "weighted_sum"
GEOMETRIC_MEAN = "geometric_mean"


@dataclass(frozen=True)
class TaskLoss:
    task: str
    value: float
    sample_count: int

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"task loss '{self.task}' must be finite and >= 0, got {self.value}")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")


@dataclass(frozen=True)
class LossConfig:
    huber_delta: float = 1.0
    clamp_eps: float = 1e-8
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise ValueError(f"LossConfig.{k} must be positive, got {v}")


@dataclass(frozen=True)
class ScalarizationStrategy:
    """``weighted_sum`` with per-task weights, or ``geometric_mean`` with clamp epsilon."""
    kind: str = WEIGHTED_SUM
    weights: Mapping[str, float] = field(default_factory=dict)
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in (WEIGHTED_SUM, GEOMETRIC_MEAN):
            raise ValueError(f"unknown strategy '{self.kind}'")
        if self.kind == WEIGHTED_SUM and any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def weight(self, task: str) -> float:
        if task not in self.weights:
            raise KeyError(f"no weight configured for task '{task}'")
        return float(self.weights[task])

    def to_json(self) -> dict:
        d = {"strategy": self.kind}
        if self.kind == WEIGHTED_SUM:
            d["weights"] = dict(self.weights)
        else:
            d["epsilon"] = self.epsilon
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ScalarizationStrategy":
        return cls(kind=d.get("strategy", WEIGHTED_SUM), weights=dict(d.get("weights", {})),
                   epsilon=float(d.get("epsilon", 1e-8)))


# --- kernels --------------------------------------------------------------

def _seg_ce_kernel(logits, target, ignore_id):
    c = logits.shape[1]
    valid = np.ones(target.shape, dtype=bool) if ignore_id is None else target != ignore_id
    bad = valid & ((target < 0) | (target >= c))
    if bad.any():
        raise GraphError(f"target class id {int(target[bad][0])} out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    per = -(picked * valid).reshape(valid.shape[0], -1).sum(axis=1) / np.maximum(counts, 1)
    return per.astype(logits.dtype), (logp, t, valid, counts)


def _seg_ce_grad(g, ctx):
    logp, t, valid, counts = ctx
    d = np.exp(logp)
    np.put_along_axis(d, t[:, None], np.take_along_axis(d, t[:, None], axis=1) - 1.0, axis=1)
    scale = (g / np.maximum(counts, 1)).reshape(-1, 1, 1, 1)
    return d * valid[:, None] * scale


def _det_weights(target, lambda_coord, lambda_noobj):
    obj = target[:, 0:1]
    w = np.empty_like(target)
    w[:, 0:1] = obj + lambda_noobj * (1.0 - obj)
    w[:, 1:5] = lambda_coord * obj
    w[:, 5:] = obj
    return w


def _det_kernel(pred, target, lambda_coord, lambda_noobj):
    w = _det_weights(target, lambda_coord, lambda_noobj)
    diff = pred - target
    per = (w * diff * diff).reshape(pred.shape[0], -1).sum(axis=1)
    return per, (w, diff)


def _huber_kernel(pred, target, delta):
    e = pred - target
    a = np.abs(e)
    quad = a <= delta
    val = np.where(quad, 0.5 * e * e, delta * (a - 0.5 * delta))
    per = val.reshape(pred.shape[0], -1).mean(axis=1)
    return per, (e, quad)


# --- graph ops ------------------------------------------------------------

def _per_sample_infer(nodes, attrs):
    pred, target = nodes
    if not pred.batched:
        raise GraphError("loss prediction must be batched")
    return (), True


def _seg_ce_infer(nodes, attrs):
    logits, target = nodes
    if logits.shape[1:] != target.shape:
        raise GraphError(f"logits {logits.shape} vs target {target.shape}")
    return (), True


register("seg_ce", _seg_ce_infer,
         lambda x, a: _seg_ce_kernel(x[0], x[1], a.get("ignore_id")),
         lambda g, x, y, c, a: [_seg_ce_grad(g, c), None])


def _grid_infer(nodes, attrs):
    if nodes[0].shape != nodes[1].shape:
        raise GraphError(f"grid shape mismatch {nodes[0].shape} vs {nodes[1].shape}")
    return (), True


register("det_sq_error", _grid_infer,
         lambda x, a: _det_kernel(x[0], x[1], a["lambda_coord"], a["lambda_noobj"]),
         lambda g, x, y, c, a: [2.0 * c[0] * c[1] * g.reshape(-1, 1, 1, 1), None])


def _huber_bwd(g, x, y, ctx, a):
    e, quad = ctx
    n = e[0].size
    de = np.where(quad, e, a["delta"] * np.sign(e))
    return [de * (g.reshape((-1,) + (1,) * (e.ndim - 1)) / n), None]


register("huber", _grid_infer, lambda x, a: _huber_kernel(x[0], x[1], a["delta"]), _huber_bwd)


def _masked_mean_infer(nodes, attrs):
    if not (nodes[0].batched and nodes[0].shape == () and nodes[1].batched and nodes[1].shape == ()):
        raise GraphError("masked_mean expects per-sample values and a per-sample mask")
    return (), False


def _masked_mean_fwd(x, a):
    v, m = x
    total = m.sum()
    if total == 0:
        return np.zeros((), dtype=v.dtype), total
    return np.asarray((v * m).sum() / total, dtype=v.dtype), total


def _masked_mean_bwd(g, x, y, total, a):
    v, m = x
    if total == 0:
        return [np.zeros_like(v), None]
    return [g * m / total, None]


register("masked_mean", _masked_mean_infer, _masked_mean_fwd, _masked_mean_bwd)


def _combine_infer(nodes, attrs):
    *losses, present = nodes
    if any(n.batched or n.shape != () for n in losses):
        raise GraphError("combine expects unbatched scalar task losses")
    if present.batched or present.shape != (len(losses),):
        raise GraphError(f"presence vector must have shape ({len(losses)},)")
    return (), False


def _wsum_fwd(x, a):
    *ls, p = x
    w = np.asarray(a["weights"], dtype=p.dtype)
    vals = np.array([float(v) for v in ls], dtype=p.dtype)
    return np.asarray((w * p * vals).sum(), dtype=p.dtype), None


def _wsum_bwd(g, x, y, c, a):
    *ls, p = x
    return [g * a["weights"][i] * p[i] for i in range(len(ls))] + [None]


def geometric_mean_value(values, present, eps):
    """Return (total, clamped mask) for the log-space product of losses."""
    values = np.asarray(values, dtype=np.float64)
    present = np.asarray(present, dtype=np.float64)
    n = present.sum()
    if n == 0:
        return 0.0, np.zeros_like(values, dtype=bool)
    logs = np.log(np.maximum(values, eps))
    total = math.exp(float((present * logs).sum() / n))
    return total, values <= eps


def _gmean_fwd(x, a):
    *ls, p = x
    total, clamped = geometric_mean_value([float(v) for v in ls], p, a["eps"])
    return np.asarray(total, dtype=p.dtype), clamped


def _gmean_bwd(g, x, y, clamped, a):
    *ls, p = x
    n = float(p.sum())
    out = []
    for i, li in enumerate(ls):
        if n == 0 or p[i] == 0 or clamped[i]:
            out.append(np.zeros((), dtype=y.dtype))
        else:
            out.append(g * y / (n * li))
    return out + [None]


register("weighted_sum", _combine_infer, _wsum_fwd, _wsum_bwd)
register("geometric_mean", _combine_infer, _gmean_fwd, _gmean_bwd)


def scalarize(g: Graph, tasks: Sequence[str], task_nodes: Sequence[int], present: int,
              strategy: ScalarizationStrategy) -> int:
    if strategy.kind == WEIGHTED_SUM:
        weights = tuple(strategy.weight(t) for t in tasks)
        return g.apply("weighted_sum", *task_nodes, present, weights=weights)
    return g.apply("geometric_mean", *task_nodes, present, eps=strategy.epsilon)


# --- direct (non-graph) API -------------------------------------------------

def _batch(a, nd):
    a = np.asarray(a)
    return a[None] if a.ndim == nd else a


def seg_cross_entropy(logits, target, ignore_id=None, task="segmentation") -> TaskLoss:
    """Mean over non-ignored pixels of -log softmax(logits)[target]."""
    logits = _batch(np.asarray(logits, dtype=np.float64), 3)
    target = _batch(np.asarray(target, dtype=np.int64), 2)
    try:
        per, (_, _, valid, counts) = _seg_ce_kernel(logits, target, ignore_id)
    except GraphError as exc:
        raise ValueError(str(exc)) from None
    total = counts.sum()
    value = float((per * counts).sum() / total) if total else 0.0
    return TaskLoss(task, value, int(logits.shape[0]))


def det_loss(pred_grid, target_grid, config: LossConfig = LossConfig(), task="detection") -> TaskLoss:
    """Squared error over objectness, box terms and class scores, averaged over the batch."""
    pred = _batch(np.asarray(pred_grid, dtype=np.float64), 3)
    target = _batch(np.asarray(target_grid, dtype=np.float64), 3)
    if pred.shape != target.shape:
        raise ValueError(f"grid shape mismatch {pred.shape} vs {target.shape}")
    per, _ = _det_kernel(pred, target, config.lambda_coord, config.lambda_noobj)
    return TaskLoss(task, float(per.mean()), int(pred.shape[0]))


def huber_depth_loss(pred, target, delta=1.0, task="depth") -> TaskLoss:
    pred = _batch(np.asarray(pred, dtype=np.float64), 3)
    target = _batch(np.asarray(target, dtype=np.float64), 3)
    if pred.shape != target.shape:
        raise ValueError(f"depth shape mismatch {pred.shape} vs {target.shape}")
    per, _ = _huber_kernel(pred, target, delta)
    return TaskLoss(task, float(per.mean()), int(pred.shape[0]))


def _present(losses):
    return [l for l in losses if l.sample_count > 0]


def combine_weighted_sum(losses: Sequence[TaskLoss], weights: Mapping[str, float]) -> float:
    total = 0.0
    for l in _present(losses):
        if l.task not in weights:
            raise KeyError(f"no weight configured for task '{l.task}'")
        total += float(weights[l.task]) * l.value
    return total


def combine_geometric_mean(losses: Sequence[TaskLoss], eps: float = 1e-8) -> float:
    present = _present(losses)
    if not present:
        return 0.0
    total, _ = geometric_mean_value([l.value for l in present], np.ones(len(present)), eps)
    return total


def geometric_mean_gradient(losses: Sequence[TaskLoss], eps: float = 1e-8) -> dict[str, float]:
    """d total / d L_i = total / (N L_i), zero for clamped losses."""
    present = _present(losses)
    total = combine_geometric_mean(present, eps)
    n = len(present)
    return {l.task: (total / (n * l.value) if l.value > eps else 0.0) for l in present}


def mask_task_losses(per_sample: Mapping[str, Sequence[float]],
                     labels_present: Mapping[str, Sequence[bool]]) -> list[TaskLoss]:
    """Average each task over the samples that carry its labels.

    Tasks with no labelled sample are dropped. If every task is dropped the
    result is empty and a warning is logged; callers skip that batch.
    """
    out = []
    for task, values in per_sample.items():
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(labels_present.get(task, np.ones(len(values), bool)), dtype=bool)
        if mask.shape != values.shape:
            raise ValueError(f"task '{task}': {mask.size} presence flags for {values.size} samples")
        n = int(mask.sum())
        if n:
            out.append(TaskLoss(task, float(values[mask].mean()), n))
    if not out:
        log.warning("no task has labels in this batch; skipping it")
    return out
