"""Comparison tables over trained variants: csv, json and markdown, plus figures."""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .losses import GEOMETRIC_MEAN, WEIGHTED_SUM, ScalarizationStrategy
from .metrics import MetricsReport
from .synthdata import write_ppm

FORMATS = ("csv", "json", "md")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class RowSpec:
    """One comparison row: a canned architecture trained under one scalarization."""
    label: str
    variant: str
    strategy: ScalarizationStrategy


def _ws(**w):
    return ScalarizationStrategy(WEIGHTED_SUM, w)


REPORT_ROWS: tuple[RowSpec, ...] = (
    RowSpec("STL seg", "stl_seg", _ws(segmentation=1.0)),
    RowSpec("STL det", "stl_det", _ws(detection=1.0)),
    RowSpec("STL depth", "stl_depth", _ws(depth=1.0)),
    RowSpec("MTL", "mtl", _ws(segmentation=1.0, detection=1.0)),
    RowSpec("MTL10", "mtl", _ws(segmentation=10.0, detection=1.0)),
    RowSpec("MTL100", "mtl", _ws(segmentation=100.0, detection=1.0)),
    RowSpec("AuxNet400", "auxnet", _ws(segmentation=400.0, depth=1.0)),
    RowSpec("AuxNet1000", "auxnet", _ws(segmentation=1000.0, depth=1.0)),
    RowSpec("AuxNet_TWB", "auxnet", ScalarizationStrategy(GEOMETRIC_MEAN)),
    RowSpec("MSNet2", "msnet2", _ws(segmentation=1.0)),
    RowSpec("RNNet2", "rnnet2", _ws(segmentation=1.0)),
    RowSpec("3-task sum", "three_task", _ws(segmentation=1.0, depth=1.0, motion=1.0)),
    RowSpec("3-task product", "three_task", ScalarizationStrategy(GEOMETRIC_MEAN)),
)
ROWS_BY_LABEL = {r.label: r for r in REPORT_ROWS}


@dataclass
class RunRecord:
    """Outcome of one training run, as written next to its checkpoint."""
    label: str
    variant: str
    seed: int
    params: int
    dataset_fingerprint: str
    metrics: MetricsReport
    log: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"label": self.label, "variant": self.variant, "seed": self.seed, "params": self.params,
                "dataset_fingerprint": self.dataset_fingerprint, "metrics": self.metrics.to_json(),
                "log": self.log}

    @classmethod
    def from_json(cls, d) -> "RunRecord":
        return cls(d["label"], d["variant"], int(d["seed"]), int(d["params"]), d["dataset_fingerprint"],
                   MetricsReport.from_json(d["metrics"]), list(d.get("log", [])))


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def columns(seg_names: Sequence[str], det_names: Sequence[str]) -> list[str]:
    return (["model", "params"] + [f"IoU {n}" for n in seg_names] + ["mean IoU"]
            + [f"AP {n}" for n in det_names] + ["mAP", "depth accuracy", "motion IoU", "seeds"])


def _metric_values(m: MetricsReport, n_seg: int, n_det: int) -> list:
    return ([m.per_class_iou.get(i) for i in range(n_seg)] + [m.mean_iou]
            + [m.per_class_ap.get(i) for i in range(n_det)] + [m.mean_ap, m.depth_accuracy, m.motion_iou])


def _check_inputs(results: Mapping[str, Sequence[RunRecord]], variants: Sequence[str]) -> str:
    for v in variants:
        if not results.get(v):
            raise ReportError(f"missing run for variant '{v}'")
    prints = {r.dataset_fingerprint for v in variants for r in results[v]}
    if len(prints) > 1:
        raise ReportError(f"runs span different dataset fingerprints: {sorted(prints)}")
    for v in variants:
        counts = {r.params for r in results[v]}
        if len(counts) > 1:
            raise ReportError(f"variant '{v}': seeds disagree on parameter count {sorted(counts)}")
    return prints.pop()


def aggregate(results: Mapping[str, Sequence[RunRecord]], seg_names: Sequence[str],
              det_names: Sequence[str], variants: Sequence[str] | None = None) -> dict:
    """Per-variant medians over seeds, per-seed values kept alongside."""
    variants = list(variants if variants is not None else results)
    fp = _check_inputs(results, variants)
    cols = columns(seg_names, det_names)
    metric_cols = cols[2:-1]
    rows = []
    for v in variants:
        runs = sorted(results[v], key=lambda r: r.seed)
        per_seed = {str(r.seed): dict(zip(metric_cols, _metric_values(r.metrics, len(seg_names), len(det_names))))
                    for r in runs}
        median = {c: _median([s[c] for s in per_seed.values()]) for c in metric_cols}
        rows.append({"model": v, "params": runs[0].params, "seeds": [r.seed for r in runs],
                     "median": median, "per_seed": per_seed})
    return {"columns": cols, "dataset_fingerprint": fp, "rows": rows}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _table(agg: dict) -> list[list[str]]:
    out = []
    for row in agg["rows"]:
        vals = [row["model"], str(row["params"])]
        vals += [_cell(row["median"][c]) for c in agg["columns"][2:-1]]
        vals.append(" ".join(str(s) for s in row["seeds"]))
        out.append(vals)
    return out


def render_csv(agg: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(agg["columns"])
    w.writerows(_table(agg))
    return buf.getvalue()


def render_md(agg: dict) -> str:
    cols = agg["columns"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    lines += ["| " + " | ".join(c or "-" for c in row) + " |" for row in _table(agg)]
    return "\n".join(lines) + "\n"


def render_json(agg: dict) -> str:
    return json.dumps(agg, indent=2, sort_keys=True) + "\n"


RENDER = {"csv": render_csv, "json": render_json, "md": render_md}


def emit_report(results: Mapping[str, Sequence[RunRecord]], fmt: str | Sequence[str], out_dir,
                seg_names: Sequence[str] = ("background", "road", "sidewalk", "vehicle", "person"),
                det_names: Sequence[str] = ("vehicle", "person"), variants: Sequence[str] | None = None,
                figures: bool = True, stamp: str | None = None, stem: str = "report") -> list[Path]:
    """Write the comparison table in each requested format; returns the written paths."""
    fmts = [fmt] if isinstance(fmt, str) else list(fmt)
    for f in fmts:
        if f not in FORMATS:
            raise ReportError(f"unknown report format '{f}' (expected one of {', '.join(FORMATS)})")
    agg = aggregate(results, seg_names, det_names, variants)
    if stamp is not None:
        agg["generated"] = stamp
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in fmts:
        p = out / f"{stem}.{f}"
        text = RENDER[f](agg)
        if stamp is not None and f != "json":
            text += ("" if f == "csv" else "\n") + f"# generated {stamp}\n"
        p.write_text(text)
        paths.append(p)
    if figures:
        paths.append(plot_comparison(agg, out / f"{stem}.png"))
    return paths


# --- figures ---------------------------------------------------------------------

def plot_comparison(agg: dict, path) -> Path:
    """Mean IoU medians with per-seed points, next to parameter counts."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = agg["rows"]
    names = [r["model"] for r in rows]
    x = np.arange(len(rows))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.8), constrained_layout=True)
    med = [r["median"]["mean IoU"] for r in rows]
    ax0.bar(x, [m if m is not None else 0.0 for m in med], color="0.75", edgecolor="k", linewidth=0.6)
    for i, r in enumerate(rows):
        pts = [s["mean IoU"] for s in r["per_seed"].values() if s["mean IoU"] is not None]
        ax0.plot([i] * len(pts), pts, "k.", ms=5)
    ax0.set_ylabel("segmentation mean IoU")
    ax0.set_ylim(0, 1)
    ax1.bar(x, [r["params"] / 1e6 for r in rows], color="0.45", edgecolor="k", linewidth=0.6)
    ax1.set_ylabel("parameters (M)")
    for ax in (ax0, ax1):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_training_curves(logs: Mapping[str, Sequence[dict]], path) -> Path:
    """Per-epoch total loss for each run."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    for name, log in logs.items():
        ax.plot([r["epoch"] for r in log], [r["total"] for r in log], label=name, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training objective")
    ax.set_yscale("log")
    ax.legend(fontsize=7, frameon=False)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


# --- qualitative renders --------------------------------------------------------------

SEG_COLORS = np.array([(0.55, 0.75, 0.95), (0.35, 0.35, 0.38), (0.75, 0.70, 0.60),
                       (0.85, 0.15, 0.12), (0.95, 0.55, 0.10), (0.2, 0.7, 0.3),
                       (0.6, 0.3, 0.8), (0.9, 0.9, 0.2)])


def colorize(mask: np.ndarray) -> np.ndarray:
    """Class ids -> (3, H, W) image in [0, 1]."""
    return SEG_COLORS[np.asarray(mask) % len(SEG_COLORS)].transpose(2, 0, 1)


def write_side_by_side(path, frame: np.ndarray, gt_mask: np.ndarray, pred_mask: np.ndarray, gap: int = 2) -> Path:
    """Input frame | ground-truth segmentation | prediction, as one PPM."""
    h = frame.shape[1]
    sep = np.ones((3, h, gap))
    img = np.concatenate([frame, sep, colorize(gt_mask), sep, colorize(pred_mask)], axis=2)
    write_ppm(path, img)
    return Path(path)
