"""``mtlab`` command line: data generation, training, evaluation, checks and reports.

Exit codes: 0 success, 1 validation error (bad flags, configs, inputs),
2 runtime failure (divergence, failed checks, I/O trouble).
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import datetime as dt
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import architectures as A
from .losses import LossConfig, ScalarizationStrategy, WEIGHTED_SUM
from .report import FORMATS, REPORT_ROWS, ROWS_BY_LABEL, RunRecord, emit_report, \
    plot_training_curves, write_side_by_side
from .synthdata import TASKS, SceneSpec, generate_dataset, load_dataset
from .trainer import OptimizerConfig, TrainConfig, TrainingDiverged, evaluate, load_checkpoint, predict, \
    save_checkpoint, train

log = logging.getLogger("mtlab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# --- experiment config --------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    architecture: A.ArchitectureSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    label: str = ""
    variant: str = "custom"
    dataset: str | None = None
    report: str | None = None

    def __post_init__(self):
        tasks = set(self.architecture.tasks)
        st = self.train.strategy
        if st.kind == WEIGHTED_SUM:
            missing, extra = tasks - set(st.weights), set(st.weights) - tasks
            if missing:
                raise ConfigError(f"strategy.weights: no weight for tasks {sorted(missing)}")
            if extra:
                raise ConfigError(f"strategy.weights: unknown tasks {sorted(extra)}")

    @property
    def strategy(self) -> ScalarizationStrategy:
        return self.train.strategy

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def to_json(self) -> dict:
        d = {"label": self.label, "variant": self.variant, "architecture": self.architecture.to_json(),
             "train": self.train.to_json(), "optimizer": vars(self.optimizer).copy()}
        if self.dataset is not None:
            d["dataset"] = self.dataset
        if self.report is not None:
            d["report"] = self.report
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        """Accepts a full ``architecture`` block, a canned ``variant`` or a comparison ``row`` label.

        Top-level ``strategy`` and ``loss`` blocks override the ones inside ``train``.
        """
        d = dict(d)
        train_d = dict(d.get("train", {}))
        row = d.get("row")
        variant = d.get("variant")
        if row is not None:
            if row not in ROWS_BY_LABEL:
                raise ConfigError(f"row: unknown comparison row '{row}'")
            variant = variant or ROWS_BY_LABEL[row].variant
            train_d.setdefault("strategy", ROWS_BY_LABEL[row].strategy.to_json())
        if "strategy" in d:
            train_d["strategy"] = d["strategy"]
        if "loss" in d:
            train_d["loss"] = d["loss"]
        if "architecture" in d:
            arch = A.ArchitectureSpec.from_json(d["architecture"])
            variant = variant or "custom"
        elif variant is not None:
            arch = A.variant(variant, width=int(d.get("width", 16)), size=int(d.get("image_size", 64)))
        else:
            raise ConfigError("config needs one of 'architecture', 'variant' or 'row'")
        if "strategy" not in train_d:
            train_d["strategy"] = {"strategy": WEIGHTED_SUM, "weights": {t: 1.0 for t in arch.tasks}}
        try:
            tc = TrainConfig.from_json(train_d)
            opt = OptimizerConfig(**d.get("optimizer", {}))
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None
        return cls(arch, tc, opt, d.get("label") or row or variant, variant, d.get("dataset"), d.get("report"))


def _read_json(path, what="config") -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _stamp(args) -> str | None:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds") if args.stamp else None


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower()


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.from_json(_read_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    return cfg


def _load_data(cfg: ExperimentConfig):
    if not cfg.dataset:
        raise ConfigError("no dataset path: set 'dataset' in the config or pass --dataset")
    if not (Path(cfg.dataset) / "manifest.json").exists():
        raise ConfigError(f"dataset not found: {cfg.dataset} has no manifest.json")
    ds = load_dataset(cfg.dataset)
    if ds.spec.image_size != cfg.architecture.encoder.input_size:
        raise ConfigError(f"architecture.encoder.input_size {cfg.architecture.encoder.input_size} "
                          f"does not match dataset image_size {ds.spec.image_size}")
    return ds


# --- pipelines (also used by ``compare``) -------------------------------------------------

def run_training(cfg: ExperimentConfig, out_dir, dataset=None, stamp=None) -> RunRecord:
    ds = dataset or _load_data(cfg)
    model = A.assemble_model(cfg.architecture, cfg.strategy, cfg.loss)
    res = train(model, ds, cfg.train, cfg.optimizer)
    metrics = evaluate(model, res.params, ds.split("val"), ds.spec.seg_classes)
    rec = RunRecord(cfg.label, cfg.variant, cfg.train.seed, A.count_params(model).total, ds.fingerprint,
                    metrics, res.log)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, res.params, out / "checkpoint", res.opt_state, res.epochs_done, cfg.to_json())
    (out / "config.json").write_text(_dump(cfg.to_json()))
    body = rec.to_json()
    if stamp:
        body["finished"] = stamp
    (out / "run.json").write_text(_dump(body))
    return rec


def _train_job(cfg_json: dict, out_dir: str, stamp):
    return run_training(ExperimentConfig.from_json(cfg_json), out_dir, stamp=stamp).to_json()


def threads() -> int:
    raw = os.environ.get("MTL_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MTL_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MTL_LAB_THREADS must be >= 1")
    return n


def collect_runs(root) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = {}
    for p in sorted(Path(root).rglob("run.json")):
        rec = RunRecord.from_json(_read_json(p, "run"))
        out.setdefault(rec.label, []).append(rec)
    return out


# --- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec.from_json(_read_json(args.config)) if args.config else SceneSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if not args.out:
        raise ConfigError("--out is required")
    drop = {}
    for item in args.label_drop or []:
        task, _, rate = item.partition("=")
        if task not in TASKS or not rate:
            raise ConfigError(f"--label-drop expects TASK=RATE with TASK in {', '.join(TASKS)}, got '{item}'")
        drop[task] = float(rate)
    man = generate_dataset(spec, args.n_train, args.n_val, args.out, label_drop=drop, ppm=args.ppm)
    print(f"wrote {man.num_samples} samples ({len(man.splits['train'])} train, "
          f"{len(man.splits['val'])} val) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    if not args.out:
        raise ConfigError("--out is required")
    rec = run_training(cfg, args.out, stamp=_stamp(args))
    print(f"{rec.label} seed {rec.seed}: mean IoU {_num(rec.metrics.mean_iou)}, mAP {_num(rec.metrics.mean_ap)}, "
          f"params {rec.params}")
    return EXIT_OK


def _num(v):
    return "-" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    if not args.out:
        raise ConfigError("--out is required (the training run directory)")
    ds = _load_data(cfg)
    model = A.assemble_model(cfg.architecture, cfg.strategy, cfg.loss)
    ck = load_checkpoint(Path(args.checkpoint or Path(args.out) / "checkpoint"), model)
    val = ds.split("val")
    rep = evaluate(model, ck.params, val, ds.spec.seg_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(_dump(rep.to_json()))
    if args.ppm:
        pred = predict(model, ck.params, val[:args.ppm])
        for name, masks in pred.seg.items():
            for i, m in enumerate(masks):
                write_side_by_side(out / f"side_{_slug(name)}_{i:03d}.ppm", val[i].frame_curr, val[i].seg_mask, m)
    sys.stdout.write(rep.to_csv(cfg.label, ds.spec.seg_classes, ds.spec.det_classes))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .opcheck import CASES, check_all

    if not args.all and not args.op:
        raise ConfigError("pass --all or at least one --op")
    ops = None if args.all else args.op
    for op in ops or []:
        if op not in CASES:
            raise ConfigError(f"unknown op '{op}'")
    results = check_all(args.cases, args.tolerance, args.seed or 0, ops)
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  cases  failures  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.op:<{width}}  {r.cases:5d}  {r.failures:8d}  {r.max_error:13.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def param_report(spec: A.ArchitectureSpec) -> dict:
    """Budget of ``spec`` next to single-task models built from each of its decoders."""
    budget = A.count_params(A.assemble_model(spec))
    out = {"budget": budget.to_json()}
    decs = [d for d in spec.decoders if d.name not in spec.auxiliary]
    if len(spec.decoders) > 1:
        stls = {}
        for d in decs:
            streams = spec.streams if d.uses_fusion else A.StreamSpec()
            stls[d.name] = A.count_params(A.assemble_model(A.ArchitectureSpec(spec.encoder, streams, (d,))))
        stl_seg = next((stls[d.name] for d in decs if d.kind == A.SEGMENTATION), None)
        sharing = A.sharing_analysis(list(stls.values()), budget)
        out["stl_totals"] = {k: b.total for k, b in stls.items()}
        out["stl_sum"] = sum(b.total for b in stls.values())
        out["savings"] = sharing.savings
        out["sharing"] = sharing.to_json()
        if stl_seg is not None:
            out["delta_vs_stl_segmentation"] = budget.total - stl_seg.total
    return out


def cmd_params(args) -> int:
    if args.variant:
        spec = A.variant(args.variant)
    else:
        spec = _experiment(args).architecture
    text = _dump(param_report(spec))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _compare_plan(d: dict, seed_override):
    rows = d.get("rows", [r.label for r in REPORT_ROWS])
    seeds = [seed_override] if seed_override is not None else [int(s) for s in d.get("seeds", [1, 2, 3])]
    base = {k: v for k, v in d.items() if k not in ("rows", "seeds", "formats")}
    plan = []
    for label in rows:
        if label not in ROWS_BY_LABEL:
            raise ConfigError(f"rows: unknown comparison row '{label}'")
        for s in seeds:
            cfg_d = dict(base, row=label, label=label)
            cfg_d["train"] = dict(base.get("train", {}), seed=s)
            plan.append((label, s, ExperimentConfig.from_json(cfg_d)))
    return rows, plan


def cmd_compare(args) -> int:
    if not args.config or not args.out:
        raise ConfigError("compare needs --config and --out")
    d = _read_json(args.config)
    if args.dataset:
        d["dataset"] = args.dataset
    rows, plan = _compare_plan(d, args.seed)
    if not plan:
        raise ConfigError("rows: nothing to compare")
    ds = _load_data(plan[0][2])
    out = Path(args.out)
    todo = [(label, s, cfg) for label, s, cfg in plan
            if not (out / "runs" / _slug(label) / f"seed{s}" / "run.json").exists()]
    stamp = _stamp(args)
    n = threads()
    if n > 1 and len(todo) > 1:
        with cf.ProcessPoolExecutor(n) as pool:
            futs = [pool.submit(_train_job, cfg.to_json(),
                                str(out / "runs" / _slug(label) / f"seed{s}"), stamp) for label, s, cfg in todo]
            for f in futs:
                f.result()
    else:
        for label, s, cfg in todo:
            log.info("training %s seed %d", label, s)
            run_training(cfg, out / "runs" / _slug(label) / f"seed{s}", dataset=ds, stamp=stamp)
    runs = collect_runs(out / "runs")
    fmts = args.format or d.get("formats") or list(FORMATS)
    paths = emit_report(runs, fmts, args.report_dir or out, ds.spec.seg_classes, ds.spec.det_classes,
                        variants=rows, stamp=stamp)
    plot_training_curves({f"{label} seed {r.seed}": r.log for label in rows for r in runs[label]},
                         Path(args.report_dir or out) / "curves.png")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    runs_dir = args.runs or (Path(args.config).parent if args.config else None)
    if runs_dir is None or not args.out:
        raise ConfigError("report needs --runs (or --config) and --out")
    runs = collect_runs(runs_dir)
    if not runs:
        raise ConfigError(f"no run.json files under {runs_dir}")
    variants = args.variants or [r.label for r in REPORT_ROWS if r.label in runs] + sorted(
        k for k in runs if k not in ROWS_BY_LABEL)
    kw = {}
    if args.config:
        spec = load_dataset(_experiment(args).dataset, validate=False).spec
        kw = {"seg_names": spec.seg_classes, "det_names": spec.det_classes}
    paths = emit_report(runs, args.format or list(FORMATS), args.out, variants=variants,
                        figures=not args.no_figures, stamp=_stamp(args), **kw)
    for p in paths:
        print(p)
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the seed from the config")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output path")
    common.add_argument("--stamp", action="store_true", help="include timestamps in written outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mtlab", description="Multi-task perception lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n-train", type=int, default=256)
    g.add_argument("--n-val", type=int, default=64)
    g.add_argument("--label-drop", action="append", metavar="TASK=RATE")
    g.add_argument("--ppm", action="store_true", help="also write PPM previews of the frames")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one experiment config")
    t.add_argument("--dataset")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a trained run")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--ppm", type=int, default=0, metavar="N", help="side-by-side renders of N val samples")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every op")
    c.add_argument("--all", action="store_true")
    c.add_argument("--op", action="append")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--cases", type=int, default=100)
    c.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("params", parents=[common], help="parameter budget as JSON")
    b.add_argument("--variant", choices=sorted(["stl_seg", "stl_det", "stl_depth", "stl_motion", "mtl", "auxnet",
                                                "msnet2", "rnnet2", "three_task", "three_task_lstm"]))
    b.set_defaults(func=cmd_params)

    m = sub.add_parser("compare", parents=[common], help="train comparison rows over seeds and tabulate")
    m.add_argument("--dataset")
    m.add_argument("--format", action="append", choices=FORMATS)
    m.add_argument("--report-dir")
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", parents=[common], help="tabulate finished runs")
    r.add_argument("--runs", help="directory searched for run.json files")
    r.add_argument("--format", action="append", choices=FORMATS)
    r.add_argument("--variants", nargs="+")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, OSError) as exc:
        print(f"mtlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:
        print(f"mtlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001  last-resort classification
        print(f"mtlab {args.command}: unexpected failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
