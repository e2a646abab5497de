"""Acceptance criteria, one test each; a summary line per criterion is printed at the end of the run.

The training criteria share one session cache of desk-scale runs
(dataset seed 7, 256 train / 64 val, 64x64 frames, width 16).
"""
import functools
import json
import statistics
import time

import numpy as np

from mtlab import architectures as A
from mtlab.cli import run_cli
from mtlab.graph import Graph, backward, eval_graph
from mtlab.losses import ScalarizationStrategy, geometric_mean_gradient, TaskLoss
from mtlab.metrics import class_iou_report, detection_ap
from mtlab.opcheck import CASES, check_all
from mtlab.synthdata import SceneSpec, in_memory_dataset
from mtlab.tensor import Precision
from mtlab.trainer import OptimizerConfig, TrainConfig, evaluate, make_feeds, train

from test_layers import conv_oracle, lstm_graph, lstm_oracle, pool_oracle, softmax_oracle
from test_metrics import _random_instance, ap_oracle, iou_oracle

C64 = Precision.CHECK64
SEEDS = (1, 2, 3)
SCENE = SceneSpec(image_size=64, seed=7)
N_TRAIN, N_VAL = 256, 64
EPOCHS = 30
# desk-scale recipe shared by every training criterion
OPTIMIZER = OptimizerConfig(lr=0.002, beta2=0.99)
BATCH = 4
HFLIP = True

UNIT3 = {"segmentation": 1.0, "depth": 1.0, "motion": 1.0}
RUNS = {
    "stl": ("stl_seg", ScalarizationStrategy("weighted_sum", {"segmentation": 1.0}), False),
    "gm3": ("three_task", ScalarizationStrategy("geometric_mean"), False),
    "ws3": ("three_task", ScalarizationStrategy("weighted_sum", UNIT3), False),
    "aux400": ("auxnet", ScalarizationStrategy("weighted_sum", {"segmentation": 400.0, "depth": 1.0}), False),
    "mtl": ("mtl", ScalarizationStrategy("weighted_sum", {"segmentation": 1.0, "detection": 1.0}), False),
    "mtl_drop": ("mtl", ScalarizationStrategy("weighted_sum", {"segmentation": 1.0, "detection": 1.0}), True),
}


@functools.cache
def dataset(drop: bool):
    return in_memory_dataset(SCENE, N_TRAIN, N_VAL, {"detection": 0.5} if drop else None)


def train_config(strategy, seed):
    return TrainConfig(epochs=EPOCHS, batch_size=BATCH, seed=seed, strategy=strategy, hflip=HFLIP)


@functools.cache
def run(key: str, seed: int):
    name, strategy, drop = RUNS[key]
    model = A.assemble_model(A.variant(name), strategy)
    ds = dataset(drop)
    t0 = time.process_time()
    res = train(model, ds, train_config(strategy, seed), OPTIMIZER)
    seconds = time.process_time() - t0
    rep = evaluate(model, res.params, ds.split("val"), SCENE.seg_classes)
    return {"miou": rep.mean_iou, "seconds": seconds, "log": json.dumps(res.log, sort_keys=True)}


def mious(key):
    return [run(key, s)["miou"] for s in SEEDS]


def fmt(values):
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


# --- 1. gradient soundness -------------------------------------------------------------

def test_c01_every_op_passes_grad_check(criterion):
    t0 = time.process_time()
    results = check_all(cases=100, tolerance=1e-4, seed=0)
    seconds = time.process_time() - t0
    failed = [r.op for r in results if not r.passed]
    worst = max(r.max_error for r in results)
    ok = criterion(1, not failed and seconds < 120 and {"weighted_sum", "geometric_mean"} <= set(CASES),
                   f"{len(results)} ops x 100 cases, failures {failed or 'none'}, worst rel err {worst:.2e}, "
                   f"{seconds:.1f}s")
    assert ok


# --- 2. product-of-losses gradient identity -------------------------------------------------

def test_c02_geometric_mean_gradient_identity(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in (2, 3):
        for _ in range(100):
            vals = rng.uniform(0.01, 5.0, n)
            g = Graph()
            nodes = [g.apply("sum", g.param(f"l{i}", (1,))) for i in range(n)]
            g.output("L", g.apply("geometric_mean", *nodes, g.input("present", (n,), batched=False), eps=1e-8))
            params = {f"l{i}": vals[i:i + 1] for i in range(n)}
            feeds = {"present": np.ones(n)}
            total = float(eval_graph(g, feeds, params, precision=C64)["L"])
            grads = backward(g, feeds, "L", params, precision=C64)
            expect = total / (n * vals)
            got = np.array([grads[f"l{i}"][0] for i in range(n)])
            worst = max(worst, float(np.max(np.abs(got - expect) / np.abs(expect))))
            closed = geometric_mean_gradient([TaskLoss(f"t{i}", float(v), 1) for i, v in enumerate(vals)])
            worst = max(worst, max(abs(closed[f"t{i}"] - expect[i]) / expect[i] for i in range(n)))
    ok = criterion(2, worst <= 1e-6, f"N in {{2,3}}, 200 draws, max rel deviation {worst:.2e}")
    assert ok


# --- 3. oracle equivalence -----------------------------------------------------------------

def _eval1(kind, x, **attrs):
    g = Graph()
    g.output("y", g.apply(kind, g.input("x", x.shape), **attrs))
    return eval_graph(g, {"x": x[None]}, precision=C64)["y"][0]


def test_c03_kernels_and_metrics_match_oracles(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        c_in, c_out, k, s = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3])), int(rng.integers(1, 3))
        x = rng.standard_normal((c_in, 6, 7))
        w, b = rng.standard_normal((c_out, c_in, k, k)), rng.standard_normal(c_out)
        g = Graph()
        g.output("y", g.apply("conv2d", g.input("x", x.shape), g.param("w", w.shape), g.param("b", b.shape),
                              stride=s, padding=k // 2))
        y = eval_graph(g, {"x": x[None]}, {"w": w, "b": b}, precision=C64)["y"][0]
        worst = max(worst, float(np.max(np.abs(y - conv_oracle(x, w, b, s, k // 2)))))
        x = rng.standard_normal((3, 6, 8))
        worst = max(worst, float(np.max(np.abs(_eval1("max_pool2d", x) - pool_oracle(x)))))
        x = rng.standard_normal((4, 3, 5)) * 3
        worst = max(worst, float(np.max(np.abs(_eval1("softmax_channels", x) - softmax_oracle(x)))))
        g, cell = lstm_graph(with_state=True)
        x, h, c = rng.standard_normal((2, 4, 4)), rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4))
        w, b = rng.standard_normal(cell.kernel_shape) * 0.3, rng.standard_normal(cell.c_out)
        out = eval_graph(g, {"x": x[None], "h": h[None], "c": c[None]}, {"lstm/w": w, "lstm/b": b}, precision=C64)
        h_ref, c_ref = lstm_oracle(x, h, c, w, b)
        worst = max(worst, float(np.max(np.abs(out["h"][0] - h_ref))), float(np.max(np.abs(out["c"][0] - c_ref))))

    iou_mismatch = 0
    for _ in range(200):
        n = int(rng.integers(2, 6))
        hh, ww = rng.integers(1, 17, 2)
        gt = rng.integers(0, n, (hh, ww))
        pred = np.where(rng.random((hh, ww)) < 0.6, gt, rng.integers(0, n, (hh, ww)))
        per, mean = class_iou_report(pred, gt, n)
        ref_per, ref_mean = iou_oracle(pred, gt, n)
        iou_mismatch += per != ref_per or mean != ref_mean
    ap_worst = 0.0
    for _ in range(200):
        preds, gts = _random_instance(rng)
        per, _ = detection_ap(preds, gts)
        ref = ap_oracle(preds, gts)
        assert per.keys() == ref.keys()
        ap_worst = max([ap_worst] + [abs(per[c] - ref[c]) for c in ref])
    ok = criterion(3, worst <= 1e-10 and iou_mismatch == 0 and ap_worst == 0.0,
                   f"kernel max abs err {worst:.1e}; IoU mismatches {iou_mismatch}/200; "
                   f"AP max abs diff {ap_worst:.1e} over 200")
    assert ok


# --- 4. parameter identities ---------------------------------------------------------------------

def test_c04_parameter_identities(criterion):
    three = A.count_params(A.assemble_model(A.variant("three_task")))
    stl = {v: A.count_params(A.assemble_model(A.variant(v))) for v in ("stl_seg", "stl_depth", "stl_motion")}
    per = three.per_component
    delta_ok = three.total - stl["stl_seg"].total == per["depth"] + per["motion"] + per.get("fusion", 0)
    sharing = A.sharing_analysis(list(stl.values()), three)
    savings_ok = sharing.savings == 2 * per["encoder"]
    toy = A.sharing_analysis([A.ParamBudget({"encoder": 60, "head": 40}, 100, 0, {})] * 2,
                             A.ParamBudget({"encoder": 60, "a": 40, "b": 40}, 140, 60, {}))
    reclaim_ok = A.reclaim_per_task(0.30, 2) == 0.15 and toy.shared_fraction == 0.30 and toy.reclaim_per_task == 0.15
    ok = criterion(4, delta_ok and savings_ok and reclaim_ok,
                   f"3-task {three.total} - STL seg {stl['stl_seg'].total} = {three.total - stl['stl_seg'].total} "
                   f"(heads+fusion {per['depth'] + per['motion'] + per.get('fusion', 0)}); savings {sharing.savings} "
                   f"= 2 x {per['encoder']}; reclaim(0.30, 2) = {A.reclaim_per_task(0.30, 2)}")
    assert ok


# --- 5. desk-scale training --------------------------------------------------------------------

def test_c05_desk_scale_training(criterion):
    stl = mious("stl")
    secs = [run("stl", s)["seconds"] for s in SEEDS]
    gm = mious("gm3")
    gap = abs(statistics.median(gm) - statistics.median(stl))
    ok = criterion(5, min(stl) >= 0.85 and max(secs) < 600 and gap <= 0.05,
                   f"STL seg mIoU {fmt(stl)} (>= 0.85 each), slowest {max(secs):.0f}s; "
                   f"3-task GM {fmt(gm)}, |median gap| {gap:.4f} <= 0.05")
    assert ok


# --- 6. scalarization ordering -------------------------------------------------------------------

def test_c06_product_not_worse_than_sum(criterion):
    gm, ws = mious("gm3"), mious("ws3")
    ok = criterion(6, statistics.median(gm) >= statistics.median(ws) - 0.01,
                   f"3-task seg mIoU GM median {statistics.median(gm):.4f} {fmt(gm)} vs "
                   f"WS median {statistics.median(ws):.4f} {fmt(ws)}")
    assert ok


# --- 7. multi-stream structure ---------------------------------------------------------------------

def test_c07_two_stream_structure(criterion):
    spec = A.variant("three_task")
    strat = ScalarizationStrategy("weighted_sum", UNIT3)
    tied = A.assemble_model(spec, strat)
    untied = A.assemble_model(spec, strat, _unshare_prev=True)
    enc_names = [k for k in tied.param_shapes if k.startswith("encoder")]
    one_set = len(enc_names) == 2 * len(A.encoder_layers(spec.encoder)) and \
        not any(k.startswith("encoder_prev") for k in tied.param_shapes)
    params = tied.init_params(3, dtype=np.float64)
    uparams = dict(params)
    uparams.update({k.replace("encoder", "encoder_prev", 1): params[k] for k in enc_names})
    feeds = make_feeds(tied, dataset(False).split("train")[:2])
    gt = backward(tied.graph, feeds, "loss/total", params, precision=C64)
    gu = backward(untied.graph, feeds, "loss/total", uparams, precision=C64)
    worst = 0.0
    for k in enc_names:
        summed = gu[k] + gu[k.replace("encoder", "encoder_prev", 1)]
        worst = max(worst, float(np.max(np.abs(gt[k] - summed)) / max(1.0, float(np.max(np.abs(gt[k]))))))
    lstm = A.count_params(A.assemble_model(A.variant("rnnet2"))).total
    concat = A.count_params(A.assemble_model(A.variant("msnet2"))).total
    ok = criterion(7, one_set and worst <= 1e-8 and lstm > concat,
                   f"one encoder set: {one_set}; grad sum max rel diff {worst:.1e}; "
                   f"params ConvLSTM {lstm} > Concat {concat}")
    assert ok


# --- 8. auxiliary learning ---------------------------------------------------------------------

def test_c08_auxiliary_depth(criterion):
    aux, stl = mious("aux400"), mious("stl")
    ok = criterion(8, statistics.median(aux) >= statistics.median(stl) - 0.02,
                   f"AuxNet400 median {statistics.median(aux):.4f} {fmt(aux)} vs STL median "
                   f"{statistics.median(stl):.4f} {fmt(stl)} (direction: aux - stl = "
                   f"{statistics.median(aux) - statistics.median(stl):+.4f})")
    assert ok


# --- 9. determinism ----------------------------------------------------------------------------

def test_c09_bit_identical_runs(criterion, tmp_path):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps(SCENE.to_json()))
    assert run_cli(["gen-data", "--config", str(scene), "--out", str(tmp_path / "data"),
                    "--n-train", str(N_TRAIN), "--n-val", str(N_VAL)]) == 0
    exp = tmp_path / "stl.json"
    exp.write_text(json.dumps({"row": "STL seg", "dataset": str(tmp_path / "data"), "optimizer": vars(OPTIMIZER),
                               "train": {"epochs": EPOCHS, "batch_size": BATCH, "hflip": HFLIP}}))
    for name in ("a", "b"):
        assert run_cli(["train", "--config", str(exp), "--seed", "1", "--out", str(tmp_path / "runs" / name)]) == 0
        assert run_cli(["report", "--runs", str(tmp_path / "runs" / name), "--out", str(tmp_path / f"rep_{name}")]) == 0
    same_files = []
    for sub in ("runs/a", "rep_a"):
        for f in sorted((tmp_path / sub).rglob("*")):
            if f.is_file():
                twin = tmp_path / sub.replace("a", "b") / f.relative_to(tmp_path / sub)
                same_files.append(f.read_bytes() == twin.read_bytes())
    cli_log = json.dumps(json.loads((tmp_path / "runs" / "a" / "run.json").read_text())["log"], sort_keys=True)
    lib_log = run("stl", 1)["log"]
    ok = criterion(9, all(same_files) and cli_log == lib_log,
                   f"{sum(same_files)}/{len(same_files)} run+report files byte-identical across two CLI runs; "
                   f"CLI log equals library log: {cli_log == lib_log}")
    assert ok


# --- 10. partial labels -----------------------------------------------------------------------

def test_c10_partial_detection_labels(criterion):
    drop, full = mious("mtl_drop"), mious("mtl")
    n_missing = sum("detection" not in s.task_labels_present for s in dataset(True).split("train"))
    gap = abs(statistics.median(drop) - statistics.median(full))
    ok = criterion(10, gap <= 0.03,
                   f"{n_missing}/{N_TRAIN} train samples without boxes; seg mIoU dropout {fmt(drop)} vs "
                   f"full {fmt(full)}, |median gap| {gap:.4f} <= 0.03")
    assert ok
