"""Acceptance criteria. Each test prints one PASS/FAIL line for its criterion.

The end-to-end learning check trains three full desk-scale models and takes
roughly 40 minutes on one core; deselect it with ``-m "not slow"``.
"""

import csv
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from serialgan import losses as L
from serialgan import segmentation as S
from serialgan.checkpoint import (CheckpointCorruptError, CheckpointFormatError, CheckpointTruncatedError,
                                  load_checkpoint, save_checkpoint)
from serialgan.cli import load_config, main
from serialgan.dataset import Preprocessor, generate_synthetic, render_scene
from serialgan.evaluation import average_precision, evaluate_model, macro_f1, prf1_from, roc_auc
from serialgan.model import init_model
from serialgan.scoring import ScoreVariant, normalize_scores
from serialgan.trainer import train

from conftest import brute_min_cut, iou, mann_whitney, random_graph, record_criterion, sweep_area

TESTS = Path(__file__).parent


def test_published_f1_arithmetic():
    f_normal = prf1_from(0.859, 0.966)
    f_diseased = prf1_from(0.959, 0.833)
    m = macro_f1(0.909, 0.891)
    ok = abs(f_normal - 0.909) <= 5e-4 and abs(f_diseased - 0.891) <= 5e-4 and f"{m:.3f}" == "0.900"
    record_criterion("Published F1 arithmetic", ok,
                     f"F1(0.859, 0.966) = {f_normal:.6f} (want 0.909 +- 5e-4), "
                     f"F1(0.959, 0.833) = {f_diseased:.6f} (want 0.891 +- 5e-4), macro = {m:.3f}")
    assert ok


def test_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    flow_bad = 0
    for _ in range(1000):
        g = random_graph(rng, int(rng.integers(0, 9)))  # <= 10 nodes with source and sink
        want = brute_min_cut(g)
        got = S.max_flow_min_cut(g).flow
        flow_bad += abs(got - want) > 1e-6 * max(abs(want), 1.0)
    auc_bad = 0
    for seed in range(500):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 13))
        y = r.integers(0, 2, n)
        y[r.choice(n, 2, replace=False)] = [0, 1]
        s = np.round(r.uniform(0, 1, n), 1)
        auc_bad += abs(roc_auc(s, y)[1] - mann_whitney(s, y)) > 1e-9
    ap = average_precision([0.8, 0.4, 0.35, 0.1], [1, 0, 1, 0])
    rect_bad = 0
    for _ in range(200):
        pts = rng.normal(0, 1, (int(rng.integers(3, 30)), 2)) * rng.uniform(0.5, 20, 2)
        rect_bad += S.min_area_rect(pts).area > sweep_area(pts, 0.5) + 1e-6
    secs = time.perf_counter() - t0
    ok = flow_bad == 0 and auc_bad == 0 and abs(ap - 0.8333333) <= 1e-6 and rect_bad == 0 and secs < 60
    record_criterion("Oracle equivalence", ok,
                     f"flow mismatches {flow_bad}/1000, AUC mismatches {auc_bad}/500, AP {ap:.7f}, "
                     f"rect above sweep {rect_bad}/200, {secs:.1f}s")
    assert ok


def test_gradient_suite():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(TESTS / "test_gradients.py")], capture_output=True, text=True, cwd=TESTS.parent)
    secs = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and secs < 60
    record_criterion("Gradient suite", ok, f"{summary} ({secs:.1f}s wall)")
    assert ok, proc.stdout[-3000:]


def test_fixed_points():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 3, 8, 8))
    z = rng.normal(size=(3, 5))
    f = rng.normal(size=(3, 7))
    e = rng.uniform(1, 9, 20)
    n = normalize_scores(e)
    c = normalize_scores([4.2] * 5)
    checks = {
        "rec": L.rec_loss(x, x, x) == 0,
        "lat": L.lat_loss(z, z, z) == 0,
        "adv_g": L.adv_loss_generator(f, f, f) == 0,
        "min->0": n.scores[np.argmin(e)] == 0,
        "max->1": n.scores[np.argmax(e)] == 1,
        "constant": c.degenerate and np.all(c.scores == 0),
    }
    ok = all(checks.values())
    record_criterion("Fixed points", ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


def _desk_run(seed):
    cfg = load_config(env={}, overrides=[("run", "seed", seed)])
    train_set, test_set = generate_synthetic(cfg.synth())
    pre = Preprocessor.fit(train_set)
    x = pre.batch(train_set)
    state = init_model(cfg.model(x.shape[1]), output_mean=x.mean(axis=(0, 1, 2)))
    state, log = train(state, train_set, x, cfg.train())
    labels = np.array([s.label for s in test_set])
    res = evaluate_model(state, pre.batch(test_set), labels)
    return res, log


@pytest.mark.slow
def test_end_to_end_learning():
    t0 = time.perf_counter()
    rows, passed = [], 0
    for seed in (0, 1, 2):
        res, log = _desk_run(seed)
        g, x1, x2 = res[ScoreVariant.G1G2], res[ScoreVariant.XG1], res[ScoreVariant.XG2]
        good = g.auc >= 0.85 and g.j >= 0.5 and g.auc > x1.auc and g.auc > x2.auc
        passed += good
        rows.append(f"seed {seed}: SG1G2 AUC {g.auc:.3f} J {g.j:.3f}, SxG1 {x1.auc:.3f}, SxG2 {x2.auc:.3f}, "
                    f"rec {log[0]['rec']:.3f}->{log[-1]['rec']:.3f} [{'ok' if good else 'no'}]")
        print(rows[-1])
    ok = passed >= 2
    record_criterion("End-to-end desk-scale learning", ok,
                     f"{passed}/3 seeds meet AUC>=0.85, J>=0.5, SG1G2 above SxG1 and SxG2; "
                     f"{(time.perf_counter() - t0) / 60:.1f} min; " + "; ".join(rows))
    assert ok


def two_colour_scene(rng, side=64):
    fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    while np.abs(fg - bg).max() < 0.3:
        bg = rng.uniform(0, 1, 3)
    cx, cy = rng.uniform(0.4, 0.6, 2) * side
    a, b = rng.uniform(0.12, 0.3, 2) * side
    t = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    u = ((xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)) / a
    v = (-(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)) / b
    truth = u * u + v * v <= 1
    img = np.where(truth[..., None], fg, bg)
    ys, xs = np.nonzero(truth)
    pad = int(rng.integers(3, 8))
    x0, y0 = max(xs.min() - pad, 1), max(ys.min() - pad, 1)
    x1, y1 = min(xs.max() + pad + 1, side - 1), min(ys.max() + pad + 1, side - 1)
    return img, truth, (int(x0), int(y0), int(x1 - x0), int(y1 - y0))


def test_segmentation_quality():
    ious = []
    for i in range(50):
        img, truth, rect = two_colour_scene(np.random.default_rng([7, i]))
        ious.append(iou(S.foreground(S.grabcut(img, rect).mask), truth))
    ok_runs = 0
    for i in range(100):
        img, _, rect = render_scene(np.random.default_rng([8, i]))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", S.SegmentationWarning)
                S.preprocess_pipeline(img, rect)
            ok_runs += 1
        except S.SegmentationError:
            pass
    ok = min(ious) >= 0.90 and ok_runs >= 95
    record_criterion("Segmentation quality", ok,
                     f"IoU min {min(ious):.3f} mean {np.mean(ious):.3f} over 50 two-colour scenes; "
                     f"pipeline succeeded on {ok_runs}/100 pepper scenes")
    assert ok


SMALL = """\
[run]
format_version = 1
seed = 5
[synth]
side = 16
train_count = 21
test_normal = 6
test_diseased = 6
[model]
latent = 8
width = 4
[train]
batch_size = 7
epochs = 3
"""


def _data_files(run):
    out = {}
    for p in sorted(run.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(run).as_posix()
        if p.name == "train_log.csv":
            # wall-clock seconds is the one column that cannot repeat
            out[rel] = [r[:-1] for r in csv.reader(open(p))]
        else:
            out[rel] = p.read_bytes()
    return out


def test_determinism(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMALL)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    runs = {}
    for k in ("a", "b"):
        out = tmp_path / k
        assert main(["train", "--config", str(cfg), "--out", str(out), "--data", str(tmp_path / "data")]) == 0
        train_dir = next(out.glob("train-*"))
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--data", str(tmp_path / "data"),
                     "--checkpoint", str(train_dir / "final.sgc")]) == 0
        runs[k] = (_data_files(train_dir), _data_files(next(out.glob("eval-*"))))
    same_train = runs["a"][0] == runs["b"][0]
    same_eval = runs["a"][1] == runs["b"][1]
    ok = same_train and same_eval
    record_criterion("Determinism", ok, f"train outputs identical: {same_train} ({len(runs['a'][0])} files), "
                                        f"eval outputs identical: {same_eval} ({len(runs['a'][1])} files)")
    assert ok


def test_persistence(tmp_path):
    cfg = load_config(env={})
    state = init_model(cfg.model(64))
    state.step, state.epoch = 5, 1
    state.opt_m = {k: np.full_like(v, 0.1) for k, v in state.params.items()}
    state.opt_v = {k: np.full_like(v, 0.01) for k, v in state.params.items()}
    path = save_checkpoint(state, tmp_path / "m.sgc")
    back = load_checkpoint(path)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 64, 64, 3)).astype(np.float32)
    same = all(np.array_equal(a, b) for a, b in zip(state.generator_forward(x), back.generator_forward(x)))
    same &= np.array_equal(state.discriminate(x).features, back.discriminate(x).features)
    buf = path.read_bytes()
    verdicts = {}
    for name, data, cls in (("truncated", buf[:len(buf) // 3], CheckpointTruncatedError),
                            ("bad magic", b"XXXXXXXX" + buf[8:], CheckpointFormatError),
                            ("bit flip", buf[:-50] + bytes([buf[-50] ^ 1]) + buf[-49:], CheckpointCorruptError)):
        p = tmp_path / "broken.sgc"
        p.write_bytes(data)
        try:
            load_checkpoint(p)
            verdicts[name] = "loaded"
        except Exception as e:  # noqa: BLE001 - the class is what is being checked
            verdicts[name] = type(e).__name__ if type(e) is cls else f"wrong {type(e).__name__}"
    ok = bool(same) and all(not v.startswith(("wrong", "loaded")) for v in verdicts.values())
    record_criterion("Persistence", ok, f"forward outputs identical after roundtrip: {bool(same)}; "
                     + ", ".join(f"{k} -> {v}" for k, v in verdicts.items()))
    assert ok
