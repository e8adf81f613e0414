"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py`` for just the summary lines.
"""
import math
import os
import struct
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from voxssc import attention as att
from voxssc import gav, losses, metrics, stgf, stn
from voxssc.grid import (OccupancyGrid, SemanticGrid, VoxelGrid, decode_grid, encode_grid, generate_scene,
                         random_scene_spec, read_grid, toy_sphere_spec, write_grid)
from voxssc.pipeline import SUBJECTS, gradcheck

try:
    from . import oracles
except ImportError:  # executed as a script
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    import oracles

GRAD_TOL = 1e-4
GRAD_TRIALS = 50
GRAD_BUDGET_S = 60.0
ORACLE_INSTANCES = 100
FLOAT_TOL = 1e-9
IDENTITY_TOL = 1e-12
INVERSE_TOL = 1e-10
AFFINE_TOL = 1e-10
COLLAPSE_TOL = 1e-9
SOFTMAX_TOL = 1e-12
OVERFIT_MIOU = 0.95
OVERFIT_STEPS = 500
OVERFIT_BUDGET_S = 120.0
ROUND_TRIPS = 100


_capture = {}


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    with _capture["sys"].disabled():
        print("\n" + line, flush=True)


@pytest.fixture(autouse=True)
def _show_lines(capsys):
    # the result lines bypass output capture so they always reach the terminal
    _capture["sys"] = capsys
    yield


def _env(threads: int) -> dict:
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        env[var] = str(threads)
    return env


def _cli(args, threads=1, cwd=None):
    return subprocess.run([sys.executable, "-m", "voxssc.cli", *args], env=_env(threads), cwd=cwd,
                          capture_output=True, text=True)


# 1 ------------------------------------------------------------------------------------------

def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    reps = [gradcheck(name, GRAD_TRIALS, seed=0) for name in SUBJECTS]
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in reps)
    ok = all(r.passed for r in reps) and len(reps) == 5 and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{r.subject}={r.max_rel_error:.2e}" for r in reps)
    report(1, "gradient suite", ok, f"max rel err {worst:.2e} (tol {GRAD_TOL:g}); {detail}; {elapsed:.1f}s "
                                    f"(budget {GRAD_BUDGET_S:g}s)")
    assert ok


# 2 ------------------------------------------------------------------------------------------

def _oracle_edge(rng):
    dims = tuple(int(v) for v in rng.integers(1, 9, 3))
    f = rng.random(dims)
    return np.array_equal(gav.edge_crossing_count(f, 0.5).counts, oracles.edge_crossings(f, 0.5)), 0.0


def _oracle_occupancy(rng):
    dims = tuple(int(v) for v in rng.integers(1, 9, 3))
    pred, gt = rng.random(dims) < rng.random(), rng.random(dims) < rng.random()
    tp, fp, fn = oracles.confusion(pred, gt)
    got = metrics.occupancy_scores(pred, gt)
    want_iou = tp / (tp + fp + fn) if tp + fp + fn else float("nan")
    want_p = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    want_r = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    same = all((math.isnan(a) and math.isnan(b)) or a == b for a, b in zip(got, (want_iou, want_p, want_r)))
    return same, 0.0


def _oracle_miou(rng):
    nc = int(rng.integers(2, 6))
    dims = tuple(int(v) for v in rng.integers(1, 9, 3))
    gt = rng.integers(0, nc, dims).astype(np.uint8)
    gt[rng.random(dims) < 0.1] = 255
    gt.flat[0] = 1
    pred = rng.integers(0, nc, dims).astype(np.uint8)
    rep = metrics.semantic_miou(SemanticGrid(pred, nc), SemanticGrid(gt, nc))
    want = oracles.per_class_iou(pred, gt, nc)
    same = all((math.isnan(a) and math.isnan(b)) or a == b for a, b in zip(rep.per_class_iou, want))
    defined = [w for w in want if not math.isnan(w)]
    err = abs(rep.miou - sum(defined) / len(defined)) if defined else 0.0
    return same and len(rep.per_class_iou) == nc - 1, err


def _oracle_hausdorff(rng):
    p = rng.standard_normal((int(rng.integers(1, 65)), 3))
    q = rng.standard_normal((int(rng.integers(1, 65)), 3))
    return True, abs(losses.hausdorff(p, q) - oracles.hausdorff(p, q))


def _oracle_kmeans(rng):
    k = int(rng.integers(1, 9))
    x = rng.standard_normal((int(rng.integers(k, 65)), int(rng.integers(1, 5))))
    km = stgf.kmeans_cluster(x, k, seed=int(rng.integers(1 << 31)))
    d = ((x[:, None, :] - km.centroids[None]) ** 2).sum(-1)
    own = d[np.arange(len(x)), km.assignments]
    # optimal: no centroid is strictly closer than the assigned one
    return bool(km.converged), float(np.max(own - d.min(axis=1)))


def _oracle_gcn(rng):
    k = int(rng.integers(1, 9))
    f = rng.standard_normal((k, 3))
    w = stgf.connection_matrix(rng.standard_normal((k, 2)))
    params = stgf.GcnParams.random(3, 2, int(rng.integers(1, 4)), rng, hidden=4)
    want = oracles.gcn_dense(f.tolist(), w.tolist(), [m.tolist() for m in params.weights])
    return True, float(np.max(np.abs(stgf.gcn_forward(f, w, params) - want)))


def _oracle_attention(rng):
    pos_dim = int(rng.choice([2, 3]))
    dims = tuple(int(v) for v in rng.integers(1, 9, pos_dim))
    c = int(rng.integers(1, 4))
    field = rng.standard_normal(dims + (c,))
    n = int(rng.integers(1, 7))
    source = str(rng.choice(["position", "content"]))
    p = att.AttentionParams.random(3, c, 2, int(rng.integers(1, 4)), n, rng, pos_dim=pos_dim,
                                   offset_scale=0.1, query_source=source)
    f = rng.standard_normal(3)
    pts = rng.uniform(-1.1, 1.1, (n, pos_dim))
    want, _ = oracles.deformable_attention(f, pts, field, p.wq.tolist(), p.wk.tolist(), p.wv.tolist(), source)
    return True, float(np.max(np.abs(att.deformable_attention(f, pts, field, p) - want)))


def test_criterion_02_oracle_equivalence():
    checks = {"edge_crossing_count": _oracle_edge, "occupancy_scores": _oracle_occupancy,
              "semantic_miou": _oracle_miou, "hausdorff": _oracle_hausdorff, "kmeans": _oracle_kmeans,
              "gcn_forward": _oracle_gcn, "deformable_attention": _oracle_attention}
    rng = np.random.default_rng(20240)
    parts, ok = [], True
    for name, fn in checks.items():
        exact, worst = True, 0.0
        for _ in range(ORACLE_INSTANCES):
            same, err = fn(rng)
            exact &= same
            worst = max(worst, err)
        good = exact and worst <= FLOAT_TOL
        ok &= good
        parts.append(f"{name}={'ok' if good else 'MISMATCH'}({worst:.1e})")
    report(2, "oracle equivalence", ok, f"{ORACLE_INSTANCES} instances each, float tol {FLOAT_TOL:g}; "
                                        + ", ".join(parts))
    assert ok


# 3 ------------------------------------------------------------------------------------------

def test_criterion_03_stn_exactness():
    rng = np.random.default_rng(3)
    ident = inv = aff = 0.0
    for _ in range(ORACLE_INSTANCES):
        dims = tuple(int(v) for v in rng.integers(1, 9, 3))
        field = VoxelGrid(rng.standard_normal(dims + (2,)), 0.4)
        out = stn.trilinear_sample(field, stn.generate_sampling_grid(stn.AffineTheta.identity(), dims))
        ident = max(ident, float(np.max(np.abs(out.data - field.data))))
        th = stn.AffineTheta(np.eye(3) + 0.3 * rng.standard_normal((3, 3)), rng.standard_normal(3))
        if abs(np.linalg.det(th.matrix)) < 1e-2:
            th = stn.AffineTheta(np.eye(3), th.translation)
        comp = th.compose(stn.invert_theta(th))
        inv = max(inv, float(np.max(np.abs(comp.matrix - np.eye(3)))), float(np.max(np.abs(comp.translation))))
        a, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
        lin = stn.normalized_lattice(dims) @ a + b
        pos = rng.uniform(-1, 1, (20, 3))
        # axes of length 1 are constant in the field, so compare against the clamped coordinate
        eff = np.where(np.array(dims) == 1, 0.0, pos)
        aff = max(aff, float(np.max(np.abs(stn.interpolate(lin, pos) - (eff @ a + b)))))
    ok = ident <= IDENTITY_TOL and inv < INVERSE_TOL and aff <= AFFINE_TOL
    report(3, "STN exactness", ok, f"identity {ident:.1e} (tol {IDENTITY_TOL:g}), compose-inverse {inv:.1e} "
                                   f"(tol {INVERSE_TOL:g}), affine field {aff:.1e} (tol {AFFINE_TOL:g})")
    assert ok


# 4 ------------------------------------------------------------------------------------------

def test_criterion_04_stgf_identity_collapse():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        dims = tuple(int(v) for v in rng.integers(2, 6, 3))
        n = int(np.prod(dims))
        d = int(rng.integers(1, 5))
        q = VoxelGrid(rng.standard_normal(dims + (d,)), 0.4)
        res = stgf.stgf_apply(q, np.zeros(dims + (0,)), stgf.StgfConfig(k=n, sigma=1e-9),
                              stn.LocNetParams.identity(d), stgf.GcnParams.identity(d))
        worst = max(worst, float(np.max(np.abs(res.output.data - q.data))))
    ok = worst <= COLLAPSE_TOL
    report(4, "ST-GF identity collapse", ok, f"max deviation {worst:.1e} over 10 grids (tol {COLLAPSE_TOL:g})")
    assert ok


# 5 ------------------------------------------------------------------------------------------

def test_criterion_05_attention_invariants():
    rng = np.random.default_rng(5)
    sum_err = 0.0
    dca_exact = single_exact = True
    cam = att.CameraModel(20.0, 20.0, 8.0, 6.0, np.eye(3), np.zeros(3), 16, 12)
    for _ in range(ORACLE_INSTANCES):
        n = int(rng.integers(1, 7))
        field = rng.standard_normal((4, 4, 3, 2))
        p3 = att.AttentionParams.random(2, 2, 3, 2, n, rng, offset_scale=0.1)
        _, w = att.deformable_attention(rng.standard_normal(2), rng.uniform(-1, 1, (n, 3)), field, p3,
                                        return_weights=True)
        sum_err = max(sum_err, abs(float(w.sum()) - 1.0))
        grid = VoxelGrid(field, 0.4)
        _, wd = att.dsa(grid, rng.random((4, 4, 3)), att.AttentionParams.random(2, 2, 2, 2, 6, rng),
                        return_weights=True)
        sum_err = max(sum_err, float(np.max(np.abs(wd.sum(-1) - 1))))
        # one view: the average over visible views is the single attention result
        fmap = rng.standard_normal((6, 8, 3))
        p2 = att.AttentionParams.random(4, 3, 4, 2, n, rng, pos_dim=2, offset_scale=0.1)
        q = rng.standard_normal(4)
        z = rng.uniform(1, 4)
        point = np.array([rng.uniform(-0.35, 0.35) * z, rng.uniform(-0.25, 0.25) * z, z])
        u, v, _ = att.project_to_image(point, cam)
        ref = att.pixel_to_normalized(u, v, cam, fmap.shape)
        da = att.deformable_attention(q, ref + (p2.wp @ q).reshape(n, 2), fmap, p2)
        got, hits = att.dca(q, point, [(fmap, cam)], p2, return_hits=True)
        dca_exact &= hits == 1 and bool(np.array_equal(got, da))
        # one sampling point: the output is V_1
        p1 = att.AttentionParams.random(2, 2, 3, 2, 1, rng)
        pt = rng.uniform(-1, 1, (1, 3))
        v1 = p1.wv @ stn.interpolate(field, pt)[0]
        single_exact &= bool(np.array_equal(att.deformable_attention(rng.standard_normal(2), pt, field, p1), v1))
    ok = sum_err <= SOFTMAX_TOL and dca_exact and single_exact
    report(5, "attention invariants", ok, f"softmax sum err {sum_err:.1e} (tol {SOFTMAX_TOL:g}); "
                                          f"single-view DCA == DA: {dca_exact}; n_points=1 -> V1: {single_exact}")
    assert ok


# 6 ------------------------------------------------------------------------------------------

def test_criterion_06_gav_invariants():
    rng = np.random.default_rng(6)
    const_ok = in_open = monotone = True
    for _ in range(ORACLE_INSTANCES):
        dims = tuple(int(v) for v in rng.integers(1, 9, 3))
        const_ok &= bool(np.all(gav.edge_crossing_count(np.full(dims, rng.uniform(-2, 2)), 0.5).counts == 0))
        counts = rng.integers(0, 13, dims)
        r = gav.resolution_map(counts, rng.uniform(-5, 15), rng.uniform(0.05, 5)).values
        in_open &= bool(np.all((r > 0) & (r < 1)))
        order = np.argsort(counts.ravel(), kind="stable")
        monotone &= bool(np.all(np.diff(r.ravel()[order]) >= 0))
    for c0, s in ((1e6, 1e-3), (-1e6, 1e-3)):
        r = gav.resolution_map(np.array([[[0, 12]]]), c0, s).values
        in_open &= bool(np.all((r > 0) & (r < 1)))
    f = np.broadcast_to(np.arange(4) - 1.5, (4, 4, 4)).astype(float)
    counts = gav.edge_crossing_count(f, 0.0).counts
    half_ok = bool(np.all(counts[:, :, 1] == 4) and np.all(counts[:, :, [0, 2, 3]] == 0))
    ok = const_ok and in_open and monotone and half_ok
    report(6, "GAV invariants", ok, f"constant->0: {const_ok}; R in (0,1): {in_open}; monotone: {monotone}; "
                                    f"half-space 4-edge count: {half_ok}")
    assert ok


# 7 ------------------------------------------------------------------------------------------

def test_criterion_07_toy_overfit(tmp_path):
    runs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        start = time.perf_counter()
        proc = _cli(["--out-dir", str(out), "overfit", "--steps", str(OVERFIT_STEPS), "--step-size", "1.0"],
                    threads=1)
        runs.append((time.perf_counter() - start, proc, out))
    elapsed, proc, out = runs[0]
    assert proc.returncode == 0, proc.stderr
    kv = dict(line.split("=", 1) for line in proc.stdout.splitlines() if "=" in line)
    curve = np.loadtxt(out / "loss_curve.csv", delimiter=",", skiprows=1)
    smoothed = curve[:, 2]
    monotone = bool(np.all(np.diff(smoothed) <= 0))
    miou = float(kv["miou"])
    identical = (runs[0][2] / "loss_curve.csv").read_bytes() == (runs[1][2] / "loss_curve.csv").read_bytes()
    ok = (len(curve) == OVERFIT_STEPS and miou >= OVERFIT_MIOU and monotone and elapsed < OVERFIT_BUDGET_S
          and identical)
    report(7, "toy overfit", ok, f"mIoU {miou:.4f} (>= {OVERFIT_MIOU}); smoothed monotone: {monotone}; "
                                 f"{elapsed:.1f}s single-threaded (budget {OVERFIT_BUDGET_S:g}s); "
                                 f"repeat bit-identical: {identical}")
    assert ok


# 8 ------------------------------------------------------------------------------------------

def test_criterion_08_pipeline_shape_and_determinism(tmp_path):
    scene = tmp_path / "scene"
    gen = _cli(["--seed", "3", "--out-dir", str(scene), "generate", "--random", "4"])
    assert gen.returncode == 0, gen.stderr
    outputs = {}
    for threads in (1, 4):
        out = tmp_path / f"fwd{threads}"
        proc = _cli(["--seed", "7", "--out-dir", str(out), "forward", "--scene", str(scene)], threads=threads)
        assert proc.returncode == 0, proc.stderr
        outputs[threads] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    y = read_grid(tmp_path / "fwd1" / "stage2_logits.vxg")
    channels = y.data.shape[-1]
    same = outputs[1] == outputs[4] and len(outputs[1]) >= 5
    ok = channels == 20 and same
    report(8, "pipeline shape and determinism", ok, f"stage-2 channels {channels} (want 20); "
                                                    f"{len(outputs[1])} output files byte-identical across 1 and 4 "
                                                    f"threads: {same}")
    assert ok


# 9 ------------------------------------------------------------------------------------------

def _same_report(a, b):
    da, db = a.as_dict(), b.as_dict()
    da.pop("range")
    db.pop("range")
    return da.keys() == db.keys() and all(
        (isinstance(x, float) and math.isnan(x) and math.isnan(db[k])) or x == db[k] for k, x in da.items())


def test_criterion_09_ranged_evaluation():
    rng = np.random.default_rng(9)
    ok_all = True
    for trial in range(10):
        spec = random_scene_spec((16, 8, 4), 0.4, 4, seed=trial)
        _, gt, _, _ = generate_scene(spec)
        noisy = np.where(rng.random(gt.dims) < 0.2, rng.integers(0, 20, gt.dims), gt.labels).astype(np.uint8)
        pred = SemanticGrid(noisy, 20)
        extent = 16 * 0.4
        ranges = [extent / 4, extent / 2, extent]
        reps = metrics.ranged_eval(pred, gt, ranges, 0.4, forward_axis=0)
        full_ok = _same_report(reps[-1], metrics.semantic_miou(pred, gt))
        crop_ok = True
        for r, rep in zip(ranges[:-1], reps[:-1]):
            n = int(round(r / 0.4))
            manual = metrics.semantic_miou(SemanticGrid(pred.labels[:n], 20), SemanticGrid(gt.labels[:n], 20))
            crop_ok &= _same_report(rep, manual)
        ok_all &= full_ok and crop_ok
    report(9, "ranged evaluation", ok_all, "full range == unranged and quarter/half == manual crops, "
                                           f"exact match on 10 scenes: {ok_all}")
    assert ok_all


# 10 -----------------------------------------------------------------------------------------

def _random_grid(rng, kind):
    dims = tuple(int(v) for v in rng.integers(1, 9, 3))
    if kind == 0:
        data = rng.standard_normal(dims + (int(rng.integers(1, 5)),)).astype(np.float32).astype(np.float64)
        return VoxelGrid(data, float(np.float32(rng.uniform(0.05, 2))), tuple(rng.standard_normal(3)))
    if kind == 1:
        return OccupancyGrid((rng.random(dims) < 0.5).astype(np.uint8))
    nc = int(rng.integers(2, 30))
    labels = rng.integers(0, nc, dims).astype(np.uint8)
    labels[rng.random(dims) < 0.1] = 255
    return SemanticGrid(labels, nc)


def test_criterion_10_file_format_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    exact = True
    for kind in range(3):
        for i in range(ROUND_TRIPS):
            g = _random_grid(rng, kind)
            path = tmp_path / f"g{kind}_{i}.bin"
            write_grid(path, g)
            back = read_grid(path)
            if isinstance(g, VoxelGrid):
                same = (np.array_equal(back.data, g.data) and back.voxel_size == g.voxel_size
                        and back.origin == g.origin)
            elif isinstance(g, OccupancyGrid):
                same = np.array_equal(back.data, g.data)
            else:
                same = np.array_equal(back.labels, g.labels) and back.num_classes == g.num_classes
            exact &= bool(same) and encode_grid(back) == path.read_bytes()
    base = encode_grid(SemanticGrid(np.ones((4, 4, 2), dtype=np.uint8), 20))
    corruptions = {
        "magic": b"XXX1" + base[4:],
        "truncated header": base[:10],
        "dims vs payload": base[:4] + struct.pack("<4I", 4, 4, 3, 20) + base[20:],
        "zero dim": base[:4] + struct.pack("<4I", 0, 4, 2, 20) + base[20:],
        "num_classes": base[:4] + struct.pack("<4I", 4, 4, 2, 0) + base[20:],
    }
    codes = {}
    for name, buf in corruptions.items():
        path = tmp_path / f"bad_{name.replace(' ', '_')}.vxl"
        path.write_bytes(buf)
        proc = _cli(["--out-dir", str(tmp_path / "e"), "eval", "--pred", str(path), "--gt", str(path)])
        codes[name] = proc.returncode
    rejected = all(c == 2 for c in codes.values())
    ok = exact and rejected
    report(10, "file-format round trips", ok, f"{3 * ROUND_TRIPS} grids bit-exact: {exact}; corrupted headers "
                                              f"exit codes {codes}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
