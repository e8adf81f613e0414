"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 bad input data or
file format, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gav, grid, losses, metrics, stn
from .attention import AttentionParams, dsa, read_cameras, write_cameras
from .errors import ConfigError, FormatError, InvalidArgumentError, SSCError, stage
from .pipeline import config as pconfig
from .pipeline import harness, model
from .stgf import GcnParams, stgf_apply

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected h,w,z integers, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected three dims, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxssc", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--config", type=Path, default=None, help="flat section.key=value file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="single config override; repeatable")
    p.add_argument("--out-dir", type=Path, default=Path("voxssc_out"))
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="rasterize a synthetic scene")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--spec", type=Path, help="JSON scene spec")
    src.add_argument("--random", type=int, metavar="N", help="random scene with N primitives (default 4)")
    g.add_argument("--dims", type=_dims, default=None)
    g.add_argument("--voxel-size", type=float, default=None)

    f = sub.add_parser("forward", help="run the two-stage pipeline")
    f.add_argument("--scene", type=Path, help="directory written by 'generate'")
    f.add_argument("--depth", type=Path, help="depth image grid (overrides the scene's)")
    f.add_argument("--cameras", type=Path, help="camera file (overrides the scene's)")

    s = sub.add_parser("stgf", help="spatial transform + graph fusion on one feature grid")
    s.add_argument("--features", type=Path, required=True)
    s.add_argument("--depth", type=Path, help="one-channel depth grid; zeros when omitted")

    v = sub.add_parser("gav", help="complexity and resolution maps of a field")
    v.add_argument("--field", type=Path, required=True)
    v.add_argument("--channel", type=int, default=0)

    a = sub.add_parser("attend", help="resolution-adaptive self-attention on one feature grid")
    a.add_argument("--features", type=Path, required=True)
    a.add_argument("--resolution", type=Path, help="resolution grid; derived from channel 0 when omitted")

    e = sub.add_parser("eval", help="completion metrics")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--ranges", type=str, default=None, help='e.g. "12.8,25.6,51.2" (metres)')
    e.add_argument("--voxel-size", type=float, default=None)
    e.add_argument("--forward-axis", type=int, default=0, choices=(0, 1, 2))

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--subject", default="all", help=f"one of {', '.join(harness.SUBJECTS)} or 'all'")
    c.add_argument("--trials", type=int, default=50)

    o = sub.add_parser("overfit", help="optimize free logits on a toy scene")
    o.add_argument("--spec", type=Path, help="JSON scene spec; a centered sphere when omitted")
    o.add_argument("--steps", type=int, default=500)
    o.add_argument("--step-size", type=float, default=1.0)
    return p


def _load_config(args) -> pconfig.PipelineConfig:
    cfg = pconfig.load_config(args.config) if args.config else pconfig.PipelineConfig()
    pairs = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return pconfig.apply_overrides(cfg, pairs) if pairs else cfg


def _read(path: Path, kind=None):
    with stage(f"read {path}"):
        return grid.read_grid(path, kind)


def _write(out: Path, name: str, g) -> None:
    grid.write_grid(out / name, g)


def _emit(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)
    sys.stdout.write(text)


def _read_spec(path: Path) -> grid.SceneSpec:
    with stage(f"read {path}"):
        try:
            return grid.SceneSpec.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"invalid scene spec: {exc}") from None


def cmd_generate(args, cfg, out):
    if args.spec:
        spec = _read_spec(args.spec)
    else:
        spec = grid.random_scene_spec(args.dims or cfg.grid.dims, args.voxel_size or cfg.grid.voxel_size,
                                      4 if args.random is None else args.random, seed=cfg.seed,
                                      num_classes=cfg.grid.num_classes)
    occ, sem, cam, depth = grid.generate_scene(spec)
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    _write(out, "occupancy.vxo", occ)
    _write(out, "labels.vxl", sem)
    _write(out, "depth.vxg", grid.VoxelGrid(depth[:, :, None, None], 1.0))
    write_cameras(out / "cameras.txt", [cam])
    _emit(out, "generate.txt", f"dims={','.join(map(str, spec.dims))}\noccupied={occ.count()}\n"
                               f"depth_valid_pixels={int(np.count_nonzero(depth > 0))}\n")


def cmd_forward(args, cfg, out):
    origin = (0.0, 0.0, 0.0)
    depth_path, cam_path = args.depth, args.cameras
    if args.scene:
        spec_path = args.scene / "scene.json"
        if spec_path.exists():
            spec = _read_spec(spec_path)
            origin = spec.origin
            cfg = pconfig.apply_overrides(cfg, {"grid.dims": ",".join(map(str, spec.dims)),
                                                "grid.voxel_size": repr(spec.voxel_size),
                                                "grid.num_classes": str(spec.num_classes)})
        depth_path = depth_path or args.scene / "depth.vxg"
        cam_path = cam_path or args.scene / "cameras.txt"
    if depth_path is None or cam_path is None:
        raise UsageError("forward needs --scene or both --depth and --cameras")
    depth = _read(depth_path, grid.VoxelGrid)
    with stage(f"read {cam_path}"):
        cams = read_cameras(cam_path)
    if depth.dims[2:] != (1,) or depth.feature_dim != 1:
        raise InvalidArgumentError(f"{depth_path}: depth image grid must be (H, W, 1, 1), got {depth.data.shape}")
    params = model.init_params(cfg)
    res = model.forward_from_depth(depth.data[:, :, 0, 0], cams[0], params, cfg, origin)
    _write(out, "stage1_logits.vxg", res.stage1_logits)
    _write(out, "stage2_logits.vxg", res.stage2_logits)
    _write(out, "labels.vxl", res.labels())
    _write(out, "proposals.vxo", res.occupancy)
    vs = cfg.low_voxel_size
    _write(out, "complexity.vxg", grid.VoxelGrid(res.complexity.counts[..., None].astype(float), vs, origin))
    _write(out, "resolution.vxg", grid.VoxelGrid(res.resolution.values[..., None], vs, origin))
    _write_thetas(out / "thetas.txt", res.stgf.graph.thetas)
    y = res.stage2_logits.data
    _emit(out, "forward.txt", f"output_dims={','.join(map(str, y.shape))}\nproposals={len(res.proposals)}\n"
                              f"clusters={res.stgf.graph.k}\nvisible_queries={int(np.count_nonzero(res.hits))}\n")


def _write_thetas(path: Path, thetas: np.ndarray) -> None:
    path.write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in thetas))


def cmd_stgf(args, cfg, out):
    q = _read(args.features, grid.VoxelGrid)
    d = _read(args.depth, grid.VoxelGrid) if args.depth else np.zeros(q.dims + (1,))
    rng = np.random.default_rng(cfg.seed)
    dd = d.feature_dim if isinstance(d, grid.VoxelGrid) else 1
    locnet = stn.LocNetParams.identity(q.feature_dim + dd, cfg.stgf.locnet_scale, rng)
    gcn = GcnParams.random(q.feature_dim + dd, q.feature_dim, cfg.stgf.gcn_layers, rng)
    res = stgf_apply(q, d, cfg.stgf.core(), locnet, gcn)
    _write(out, "stgf_output.vxg", res.output)
    _write(out, "warped.vxg", res.warped)
    _write_thetas(out / "thetas.txt", res.graph.thetas)
    g = res.graph
    idx = np.argwhere(np.ones(q.dims, dtype=bool))
    (out / "clusters.csv").write_text("i,j,k,cluster\n" + "".join(
        f"{i},{j},{k},{c}\n" for (i, j, k), c in zip(idx, g.assignments)))
    if g.k <= grid.IGNORE_LABEL:  # a label file holds at most 255 classes; clusters.csv always has them
        _write(out, "assignments.vxl", grid.SemanticGrid(g.assignments.reshape(q.dims).astype(np.uint8), g.k))
    (out / "connection.csv").write_text("".join(",".join(repr(float(v)) for v in row) + "\n"
                                                for row in g.connection))
    edges = losses.continuity_edges(g.connection, cfg.loss.spatial_pairing, cfg.loss.w_threshold)
    spatial = losses.spatial_continuity_loss(g.node_positions, g.transformed_positions(), edges).value
    _emit(out, "stgf.txt", f"clusters={g.k}\nkmeans_iterations={len(g.inertia_history)}\n"
                           f"inertia={float(g.inertia_history[-1])!r}\ncontinuity_edges={len(edges)}\n"
                           f"spatial_continuity={spatial!r}\n")


def cmd_gav(args, cfg, out):
    f = _read(args.field, grid.VoxelGrid)
    if not 0 <= args.channel < f.feature_dim:
        raise UsageError(f"--channel {args.channel} out of range for {f.feature_dim} channels")
    cx = gav.edge_crossing_count(f.data[..., args.channel], cfg.gav.iso)
    r = gav.resolution_map(cx, cfg.gav.c0, cfg.gav.s)
    _write(out, "complexity.vxg", f.with_data(cx.counts[..., None].astype(float)))
    _write(out, "resolution.vxg", f.with_data(r.values[..., None]))
    hist = np.bincount(cx.counts.ravel(), minlength=gav.MAX_CROSSINGS + 1)
    _emit(out, "gav.txt", f"max_complexity={int(cx.counts.max())}\nmean_resolution={float(r.values.mean())!r}\n"
                          f"complexity_histogram={','.join(map(str, hist))}\n")


def cmd_attend(args, cfg, out):
    f = _read(args.features, grid.VoxelGrid)
    if args.resolution:
        rg = _read(args.resolution, grid.VoxelGrid)
        if rg.dims != f.dims or rg.feature_dim != 1:
            raise InvalidArgumentError(f"resolution grid {rg.data.shape} does not match features {f.dims}")
        r = rg.data[..., 0]
    else:
        r = gav.resolution_map(gav.edge_crossing_count(f.data[..., 0], cfg.gav.iso), cfg.gav.c0, cfg.gav.s).values
    rng = np.random.default_rng(cfg.seed)
    d = f.feature_dim
    params = AttentionParams.random(d, d, d, cfg.attn.d_k, cfg.gav.n_points, rng,
                                    offset_scale=cfg.attn.offset_scale, query_source=cfg.attn.query_source)
    refined, weights = dsa(f, r, params, delta=cfg.gav.delta_value(), return_weights=True)
    _write(out, "dsa_output.vxg", refined)
    _emit(out, "attend.txt", f"n_points={params.n_points}\n"
                             f"max_weight_sum_error={float(np.abs(weights.sum(-1) - 1).max())!r}\n")


def cmd_eval(args, cfg, out):
    pred = _read(args.pred)
    gt = _read(args.gt)
    if type(pred) is not type(gt) or isinstance(pred, grid.VoxelGrid):
        raise InvalidArgumentError("--pred and --gt must both be label (VXL1) or both occupancy (VXO1) files")
    if isinstance(gt, grid.OccupancyGrid):
        iou, prec, rec = metrics.occupancy_scores(pred, gt)
        _emit(out, "eval.txt", f"iou={iou}\nprecision={prec}\nrecall={rec}\n")
        return
    vs = args.voxel_size if args.voxel_size is not None else cfg.grid.voxel_size
    reports = [metrics.semantic_miou(pred, gt)]
    if args.ranges:
        reports += metrics.ranged_eval(pred, gt, metrics.parse_ranges(args.ranges), vs, args.forward_axis)
    (out / "eval.csv").write_text(metrics.reports_to_csv(reports, gt.num_classes - 1))
    _emit(out, "eval.txt", "".join(r.to_kv() for r in reports))


def cmd_gradcheck(args, cfg, out):
    subjects = list(harness.SUBJECTS) if args.subject == "all" else [args.subject]
    unknown = [s for s in subjects if s not in harness.SUBJECTS]
    if unknown:
        raise UsageError(f"unknown gradcheck subject {unknown[0]!r}; valid subjects: "
                         f"{', '.join(harness.SUBJECTS)}, all")
    reports = [harness.gradcheck(s, args.trials, cfg.seed) for s in subjects]
    ok = all(r.passed for r in reports)
    _emit(out, "gradcheck.txt", "".join(r.to_kv() for r in reports) + f"gradcheck.pass={str(ok).lower()}\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_overfit(args, cfg, out):
    spec = _read_spec(args.spec) if args.spec else grid.toy_sphere_spec()
    res = harness.overfit_toy(spec, args.steps, args.step_size, cfg.loss)
    sm = res.smoothed()
    (out / "loss_curve.csv").write_text("step,loss,smoothed\n" + "".join(
        f"{i},{float(v)!r},{float(s)!r}\n" for i, (v, s) in enumerate(zip(res.losses, sm))))
    monotone = bool(np.all(np.diff(sm) <= 0))
    _emit(out, "overfit.txt", f"steps={len(res.losses)}\nfirst_loss={float(res.losses[0])!r}\n"
                              f"final_loss={float(res.losses[-1])!r}\nsmoothed_monotone={str(monotone).lower()}\n"
                              + res.report.to_kv())


COMMANDS = {
    "generate": cmd_generate, "forward": cmd_forward, "stgf": cmd_stgf, "gav": cmd_gav,
    "attend": cmd_attend, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "overfit": cmd_overfit,
}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        with stage(args.command):
            code = COMMANDS[args.command](args, cfg, args.out_dir)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SSCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
