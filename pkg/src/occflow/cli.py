"""Command-line entry point: ``occflow <command> ...``.

Exit status is 0 on success, 1 for usage or validation problems and 2 for
failures while running.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluation import induced_pixel_flow, lidar_query_rays, render_views
from .geometry import Camera
from .metrics import EmptyEvalSet, RayIouConfig, depth_metrics, mave, ray_iou, scene_flow_metrics
from .render import RenderParams

METRIC_GROUPS = ("depth", "rayiou", "sceneflow", "mave")

log = logging.getLogger("occflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="occflow", description="Self-supervised occupancy and flow fitting on posed camera sequences.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render the standard synthetic scene into a workspace")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="fit SDF and flow grids to a workspace")
    f.add_argument("--workspace", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--stage1-only", action="store_true", help="skip the flow stage; the flow grid stays zero")
    f.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score fitted grids against the workspace reference")
    e.add_argument("--workspace", required=True)
    e.add_argument("--sdf", required=True)
    e.add_argument("--flow", required=True)
    e.add_argument("--metrics", default=",".join(METRIC_GROUPS))
    e.add_argument("--config", help="run config (render settings, stereo baseline)")
    e.add_argument("--out", help="metrics file (default: <workspace>/metrics.txt)")

    r = sub.add_parser("render", help="render depth, flow and weight-sum maps for one camera")
    r.add_argument("--workspace", required=True, help="workspace providing cameras and poses")
    r.add_argument("--sdf", required=True)
    r.add_argument("--flow", required=True)
    r.add_argument("--camera", required=True, help="camera name or index")
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True, help="output prefix")
    r.add_argument("--samples", type=int, default=128)

    k = sub.add_parser("kernels", help="fusion kernel utilities")
    ksub = k.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ksub.add_parser("selftest", help="check every kernel against its brute-force oracle")
    return p


# ----------------------------------------------------------------- commands

def cmd_synth(args):
    from .synth import render_gt_views, standard_scene, voxelize

    cfg = io.load_config(args.config)
    spec = cfg.grid.spec()
    scene = standard_scene()
    frames, truth = render_gt_views(scene, sigma_cue=cfg.sigma_cue, seed=cfg.seed)
    sdf, flow = voxelize(scene, spec, scene.key_frame)
    ref = io.ReferenceData(truth.depth, truth.hit, truth.flow, sdf, flow)
    out = io.save_workspace(args.out, frames, spec, scene.key_frame, ref)
    io.save_config(Path(out) / "config.json", cfg)
    print(f"wrote workspace {out} ({frames.num_frames} frames, {len(frames.cameras)} cameras)")


def cmd_fit(args):
    from .grid import ScalarField, VectorField
    from .optim import fit_two_stage

    ws = io.load_workspace(args.workspace)
    cfg = io.load_config(args.config)
    fit_cfg = cfg.fit.replace(key_frame=ws.key_frame)
    result = fit_two_stage(ws.frames, ws.spec, fit_cfg, cfg.loss, stage1_only=args.stage1_only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_grid(out / "sdf.occf", ScalarField(ws.spec, result.sdf.values))
    io.save_grid(out / "flow.occf", VectorField(ws.spec, result.flow.values))
    (out / "loss.log").write_text("".join(row + "\n" for row in result.log))
    print(f"wrote {out / 'sdf.occf'}, {out / 'flow.occf'} and {out / 'loss.log'}")


def _render_params(args, ws):
    if getattr(args, "config", None):
        cfg = io.load_config(args.config)
        return RenderParams(max(cfg.render.n_samples, 128), cfg.render.xi, False), cfg.stereo_baseline
    return RenderParams.for_grid(ws.spec, 128), io.RunConfig().stereo_baseline


def evaluate_workspace(ws, sdf, flow, groups, params, baseline):
    """Metric dict for the key frame of a workspace with reference data."""
    from .evaluation import occupancy_from_sdf

    ref = ws.reference
    if ref is None:
        raise io.ManifestError(f"{ws.root}: workspace has no reference data to evaluate against")
    key = ws.key_frame
    frames = ws.frames
    T_rel = frames.relative_pose(key, key + 1)
    metrics = {}
    views = render_views(sdf, flow, frames, key, params)
    if "depth" in groups:
        pred = np.concatenate([v["depth"][ref.hit[key, c]] for c, v in enumerate(views)])
        gt = np.concatenate([ref.depth[key, c][ref.hit[key, c]] for c in range(len(views))])
        metrics.update(depth_metrics(pred, gt))
    if "sceneflow" in groups:
        pd, pf, gd, gf, fg, ok = [], [], [], [], [], []
        for c, cam in enumerate(frames.cameras):
            induced, valid = induced_pixel_flow(views[c]["depth"], views[c]["flow"], cam, T_rel)
            pd.append(views[c]["depth"])
            pf.append(induced)
            gd.append(ref.depth[key, c])
            gf.append(ref.flow[key, c])
            fg.append(frames.movable_masks[key, c] & ref.hit[key, c] if frames.movable_masks is not None
                      else np.zeros_like(valid))
            ok.append(valid & ref.hit[key, c])
        focal = float(frames.cameras[0].intrinsics.K[0, 0])
        metrics.update(scene_flow_metrics(np.stack(pd), np.stack(pf), np.stack(gd), np.stack(gf), np.stack(fg),
                                          focal, baseline, valid=np.stack(ok)))
    if "rayiou" in groups or "mave" in groups:
        if ref.sdf is None:
            raise io.ManifestError(f"{ws.root}: reference SDF grid missing")
        pred_occ = occupancy_from_sdf(sdf)
        gt_occ = occupancy_from_sdf(ref.sdf)
        if "rayiou" in groups:
            if frames.lidar is None:
                raise io.ManifestError(f"{ws.root}: RayIoU needs LiDAR query rays")
            origins, dirs = lidar_query_rays(frames, key)
            ri = ray_iou(pred_occ, gt_occ, origins, dirs, RayIouConfig())
            for th, v in zip(ri["thresholds"], ri["iou"]):
                metrics[f"ray_iou@{th:g}m"] = v
            metrics["ray_iou"] = ri["ray_iou"]
        if "mave" in groups:
            if ref.flow_field is None:
                raise io.ManifestError(f"{ws.root}: reference flow grid missing")
            moving = np.linalg.norm(ref.flow_field.values, axis=-1) > 0
            v = mave(flow.values, ref.flow_field.values, pred_occ, gt_occ, frames.frame_interval, movable=moving)
            metrics["mave"] = float("nan") if v is None else v
    return metrics


def _load_fields(args, ws):
    from .grid import ScalarField, VectorField

    sdf = io.load_grid(args.sdf)
    flow = io.load_grid(args.flow)
    if not isinstance(sdf, ScalarField) or not isinstance(flow, VectorField) or flow.values.shape[-1] != 2:
        raise io.DimensionMismatch("expected a one-channel SDF grid and a two-channel flow grid")
    if ws is not None and (sdf.spec != ws.spec or flow.spec != ws.spec):
        raise io.DimensionMismatch("grid geometry does not match the workspace grid")
    return sdf, flow


def cmd_eval(args):
    groups = [g.strip() for g in args.metrics.split(",") if g.strip()]
    bad = sorted(set(groups) - set(METRIC_GROUPS))
    if bad or not groups:
        raise UsageError(f"unknown metric group(s) {', '.join(bad)}; choose from {', '.join(METRIC_GROUPS)}")
    ws = io.load_workspace(args.workspace)
    sdf, flow = _load_fields(args, ws)
    params, baseline = _render_params(args, ws)
    metrics = evaluate_workspace(ws, sdf, flow, groups, params, baseline)
    text = "".join(f"{k} {v:.6g}\n" for k, v in metrics.items())
    out = Path(args.out) if args.out else ws.root / "metrics.txt"
    out.write_text(text)
    with open(ws.root / "log.txt", "a") as fh:
        fh.write(f"# eval {args.sdf} {args.flow}\n" + text)
    sys.stdout.write(text)


def cmd_render(args):
    ws = io.load_workspace(args.workspace)
    sdf, flow = _load_fields(args, ws)
    frames = ws.frames
    if not 0 <= args.frame < frames.num_frames:
        raise UsageError(f"frame {args.frame} outside 0..{frames.num_frames - 1}")
    names = [c.name for c in frames.cameras]
    if args.camera in names:
        c = names.index(args.camera)
    elif args.camera.isdigit() and int(args.camera) < len(names):
        c = int(args.camera)
    else:
        raise UsageError(f"unknown camera {args.camera!r}; available: {', '.join(names)}")
    cam = frames.cameras[c]
    # grids live in the key frame's ego coordinates
    to_key = frames.relative_pose(args.frame, ws.key_frame)
    placed = Camera(cam.name, cam.intrinsics, to_key @ cam.extrinsic)
    from .render import render_tile

    W, H = frames.image_size
    params = RenderParams.for_grid(ws.spec, args.samples)
    depth, ego_flow, wsum = render_tile(sdf, flow, placed, (0, 0, W, H), params)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.save_pfm(f"{prefix}_depth.pfm", depth)
    io.save_pfm(f"{prefix}_weight.pfm", wsum)
    written = [f"{prefix}_depth.pfm", f"{prefix}_weight.pfm"]
    if args.frame + 1 < frames.num_frames:
        rot = to_key.inverse().rotation[:2, :2]
        ego_flow = ego_flow @ rot.T
        pix, _ = induced_pixel_flow(depth, ego_flow, cam, frames.relative_pose(args.frame, args.frame + 1))
        io.save_flo(f"{prefix}_flow.flo", pix)
        written.append(f"{prefix}_flow.flo")
    print("wrote " + ", ".join(written))


def cmd_kernels(args):
    from .kernels import selftest

    results = selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise RuntimeError("kernel self-test failed")


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "eval": cmd_eval, "render": cmd_render, "kernels": cmd_kernels}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (io.WorkspaceError, io.ConfigError, EmptyEvalSet, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
