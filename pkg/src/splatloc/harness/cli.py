"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .. import gradcheck, photometry
from ..errors import ConfigError, SplatlocError
from ..geometry import CameraPose, Intrinsics
from ..initializer import Query, SearchConfig, make_backend, run_phase2
from ..refiner import RefineConfig, refine_pose
from ..renderer import render
from ..retrieval import build_database, compute_descriptor, load_database, retrieve_topk, save_database
from ..scene import Layout, SceneRecipe, load_ply, save_ply
from .config import ExperimentConfig, config_from_dict, load_config
from .experiment import (
    format_table,
    load_trajectory,
    phase2_candidates,
    prepare_workspace,
    query_image,
    run_ablation,
    run_experiment,
    save_trajectory,
)
from .metrics import pose_errors

log = logging.getLogger("splatloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def save_png(path, image: np.ndarray) -> None:
    """8-bit PNG by direct quantization of [0, 1] values."""
    a = np.asarray(image, dtype=np.float64)
    q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    layout = Layout.TEXTURED_BOX_ROOM if args.recipe == "default" else Layout(args.recipe)
    recipe = SceneRecipe(layout=layout, primitive_count=args.primitives, seed=args.seed,
                         trajectory_length=args.trajectory_length)
    cfg = config_from_dict({"seed": args.seed, "camera": {"width": args.size, "height": args.size}})
    cfg = cfg.replace(recipe=recipe)
    if args.queries:
        cfg = cfg.replace(split=dataclasses.replace(cfg.split, max_queries=args.queries))
    ws = prepare_workspace(cfg)
    out = Path(args.out)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    save_ply(ws.clean_scene, out / "scene.ply")
    queries = []
    for qid, frame in enumerate(ws.query_frames):
        name = f"queries/q_{qid:04d}.png"
        save_png(out / name, query_image(ws, cfg, frame, qid))
        queries.append({"query_id": qid, "frame": frame, "image": name,
                        "gt_pose": ws.query_poses[frame].to_json()})
    save_trajectory(out / "trajectory.json", ws.trajectory, ws.K,
                    reference_frames=ws.reference_frames, queries=queries)
    print(f"wrote {len(ws.clean_scene)} primitives, {len(ws.trajectory)} poses, "
          f"{len(queries)} queries to {out}")
    return 0


def _scene_and_trajectory(args):
    scene = load_ply(args.ply)
    poses, K = load_trajectory(args.trajectory)
    if K is None:
        K = Intrinsics.from_fov(args.size, args.size, args.fov)
    data = json.loads(Path(args.trajectory).read_text())
    return scene, poses, K, data


def cmd_build_db(args) -> int:
    scene, poses, K, data = _scene_and_trajectory(args)
    frames = data.get("reference_frames", list(range(len(poses))))
    refs = [(render(scene, poses[i], K).rgb, poses[i]) for i in frames]
    db = build_database(refs, scene, args.augment, K, scene_ref=scene.name)
    save_database(db, args.out)
    print(f"wrote {len(db)} entries ({len(refs)} real) to {args.out}")
    return 0


def _localize_one(scene, db, K, image, query_id, gt, args, search, refine, backend):
    query = Query(image, K, query_id, gt)
    desc = compute_descriptor(image)
    top = retrieve_topk(db, desc, 1)[0]
    rec = {"query_id": query_id, "status": "ok", "poses": {"1": top.entry.pose.to_json()}}
    pose = top.entry.pose
    try:
        if args.phases in ("1+2", "1+2+3"):
            pose, _ = run_phase2(query, phase2_candidates(db, desc, args.k), scene, search, backend)
            rec["poses"]["1+2"] = pose.to_json()
        if args.phases == "1+2+3":
            pose, trace = refine_pose(scene, image, pose, K, refine)
            rec["poses"]["1+2+3"] = pose.to_json()
            rec["iterations"] = trace.iterations_used
            if args.mask_png and refine.mask_enabled:
                mask = photometry.mask_from_render(render(scene, trace.poses[0], K).rgb,
                                                   refine.patch_size, refine.tau_policy,
                                                   refine.min_keep_fraction)
                path = Path(args.mask_png)
                if args.batch:
                    path = path.with_name(f"{path.stem}_{query_id:04d}{path.suffix}")
                save_png(path, mask.mask.astype(np.float64))
    except SplatlocError as exc:
        rec["status"] = f"failed: {type(exc).__name__}: {exc}"
    rec["pose"] = pose.to_json()
    if gt is not None:
        rec["errors"] = {p: list(pose_errors(CameraPose.from_json(v), gt))
                         for p, v in rec["poses"].items()}
    return rec


def cmd_localize(args) -> int:
    scene, poses, K, data = _scene_and_trajectory(args)
    db = load_database(args.db)
    search = SearchConfig()
    refine = RefineConfig(mask_enabled=not args.no_mask)
    backend = make_backend(args.backend, sigma_rot_deg=args.sigma_rot, seed=args.seed)
    base = Path(args.trajectory).parent
    if args.query:
        gt = CameraPose.from_json(json.loads(Path(args.gt_pose).read_text())) if args.gt_pose else None
        jobs = [(0, Path(args.query), gt)]
        args.batch = False
    else:
        jobs = [(q["query_id"], base / q["image"], CameraPose.from_json(q["gt_pose"]) if "gt_pose" in q else None)
                for q in data.get("queries", [])]
        if not jobs:
            raise ConfigError("no --query given and the trajectory file lists no queries")
        args.batch = True
    out = open(args.out, "w") if args.out else sys.stdout
    failed = 0
    try:
        for qid, path, gt in jobs:
            image = load_png(path)
            if image.shape[:2] != K.shape:
                raise SplatlocError(f"{path}: image size {image.shape[:2]} does not match {K.shape}")
            rec = _localize_one(scene, db, K, image, qid, gt, args, search, refine, backend)
            failed += rec["status"] != "ok"
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if failed == len(jobs):
        raise SplatlocError("every query failed to localize")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.workers:
        cfg = cfg.replace(workers=args.workers)
    if args.out:
        cfg = cfg.replace(output_dir=args.out)
    if args.max_queries is not None:
        cfg = cfg.replace(split=dataclasses.replace(cfg.split, max_queries=args.max_queries))
    return cfg


def cmd_eval(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg)
    print(format_table(report), end="")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    report = run_ablation(cfg, args.what)
    print(format_table(report), end="")
    for row in report.retrieval:
        print(f"{row[0]}: database {row[1]} entries ({row[2]} real, {row[3]} synthetic), "
              f"mean top-1 center distance {row[4]:.4f}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_grad_check(args) -> int:
    report = gradcheck.run_suite(args.cases, args.seed, args.layout, args.mode)
    names = " ".join(f"{c:>10}" for c in gradcheck.COMPONENTS)
    print(f"{'seed':>5} {names}  ok")
    for seed, r in report.results:
        errs = " ".join(f"{e:10.2e}" for e in r.rel_error)
        print(f"{seed:>5} {errs}  {'yes' if r.passed else 'NO'}")
    if report.skipped:
        print(f"skipped (depth order changes inside the stencil): {report.skipped}")
    print(f"cases {len(report.results)}  passed {sum(r.passed for _, r in report.results)}  "
          f"max relative error {report.max_rel_error:.3e}")
    if not report.passed:
        raise SplatlocError("gradient check failed")
    return 0


def cmd_trace_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise SplatlocError(f"{args.csv}: no rows")
    cols = list(rows[0])
    x = "iter" if "iter" in cols else "iteration" if "iteration" in cols else cols[0]
    ys = args.y or [c for c in cols if c not in (x, "scenario", "lr")]
    groups = sorted({r.get("scenario", "") for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for g in groups:
        sub = [r for r in rows if r.get("scenario", "") == g]
        xs = [float(r[x]) for r in sub]
        for y in ys:
            label = f"{g} {y}".strip()
            ax.plot(xs, [float(r[y]) for r in sub], label=label)
    ax.set_xlabel(x)
    if args.log:
        ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatloc", description="Localize images against a Gaussian-splat scene.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene, trajectory and query images")
    s.add_argument("--recipe", default="default",
                   choices=["default"] + [layout.value for layout in Layout])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="synth")
    s.add_argument("--primitives", type=int, default=5000)
    s.add_argument("--trajectory-length", type=int, default=150)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--queries", type=int, default=0, help="cap on query images (0 = all)")
    s.set_defaults(func=cmd_synth)

    def scene_args(sp):
        sp.add_argument("--ply", required=True)
        sp.add_argument("--trajectory", required=True, help="trajectory JSON written by synth")
        sp.add_argument("--size", type=int, default=128, help="used when the JSON has no intrinsics")
        sp.add_argument("--fov", type=float, default=60.0)

    s = sub.add_parser("build-db", help="render references and write a pose database")
    scene_args(s)
    s.add_argument("--out", default="db.sldb")
    s.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("localize", help="localize one query image or every query in the trajectory file")
    scene_args(s)
    s.add_argument("--db", required=True)
    s.add_argument("--query", help="PNG image; omit to run all queries listed in the trajectory file")
    s.add_argument("--gt-pose", help="pose JSON file, needed by the oracle backends")
    s.add_argument("--phases", default="1+2+3", choices=["1", "1+2", "1+2+3"])
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--backend", default="oracle_noise", choices=["oracle_noise", "ncc_matcher"])
    s.add_argument("--sigma-rot", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-mask", action="store_true")
    s.add_argument("--mask-png", help="write the frozen reliability mask (0/255) here")
    s.add_argument("--out", help="JSONL output (default stdout)")
    s.set_defaults(func=cmd_localize)

    for name, func, helptext in (("eval", cmd_eval, "run a full experiment from a TOML config"),
                                 ("ablate", cmd_ablate, "run an ablation from a TOML config")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--workers", type=int)
        s.add_argument("--out", help="override output_dir")
        s.add_argument("--max-queries", type=int)
        if name == "ablate":
            s.add_argument("--what", required=True, choices=["mask", "phases", "dbaug"])
        s.set_defaults(func=func)

    s = sub.add_parser("grad-check", help="finite-difference check of the pose gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cases", type=int, default=20)
    s.add_argument("--layout", default=Layout.RANDOM_BLOBS.value, choices=[x.value for x in Layout])
    s.add_argument("--mode", default="active", choices=["active", "raw"])
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("trace-plot", help="plot a trace or curve CSV as SVG")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--y", nargs="*", help="columns to plot (default: all numeric)")
    s.add_argument("--log", action="store_true", help="log-scale y axis")
    s.set_defaults(func=cmd_trace_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SplatlocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
