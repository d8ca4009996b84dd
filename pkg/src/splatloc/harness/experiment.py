"""End-to-end localization benchmark: retrieval, initialization, refinement."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SplatlocError
from ..geometry import CameraPose, Intrinsics, so3_exp
from ..initializer import Query, make_backend, run_phase2
from ..refiner import RefineConfig, refine_pose
from ..renderer import render
from ..retrieval import (
    PoseDatabase,
    Source,
    build_database,
    compute_descriptor,
    retrieve_partitioned,
    retrieve_topk,
)
from ..scene import inject_artifacts, load_ply, synthesize_scene
from .config import ExperimentConfig
from .metrics import THRESHOLDS, median_errors, pose_errors, recall_at

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["scenario", "phase", "median_rot_deg", "median_trans",
                   "recall_loose", "recall_tight", "recall_strict", "n"]


@dataclass(frozen=True)
class Variant:
    """One arm of an experiment: database augmentation and Phase-3 mask on/off."""

    name: str
    augment: bool
    mask_enabled: bool


@dataclass(eq=False)
class Workspace:
    clean_scene: object          # stands in for the real world; queries come from here
    scene: object                # the map used for localization (may carry artifacts)
    trajectory: list
    K: Intrinsics
    query_frames: list
    reference_frames: list
    diameter: float
    query_poses: dict = field(default_factory=dict)   # frame -> ground-truth query pose


def load_trajectory(path) -> tuple[list[CameraPose], Intrinsics | None]:
    data = json.loads(Path(path).read_text())
    poses = [CameraPose.from_json(p) for p in data["poses"]]
    K = Intrinsics.from_json(data["intrinsics"]) if "intrinsics" in data else None
    return poses, K


def save_trajectory(path, poses, K: Intrinsics | None = None, **extra) -> None:
    data = {"poses": [p.to_json() for p in poses], **extra}
    if K is not None:
        data["intrinsics"] = K.to_json()
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))


def prepare_workspace(cfg: ExperimentConfig) -> Workspace:
    K = Intrinsics.from_fov(cfg.camera.width, cfg.camera.height, cfg.camera.fov_deg)
    if cfg.ply:
        clean = load_ply(cfg.ply)
        trajectory, K_file = load_trajectory(cfg.trajectory)
        K = K_file or K
    else:
        clean, trajectory = synthesize_scene(cfg.recipe)
    q_frames, r_frames = cfg.split.partition(len(trajectory))
    if len(r_frames) < 2:
        raise SplatlocError("trajectory split leaves fewer than two reference views")
    diameter = float(clean.diameter)
    q_poses = {f: jitter_pose(trajectory[f], cfg, qid, diameter) for qid, f in enumerate(q_frames)}
    scene = inject_artifacts(clean, cfg.artifacts, [q_poses[f] for f in q_frames], K)
    return Workspace(clean, scene, trajectory, K, q_frames, r_frames, diameter, q_poses)


def jitter_pose(pose: CameraPose, cfg: ExperimentConfig, query_id: int, diameter: float) -> CameraPose:
    """Move a held-out frame off the reference path by a seeded random rigid offset."""
    rng = np.random.default_rng([cfg.seed, query_id, 3])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, cfg.query.pose_jitter_deg))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    offset = d * rng.uniform(0.0, cfg.query.pose_jitter_frac) * diameter
    return CameraPose.from_center(so3_exp(axis * angle) @ pose.rotation, pose.center + offset)


def query_image(ws: Workspace, cfg: ExperimentConfig, frame: int, query_id: int) -> np.ndarray:
    """Render from the clean scene, then apply exposure gain and Gaussian noise."""
    rng = np.random.default_rng([cfg.seed, query_id, 7])
    img = render(ws.clean_scene, ws.query_poses[frame], ws.K).rgb
    if cfg.query.gain_jitter > 0:
        img = img * (1.0 + rng.normal(0.0, cfg.query.gain_jitter))
    if cfg.query.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.query.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def build_databases(ws: Workspace, augments) -> dict[bool, PoseDatabase]:
    refs = [(render(ws.clean_scene, ws.trajectory[i], ws.K).rgb, ws.trajectory[i])
            for i in ws.reference_frames]
    return {a: build_database(refs, ws.scene, a, ws.K, scene_ref=ws.scene.name)
            for a in sorted(set(augments))}


def phase2_candidates(db: PoseDatabase, desc, k: int) -> list:
    """Top-k per source when the database mixes real and synthetic views."""
    if not db.augmented:
        return retrieve_topk(db, desc, k)
    parts = retrieve_partitioned(db, desc, k)
    return parts.get(Source.REAL, []) + parts.get(Source.SYNTHETIC, [])


@dataclass
class LocalizationResult:
    query_id: int
    frame: int
    variant: str
    status: str = "ok"
    poses: dict = field(default_factory=dict)         # phase -> pose json
    errors: dict = field(default_factory=dict)        # phase -> [rot_deg, trans] or None
    timings: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)
    phase2: list = field(default_factory=list)
    refine: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)         # per-iteration [rot, trans] of best pose

    @property
    def rotation_error_deg(self) -> dict:
        return {p: (None if e is None else e[0]) for p, e in self.errors.items()}

    @property
    def translation_error(self) -> dict:
        return {p: (None if e is None else e[1]) for p, e in self.errors.items()}

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _localize(ws: Workspace, cfg: ExperimentConfig, dbs: dict, variants, backend,
              query_id: int, frame: int) -> list[LocalizationResult]:
    gt = ws.query_poses[frame]
    img = query_image(ws, cfg, frame, query_id)
    query = Query(img, ws.K, query_id, gt)
    desc = compute_descriptor(img)
    phases = cfg.phases
    shared = {}   # augment -> (phase1 pose, phase2 pose or error, diag, timings)
    out = []
    for var in variants:
        res = LocalizationResult(query_id, frame, var.name)
        db = dbs[var.augment]
        if var.augment not in shared:
            t0 = time.perf_counter()
            top = retrieve_topk(db, desc, 1)[0]
            t1 = time.perf_counter()
            p2 = diag = err = None
            if "1+2" in phases or "1+2+3" in phases:
                try:
                    p2, diag = run_phase2(query, phase2_candidates(db, desc, cfg.retrieval.k),
                                          ws.scene, cfg.search, backend)
                except SplatlocError as exc:
                    err = f"{type(exc).__name__}: {exc}"
            t2 = time.perf_counter()
            shared[var.augment] = (top, p2, diag, err, {"phase1": t1 - t0, "phase2": t2 - t1})
        top, p2, diag, err, timings = shared[var.augment]
        res.timings.update(timings)
        res.retrieval = {"image_id": top.entry.image_id, "source": top.entry.source.name.lower(),
                         "similarity": top.similarity,
                         "center_distance": float(np.linalg.norm(top.entry.pose.center - gt.center))}
        if "1" in phases:
            res.poses["1"] = top.entry.pose.to_json()
            res.errors["1"] = list(pose_errors(top.entry.pose, gt))
        if diag is not None:
            res.phase2 = [{"image_id": o.image_id, "source": o.source, "error": o.error,
                           "objective": None if o.trace is None else o.trace.selected.objective,
                           "selected_k": None if o.trace is None else o.trace.selected_index}
                          for o in diag.outcomes]
        if err is not None:
            res.status = f"phase2_failed: {err}"
            for p in ("1+2", "1+2+3"):
                if p in phases:
                    res.errors[p] = None
            out.append(res)
            continue
        if "1+2" in phases:
            res.poses["1+2"] = p2.to_json()
            res.errors["1+2"] = list(pose_errors(p2, gt))
        if "1+2+3" in phases:
            rcfg = dataclasses.replace(cfg.refine, mask_enabled=var.mask_enabled)
            t0 = time.perf_counter()
            try:
                p3, trace = refine_pose(ws.scene, img, p2, ws.K, rcfg)
            except SplatlocError as exc:
                res.status = f"phase3_failed: {type(exc).__name__}: {exc}"
                res.errors["1+2+3"] = None
            else:
                res.poses["1+2+3"] = p3.to_json()
                res.errors["1+2+3"] = list(pose_errors(p3, gt))
                res.refine = {"iterations_used": trace.iterations_used, "converged": trace.converged,
                              "best_iteration": trace.best_iteration,
                              "mask_kept_fraction": trace.mask_kept_fraction,
                              "mask_fallback": trace.mask_fallback,
                              "translation_scale": trace.translation_scale,
                              "losses": trace.losses}
                res.curve = [list(pose_errors(trace.best_pose_at(i), gt))
                             for i in range(rcfg.max_iters + 1)]
            res.timings["phase3"] = time.perf_counter() - t0
        out.append(res)
    return out


@dataclass
class Report:
    results: list
    summary: list          # rows matching SUMMARY_COLUMNS
    curve: list            # (scenario, iteration, pass_loose, pass_tight, pass_strict)
    retrieval: list        # (scenario, db_size, n_real, n_synthetic, mean_top1_center_distance)
    diameter: float

    def rows_for(self, scenario: str) -> dict:
        return {r[1]: r for r in self.summary if r[0] == scenario}


def summarize(results, variants, phases, diameter: float) -> tuple[list, list]:
    summary, curve = [], []
    for var in variants:
        rs = [r for r in results if r.variant == var.name]
        for phase in phases:
            errs = [r.errors.get(phase) for r in rs]
            if not errs:
                continue
            med = median_errors(errs)
            recalls = [recall_at(errs, t.degrees, t.units(diameter)) for t in THRESHOLDS]
            summary.append([var.name, phase, *med, *recalls, len(errs)])
        curves = [r.curve for r in rs if r.curve]
        if curves and len(curves) == len(rs):
            for i in range(len(curves[0])):
                errs = [c[i] for c in curves]
                curve.append([var.name, i] + [recall_at(errs, t.degrees, t.units(diameter))
                                              for t in THRESHOLDS])
    return summary, curve


def _fmt(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else f"{x:.6f}"
    return str(x)


def write_report(report: Report, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w") as f:
        for r in report.results:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        w.writerows([[_fmt(x) for x in row] for row in report.summary])
    with open(out / "curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "iteration", "pass_loose", "pass_tight", "pass_strict"])
        w.writerows([[_fmt(x) for x in row] for row in report.curve])
    with open(out / "retrieval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "db_size", "n_real", "n_synthetic", "mean_top1_center_distance"])
        w.writerows([[_fmt(x) for x in row] for row in report.retrieval])
    (out / "summary.txt").write_text(format_table(report))


def format_table(report: Report) -> str:
    d = report.diameter
    head = (f"{'scenario':<16}{'phase':<8}{'(2deg,2%)':>11}{'(1deg,1%)':>11}"
            f"{'(0.1deg,0.2%)':>15}{'med rot':>10}{'med trans':>11}{'n':>5}")
    lines = [f"scene diameter {d:.3f}; thresholds are (degrees, % of diameter)", head, "-" * len(head)]
    for s, p, mr, mt, rl, rt, rs, n in report.summary:
        lines.append(f"{s:<16}{p:<8}{100 * rl:>10.1f}%{100 * rt:>10.1f}%{100 * rs:>14.1f}%"
                     f"{mr:>10.4f}{mt:>11.4f}{n:>5}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, variants=None, out_dir=None) -> Report:
    """Run every query through the requested phases for each variant and write outputs.

    Per-query failures are recorded in the result status and never abort the batch.
    """
    variants = list(variants or [Variant(cfg.scenario, cfg.retrieval.augment, cfg.refine.mask_enabled)])
    ws = prepare_workspace(cfg)
    dbs = build_databases(ws, [v.augment for v in variants])
    b = cfg.backend
    backend = make_backend(b.kind, sigma_rot_deg=b.sigma_rot_deg, sigma_dir_deg=b.sigma_dir_deg,
                           seed=b.seed)

    def job(args):
        qid, frame = args
        try:
            return _localize(ws, cfg, dbs, variants, backend, qid, frame)
        except SplatlocError as exc:
            return [LocalizationResult(qid, frame, v.name, status=f"error: {exc}",
                                       errors={p: None for p in cfg.phases}) for v in variants]

    jobs = list(enumerate(ws.query_frames))
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        per_query = list(pool.map(job, jobs))
    # collector: variant-major, query order preserved
    results = [r for v in variants for rs in per_query for r in rs if r.variant == v.name]
    summary, curve = summarize(results, variants, cfg.phases, ws.diameter)
    retrieval_rows = []
    for v in variants:
        db = dbs[v.augment]
        rs = [r for r in results if r.variant == v.name and r.retrieval]
        mean_d = float(np.mean([r.retrieval["center_distance"] for r in rs])) if rs else math.nan
        retrieval_rows.append([v.name, len(db), len(db.by_source(Source.REAL)),
                               len(db.by_source(Source.SYNTHETIC)), mean_d])
    report = Report(results, summary, curve, retrieval_rows, ws.diameter)
    write_report(report, out_dir or cfg.output_dir)
    return report


def ablation_variants(cfg: ExperimentConfig, what: str) -> tuple[list[Variant], tuple]:
    base = cfg.scenario
    if what == "phases":
        return [Variant(base, cfg.retrieval.augment, cfg.refine.mask_enabled)], ("1", "1+2", "1+2+3")
    if what == "mask":
        return [Variant(f"{base}/mask_on", cfg.retrieval.augment, True),
                Variant(f"{base}/mask_off", cfg.retrieval.augment, False)], ("1+2", "1+2+3")
    if what == "dbaug":
        return [Variant(f"{base}/aug_on", True, cfg.refine.mask_enabled),
                Variant(f"{base}/aug_off", False, cfg.refine.mask_enabled)], cfg.phases
    raise ValueError(f"unknown ablation {what!r}")


def run_ablation(cfg: ExperimentConfig, what: str, out_dir=None) -> Report:
    variants, phases = ablation_variants(cfg, what)
    return run_experiment(cfg.replace(phases=phases), variants, out_dir)
