"""Seeded benchmarks behind the acceptance suite.

Each function returns a small result object with the measured quantities; the
pass/fail decision is left to the caller so the same numbers can be printed by
the CLI and asserted by tests.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SplatlocError
from ..geometry import CameraPose, Intrinsics, so3_exp
from ..initializer import OracleNoiseBackend, Query, run_phase2
from ..refiner import RefineConfig, refine_pose
from ..renderer import render
from ..retrieval import compute_descriptor, retrieve_topk
from ..scene import ArtifactSpec, SceneRecipe, synthesize_scene
from .config import ExperimentConfig
from .experiment import (
    build_databases,
    phase2_candidates,
    prepare_workspace,
    query_image,
    run_ablation,
)
from .metrics import STRICT, pose_errors, recall_at


@dataclass
class ScaleRecovery:
    hits: int
    n: int
    failures: int
    ratios: list = field(default_factory=list)     # |C - C_gt| / grid step per query
    seconds: float = 0.0

    @property
    def rate(self) -> float:
        return self.hits / self.n if self.n else 0.0


def scale_recovery(cfg: ExperimentConfig, n_queries: int = 50) -> ScaleRecovery:
    """Phase 2 with an exact relative pose: is the chosen center within one grid step?"""
    cfg = cfg.replace(split=dataclasses.replace(cfg.split, max_queries=n_queries))
    ws = prepare_workspace(cfg)
    db = build_databases(ws, [cfg.retrieval.augment])[cfg.retrieval.augment]
    backend = OracleNoiseBackend(0.0, 0.0, cfg.backend.seed)
    t0 = time.perf_counter()
    out = ScaleRecovery(0, 0, 0)
    for qid, frame in enumerate(ws.query_frames):
        gt = ws.query_poses[frame]
        img = query_image(ws, cfg, frame, qid)
        out.n += 1
        try:
            pose, diag = run_phase2(Query(img, ws.K, qid, gt),
                                    phase2_candidates(db, compute_descriptor(img), cfg.retrieval.k),
                                    ws.scene, cfg.search, backend)
        except SplatlocError:
            out.failures += 1
            continue
        step = diag.outcomes[diag.chosen].trace.step
        ratio = float(np.linalg.norm(pose.center - gt.center)) / step
        out.ratios.append(ratio)
        out.hits += ratio <= 1.0
    out.seconds = time.perf_counter() - t0
    return out


@dataclass
class Convergence:
    pass_rate: np.ndarray          # strict pass rate of the best-so-far pose per iteration
    final_errors: list
    seconds_per_run: float

    def at(self, i: int) -> float:
        return float(self.pass_rate[min(i, len(self.pass_rate) - 1)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "pass_strict"])
            for i, p in enumerate(self.pass_rate):
                w.writerow([i, f"{p:.6f}"])


def perturb_pose(gt: CameraPose, rng, max_deg: float, max_units: float) -> CameraPose:
    """Random-axis rotation and random-direction center offset, magnitudes uniform."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    rot = so3_exp(axis * np.radians(rng.uniform(0.0, max_deg))) @ gt.rotation
    return CameraPose.from_center(rot, gt.center + d * rng.uniform(0.0, max_units))


def convergence_basin(n_trials: int = 50, seed: int = 0, recipe: SceneRecipe | None = None,
                      size: int = 128, max_deg: float = 2.0, max_frac: float = 0.02,
                      noise_sigma: float = 0.01, refine: RefineConfig | None = None) -> Convergence:
    recipe = recipe or SceneRecipe(seed=seed, trajectory_length=150)
    refine = refine or RefineConfig()
    scene, traj = synthesize_scene(recipe)
    K = Intrinsics.from_fov(size, size, 60.0)
    D = scene.diameter
    ok = np.zeros((n_trials, refine.max_iters + 1), dtype=bool)
    finals = []
    t0 = time.perf_counter()
    for s in range(n_trials):
        rng = np.random.default_rng([seed, s, 11])
        gt = traj[int(rng.integers(len(traj)))]
        img = np.clip(render(scene, gt, K).rgb + rng.normal(0.0, noise_sigma, (size, size, 3)), 0, 1)
        T0 = perturb_pose(gt, rng, max_deg, max_frac * D)
        pose, trace = refine_pose(scene, img, T0, K, refine)
        for i in range(refine.max_iters + 1):
            r, t = pose_errors(trace.best_pose_at(i), gt)
            ok[s, i] = r < STRICT.degrees and t < STRICT.units(D)
        finals.append(pose_errors(pose, gt))
    return Convergence(ok.mean(axis=0), finals, (time.perf_counter() - t0) / n_trials)


FLOATERS = ArtifactSpec(floater_scale_range=(0.15, 0.4), floater_opacity_range=(0.4, 0.8))


@dataclass
class MaskAblation:
    per_seed: list        # (seed, median_on, median_off, n)
    pooled_on: float
    pooled_off: float

    @property
    def pooled_ratio(self) -> float:
        return self.pooled_on / self.pooled_off

    @property
    def seed_ratios(self) -> list:
        return [on / off for _, on, off, _ in self.per_seed]


def mask_ablation(base: ExperimentConfig, seeds=(0, 1, 2), queries_per_seed: int = 10,
                  artifacts: ArtifactSpec = FLOATERS, floaters_per_query: float = 1.0,
                  out_root=None) -> MaskAblation:
    """Final translation error with and without the reliability mask on a floater map.

    Floaters are dropped into the query frustums, ``floaters_per_query`` per
    query on average, so every run sees the same artifact density.
    """
    per_seed, on_all, off_all = [], [], []
    count = int(round(floaters_per_query * queries_per_seed))
    for s in seeds:
        cfg = base.replace(seed=s, scenario="floaters",
                           recipe=dataclasses.replace(base.recipe, seed=s),
                           artifacts=dataclasses.replace(artifacts, seed=s, floater_count=count),
                           split=dataclasses.replace(base.split, max_queries=queries_per_seed))
        out = Path(out_root) / f"seed{s}" if out_root else Path(cfg.output_dir) / f"mask_seed{s}"
        report = run_ablation(cfg, "mask", out)
        errs = {"on": [], "off": []}
        for r in report.results:
            e = r.errors.get("1+2+3")
            errs["on" if r.variant.endswith("mask_on") else "off"].append(np.inf if e is None else e[1])
        per_seed.append((s, float(np.median(errs["on"])), float(np.median(errs["off"])),
                         len(errs["on"])))
        on_all += errs["on"]
        off_all += errs["off"]
    return MaskAblation(per_seed, float(np.median(on_all)), float(np.median(off_all)))


@dataclass
class AugmentationAblation:
    rows: list            # (seed, n_refs, db_size, mean_dist_aug, mean_dist_plain)

    @property
    def wins(self) -> int:
        return sum(1 for _, _, _, a, p in self.rows if a <= p)

    @property
    def sizes_ok(self) -> bool:
        return all(size == 2 * n - 1 for _, n, size, _, _ in self.rows)


def augmentation_ablation(base: ExperimentConfig, seeds=(0, 1, 2, 3, 4)) -> AugmentationAblation:
    """Mean top-1 retrieved center distance to the query, augmented vs plain database."""
    rows = []
    for s in seeds:
        cfg = base.replace(seed=s, recipe=dataclasses.replace(base.recipe, seed=s))
        ws = prepare_workspace(cfg)
        dbs = build_databases(ws, [True, False])
        dist = {True: [], False: []}
        for qid, frame in enumerate(ws.query_frames):
            gt = ws.query_poses[frame]
            desc = compute_descriptor(query_image(ws, cfg, frame, qid))
            for aug, db in dbs.items():
                top = retrieve_topk(db, desc, 1)[0]
                dist[aug].append(float(np.linalg.norm(top.entry.pose.center - gt.center)))
        rows.append((s, len(ws.reference_frames), len(dbs[True]),
                     float(np.mean(dist[True])), float(np.mean(dist[False]))))
    return AugmentationAblation(rows)


def strict_recalls(report) -> dict:
    """Strict recall per phase for the first scenario of a report."""
    d = report.diameter
    name = report.results[0].variant
    out = {}
    for phase in ("1", "1+2", "1+2+3"):
        errs = [r.errors.get(phase) for r in report.results if r.variant == name]
        if errs and phase in report.results[0].errors:
            out[phase] = recall_at(errs, STRICT.degrees, STRICT.units(d))
    return out


def refine_timing(size: int = 256, primitives: int = 20000, iters: int = 200,
                  seed: int = 0) -> tuple[float, int]:
    """Wall time of one full-length refinement (early stopping disabled)."""
    scene, traj = synthesize_scene(SceneRecipe(primitive_count=primitives, seed=seed,
                                               trajectory_length=60))
    K = Intrinsics.from_fov(size, size, 60.0)
    rng = np.random.default_rng(seed)
    gt = traj[7]
    img = render(scene, gt, K).rgb
    T0 = perturb_pose(gt, rng, 1.0, 0.01 * scene.diameter)
    cfg = RefineConfig(max_iters=iters, convergence_eps=0.0)
    t0 = time.perf_counter()
    _, trace = refine_pose(scene, img, T0, K, cfg)
    return time.perf_counter() - t0, trace.iterations_used


__all__ = [
    "ScaleRecovery", "scale_recovery", "Convergence", "convergence_basin", "perturb_pose",
    "FLOATERS", "MaskAblation", "mask_ablation", "AugmentationAblation",
    "augmentation_ablation", "strict_recalls", "refine_timing",
]
