"""Mask-guided photometric pose refinement with Adam and cosine annealing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import photometry
from .errors import DegenerateMaskError, InvalidArgumentError, NonFiniteLossError
from .geometry import CameraPose, Intrinsics, apply_rotation_update, so3_exp
from .photometry import TauPolicy, downsample, photometric_l1
from .renderer import RenderConfig, RenderPass


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 200
    lr_init: float = 0.018
    lr_schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_enabled: bool = True
    tau_policy: TauPolicy = field(default_factory=TauPolicy)
    patch_size: int = 16
    min_keep_fraction: float = 0.10
    render_scale: float = 1.0
    convergence_eps: float = 1e-7
    patience: int = 20
    # "center": optimize the camera center, rotating about it; "raw": optimize t directly
    translation_mode: str = "center"
    # scene units per unit of the translation parameter: "depth" (median rendered
    # depth at the start pose), "diameter", or a positive number
    translation_scale: object = "depth"

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if not self.lr_init > 0:
            raise InvalidArgumentError("lr_init must be > 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidArgumentError(f"unknown lr schedule {self.lr_schedule!r}")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise InvalidArgumentError("Adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise InvalidArgumentError("adam_eps must be > 0")
        if self.translation_mode not in ("center", "raw"):
            raise InvalidArgumentError(f"unknown translation mode {self.translation_mode!r}")
        ts = self.translation_scale
        if isinstance(ts, str):
            if ts not in ("depth", "diameter"):
                raise InvalidArgumentError(f"unknown translation scale {ts!r}")
        elif not float(ts) > 0:
            raise InvalidArgumentError("numeric translation_scale must be > 0")
        if not 0.0 < self.render_scale <= 1.0:
            raise InvalidArgumentError("render_scale must lie in (0, 1]")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")


def cosine_lr(i: int, cfg: RefineConfig) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr_init
    if not 0 <= i <= cfg.max_iters:
        raise InvalidArgumentError(f"iteration {i} outside [0, {cfg.max_iters}]")
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * i / cfg.max_iters))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int = 6, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(state: AdamState, grad, lr: float) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam; returns the update to add and the new state."""
    g = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = -lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return update, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass
class RefineTrace:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    rotation_steps: list = field(default_factory=list)
    translation_steps: list = field(default_factory=list)
    poses: list = field(default_factory=list)       # pose evaluated at each iteration
    mask_kept_fraction: float = 1.0
    mask_computations: int = 0
    mask_fallback: bool = False                      # degenerate mask -> ran unmasked
    final_pose: CameraPose | None = None
    best_iteration: int = 0
    converged: bool = False
    iterations_used: int = 0
    translation_scale: float = 1.0
    error: str | None = None

    def best_pose_at(self, i: int) -> CameraPose:
        """Best-loss pose among iterations 0..i (what a run stopped at i returns)."""
        n = min(i, len(self.losses) - 1)
        j = int(np.argmin(self.losses[: n + 1]))
        return self.poses[j]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "loss", "lr"])
            for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                w.writerow([i, repr(loss), repr(lr)])


def _translation_scale(cfg: RefineConfig, scene, first: RenderPass) -> float:
    ts = cfg.translation_scale
    if ts == "diameter":
        return float(scene.diameter)
    if ts == "depth":
        view = first.view
        ok = view.alpha > 0.5
        return float(np.median(view.depth[ok])) if ok.any() else float(scene.diameter)
    return float(ts)


def _step(pose: CameraPose, update: np.ndarray, mode: str, scale: float) -> CameraPose:
    phi = update[:3]
    if mode == "center":
        return CameraPose.from_center(so3_exp(phi) @ pose.rotation, pose.center + scale * update[3:])
    moved = apply_rotation_update(pose, phi)
    return CameraPose(moved.rotation, moved.translation + scale * update[3:])


def _chart_gradient(g_phi: np.ndarray, g_t: np.ndarray, pose: CameraPose, mode: str,
                    scale: float) -> np.ndarray:
    """Pose gradient expressed in the optimizer's (phi, translation parameter) chart."""
    if mode == "center":
        # rotating about the center moves t to exp(phi) t, and t = -R C
        g_phi = g_phi + np.cross(pose.translation, g_t)
        g_tr = -pose.rotation.matrix().T @ g_t
    else:
        g_tr = g_t
    return np.concatenate([g_phi, scale * g_tr])


def refine_pose(scene, query: np.ndarray, T0: CameraPose, K: Intrinsics,
                cfg: RefineConfig | None = None,
                render_cfg: RenderConfig | None = None) -> tuple[CameraPose, RefineTrace]:
    """Adam on the 6-vector (phi, translation) re-anchored at the current pose.

    The reliability mask is computed once from the render at ``T0`` and then
    frozen.  Returns the best-loss pose seen and the per-iteration trace.
    """
    cfg = cfg or RefineConfig()
    try:
        return _refine(scene, query, T0, K, cfg, render_cfg, use_mask=cfg.mask_enabled)
    except DegenerateMaskError:
        pose, trace = _refine(scene, query, T0, K, cfg, render_cfg, use_mask=False)
        trace.mask_fallback = True
        return pose, trace


def _refine(scene, query, T0, K, cfg, render_cfg, use_mask: bool):
    Ks = K.scaled(cfg.render_scale)
    q = downsample(query, cfg.render_scale)
    if q.shape[:2] != Ks.shape:
        raise InvalidArgumentError(f"query image {np.shape(query)} does not match intrinsics")
    trace = RefineTrace()
    state = AdamState.zeros(6, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    pose = T0
    mask = None
    best_loss = math.inf
    best_pose = T0
    prev_loss = math.inf
    stall = 0
    scale = 1.0
    for i in range(cfg.max_iters):
        rp = RenderPass(scene, pose, Ks, render_cfg)
        if i == 0:
            scale = _translation_scale(cfg, scene, rp) if cfg.translation_mode == "center" else (
                1.0 if isinstance(cfg.translation_scale, str) else float(cfg.translation_scale))
            trace.translation_scale = scale
            if use_mask:
                mask = photometry.mask_from_render(rp.view.rgb, cfg.patch_size, cfg.tau_policy,
                                                   cfg.min_keep_fraction)
                trace.mask_computations += 1
                trace.mask_kept_fraction = mask.kept_fraction
        loss, weight = photometric_l1(q, rp.view.rgb, mask)
        if not math.isfinite(loss.value):
            trace.error = f"non-finite loss at iteration {i}"
            raise NonFiniteLossError(trace.error)
        trace.losses.append(loss.value)
        trace.poses.append(pose)
        trace.iterations_used = i + 1
        # stop once the loss has stopped moving, not merely stopped improving:
        # Adam's first steps overshoot and need time to come back
        stall = stall + 1 if abs(loss.value - prev_loss) < cfg.convergence_eps else 0
        prev_loss = loss.value
        if loss.value < best_loss:
            best_loss, best_pose = loss.value, pose
            trace.best_iteration = i
        lr = cosine_lr(i, cfg)
        trace.lrs.append(lr)
        if stall >= cfg.patience:
            trace.converged = True
            trace.rotation_steps.append(0.0)
            trace.translation_steps.append(0.0)
            break
        g = rp.pose_gradient(weight)
        grad = _chart_gradient(g.d_rotation, g.d_translation, pose, cfg.translation_mode, scale)
        update, state = adam_step(state, grad, lr)
        trace.rotation_steps.append(float(np.linalg.norm(update[:3])))
        trace.translation_steps.append(float(scale * np.linalg.norm(update[3:])))
        pose = _step(pose, update, cfg.translation_mode, scale)
    trace.final_pose = best_pose
    return best_pose, trace
