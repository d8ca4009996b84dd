"""Depth-anchored pose initialization from a retrieved reference view.

Pipeline per reference: relative pose (pluggable backend) -> propagated query
rotation -> 3D anchor from the reference depth map -> 1D photometric search
along the query's center ray.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from skimage.feature import match_template

from .errors import (
    AnchorInvalidError,
    BehindCameraError,
    InitializationFailedError,
    InvalidArgumentError,
    LowCoverageError,
    SearchFailedError,
    SplatlocError,
    WeakMatchError,
)
from .geometry import (
    CameraPose,
    Intrinsics,
    Rotation,
    back_project,
    pixel_ray_direction,
    project,
    so3_exp,
)
from .photometry import downsample, luminance, photometric_l1
from .renderer import RenderConfig, RenderedView, render, render_depth_at

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Query:
    """A query image; ``gt_pose`` is only consulted by oracle backends."""

    image: np.ndarray
    K: Intrinsics
    query_id: int = 0
    gt_pose: CameraPose | None = None


@dataclass(frozen=True)
class RelativePoseEstimate:
    delta_rotation: Rotation                 # reference -> query
    delta_translation_dir: np.ndarray        # unit; diagnostics only
    correspondence: tuple[np.ndarray, np.ndarray]  # (r in reference, q in query)


@dataclass(frozen=True)
class ReferenceView:
    image: np.ndarray
    view: RenderedView
    pose: CameraPose
    image_id: int = 0


def _random_axis(rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=3)
    return a / np.linalg.norm(a)


def _true_relative(query_pose: CameraPose, ref_pose: CameraPose):
    """(dR, dt) with x_q = dR x_ref + dt for camera-frame points."""
    d_rot = query_pose.rotation @ ref_pose.rotation.inverse()
    dt = query_pose.translation - d_rot.apply(ref_pose.translation)
    return d_rot, dt


def _perturb_direction(d: np.ndarray, sigma_rad: float, rng: np.random.Generator) -> np.ndarray:
    n = np.linalg.norm(d)
    d = d / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
    if sigma_rad <= 0:
        return d
    axis = np.cross(d, _random_axis(rng))
    axis /= np.linalg.norm(axis)
    out = so3_exp(axis * abs(rng.normal(0.0, sigma_rad))).apply(d)
    return out / np.linalg.norm(out)


@dataclass(frozen=True)
class OracleNoiseBackend:
    """Ground-truth relative pose with random-axis rotation noise of angle |N(0, sigma_rot)|.

    The correspondence is the exact match of the query center: back-project it
    with the true query depth and project into the reference.
    """

    sigma_rot_deg: float = 0.0
    sigma_dir_deg: float = 0.0
    seed: int = 0
    name = "oracle_noise"

    def _rng(self, query: Query, ref: ReferenceView) -> np.random.Generator:
        return np.random.default_rng([self.seed, query.query_id, ref.image_id])

    def _rotation(self, query: Query, ref: ReferenceView, rng):
        if query.gt_pose is None:
            raise InvalidArgumentError("oracle backend needs the query's ground-truth pose")
        d_rot, dt = _true_relative(query.gt_pose, ref.pose)
        angle = abs(rng.normal(0.0, math.radians(self.sigma_rot_deg))) if self.sigma_rot_deg > 0 else 0.0
        noisy = so3_exp(_random_axis(rng) * angle) @ d_rot
        direction = _perturb_direction(dt, math.radians(self.sigma_dir_deg), rng)
        return noisy, direction

    def estimate(self, query: Query, ref: ReferenceView, scene, cfg: RenderConfig | None = None
                 ) -> RelativePoseEstimate:
        rng = self._rng(query, ref)
        d_rot, direction = self._rotation(query, ref, rng)
        K = query.K
        q = K.center_pixel
        try:
            depth = render_depth_at(scene, query.gt_pose, K, q, cfg)
            r, _ = project(back_project(q, depth, query.gt_pose, K), ref.pose, K)
        except (LowCoverageError, BehindCameraError) as exc:
            raise WeakMatchError(f"no oracle match for the query center: {exc}") from exc
        if not (0.0 <= r[0] <= K.width - 1 and 0.0 <= r[1] <= K.height - 1):
            raise WeakMatchError(f"query center projects outside the reference at {r}")
        return RelativePoseEstimate(d_rot, direction, (r, q))


def _subpixel_peak(resp: np.ndarray, iy: int, ix: int) -> tuple[float, float]:
    """Separable parabola fit around an integer peak."""
    def offset(m, c, p):
        den = m - 2.0 * c + p
        return 0.0 if den >= 0.0 else 0.5 * (m - p) / den
    dy = offset(resp[iy - 1, ix], resp[iy, ix], resp[iy + 1, ix]) if 0 < iy < resp.shape[0] - 1 else 0.0
    dx = offset(resp[iy, ix - 1], resp[iy, ix], resp[iy, ix + 1]) if 0 < ix < resp.shape[1] - 1 else 0.0
    return iy + dy, ix + dx


def ncc_correspondence(query_image: np.ndarray, ref_image: np.ndarray, patch: int = 32,
                       min_peak: float = 0.3) -> tuple[np.ndarray, np.ndarray, float]:
    """Match the query's central ``patch`` x ``patch`` window over the reference.

    Returns ``(r, q, peak)``; raises WeakMatchError when the NCC peak is below ``min_peak``.
    """
    qg = luminance(query_image)
    rg = luminance(ref_image)
    h, w = qg.shape
    if patch > min(h, w):
        raise InvalidArgumentError(f"patch {patch} larger than the image")
    y0 = (h - patch) // 2
    x0 = (w - patch) // 2
    tmpl = qg[y0:y0 + patch, x0:x0 + patch]
    q = np.array([x0 + (patch - 1) / 2.0, y0 + (patch - 1) / 2.0])
    if np.ptp(tmpl) < 1e-9:
        raise WeakMatchError("query center patch is textureless")
    resp = match_template(rg, tmpl)
    iy, ix = np.unravel_index(int(np.argmax(resp)), resp.shape)
    peak = float(resp[iy, ix])
    if not peak >= min_peak:
        raise WeakMatchError(f"NCC peak {peak:.3f} below {min_peak}")
    fy, fx = _subpixel_peak(resp, iy, ix)
    r = np.array([fx + (patch - 1) / 2.0, fy + (patch - 1) / 2.0])
    return r, q, peak


@dataclass(frozen=True)
class NccMatcherBackend(OracleNoiseBackend):
    """Oracle rotation path with an image-based NCC correspondence."""

    patch: int = 32
    min_peak: float = 0.3
    name = "ncc_matcher"

    def estimate(self, query: Query, ref: ReferenceView, scene, cfg: RenderConfig | None = None
                 ) -> RelativePoseEstimate:
        rng = self._rng(query, ref)
        d_rot, direction = self._rotation(query, ref, rng)
        r, q, _ = ncc_correspondence(query.image, ref.image, self.patch, self.min_peak)
        return RelativePoseEstimate(d_rot, direction, (r, q))


def make_backend(kind: str, **kw):
    if kind == "oracle_noise":
        return OracleNoiseBackend(**kw)
    if kind == "ncc_matcher":
        return NccMatcherBackend(**kw)
    raise InvalidArgumentError(f"unknown relative-pose backend {kind!r}")


def estimate_relative_pose(query: Query, reference: ReferenceView, backend, scene,
                           cfg: RenderConfig | None = None) -> RelativePoseEstimate:
    return backend.estimate(query, reference, scene, cfg)


def propagate_rotation(delta: Rotation, r_ref: Rotation) -> Rotation:
    """Query rotation estimate ``dR @ R_ref``."""
    return delta @ r_ref


@dataclass(frozen=True)
class AnchorPoint:
    P: np.ndarray
    d_P: float


def compute_anchor(r, reference_view: RenderedView, ref_pose: CameraPose, K: Intrinsics,
                   min_alpha: float = 0.5) -> AnchorPoint:
    try:
        d = reference_view.depth_at(r, min_alpha)
    except (LowCoverageError, InvalidArgumentError) as exc:
        raise AnchorInvalidError(f"no usable depth at reference pixel {tuple(r)}: {exc}") from exc
    return AnchorPoint(back_project(r, d, ref_pose, K), d)


@dataclass(frozen=True)
class SearchConfig:
    gamma_min: float = 0.2
    gamma_max: float = 2.0
    ns: int = 30
    alpha: float = 0.8
    beta: float = 0.2
    eps: float = 1e-6
    render_scale: float = 0.25
    intensity_scale: float = 255.0  # search losses in 8-bit intensity units

    def __post_init__(self):
        if not 0.0 < self.gamma_min < self.gamma_max:
            raise InvalidArgumentError("need 0 < gamma_min < gamma_max")
        if self.ns < 2:
            raise InvalidArgumentError("ns must be >= 2")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise InvalidArgumentError("alpha, beta must be >= 0 with a positive sum")
        if not self.eps > 0:
            raise InvalidArgumentError("eps must be > 0")
        if not 0.0 < self.render_scale <= 1.0:
            raise InvalidArgumentError("render_scale must lie in (0, 1]")
        if not self.intensity_scale > 0:
            raise InvalidArgumentError("intensity_scale must be > 0")


@dataclass(frozen=True)
class SearchCandidate:
    k: int
    distance: float
    center: np.ndarray
    loss: float
    gradient: float
    objective: float


@dataclass
class SearchTrace:
    candidates: list
    selected_index: int
    step: float = 0.0

    @property
    def selected(self) -> SearchCandidate:
        return self.candidates[self.selected_index]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["k", "d_k", "loss", "grad", "objective"])
            for c in self.candidates:
                w.writerow([c.k, repr(c.distance), repr(c.loss), repr(c.gradient), repr(c.objective)])


def discrete_gradient(losses: np.ndarray) -> np.ndarray:
    """Mean absolute difference to both neighbours; one-sided at the ends."""
    d = np.abs(np.diff(losses))
    g = np.empty_like(losses)
    g[0] = d[0]
    g[-1] = d[-1]
    g[1:-1] = 0.5 * (d[:-1] + d[1:])
    return g


def select_candidate(losses, cfg: SearchConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """(gradient, objective, argmin); ties resolve to the smaller k."""
    losses = np.asarray(losses, dtype=np.float64)
    grad = discrete_gradient(losses)
    obj = cfg.alpha * losses + cfg.beta / (grad + cfg.eps)
    return grad, obj, int(np.argmin(obj))


def photometric_search(scene, query_image: np.ndarray, r_q: Rotation, anchor: AnchorPoint,
                       v: np.ndarray, cfg: SearchConfig, K: Intrinsics,
                       render_cfg: RenderConfig | None = None) -> tuple[CameraPose, SearchTrace]:
    """Render candidates ``C_k = P - (d_min + k dd) v`` and keep the best objective."""
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    d_min = cfg.gamma_min * anchor.d_P
    d_max = cfg.gamma_max * anchor.d_P
    step = (d_max - d_min) / cfg.ns
    Ks = K.scaled(cfg.render_scale)
    q_small = downsample(query_image, cfg.render_scale)
    if q_small.shape[:2] != Ks.shape:
        raise InvalidArgumentError(f"query image {query_image.shape} does not match intrinsics")
    dists = d_min + step * np.arange(cfg.ns + 1)
    centers = anchor.P[None, :] - dists[:, None] * v[None, :]
    losses = np.empty(cfg.ns + 1)
    any_visible = False
    for k, c in enumerate(centers):
        view = render(scene, CameraPose.from_center(r_q, c), Ks, render_cfg)
        any_visible = any_visible or bool(view.alpha.max() > 0.0)
        losses[k] = cfg.intensity_scale * photometric_l1(q_small, view.rgb)[0].value
    if not any_visible:
        raise SearchFailedError("every search candidate renders an empty frustum")
    grad, obj, best = select_candidate(losses, cfg)
    trace = SearchTrace([SearchCandidate(k, float(dists[k]), centers[k], float(losses[k]),
                                         float(grad[k]), float(obj[k])) for k in range(cfg.ns + 1)],
                        best, float(step))
    return CameraPose.from_center(r_q, centers[best]), trace


@dataclass
class CandidateOutcome:
    image_id: int
    source: str
    pose: CameraPose | None = None
    trace: SearchTrace | None = None
    error: str | None = None

    @property
    def objective(self) -> float:
        return self.trace.selected.objective if self.trace else math.inf


@dataclass
class Phase2Diagnostics:
    outcomes: list = field(default_factory=list)
    chosen: int = -1


def run_phase2(query: Query, candidates, scene, cfg: SearchConfig, backend,
               render_cfg: RenderConfig | None = None) -> tuple[CameraPose, Phase2Diagnostics]:
    """Search from every retrieved reference; keep the smallest selected objective.

    ``candidates`` are retrieval matches (``.entry.pose``, ``.entry.image_id``,
    ``.entry.source``).  Failing references are recorded and skipped.
    """
    if not candidates:
        raise InvalidArgumentError("phase 2 needs at least one retrieval candidate")
    K = query.K
    diag = Phase2Diagnostics()
    center = K.center_pixel
    for m in candidates:
        entry = m.entry
        out = CandidateOutcome(entry.image_id, entry.source.name.lower())
        diag.outcomes.append(out)
        try:
            view = render(scene, entry.pose, K, render_cfg)
            ref = ReferenceView(view.rgb, view, entry.pose, entry.image_id)
            est = backend.estimate(query, ref, scene, render_cfg)
            r_q = propagate_rotation(est.delta_rotation, entry.pose.rotation)
            anchor = compute_anchor(est.correspondence[0], view, entry.pose, K)
            v = pixel_ray_direction(center, r_q, K)
            out.pose, out.trace = photometric_search(scene, query.image, r_q, anchor, v, cfg, K,
                                                     render_cfg)
        except SplatlocError as exc:
            out.error = f"{type(exc).__name__}: {exc}"
            log.info("query %d, reference %d skipped: %s", query.query_id, entry.image_id, exc)
    ok = [i for i, o in enumerate(diag.outcomes) if o.pose is not None]
    if not ok:
        raise InitializationFailedError(
            "all references failed: " + "; ".join(o.error or "" for o in diag.outcomes))
    diag.chosen = min(ok, key=lambda i: (diag.outcomes[i].objective, i))
    return diag.outcomes[diag.chosen].pose, diag
