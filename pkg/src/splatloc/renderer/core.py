"""Tile-based splat rasterizer with an analytic camera-pose backward pass."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError, LowCoverageError
from ..geometry import CameraPose, Intrinsics
from ..scene import GaussianScene
from . import kernels

LOW_PASS = 0.3
DEPTH_EPS = 1e-6
FADE_BEGIN = 1.1
FADE_END = 1.3


def default_workers() -> int:
    env = os.environ.get("SPLATLOC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    max_gaussians_per_pixel: int = 1024
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near_plane: float = 0.01
    workers: int | None = None

    def __post_init__(self):
        if self.tile_size not in (8, 16, 32):
            raise InvalidArgumentError("tile_size must be 8, 16 or 32")
        if not (0.0 < self.alpha_cutoff < 1.0 and 0.0 < self.transmittance_floor < 1.0):
            raise InvalidArgumentError("alpha_cutoff and transmittance_floor must lie in (0, 1)")
        if self.max_gaussians_per_pixel < 1:
            raise InvalidArgumentError("max_gaussians_per_pixel must be >= 1")


@dataclass(frozen=True, eq=False)
class RenderedView:
    rgb: np.ndarray    # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-normalized expected depth
    alpha: np.ndarray  # (H, W)

    def depth_at(self, pixel, min_alpha: float = 0.5) -> float:
        """Bilinearly sampled depth; raises LowCoverageError where alpha < ``min_alpha``."""
        h, w = self.depth.shape
        u, v = float(pixel[0]), float(pixel[1])
        if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
            raise InvalidArgumentError(f"pixel {pixel} outside the {w}x{h} image")
        a = _bilinear(self.alpha, u, v)
        if a < min_alpha:
            raise LowCoverageError(f"alpha {a:.3f} at pixel ({u:.1f}, {v:.1f})")
        # sample the unnormalized depth and alpha, then normalize
        return _bilinear(self.depth * self.alpha, u, v) / a


def _bilinear(img: np.ndarray, u: float, v: float) -> float:
    h, w = img.shape
    x0 = min(int(math.floor(u)), w - 2) if w > 1 else 0
    y0 = min(int(math.floor(v)), h - 2) if h > 1 else 0
    fx = u - x0
    fy = v - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return float(top * (1 - fy) + bot * fy)


@dataclass(frozen=True)
class PoseGradient:
    """Loss gradient w.r.t. a left so(3) increment (t held fixed) and w.r.t. t."""

    d_rotation: np.ndarray
    d_translation: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_rotation, self.d_translation])


@dataclass
class _Projection:
    """Screen-space state of the Gaussians surviving culling (index space ``idx``)."""

    idx: np.ndarray
    q: np.ndarray        # R @ mu
    p: np.ndarray        # camera-frame means
    cov_cam: np.ndarray  # R Sigma R^T
    J: np.ndarray        # (n, 2, 3) projection Jacobian
    conic_mat: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray    # (n, 3): a, b, c
    opac: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    rect: np.ndarray
    order: np.ndarray
    fade: np.ndarray
    dfade: np.ndarray    # (n, 3) d fade / d p


def _project(scene: GaussianScene, pose: CameraPose, K: Intrinsics, cfg: RenderConfig,
             tiles_x: int, tiles_y: int) -> _Projection:
    R = pose.rotation.matrix()
    t = pose.translation
    q_all = scene.means64 @ R.T
    z_all = q_all[:, 2] + t[2]
    # The EWA linearization is meaningless for means far outside the view cone
    # or right at the camera; such splats fade out smoothly so the image stays
    # a continuous function of the pose.
    lim_x = 0.5 * K.width / K.fx
    lim_y = 0.5 * K.height / K.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        in_cone = ((np.abs((q_all[:, 0] + t[0]) / z_all) < FADE_END * lim_x)
                   & (np.abs((q_all[:, 1] + t[1]) / z_all) < FADE_END * lim_y))
    idx = np.nonzero((z_all > cfg.near_plane) & in_cone)[0]
    q = q_all[idx]
    p = q + t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fade, dfade = _edge_fade(p, lim_x, lim_y, cfg.near_plane)
    op = scene.opacities[idx] * fade
    inv_z = 1.0 / z
    n = len(idx)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx * inv_z
    J[:, 0, 2] = -K.fx * x * inv_z * inv_z
    J[:, 1, 1] = K.fy * inv_z
    J[:, 1, 2] = -K.fy * y * inv_z * inv_z
    cov_cam = R @ scene.covariances[idx] @ R.T
    M = J @ cov_cam
    cov2d = M @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    sxx, sxy, syy = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = sxx * syy - sxy * sxy
    conic = np.stack([syy / det, -sxy / det, sxx / det], axis=1)
    mean2d = np.stack([K.fx * x * inv_z + K.cx, K.fy * y * inv_z + K.cy], axis=1)

    # support: ellipse where opacity * G reaches the alpha cutoff (>= 3 sigma for opaque splats)
    with np.errstate(divide="ignore"):
        k2 = np.maximum(2.0 * np.log(np.minimum(op, 0.99) / cfg.alpha_cutoff), 0.0)
    hx = np.sqrt(k2 * sxx)
    hy = np.sqrt(k2 * syy)
    ts = cfg.tile_size
    x0 = np.floor((mean2d[:, 0] - hx) / ts)
    x1 = np.floor((mean2d[:, 0] + hx) / ts)
    y0 = np.floor((mean2d[:, 1] - hy) / ts)
    y1 = np.floor((mean2d[:, 1] + hy) / ts)
    on = (x1 >= 0) & (y1 >= 0) & (x0 <= tiles_x - 1) & (y0 <= tiles_y - 1) & (k2 > 0)
    on &= (mean2d[:, 0] - hx <= K.width - 1) & (mean2d[:, 1] - hy <= K.height - 1)
    on &= (mean2d[:, 0] + hx >= 0) & (mean2d[:, 1] + hy >= 0)
    rect = np.stack([np.clip(x0, 0, tiles_x - 1), np.clip(y0, 0, tiles_y - 1),
                     np.clip(x1, 0, tiles_x - 1), np.clip(y1, 0, tiles_y - 1)],
                    axis=1).astype(np.int64)

    sel = np.nonzero(on)[0]
    idx = idx[sel]
    center = pose.center
    colors = scene.colors_from(center)[idx] if scene.sh_degree > 0 else np.maximum(
        scene.base_colors[idx], 0.0)
    conic = np.ascontiguousarray(conic[sel])
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    conic_mat = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    depth = np.ascontiguousarray(p[sel, 2])
    order = np.argsort(depth, kind="stable").astype(np.int64)
    return _Projection(
        idx=idx, q=q[sel], p=p[sel], cov_cam=cov_cam[sel], J=J[sel], conic_mat=conic_mat,
        mean2d=np.ascontiguousarray(mean2d[sel]), conic=conic,
        opac=np.ascontiguousarray(op[sel]), dfade=dfade[sel], fade=fade[sel],
        color=np.ascontiguousarray(colors, dtype=np.float64), depth=depth,
        rect=np.ascontiguousarray(rect[sel]), order=order,
    )


def _smoothstep(x):
    """Quintic C2 ramp on [0, 1] and its derivative."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0), 30.0 * x * x * (x - 1.0) * (x - 1.0)


def _edge_fade(p, lim_x, lim_y, near):
    """Opacity factor in [0, 1] and its gradient w.r.t. the camera-frame mean."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    width = (FADE_END - FADE_BEGIN)
    ux = np.abs(x) / z / lim_x
    uy = np.abs(y) / z / lim_y
    fx, dfx = _smoothstep((FADE_END - ux) / width)
    fy, dfy = _smoothstep((FADE_END - uy) / width)
    fz, dfz = _smoothstep((z - near) / near)
    # chain: d/d ux of the ramp argument is -1/width
    dfx_dx = -dfx / width * np.sign(x) / (z * lim_x)
    dfx_dz = dfx / width * ux / z
    dfy_dy = -dfy / width * np.sign(y) / (z * lim_y)
    dfy_dz = dfy / width * uy / z
    dfz_dz = dfz / near
    fade = fx * fy * fz
    grad = np.stack([dfx_dx * fy * fz, fx * dfy_dy * fz,
                     dfx_dz * fy * fz + fx * dfy_dz * fz + fx * fy * dfz_dz], axis=1)
    return fade, grad


def _run_tiles(fn, n_tiles: int, workers: int, *args):
    if workers <= 1 or n_tiles < 2:
        fn(0, n_tiles, *args)
        return
    chunks = min(n_tiles, workers * 4)
    bounds = np.linspace(0, n_tiles, chunks + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, int(bounds[i]), int(bounds[i + 1]), *args)
                   for i in range(chunks) if bounds[i + 1] > bounds[i]]
        for f in futures:
            f.result()


class RenderPass:
    """One forward render at a pose, retaining what the backward pass needs."""

    def __init__(self, scene: GaussianScene, pose: CameraPose, K: Intrinsics,
                 cfg: RenderConfig | None = None):
        cfg = cfg or RenderConfig()
        self.scene, self.pose, self.K, self.cfg = scene, pose, K, cfg
        self.workers = cfg.workers or default_workers()
        ts = cfg.tile_size
        self.tiles_x = -(-K.width // ts)
        self.tiles_y = -(-K.height // ts)
        self.proj = _project(scene, pose, K, cfg, self.tiles_x, self.tiles_y)
        self.offsets, self.ids = kernels.bin_gaussians(
            self.proj.order, self.proj.rect, self.tiles_x, self.tiles_y)
        h, w = K.height, K.width
        rgb = np.empty((h, w, 3))
        depth = np.empty((h, w))
        alpha = np.empty((h, w))
        self.last = np.empty((h, w), dtype=np.int64)
        bg = np.asarray(cfg.background, dtype=np.float64)
        pr = self.proj
        _run_tiles(kernels.forward_tiles, self.tiles_x * self.tiles_y, self.workers,
                   self.tiles_x, ts, w, h, self.offsets, self.ids, pr.mean2d, pr.conic, pr.opac,
                   pr.color, pr.depth, bg, cfg.alpha_cutoff, cfg.transmittance_floor,
                   cfg.max_gaussians_per_pixel, rgb, depth, alpha, self.last)
        self.view = RenderedView(rgb, depth, alpha)

    @property
    def contributing(self) -> int:
        return len(self.proj.idx)

    @property
    def depth_order(self) -> np.ndarray:
        """Scene indices of the contributing Gaussians, front to back."""
        return self.proj.idx[self.proj.order]

    def pose_gradient(self, residual_weight: np.ndarray) -> PoseGradient:
        """Chain ``dLoss/dRGB`` through compositing, EWA projection and the pose."""
        weight = np.ascontiguousarray(residual_weight, dtype=np.float64)
        if weight.shape != self.view.rgb.shape:
            raise InvalidArgumentError(
                f"residual weight shape {weight.shape} != image shape {self.view.rgb.shape}")
        pr = self.proj
        n = len(pr.idx)
        if n == 0 or not np.any(weight):
            return PoseGradient(np.zeros(3), np.zeros(3))
        pair = np.empty((len(self.ids), 6))
        _run_tiles(kernels.backward_tiles, self.tiles_x * self.tiles_y, self.workers,
                   self.tiles_x, self.cfg.tile_size, self.K.width, self.K.height, self.offsets,
                   self.ids, pr.mean2d, pr.conic, pr.opac, pr.color, self.cfg.alpha_cutoff,
                   self.last, self.view.rgb, weight, pair)
        g = kernels.reduce_pairs(self.ids, pair, n)
        return _chain_to_pose(pr, g[:, :2], g[:, 2:5], g[:, 5], self.K)


def _chain_to_pose(pr: _Projection, g_mean: np.ndarray, g_conic: np.ndarray,
                   g_opac: np.ndarray, K: Intrinsics) -> PoseGradient:
    J = pr.J
    # mean: m = pi(p), dm/dp = J
    g_p = np.einsum("nij,ni->nj", J, g_mean)
    # edge fade: opacity = base * fade(p)
    g_p += (g_opac * pr.opac / pr.fade)[:, None] * pr.dfade
    # conic = inv(Sigma2d): dL/dSigma2d = -Q G Q with G the symmetric conic gradient
    G = np.empty((len(g_conic), 2, 2))
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    Q = pr.conic_mat
    V = -Q @ G @ Q
    # Sigma2d = J Sigma_c J^T: through J (depends on p) and through Sigma_c (depends on R)
    GJ = 2.0 * V @ J @ pr.cov_cam
    x, y, z = pr.p[:, 0], pr.p[:, 1], pr.p[:, 2]
    iz2 = 1.0 / (z * z)
    iz3 = iz2 / z
    g_p[:, 0] += GJ[:, 0, 2] * (-K.fx * iz2)
    g_p[:, 1] += GJ[:, 1, 2] * (-K.fy * iz2)
    g_p[:, 2] += (GJ[:, 0, 0] * (-K.fx * iz2) + GJ[:, 0, 2] * (2.0 * K.fx * x * iz3)
                  + GJ[:, 1, 1] * (-K.fy * iz2) + GJ[:, 1, 2] * (2.0 * K.fy * y * iz3))
    U = J.transpose(0, 2, 1) @ V @ J
    A = pr.cov_cam @ U - U @ pr.cov_cam
    g_phi_cov = 2.0 * np.stack([A[:, 1, 2], -A[:, 0, 2], A[:, 0, 1]], axis=1)
    # p = exp(phi) q + t  =>  dL/dphi = q x dL/dp
    g_phi = np.cross(pr.q, g_p) + g_phi_cov
    return PoseGradient(g_phi.sum(axis=0), g_p.sum(axis=0))


def render(scene: GaussianScene, pose: CameraPose, K: Intrinsics,
           cfg: RenderConfig | None = None) -> RenderedView:
    return RenderPass(scene, pose, K, cfg).view


def render_backward(scene: GaussianScene, pose: CameraPose, K: Intrinsics,
                    cfg: RenderConfig | None, residual_weight: np.ndarray) -> PoseGradient:
    return RenderPass(scene, pose, K, cfg).pose_gradient(residual_weight)


def render_depth_at(scene: GaussianScene, pose: CameraPose, K: Intrinsics, pixel,
                    cfg: RenderConfig | None = None) -> float:
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= K.width - 1 and 0.0 <= v <= K.height - 1):
        raise InvalidArgumentError(f"pixel {pixel} outside the {K.width}x{K.height} image")
    return render(scene, pose, K, cfg).depth_at((u, v))
