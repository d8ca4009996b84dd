"""Gaussian-splat scene model, PLY interchange, synthetic scenes and artifact injection.

Primitives are stored raw, exactly as the standard splat PLY carries them
(log-scales, opacity logits, unnormalized quaternions, SH coefficients); the
renderer applies the activations. Raw fields are float32 so that a PLY round
trip is lossless.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import InvalidArgumentError, PlyDataError, PlyFormatError
from .geometry import CameraPose, Intrinsics, Rotation

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p / (1.0 - p))


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


def quat_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batch (N, 4) wxyz quaternions (normalized here) to (N, 3, 3) matrices."""
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def eval_sh(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate real SH colors. ``sh`` is (N, 3, K), ``dirs`` unit (N, 3). Returns SH sum only."""
    result = SH_C0 * sh[:, :, 0]
    if degree < 1:
        return result
    x, y, z = (dirs[:, i : i + 1] for i in range(3))
    result = result - SH_C1 * y * sh[:, :, 1] + SH_C1 * z * sh[:, :, 2] - SH_C1 * x * sh[:, :, 3]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (result
              + SH_C2[0] * xy * sh[:, :, 4]
              + SH_C2[1] * yz * sh[:, :, 5]
              + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, :, 6]
              + SH_C2[3] * xz * sh[:, :, 7]
              + SH_C2[4] * (xx - yy) * sh[:, :, 8])
    if degree < 3:
        return result
    return (result
            + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, :, 9]
            + SH_C3[1] * xy * z * sh[:, :, 10]
            + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, :, 11]
            + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, :, 12]
            + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, :, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, :, 14]
            + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, :, 15])


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    scale_log: np.ndarray
    rotation: Rotation
    opacity_logit: float
    sh_coeffs: np.ndarray  # (3, K)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.scale_log)

    @property
    def base_color(self) -> np.ndarray:
        return 0.5 + SH_C0 * self.sh_coeffs[:, 0]


def _frozen32(a, shape_tail: tuple) -> np.ndarray:
    a = np.array(a, dtype=np.float32)
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        raise InvalidArgumentError(f"expected shape (N, {shape_tail}), got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """Immutable structure-of-arrays collection of raw Gaussian primitives."""

    positions: np.ndarray       # (N, 3)
    scale_log: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4) wxyz, raw
    opacity_logit: np.ndarray   # (N,)
    sh: np.ndarray              # (N, 3, K)
    sh_degree: int = 0
    name: str = "scene"

    def __post_init__(self):
        if self.sh_degree not in (0, 1, 2, 3):
            raise InvalidArgumentError(f"unsupported SH degree {self.sh_degree}")
        k = sh_coeff_count(self.sh_degree)
        object.__setattr__(self, "positions", _frozen32(self.positions, (3,)))
        n = len(self.positions)
        if n == 0:
            raise InvalidArgumentError("a scene needs at least one primitive")
        object.__setattr__(self, "scale_log", _frozen32(self.scale_log, (3,)))
        object.__setattr__(self, "rotations", _frozen32(self.rotations, (4,)))
        op = np.array(self.opacity_logit, dtype=np.float32).reshape(-1)
        op.setflags(write=False)
        object.__setattr__(self, "opacity_logit", op)
        object.__setattr__(self, "sh", _frozen32(self.sh, (3, k)))
        for arr in (self.scale_log, self.rotations, self.opacity_logit, self.sh):
            if len(arr) != n:
                raise InvalidArgumentError("primitive field arrays differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].astype(float),
            self.scale_log[i].astype(float),
            Rotation.from_quat(self.rotations[i]),
            float(self.opacity_logit[i]),
            self.sh[i].astype(float),
        )

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.positions.astype(float)
        return p.min(axis=0), p.max(axis=0)

    @cached_property
    def diameter(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    # Activated quantities, computed once and shared read-only by the renderer.
    @cached_property
    def means64(self) -> np.ndarray:
        a = self.positions.astype(np.float64)
        a.setflags(write=False)
        return a

    @cached_property
    def opacities(self) -> np.ndarray:
        a = sigmoid(self.opacity_logit.astype(np.float64))
        a.setflags(write=False)
        return a

    @cached_property
    def covariances(self) -> np.ndarray:
        """World-frame covariances ``R S S^T R^T`` (N, 3, 3)."""
        rot = quat_to_matrices(self.rotations.astype(np.float64))
        s = np.exp(self.scale_log.astype(np.float64))
        m = rot * s[:, None, :]
        cov = m @ m.transpose(0, 2, 1)
        cov.setflags(write=False)
        return cov

    @cached_property
    def base_colors(self) -> np.ndarray:
        return 0.5 + SH_C0 * self.sh[:, :, 0].astype(np.float64)

    def colors_from(self, camera_center: np.ndarray) -> np.ndarray:
        """Per-primitive RGB seen from ``camera_center`` (clamped at 0 like the PLY ecosystem)."""
        if self.sh_degree == 0:
            return np.maximum(self.base_colors, 0.0)
        d = self.means64 - camera_center
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return np.maximum(eval_sh(self.sh.astype(np.float64), d, self.sh_degree) + 0.5, 0.0)

    def concat(self, other: "GaussianScene", name: str | None = None) -> "GaussianScene":
        if other.sh_degree != self.sh_degree:
            raise InvalidArgumentError("cannot merge scenes of different SH degree")
        return GaussianScene(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.scale_log, other.scale_log]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.opacity_logit, other.opacity_logit]),
            np.concatenate([self.sh, other.sh]),
            self.sh_degree,
            name or self.name,
        )

    def identical_to(self, other: "GaussianScene") -> bool:
        return (self.sh_degree == other.sh_degree
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("positions", "scale_log", "rotations", "opacity_logit", "sh")))


# ---------------------------------------------------------------------------
# PLY interchange
# ---------------------------------------------------------------------------

def _ply_property_names(degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(degree) - 1)
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def save_ply(scene: GaussianScene, path) -> None:
    names = _ply_property_names(scene.sh_degree)
    n = len(scene)
    k = sh_coeff_count(scene.sh_degree)
    data = np.zeros(n, dtype=[(name, "<f4") for name in names])
    for i, c in enumerate("xyz"):
        data[c] = scene.positions[:, i]
    for c in range(3):
        data[f"f_dc_{c}"] = scene.sh[:, c, 0]
    # f_rest is channel-major: all higher coefficients of R, then G, then B
    rest = scene.sh[:, :, 1:].reshape(n, 3 * (k - 1))
    for i in range(rest.shape[1]):
        data[f"f_rest_{i}"] = rest[:, i]
    data["opacity"] = scene.opacity_logit
    for i in range(3):
        data[f"scale_{i}"] = scene.scale_log[:, i]
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    PlyData([PlyElement.describe(data, "vertex")], byte_order="<").write(str(path))


def load_ply(path) -> GaussianScene:
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise PlyFormatError(f"{path}: not a readable PLY file ({exc})") from exc
    if "vertex" not in ply:
        raise PlyFormatError(f"{path}: no 'vertex' element")
    v = ply["vertex"]
    present = {p.name for p in v.properties}
    n_rest = sum(1 for p in present if p.startswith("f_rest_"))
    degree = {0: 0, 9: 1, 24: 2, 45: 3}.get(n_rest)
    if degree is None:
        raise PlyFormatError(f"{path}: {n_rest} f_rest properties match no SH degree")
    for name in _ply_property_names(degree):
        if name in ("nx", "ny", "nz"):
            continue
        if name not in present:
            raise PlyFormatError(f"{path}: missing vertex property '{name}'")

    def col(name):
        return np.asarray(v[name], dtype=np.float32)

    n = v.count
    k = sh_coeff_count(degree)
    positions = np.stack([col(c) for c in "xyz"], axis=1)
    sh = np.zeros((n, 3, k), dtype=np.float32)
    for c in range(3):
        sh[:, c, 0] = col(f"f_dc_{c}")
    if k > 1:
        rest = np.stack([col(f"f_rest_{i}") for i in range(3 * (k - 1))], axis=1)
        sh[:, :, 1:] = rest.reshape(n, 3, k - 1)
    opacity = col("opacity")
    scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rots = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    for label, arr in (("position", positions), ("sh", sh.reshape(n, -1)),
                       ("opacity", opacity[:, None]), ("scale", scales), ("rotation", rots)):
        bad = ~np.all(np.isfinite(arr), axis=1)
        if bad.any():
            raise PlyDataError(f"{path}: non-finite {label} at vertex index {int(np.argmax(bad))}")
    return GaussianScene(positions, scales, rots, opacity, sh, degree, name=path.stem)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

class Layout(str, enum.Enum):
    TEXTURED_BOX_ROOM = "textured_box_room"
    FACADE_GRID = "facade_grid"
    RANDOM_BLOBS = "random_blobs"


@dataclass(frozen=True)
class SceneRecipe:
    layout: Layout = Layout.TEXTURED_BOX_ROOM
    primitive_count: int = 5000
    texture_frequency: float = 1.5
    seed: int = 0
    trajectory_length: int = 150

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.primitive_count < 1:
            raise InvalidArgumentError("primitive_count must be >= 1")
        if self.trajectory_length < 2:
            raise InvalidArgumentError("trajectory_length must be >= 2")


class ValueNoise:
    """Multi-octave 3D value noise on a periodic random lattice."""

    def __init__(self, rng: np.random.Generator, lattice: int = 32, octaves: int = 4):
        self.lattice = lattice
        self.octaves = octaves
        self.values = rng.random((octaves, lattice, lattice, lattice))
        self.offsets = rng.random((octaves, 3)) * lattice

    def __call__(self, points: np.ndarray, frequency: float) -> np.ndarray:
        out = np.zeros(len(points))
        total = 0.0
        for o in range(self.octaves):
            amp = 0.55 ** o
            p = points * frequency * (2.0 ** o) + self.offsets[o]
            i0 = np.floor(p).astype(np.int64)
            f = p - i0
            f = f * f * (3.0 - 2.0 * f)
            acc = np.zeros(len(points))
            for dx in (0, 1):
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                for dy in (0, 1):
                    wy = f[:, 1] if dy else 1.0 - f[:, 1]
                    for dz in (0, 1):
                        wz = f[:, 2] if dz else 1.0 - f[:, 2]
                        idx = (i0 + (dx, dy, dz)) % self.lattice
                        acc += wx * wy * wz * self.values[o, idx[:, 0], idx[:, 1], idx[:, 2]]
            out += amp * acc
            total += amp
        return out / total


@dataclass
class _Rect:
    """Planar patch: ``origin + a*u + b*v`` for a in [0, wu], b in [0, wv]; normal n."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    wu: float
    wv: float

    @property
    def area(self) -> float:
        return self.wu * self.wv

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)


def _box_faces(center, size, skip_bottom=True) -> list[_Rect]:
    c = np.asarray(center, dtype=float)
    sx, sy, sz = size
    lo = c - np.array([sx, sy, sz]) / 2
    ex, ey, ez = np.eye(3)
    faces = [
        _Rect(lo + [0, 0, sz], ex, ey, sx, sy),                       # top
        _Rect(lo, ex, ez, sx, sz),                                    # -y
        _Rect(lo + [0, sy, 0], ex, ez, sx, sz),                       # +y
        _Rect(lo, ey, ez, sy, sz),                                    # -x
        _Rect(lo + [sx, 0, 0], ey, ez, sy, sz),                       # +x
    ]
    if not skip_bottom:
        faces.append(_Rect(lo, ex, ey, sx, sy))
    return faces


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _surface_primitives(rects: list[_Rect], count: int, rng: np.random.Generator):
    """Jittered-grid flat Gaussians covering the rectangles; returns positions, scales, rotations."""
    areas = np.array([r.area for r in rects])
    counts = _allocate(areas, count)
    pos, scl, rot = [], [], []
    for r, n in zip(rects, counts):
        if n == 0:
            continue
        s = math.sqrt(r.area / n)
        nu = max(1, int(math.ceil(r.wu / s)))
        nv = max(1, int(math.ceil(r.wv / s)))
        while nu * nv < n:
            nu += 1
        gu, gv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        cells = rng.permutation(nu * nv)[:n]
        a = (gu.ravel()[cells] + rng.random(n)) * (r.wu / nu)
        b = (gv.ravel()[cells] + rng.random(n)) * (r.wv / nv)
        pos.append(r.origin + a[:, None] * r.u + b[:, None] * r.v)
        sigma = 0.65 * s * rng.uniform(0.8, 1.25, size=(n, 2))
        scl.append(np.column_stack([sigma, np.full(n, 0.08 * s)]))
        frame = np.stack([r.u, r.v, r.normal], axis=1)   # columns: principal axes
        spin = rng.uniform(0, 2 * np.pi, n)
        for ang in spin:
            c, sn = math.cos(ang), math.sin(ang)
            inplane = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
            rot.append(Rotation.from_matrix(frame @ inplane).quat)
    return np.concatenate(pos), np.concatenate(scl), np.array(rot)


def _noise_colors(points, rect_ids, frequency, rng) -> np.ndarray:
    lum = ValueNoise(rng)(points, frequency)
    tint = np.stack([ValueNoise(rng, octaves=2)(points, 0.5 * frequency) for _ in range(3)], axis=1)
    lum = (lum - lum.mean()) / max(lum.std(), 1e-9)
    base = rng.uniform(0.3, 0.7, size=(rect_ids.max() + 1, 3))[rect_ids]
    rgb = base + 0.17 * lum[:, None] + 0.35 * (tint - 0.5)
    return np.clip(rgb, 0.03, 0.97)


def _room_geometry():
    hx, hy, h = 4.0, 2.0, 2.5
    ex, ey, ez = np.eye(3)
    rects = [
        _Rect(np.array([-hx, -hy, 0.0]), ex, ey, 2 * hx, 2 * hy),   # floor
        _Rect(np.array([-hx, -hy, h]), ey, ex, 2 * hy, 2 * hx),     # ceiling
        _Rect(np.array([-hx, -hy, 0.0]), ez, ex, h, 2 * hx),        # y = -hy
        _Rect(np.array([-hx, hy, 0.0]), ex, ez, 2 * hx, h),         # y = +hy
        _Rect(np.array([-hx, -hy, 0.0]), ey, ez, 2 * hy, h),        # x = -hx
        _Rect(np.array([hx, -hy, 0.0]), ez, ey, h, 2 * hy),         # x = +hx
    ]
    for cx, cy, sz in ((3.2, 1.35, 0.9), (-3.2, -1.35, 0.7), (3.3, -1.4, 0.5), (-3.3, 1.4, 1.1)):
        rects += _box_faces((cx, cy, sz / 2), (0.8, 0.6, sz))
    return rects


def _room_trajectory(n: int) -> list[CameraPose]:
    poses = []
    for i in range(n):
        th = 2 * np.pi * i / n
        eye = np.array([2.2 * math.cos(th), 0.9 * math.sin(th), 1.25 + 0.15 * math.sin(2 * th)])
        look = th + 0.35
        target = eye + np.array([math.cos(look), math.sin(look), -0.12])
        poses.append(CameraPose.look_at(eye, target))
    return poses


def _facade_geometry():
    ex, ey, ez = np.eye(3)
    rects = [
        _Rect(np.array([-5.0, 0.0, 0.0]), ex, ez, 10.0, 4.0),      # facade (normal -y)
        _Rect(np.array([-5.0, -4.0, 0.0]), ey, ex, 4.0, 10.0),     # ground
    ]
    for ix in range(-2, 3):
        for iz in range(3):
            center = (2.0 * ix, -0.12, 0.9 + 1.2 * iz)
            rects += _box_faces(center, (0.9, 0.24, 0.6), skip_bottom=False)
    return rects


def _facade_trajectory(n: int) -> list[CameraPose]:
    poses = []
    for i in range(n):
        s = i / max(n - 1, 1)
        eye = np.array([-3.5 + 7.0 * s, -3.0 + 0.2 * math.sin(4 * np.pi * s), 1.5])
        yaw = 0.15 * math.sin(2 * np.pi * s)
        target = eye + np.array([math.sin(yaw), math.cos(yaw), 0.05])
        poses.append(CameraPose.look_at(eye, target))
    return poses


def _blob_scene(count: int, rng: np.random.Generator):
    u = rng.normal(size=(count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = 1.5 * rng.random(count) ** (1 / 3)
    pos = u * r[:, None]
    scl = np.exp(rng.uniform(np.log(0.03), np.log(0.12), size=(count, 3)))
    q = rng.normal(size=(count, 4))
    return pos, scl, q


def _orbit_trajectory(n: int) -> list[CameraPose]:
    poses = []
    for i in range(n):
        th = 2 * np.pi * i / n
        eye = np.array([4.0 * math.cos(th), 4.0 * math.sin(th), 0.8 + 0.3 * math.sin(2 * th)])
        poses.append(CameraPose.look_at(eye, np.zeros(3)))
    return poses


def synthesize_scene(recipe: SceneRecipe) -> tuple[GaussianScene, list[CameraPose]]:
    """Deterministic synthetic scene plus a smooth camera trajectory."""
    rng = np.random.default_rng(recipe.seed)
    n = recipe.primitive_count
    if recipe.layout is Layout.RANDOM_BLOBS:
        pos, scl, q = _blob_scene(n, rng)
        ids = np.zeros(n, dtype=int)
        trajectory = _orbit_trajectory(recipe.trajectory_length)
        opacity = rng.uniform(0.5, 0.95, n)
    else:
        if recipe.layout is Layout.TEXTURED_BOX_ROOM:
            rects = _room_geometry()
            trajectory = _room_trajectory(recipe.trajectory_length)
        else:
            rects = _facade_geometry()
            trajectory = _facade_trajectory(recipe.trajectory_length)
        pos, scl, q = _surface_primitives(rects, n, rng)
        counts = _allocate(np.array([r.area for r in rects]), n)
        ids = np.repeat(np.arange(len(rects)), counts)
        opacity = rng.uniform(0.88, 0.98, n)
    rgb = _noise_colors(pos, ids, recipe.texture_frequency, rng)
    sh = rgb_to_sh_dc(rgb)[:, :, None]
    scene = GaussianScene(pos, np.log(scl), q, logit(opacity), sh, 0,
                          name=f"{recipe.layout.value}-{recipe.seed}")
    return scene, trajectory


# ---------------------------------------------------------------------------
# Artifact injection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArtifactSpec:
    floater_count: int = 0
    floater_scale_range: tuple[float, float] = (0.15, 0.4)
    floater_opacity_range: tuple[float, float] = (0.4, 0.8)
    blur_region_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.floater_count < 0:
            raise InvalidArgumentError("floater_count must be >= 0")
        for name in ("floater_scale_range", "floater_opacity_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidArgumentError(f"{name} must be ordered")
        lo, hi = self.floater_opacity_range
        if not (0.0 < lo and hi < 1.0):
            raise InvalidArgumentError("floater opacities must lie in (0, 1)")
        if not 0.0 <= self.blur_region_fraction <= 1.0:
            raise InvalidArgumentError("blur_region_fraction must lie in [0, 1]")


def _median_view_depth(scene: GaussianScene, trajectory, K: Intrinsics) -> float:
    depths = []
    for pose in trajectory:
        pc = pose.transform(scene.means64)
        z = pc[:, 2]
        ok = z > 1e-3
        u = K.fx * pc[ok, 0] / z[ok] + K.cx
        v = K.fy * pc[ok, 1] / z[ok] + K.cy
        inside = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        if inside.any():
            depths.append(np.median(z[ok][inside]))
    if not depths:
        raise InvalidArgumentError("no trajectory camera sees the scene")
    return float(np.median(depths))


def inject_artifacts(scene: GaussianScene, spec: ArtifactSpec, trajectory=None,
                     intrinsics: Intrinsics | None = None) -> GaussianScene:
    """New scene with floaters and/or a blurred region; ``scene`` is left untouched.

    Floaters land inside the frustum of a random trajectory camera at 20-60% of
    the median scene depth when a trajectory is given, otherwise uniformly in
    the scene bounds.
    """
    if spec.floater_count == 0 and spec.blur_region_fraction == 0.0:
        return scene
    rng = np.random.default_rng(spec.seed)
    scale_log = scene.scale_log.copy()
    if spec.blur_region_fraction > 0.0:
        n_blur = int(round(spec.blur_region_fraction * len(scene)))
        if n_blur > 0:
            seed_idx = rng.integers(len(scene))
            d = np.linalg.norm(scene.means64 - scene.means64[seed_idx], axis=1)
            region = np.argsort(d, kind="stable")[:n_blur]
            scale_log[region] += np.log(rng.uniform(3.0, 6.0, size=(n_blur, 1))).astype(np.float32)
    out = GaussianScene(scene.positions, scale_log, scene.rotations, scene.opacity_logit,
                        scene.sh, scene.sh_degree, name=scene.name + "+artifacts")
    m = spec.floater_count
    if m == 0:
        return out
    if trajectory:
        K = intrinsics or Intrinsics.from_fov(64, 64, 60.0)
        med = _median_view_depth(scene, trajectory, K)
        pos = np.empty((m, 3))
        for i in range(m):
            pose = trajectory[rng.integers(len(trajectory))]
            px = rng.uniform(0.1, 0.9) * (K.width - 1)
            py = rng.uniform(0.1, 0.9) * (K.height - 1)
            depth = rng.uniform(0.2, 0.6) * med
            xc = np.array([(px - K.cx) / K.fx * depth, (py - K.cy) / K.fy * depth, depth])
            pos[i] = pose.rotation.matrix().T @ (xc - pose.translation)
    else:
        lo, hi = scene.bounds
        pos = rng.uniform(lo, hi, size=(m, 3))
    scales = rng.uniform(*spec.floater_scale_range, size=(m, 1)) * rng.uniform(0.7, 1.3, size=(m, 3))
    quats = rng.normal(size=(m, 4))
    opac = rng.uniform(*spec.floater_opacity_range, size=m)
    gray = rng.uniform(0.3, 0.8, size=(m, 1))
    rgb = np.clip(gray + rng.normal(scale=0.05, size=(m, 3)), 0.0, 1.0)
    k = sh_coeff_count(scene.sh_degree)
    sh = np.zeros((m, 3, k))
    sh[:, :, 0] = rgb_to_sh_dc(rgb)
    floaters = GaussianScene(pos, np.log(scales), quats, logit(opac), sh, scene.sh_degree)
    return out.concat(floaters)
