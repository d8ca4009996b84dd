"""Rigid-body math: unit-quaternion rotations, so(3) exp/log, pinhole cameras.

Conventions
-----------
* Quaternions are stored (w, x, y, z), unit norm, canonical sign ``w >= 0``.
* Poses are world-to-camera: ``x_cam = R @ x_world + t``; the camera
  center is ``C = -R.T @ t``.
* Rotation increments are applied on the left: ``R <- exp([phi]x) R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError

_SMALL_ANGLE = 1e-8
_MIN_DEPTH = 1e-8


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix ``[v]x`` such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, slots=True)
class Rotation:
    """Unit quaternion rotation. Normalized and sign-canonicalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        w, x, y, z = float(self.w), float(self.x), float(self.y), float(self.z)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if not math.isfinite(n) or n == 0.0:
            raise InvalidArgumentError(f"cannot build a rotation from quaternion {(w, x, y, z)}")
        if w < 0.0:
            n = -n
        object.__setattr__(self, "w", w / n)
        object.__setattr__(self, "x", x / n)
        object.__setattr__(self, "y", y / n)
        object.__setattr__(self, "z", z / n)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        return cls(*(float(c) for c in q))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        """Shepperd's method: pick the largest of (trace, diagonal) to stay stable near pi."""
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        d = (tr, m[0, 0], m[1, 1], m[2, 2])
        k = int(np.argmax(d))
        if k == 0:
            s = 2.0 * math.sqrt(1.0 + tr)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif k == 1:
            s = 2.0 * math.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif k == 2:
            s = 2.0 * math.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 0.0))
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 0.0))
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(*q)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        return so3_exp(axis / np.linalg.norm(axis) * angle)

    @property
    def quat(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        """Hamilton product; ``(a @ b).matrix() == a.matrix() @ b.matrix()``."""
        aw, ax, ay, az = self.w, self.x, self.y, self.z
        bw, bx, by, bz = other.w, other.x, other.y, other.z
        return Rotation(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix().T

    def angle(self) -> float:
        return float(np.linalg.norm(so3_log(self)))

    def to_json(self) -> dict:
        return {"qw": self.w, "qx": self.x, "qy": self.y, "qz": self.z}


def so3_exp(phi) -> Rotation:
    """Exponential map so(3) -> SO(3) (Rodrigues, in half-angle quaternion form)."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3,) or not np.all(np.isfinite(phi)):
        raise InvalidArgumentError(f"so3_exp expects a finite 3-vector, got {phi!r}")
    theta = math.sqrt(float(phi @ phi))
    if theta < _SMALL_ANGLE:
        # sin(t/2)/t and cos(t/2) to second order
        s = 0.5 - theta * theta / 48.0
        c = 1.0 - theta * theta / 8.0
    else:
        s = math.sin(0.5 * theta) / theta
        c = math.cos(0.5 * theta)
    return Rotation(c, s * phi[0], s * phi[1], s * phi[2])


def so3_exp_matrix(phi) -> np.ndarray:
    """Rodrigues' formula, ``I + A [phi]x + B [phi]x^2``."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3,) or not np.all(np.isfinite(phi)):
        raise InvalidArgumentError(f"so3_exp expects a finite 3-vector, got {phi!r}")
    theta2 = float(phi @ phi)
    theta = math.sqrt(theta2)
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(r: Rotation) -> np.ndarray:
    """Logarithm SO(3) -> so(3); the result has norm in [0, pi]."""
    vn = math.sqrt(r.x * r.x + r.y * r.y + r.z * r.z)
    if vn < 1e-300:
        return np.zeros(3)
    # w >= 0 by construction, so the angle lies in [0, pi]
    theta = 2.0 * math.atan2(vn, r.w)
    k = theta / vn
    return np.array([k * r.x, k * r.y, k * r.z])


def slerp(a: Rotation, b: Rotation, s: float) -> Rotation:
    """Geodesic interpolation; ``slerp(a, b, 0.5)`` is the rotation midpoint."""
    delta = so3_log(b @ a.inverse())
    return so3_exp(s * delta) @ a


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def center_pixel(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    def scaled(self, s: float) -> "Intrinsics":
        """Intrinsics for an image resampled by factor ``s`` (pixel-center aligned)."""
        if s == 1.0:
            return self
        w = max(1, int(round(self.width * s)))
        h = max(1, int(round(self.height * s)))
        sx, sy = w / self.width, h / self.height
        return Intrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, w, h
        )

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = _readonly(self.translation)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidArgumentError(f"translation must be a finite 3-vector, got {t!r}")
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_center(cls, rotation: Rotation, center) -> "CameraPose":
        return cls(rotation, -rotation.matrix() @ np.asarray(center, dtype=float))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; image y axis points along ``-up``."""
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls.from_center(Rotation.from_matrix(np.stack([right, down, fwd])), eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.matrix().T @ self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def transform(self, x_world) -> np.ndarray:
        return np.asarray(x_world, dtype=float) @ self.rotation.matrix().T + self.translation

    def to_json(self) -> dict:
        t = self.translation
        return {**self.rotation.to_json(), "tx": float(t[0]), "ty": float(t[1]), "tz": float(t[2])}

    @classmethod
    def from_json(cls, d: dict) -> "CameraPose":
        return cls(Rotation(d["qw"], d["qx"], d["qy"], d["qz"]), [d["tx"], d["ty"], d["tz"]])


def apply_rotation_update(pose: CameraPose, phi) -> CameraPose:
    """Left-multiplicative update ``R <- exp([phi]x) R``; translation untouched."""
    return CameraPose(so3_exp(phi) @ pose.rotation, pose.translation)


def project(x_world, pose: CameraPose, K: Intrinsics) -> tuple[np.ndarray, float]:
    """Pinhole projection of one world point; returns ``(pixel, depth)``."""
    xc = pose.transform(x_world)
    if xc[2] <= _MIN_DEPTH:
        raise BehindCameraError(f"point has camera depth {xc[2]:.3g}")
    u = K.fx * xc[0] / xc[2] + K.cx
    v = K.fy * xc[1] / xc[2] + K.cy
    return np.array([u, v]), float(xc[2])


def back_project(pixel, depth: float, pose: CameraPose, K: Intrinsics) -> np.ndarray:
    if not depth > 0:
        raise InvalidArgumentError(f"depth must be positive, got {depth}")
    u, v = pixel
    xc = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.rotation.matrix().T @ (xc - pose.translation)


def pixel_ray_direction(pixel, rotation: Rotation, K: Intrinsics) -> np.ndarray:
    """Unit world-frame direction from the camera center through ``pixel``.

    With world-to-camera rotations the camera-frame ray is taken to world by
    the transpose, ``v = R.T @ K^-1 (u, v, 1)``.
    """
    u, v = pixel
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    d = rotation.matrix().T @ ray
    return d / np.linalg.norm(d)
