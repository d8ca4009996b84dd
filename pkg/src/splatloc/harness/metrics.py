"""Pose error metrics and recall at diameter-relative thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError
from ..geometry import CameraPose, Rotation, so3_log


@dataclass(frozen=True)
class Threshold:
    name: str
    degrees: float
    diameter_fraction: float

    def units(self, diameter: float) -> float:
        return self.diameter_fraction * diameter


LOOSE = Threshold("loose", 2.0, 0.02)
TIGHT = Threshold("tight", 1.0, 0.01)
STRICT = Threshold("strict", 0.1, 0.002)
THRESHOLDS = (LOOSE, TIGHT, STRICT)


def rotation_error(r_est: Rotation, r_gt: Rotation) -> float:
    """Angle of ``R_gt R_est^T`` in degrees."""
    return math.degrees(float(np.linalg.norm(so3_log(r_gt @ r_est.inverse()))))


def translation_error(t_est: CameraPose, t_gt: CameraPose) -> float:
    """Camera-center distance in scene units."""
    return float(np.linalg.norm(t_est.center - t_gt.center))


def pose_errors(est: CameraPose, gt: CameraPose) -> tuple[float, float]:
    return rotation_error(est.rotation, gt.rotation), translation_error(est, gt)


def recall_at(errors, theta_deg: float, d_units: float) -> float:
    """Fraction of (rotation_deg, translation) pairs strictly inside both bounds.

    ``None`` entries (failed estimates) count as misses.
    """
    errors = list(errors)
    if not errors:
        raise InvalidArgumentError("recall of an empty result set")
    hits = sum(1 for e in errors if e is not None and e[0] < theta_deg and e[1] < d_units)
    return hits / len(errors)


def median_errors(errors) -> tuple[float, float]:
    """Median rotation and translation error; failures count as infinite."""
    errors = list(errors)
    if not errors:
        raise InvalidArgumentError("median of an empty result set")
    rot = [math.inf if e is None else e[0] for e in errors]
    tr = [math.inf if e is None else e[1] for e in errors]
    return float(np.median(rot)), float(np.median(tr))
