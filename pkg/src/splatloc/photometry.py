"""L1 photometric objective and the patch-wise Laplacian reliability mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateMaskError, InvalidArgumentError

LUMA = np.array([0.299, 0.587, 0.114])
LAPLACE_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class TauPolicy:
    """How the mask threshold is resolved from the patch scores.

    kind: ``relative`` (tau = value * mean score), ``absolute`` (tau = value)
    or ``quantile`` (tau = score quantile at ``value``).
    """

    kind: str = "relative"
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("relative", "absolute", "quantile"):
            raise InvalidArgumentError(f"unknown tau policy {self.kind!r}")
        if self.kind == "quantile" and not 0.0 <= self.value <= 1.0:
            raise InvalidArgumentError("quantile policy needs a value in [0, 1]")
        if self.kind == "relative" and not self.value >= 0.0:
            raise InvalidArgumentError("relative policy needs a non-negative factor")

    def resolve(self, scores: np.ndarray) -> float:
        if self.kind == "absolute":
            return float(self.value)
        if self.kind == "relative":
            return float(self.value * scores.mean())
        return float(np.quantile(scores, self.value))


@dataclass(frozen=True)
class PhotometricLoss:
    value: float
    pixel_count: int


@dataclass(frozen=True, eq=False)
class ReliabilityMask:
    mask: np.ndarray        # (H, W) bool
    patch_size: int
    scores: np.ndarray      # (rows, cols) per-patch mean |laplacian|
    threshold: float

    @property
    def kept_fraction(self) -> float:
        return float(self.mask.mean())

    @classmethod
    def all_ones(cls, shape: tuple[int, int], patch_size: int = 16) -> "ReliabilityMask":
        rows, cols = -(-shape[0] // patch_size), -(-shape[1] // patch_size)
        return cls(np.ones(shape, dtype=bool), patch_size, np.zeros((rows, cols)), 0.0)


def _check_pair(query: np.ndarray, rendered: np.ndarray):
    if query.shape != rendered.shape:
        raise InvalidArgumentError(f"image shapes differ: {query.shape} vs {rendered.shape}")
    if query.ndim != 3 or query.shape[2] != 3:
        raise InvalidArgumentError(f"expected HxWx3 images, got {query.shape}")


def photometric_l1(query: np.ndarray, rendered: np.ndarray,
                   mask: ReliabilityMask | None = None) -> tuple[PhotometricLoss, np.ndarray]:
    """Mean absolute RGB difference over the (masked) domain and its subgradient.

    The returned residual weight is d loss / d rendered, with sign(0) = 0.
    """
    query = np.asarray(query, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    _check_pair(query, rendered)
    diff = rendered - query
    if mask is None:
        n = diff.size
        weight = np.sign(diff) / n
        return PhotometricLoss(float(np.abs(diff).sum() / n), query.shape[0] * query.shape[1]), weight
    m = mask.mask
    if m.shape != query.shape[:2]:
        raise InvalidArgumentError(f"mask shape {m.shape} != image shape {query.shape[:2]}")
    count = int(m.sum())
    if count == 0:
        raise DegenerateMaskError("mask keeps no pixels")
    n = 3 * count
    weight = np.where(m[:, :, None], np.sign(diff), 0.0) / n
    value = float(np.abs(diff[m]).sum() / n)
    return PhotometricLoss(value, count), weight


def luminance(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) @ LUMA


def laplacian(gray: np.ndarray) -> np.ndarray:
    """4-neighbour discrete Laplacian with replicated borders."""
    return ndimage.correlate(gray, LAPLACE_KERNEL, mode="nearest")


def patch_means(values: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-patch mean; partial patches at the right/bottom use their true pixel count."""
    h, w = values.shape
    ys = np.arange(0, h, patch_size)
    xs = np.arange(0, w, patch_size)
    sums = np.add.reduceat(np.add.reduceat(values, ys, axis=0), xs, axis=1)
    return sums / _patch_areas(values.shape, patch_size)


def laplacian_scores(rendered: np.ndarray, patch_size: int = 16) -> np.ndarray:
    if patch_size < 4:
        raise InvalidArgumentError("patch_size must be >= 4")
    return patch_means(np.abs(laplacian(luminance(rendered))), patch_size)


def _expand(patch_values: np.ndarray, patch_size: int, shape) -> np.ndarray:
    full = np.repeat(np.repeat(patch_values, patch_size, axis=0), patch_size, axis=1)
    return full[: shape[0], : shape[1]]


def build_mask(scores: np.ndarray, patch_size: int, shape: tuple[int, int],
               tau_policy: TauPolicy | None = None,
               min_keep_fraction: float = 0.10) -> ReliabilityMask:
    """Binary mask m(u) = [s(patch(u)) >= tau] over an image of ``shape``.

    When fewer than ``min_keep_fraction`` of the pixels survive, tau drops to the
    highest patch score whose superlevel set covers at least that fraction.
    """
    tau_policy = tau_policy or TauPolicy()
    scores = np.asarray(scores, dtype=np.float64)
    h, w = shape
    if scores.shape != (-(-h // patch_size), -(-w // patch_size)):
        raise InvalidArgumentError(f"scores shape {scores.shape} does not tile a {shape} image")
    tau = tau_policy.resolve(scores)
    score_img = _expand(scores, patch_size, shape)
    mask = score_img >= tau
    need = math.ceil(min_keep_fraction * h * w)
    if mask.sum() < need:
        # patches in descending score order; stop once enough pixels are covered
        areas = _patch_areas(shape, patch_size)
        order = np.argsort(-scores, axis=None, kind="stable")
        covered = np.cumsum(areas.ravel()[order])
        pos = min(int(np.searchsorted(covered, need)), len(order) - 1)
        tau = float(scores.ravel()[order[pos]])
        mask = score_img >= tau
    return ReliabilityMask(mask, patch_size, scores, tau)


def _patch_areas(shape, patch_size: int) -> np.ndarray:
    h, w = shape
    ys = np.arange(0, h, patch_size)
    xs = np.arange(0, w, patch_size)
    return np.outer(np.minimum(ys + patch_size, h) - ys, np.minimum(xs + patch_size, w) - xs)


def mask_from_render(rendered: np.ndarray, patch_size: int = 16,
                     tau_policy: TauPolicy | None = None,
                     min_keep_fraction: float = 0.10) -> ReliabilityMask:
    scores = laplacian_scores(rendered, patch_size)
    return build_mask(scores, patch_size, rendered.shape[:2], tau_policy, min_keep_fraction)


def downsample(image: np.ndarray, scale: float) -> np.ndarray:
    """Resample an HxWxC image by ``scale`` to match ``Intrinsics.scaled(scale)``.

    Integer reduction factors use block averaging; anything else is bilinear
    with pixel centers aligned.
    """
    if scale == 1.0:
        return np.asarray(image, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    oh, ow = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    fy, fx = h / oh, w / ow
    if fy == fx and fy.is_integer() and h % oh == 0 and w % ow == 0:
        f = int(fy)
        return img.reshape(oh, f, ow, f, -1).mean(axis=(1, 3))
    ys = (np.arange(oh) + 0.5) * fy - 0.5
    xs = (np.arange(ow) + 0.5) * fx - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(img[:, :, c], [yy, xx], order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)
