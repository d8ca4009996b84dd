"""Global-descriptor pose database with optional midpoint augmentation."""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, SplatlocError
from .geometry import CameraPose, Intrinsics, slerp
from .renderer import RenderConfig, render

log = logging.getLogger(__name__)

THUMB = 16
MAGIC = b"SLDB"
FORMAT_VERSION = 1


class Source(enum.IntEnum):
    REAL = 0
    SYNTHETIC = 1


@dataclass(frozen=True, eq=False)
class GlobalDescriptor:
    vector: np.ndarray
    source: Source = Source.REAL


def thumbnail(image: np.ndarray, size: int = THUMB) -> np.ndarray:
    """Bilinear resample to ``size`` x ``size`` with pixel centers aligned."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(img[:, :, c], [yy, xx], order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)


def compute_descriptor(image: np.ndarray, source: Source = Source.REAL) -> GlobalDescriptor:
    """16x16 thumbnail, per-channel mean removed, flattened and L2-normalized.

    A constant image has no structure left after mean removal; it maps to e1.
    """
    t = thumbnail(image)
    t = t - t.mean(axis=(0, 1), keepdims=True)
    v = t.ravel()
    n = np.linalg.norm(v)
    if n < 1e-12:
        v = np.zeros_like(v)
        v[0] = 1.0
    else:
        v = v / n
    return GlobalDescriptor(v, Source(source))


@dataclass(frozen=True, eq=False)
class DatabaseEntry:
    descriptor: np.ndarray
    pose: CameraPose
    source: Source
    image_id: int


@dataclass(frozen=True, eq=False)
class PoseDatabase:
    entries: tuple
    scene_ref: str = ""

    def __post_init__(self):
        if not any(e.source is Source.REAL for e in self.entries):
            raise InvalidArgumentError("database needs at least one real entry")
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([e.descriptor for e in self.entries])

    @property
    def augmented(self) -> bool:
        return any(e.source is Source.SYNTHETIC for e in self.entries)

    def by_source(self, source: Source) -> list[DatabaseEntry]:
        return [e for e in self.entries if e.source is source]


def midpoint_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Slerp the rotations at 0.5 and average the camera centers."""
    return CameraPose.from_center(slerp(a.rotation, b.rotation, 0.5), 0.5 * (a.center + b.center))


def build_database(reference_views, scene=None, augment: bool = False,
                   K: Intrinsics | None = None, cfg: RenderConfig | None = None,
                   scene_ref: str = "") -> PoseDatabase:
    """Real entries for every ``(image, pose)`` plus, if ``augment``, one rendered
    midpoint view per consecutive pair (image ids N .. 2N-2)."""
    views = list(reference_views)
    if not views:
        raise InvalidArgumentError("no reference views")
    entries = [DatabaseEntry(compute_descriptor(img).vector, pose, Source.REAL, i)
               for i, (img, pose) in enumerate(views)]
    if augment:
        if len(views) < 2:
            raise InvalidArgumentError("augmentation needs at least two reference views")
        if scene is None:
            raise InvalidArgumentError("augmentation needs a scene to render midpoints")
        if K is None:
            h, w = np.asarray(views[0][0]).shape[:2]
            K = Intrinsics.from_fov(w, h, 60.0)
        n = len(views)
        for i in range(n - 1):
            pose = midpoint_pose(views[i][1], views[i + 1][1])
            try:
                img = render(scene, pose, K, cfg).rgb
            except SplatlocError as exc:
                log.warning("skipping midpoint %d: %s", i, exc)
                continue
            entries.append(DatabaseEntry(compute_descriptor(img, Source.SYNTHETIC).vector,
                                         pose, Source.SYNTHETIC, n + i))
    return PoseDatabase(tuple(entries), scene_ref)


@dataclass(frozen=True)
class Match:
    entry: DatabaseEntry
    similarity: float


def _ranked(entries, query: np.ndarray, k: int) -> list[Match]:
    if not entries:
        return []
    sims = np.stack([e.descriptor for e in entries]) @ query
    ids = np.array([e.image_id for e in entries])
    # lexsort: last key is primary -> descending similarity, then ascending id
    order = np.lexsort((ids, -sims))[:k]
    return [Match(entries[i], float(sims[i])) for i in order]


def retrieve_topk(db: PoseDatabase, query, k: int = 3) -> list[Match]:
    """Top ``k`` entries by cosine similarity; ties go to the smaller image id."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    q = query.vector if isinstance(query, GlobalDescriptor) else np.asarray(query, dtype=float)
    return _ranked(list(db.entries), q, k)


def retrieve_partitioned(db: PoseDatabase, query, k: int = 3) -> dict[Source, list[Match]]:
    """Top ``k`` per source, so real and synthetic candidates are handled independently."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    q = query.vector if isinstance(query, GlobalDescriptor) else np.asarray(query, dtype=float)
    return {s: _ranked(db.by_source(s), q, k) for s in Source if db.by_source(s)}


# ---------------------------------------------------------------------------
# Binary persistence
# ---------------------------------------------------------------------------

def save_database(db: PoseDatabase, path) -> None:
    dim = len(db.entries[0].descriptor)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, len(db), dim))
        for e in db.entries:
            f.write(np.asarray(e.descriptor, dtype="<f4").tobytes())
            blob = json.dumps(e.pose.to_json(), sort_keys=True).encode()
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<BI", int(e.source), e.image_id))


def load_database(path) -> PoseDatabase:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise SplatlocError(f"{path}: not a pose database (bad magic)")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise SplatlocError(f"{path}: unsupported database version {version}")
    off = 16
    entries = []
    try:
        for _ in range(count):
            desc = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            pose = CameraPose.from_json(json.loads(data[off:off + n]))
            off += n
            src, image_id = struct.unpack_from("<BI", data, off)
            off += 5
            entries.append(DatabaseEntry(desc, pose, Source(src), image_id))
    except (struct.error, ValueError) as exc:
        raise SplatlocError(f"{path}: truncated or corrupt database ({exc})") from exc
    return PoseDatabase(tuple(entries), path.stem)
