"""Experiment configuration loaded from TOML.

Schema (every table and key is optional; defaults shown)::

    seed = 0
    output_dir = "runs/default"
    scenario = "clean"
    workers = 1                      # queries processed concurrently

    [scene]                          # either a recipe ...
    layout = "textured_box_room"
    primitive_count = 5000
    texture_frequency = 1.5
    seed = 0
    trajectory_length = 150
    # ply = "scene.ply"              # ... or a PLY file plus trajectory JSON
    # trajectory = "trajectory.json"

    [camera]
    width = 128
    height = 128
    fov_deg = 60.0

    [artifacts]                      # applied to the map only; queries stay clean
    floater_count = 0
    floater_scale_range = [0.15, 0.4]
    floater_opacity_range = [0.4, 0.8]
    blur_region_fraction = 0.0
    seed = 0

    [split]
    test = 1                         # test:train frames, uniform in time
    train = 2
    max_queries = 0                  # 0 = all test frames

    [query]
    noise_sigma = 0.01
    gain_jitter = 0.0
    pose_jitter_deg = 3.0            # query cameras leave the reference path:
    pose_jitter_frac = 0.03          # rotation up to this angle, center offset up
                                     # to this fraction of the scene diameter

    [retrieval]
    k = 3
    augment = true

    [search]                         # gamma_min, gamma_max, ns, alpha, beta, eps,
                                     # render_scale, intensity_scale
    [refine]                         # any RefineConfig field; tau_policy = {kind, value}

    [backend]
    kind = "oracle_noise"            # or "ncc_matcher"
    sigma_rot_deg = 1.0
    sigma_dir_deg = 0.0
    seed = 0

    [phases]
    run = ["1", "1+2", "1+2+3"]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:    # Python < 3.11
    import tomli as tomllib

from ..errors import ConfigError, InvalidArgumentError
from ..initializer import SearchConfig
from ..photometry import TauPolicy
from ..refiner import RefineConfig
from ..scene import ArtifactSpec, SceneRecipe

PHASES = ("1", "1+2", "1+2+3")


@dataclass(frozen=True)
class CameraConfig:
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0


@dataclass(frozen=True)
class SplitConfig:
    test: int = 1
    train: int = 2
    max_queries: int = 0

    def partition(self, n: int) -> tuple[list[int], list[int]]:
        """Uniform temporal split into (query frames, reference frames).

        In each block of test+train frames the middle ``test`` frames are held
        out; ``max_queries`` truncates the queries but never returns frames to
        the reference set.
        """
        block = self.test + self.train
        lo = self.train // 2
        held = [i for i in range(n) if lo <= i % block < lo + self.test]
        refs = [i for i in range(n) if not lo <= i % block < lo + self.test]
        return (held[: self.max_queries] if self.max_queries else held), refs


@dataclass(frozen=True)
class QueryConfig:
    noise_sigma: float = 0.01
    gain_jitter: float = 0.0
    pose_jitter_deg: float = 3.0
    pose_jitter_frac: float = 0.03


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 3
    augment: bool = True


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "oracle_noise"
    sigma_rot_deg: float = 1.0
    sigma_dir_deg: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    scenario: str = "clean"
    workers: int = 1
    recipe: SceneRecipe = field(default_factory=lambda: SceneRecipe(trajectory_length=150))
    ply: str | None = None
    trajectory: str | None = None
    camera: CameraConfig = field(default_factory=CameraConfig)
    artifacts: ArtifactSpec = field(default_factory=ArtifactSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    phases: tuple = PHASES

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _build(cls, table: dict, where: str, convert=None):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kw = dict(table)
    if convert:
        kw = convert(kw)
    try:
        return cls(**kw)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _tuples(*keys):
    def convert(kw):
        for k in keys:
            if k in kw:
                kw[k] = tuple(kw[k])
        return kw
    return convert


def _refine_convert(kw):
    if "tau_policy" in kw:
        tp = kw["tau_policy"]
        if not isinstance(tp, dict):
            raise ConfigError("[refine] tau_policy must be a table {kind, value}")
        try:
            kw["tau_policy"] = TauPolicy(**tp)
        except (InvalidArgumentError, TypeError) as exc:
            raise ConfigError(f"[refine] tau_policy: {exc}") from exc
    return kw


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    kw = {}
    for key in ("seed", "output_dir", "scenario", "workers"):
        if key in d:
            kw[key] = d.pop(key)
    if "scene" in d:
        scene = dict(d.pop("scene"))
        kw["ply"] = scene.pop("ply", None)
        kw["trajectory"] = scene.pop("trajectory", None)
        if kw["ply"] and not kw["trajectory"]:
            raise ConfigError("[scene] a ply scene needs a trajectory file")
        base = dataclasses.asdict(SceneRecipe(trajectory_length=150))
        base.update(scene)
        kw["recipe"] = _build(SceneRecipe, base, "scene")
    tables = {
        "camera": (CameraConfig, None),
        "artifacts": (ArtifactSpec, _tuples("floater_scale_range", "floater_opacity_range")),
        "split": (SplitConfig, None),
        "query": (QueryConfig, None),
        "retrieval": (RetrievalConfig, None),
        "search": (SearchConfig, None),
        "refine": (RefineConfig, _refine_convert),
        "backend": (BackendConfig, None),
    }
    for name, (cls, conv) in tables.items():
        if name in d:
            kw[name] = _build(cls, d.pop(name), name, conv)
    if "phases" in d:
        run = tuple(d.pop("phases").get("run", PHASES))
        bad = [p for p in run if p not in PHASES]
        if bad:
            raise ConfigError(f"[phases] unknown phases {bad}; choose from {PHASES}")
        kw["phases"] = run
    if d:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(d))}")
    cfg = ExperimentConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.retrieval.k < 1:
        raise ConfigError("[retrieval] k must be >= 1")
    if cfg.split.test < 1 or cfg.split.train < 1:
        raise ConfigError("[split] test and train must be >= 1")
    n = cfg.recipe.trajectory_length
    if cfg.ply is None and len(cfg.split.partition(n)[1]) < 2:
        raise ConfigError("[split] fewer than two reference views")
    if cfg.backend.kind not in ("oracle_noise", "ncc_matcher"):
        raise ConfigError(f"[backend] unknown kind {cfg.backend.kind!r}")
    if not 0.0 <= cfg.query.noise_sigma <= 0.1:
        raise ConfigError("[query] noise_sigma must lie in [0, 0.1]")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    cfg = config_from_dict(data)
    # relative scene paths resolve against the config file's directory
    base = path.parent
    if cfg.ply and not Path(cfg.ply).is_absolute():
        cfg = cfg.replace(ply=str(base / cfg.ply))
    if cfg.trajectory and not Path(cfg.trajectory).is_absolute():
        cfg = cfg.replace(trajectory=str(base / cfg.trajectory))
    return cfg
