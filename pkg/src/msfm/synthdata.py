"""Deterministic synthetic occluded scenes.

A scene is a ``C x H x W`` feature grid (one cell per ``stride`` pixels)
holding rectangular pedestrians, pedestrian-like distractors and occluders.
Pedestrians write a part-coded signature (a body channel plus one of three
vertical-part channels); occluders are painted afterwards and overwrite
whatever they cover. Each occluder enters its target pedestrian from the
bottom, left or right, so the unoccluded part of a pedestrian stays
rectangular and becomes its visible-body box.

Channel layout (``channels >= 8``; extra channels carry noise only)::

    0      body presence (pedestrians; weaker on distractors)
    1..3   upper / middle / lower third of a pedestrian
    4, 5   occluder texture
    6      distractor texture
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from msfm.geometry import Box, InvalidBoxError, area, clip

MIN_CHANNELS = 8
BODY, UPPER, MIDDLE, LOWER, OCC_A, OCC_B, DISTRACTOR = range(7)


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    width: float = 256.0
    height: float = 160.0
    stride: float = 4.0
    channels: int = 8
    pedestrians: tuple[int, int] = (2, 5)
    occluders: tuple[int, int] = (1, 4)
    distractors: tuple[int, int] = (1, 3)
    ped_height: tuple[float, float] = (44.0, 120.0)
    aspect: float = 0.41
    occlusion_fraction: tuple[float, float] = (0.25, 0.8)
    ped_amplitude: float = 1.0
    occluder_amplitude: float = 1.0
    distractor_amplitude: float = 0.8
    noise: float = 0.3
    ignore_prob: float = 0.05
    max_placement_tries: int = 50

    def validate(self) -> None:
        for name in ("pedestrians", "occluders", "distractors", "ped_height", "occlusion_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
            if lo < 0:
                raise ConfigError(f"{name}: negative lower bound {lo}")
        if self.pedestrians[1] < 1:
            raise ConfigError("pedestrians: range must allow at least one pedestrian")
        if self.channels < MIN_CHANNELS:
            raise ConfigError(f"channels must be >= {MIN_CHANNELS}, got {self.channels}")
        if self.stride <= 0 or self.width <= 0 or self.height <= 0:
            raise ConfigError("width, height and stride must be positive")
        if self.width % self.stride or self.height % self.stride:
            raise ConfigError("width and height must be multiples of stride")
        if not 0 < self.occlusion_fraction[1] < 1:
            raise ConfigError("occlusion_fraction must lie inside (0, 1)")
        if self.ped_height[0] <= 0:
            raise ConfigError("ped_height must be positive")
        if self.ped_height[0] > self.height or self.ped_height[0] * self.aspect > self.width:
            raise ConfigError(
                f"grid {self.width}x{self.height} too small for a pedestrian of "
                f"height {self.ped_height[0]}"
            )
        if min(self.ped_height[0], self.ped_height[0] * self.aspect) < 2 * self.stride:
            raise ConfigError("smallest pedestrian must span at least two grid cells")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(round(self.height / self.stride)), int(round(self.width / self.stride))

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GeneratorConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)

    @classmethod
    def occluder_heavy(cls) -> "GeneratorConfig":
        """Benchmark setting where most pedestrians carry at least one occluder."""
        return cls(pedestrians=(2, 4), occluders=(2, 4), occlusion_fraction=(0.3, 0.8))


@dataclass(frozen=True)
class Annotation:
    full: Box
    visible: Box
    visibility: float
    height: float
    ignore: bool = False

    @classmethod
    def from_boxes(cls, full: Box, visible: Box, ignore: bool = False) -> "Annotation":
        return cls(full, visible, area(visible) / area(full), full.height, ignore)


@dataclass(frozen=True)
class SubsetSpec:
    name: str
    min_visibility: float
    max_visibility: float
    min_height: float = 50.0


R = SubsetSpec("R", 0.65, 1.0)
HO = SubsetSpec("HO", 0.20, 0.65)
R_PLUS_HO = SubsetSpec("R+HO", 0.20, 1.0)
SUBSETS = {"R": R, "HO": HO, "R+HO": R_PLUS_HO}


def subset_by_name(name: str) -> SubsetSpec:
    key = name.strip().upper().replace("_PLUS_", "+")
    if key not in SUBSETS:
        raise KeyError(f"unknown subset {name!r}; expected one of R, HO, R+HO")
    return SUBSETS[key]


@dataclass(eq=False)
class Scene:
    id: str
    bounds: Box
    feature_grid: np.ndarray
    annotations: list[Annotation]
    seed: int
    stride: float
    occluders: list[Box] = field(default_factory=list)
    config: GeneratorConfig | None = None
    cache: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def channels(self) -> int:
        return self.feature_grid.shape[0]


def subset_filter(a: Annotation, s: SubsetSpec) -> bool:
    return s.min_visibility < a.visibility <= s.max_visibility and a.height >= s.min_height


def training_filter(a: Annotation) -> bool:
    """Training keeps pedestrians at least 50 px tall and occluded less than 70%."""
    return a.height >= 50.0 and a.visibility > 0.30


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def visible_region(full: Box, occluders: Sequence[Box]) -> Box | None:
    """Largest sub-rectangle of ``full`` not overlapping any occluder.

    Candidate edges are the edges of ``full`` and of the occluders, so the
    search is exhaustive. Ties go to the top-most, then left-most rectangle.
    Returns ``None`` when ``full`` is completely covered.
    """
    cuts = [c for c in (clip(o, full) for o in occluders) if c is not None]
    if not cuts:
        return full
    xs = sorted({full.x1, full.x2, *(c.x1 for c in cuts), *(c.x2 for c in cuts)})
    ys = sorted({full.y1, full.y2, *(c.y1 for c in cuts), *(c.y2 for c in cuts)})
    best: tuple[float, float, float, float, float] | None = None
    for y1, y2 in itertools.combinations(ys, 2):
        for x1, x2 in itertools.combinations(xs, 2):
            blocked = any(
                min(x2, c.x2) > max(x1, c.x1) and min(y2, c.y2) > max(y1, c.y1) for c in cuts
            )
            if blocked:
                continue
            a = (x2 - x1) * (y2 - y1)
            if best is None or a > best[0]:
                best = (a, x1, y1, x2, y2)
    if best is None:
        return None
    return Box(*best[1:])


def _cell_mask(box: Box, stride: float, shape: tuple[int, int]) -> tuple[slice, slice]:
    # cells whose centres fall inside [x1, x2) x [y1, y2)
    h, w = shape
    c0 = max(0, math.ceil(box.x1 / stride - 0.5))
    c1 = min(w, math.ceil(box.x2 / stride - 0.5))
    r0 = max(0, math.ceil(box.y1 / stride - 0.5))
    r1 = min(h, math.ceil(box.y2 / stride - 0.5))
    return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))


def _paint_pedestrian(grid: np.ndarray, box: Box, stride: float, amp: float) -> None:
    rows, cols = _cell_mask(box, stride, grid.shape[1:])
    grid[:, rows, cols] = 0.0
    grid[BODY, rows, cols] = amp
    centres = (np.arange(rows.start, rows.stop) + 0.5) * stride
    part = np.minimum(((centres - box.y1) / box.height * 3).astype(int), 2)
    for k, r in enumerate(range(rows.start, rows.stop)):
        grid[UPPER + part[k], r, cols] = amp


def _paint_occluder(grid: np.ndarray, box: Box, stride: float, amp: float) -> None:
    rows, cols = _cell_mask(box, stride, grid.shape[1:])
    grid[:, rows, cols] = 0.0
    rr, cc = np.meshgrid(np.arange(rows.start, rows.stop), np.arange(cols.start, cols.stop), indexing="ij")
    checker = ((rr + cc) % 2).astype(np.float64)
    grid[OCC_A, rows, cols] = amp * (0.5 + 0.5 * checker)
    grid[OCC_B, rows, cols] = amp * (1.0 - 0.5 * checker)


def _paint_distractor(grid: np.ndarray, box: Box, stride: float, amp: float) -> None:
    rows, cols = _cell_mask(box, stride, grid.shape[1:])
    grid[:, rows, cols] = 0.0
    grid[BODY, rows, cols] = 0.6 * amp
    grid[UPPER, rows, cols] = amp
    grid[DISTRACTOR, rows, cols] = amp


def _occluder_for(target: Box, side: str, fraction: float, margin: float, bounds: Box) -> Box | None:
    w, h = target.width, target.height
    if side == "bottom":
        raw = Box(target.x1 - margin * w, target.y2 - fraction * h, target.x2 + margin * w, target.y2 + margin * h)
    elif side == "left":
        raw = Box(target.x1 - margin * w, target.y1 - margin * h, target.x1 + fraction * w, target.y2 + margin * h)
    else:
        raw = Box(target.x2 - fraction * w, target.y1 - margin * h, target.x2 + margin * w, target.y2 + margin * h)
    return clip(raw, bounds)


def compose_scene(
    config: GeneratorConfig,
    pedestrians: Sequence[Box],
    occluders: Sequence[Box] = (),
    distractors: Sequence[Box] = (),
    seed: int = 0,
    ignore: Sequence[bool] | None = None,
    scene_id: str | None = None,
) -> Scene:
    """Rasterise explicitly placed objects into a scene.

    Annotation visible boxes come from :func:`visible_region`; pedestrians
    that end up fully covered get no annotation.
    """
    bounds = Box(0.0, 0.0, config.width, config.height)
    rng = np.random.default_rng([seed, 1])
    shape = config.grid_shape
    grid = rng.normal(0.0, config.noise, size=(config.channels, *shape)) if config.noise > 0 else np.zeros((config.channels, *shape))
    layer = np.zeros((config.channels, *shape))
    painted = np.zeros(shape, dtype=bool)

    def paint(fn, box: Box, amp: float) -> None:
        rows, cols = _cell_mask(box, config.stride, shape)
        fn(layer, box, config.stride, amp)
        painted[rows, cols] = True

    for d in distractors:
        paint(_paint_distractor, d, config.distractor_amplitude)
    for p in pedestrians:
        paint(_paint_pedestrian, p, config.ped_amplitude)
    for o in occluders:
        paint(_paint_occluder, o, config.occluder_amplitude)
    grid = np.where(painted[None], layer + grid, grid)

    flags = list(ignore) if ignore is not None else [False] * len(pedestrians)
    annotations = []
    for p, flag in zip(pedestrians, flags):
        if not bounds.contains(p):
            raise ConfigError(f"pedestrian {p} lies outside scene bounds")
        vis = visible_region(p, occluders)
        if vis is None:
            continue
        annotations.append(Annotation.from_boxes(p, vis, bool(flag)))
    return Scene(
        id=scene_id if scene_id is not None else f"scene-{seed}",
        bounds=bounds,
        feature_grid=grid,
        annotations=annotations,
        seed=int(seed),
        stride=config.stride,
        occluders=list(occluders),
        config=config,
    )


def _place(rng: np.random.Generator, config: GeneratorConfig, taken: list[Box]) -> Box | None:
    for _ in range(config.max_placement_tries):
        h = rng.uniform(*config.ped_height)
        h = min(h, config.height)
        w = h * config.aspect
        x1 = rng.uniform(0.0, config.width - w)
        y1 = rng.uniform(0.0, config.height - h)
        cand = Box(x1, y1, x1 + w, y1 + h)
        if all(clip(cand, t) is None for t in taken):
            return cand
    return None


def generate_scene(config: GeneratorConfig, seed: int) -> Scene:
    """Generate one scene; a pure function of ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng([seed, 0])
    bounds = Box(0.0, 0.0, config.width, config.height)

    pedestrians: list[Box] = []
    for _ in range(rng.integers(config.pedestrians[0], config.pedestrians[1] + 1)):
        b = _place(rng, config, pedestrians)
        if b is not None:
            pedestrians.append(b)
    if not pedestrians:
        raise ConfigError("could not place a single pedestrian; grid too crowded or too small")

    distractors: list[Box] = []
    for _ in range(rng.integers(config.distractors[0], config.distractors[1] + 1)):
        b = _place(rng, config, pedestrians + distractors)
        if b is not None:
            distractors.append(b)

    occluders: list[Box] = []
    sides = ("bottom", "left", "right")
    for _ in range(rng.integers(config.occluders[0], config.occluders[1] + 1)):
        target = pedestrians[rng.integers(len(pedestrians))]
        side = sides[rng.integers(3)]
        frac = rng.uniform(*config.occlusion_fraction)
        margin = rng.uniform(0.0, 0.3)
        occ = _occluder_for(target, side, frac, margin, bounds)
        if occ is not None:
            occluders.append(occ)

    ignore = rng.random(len(pedestrians)) < config.ignore_prob
    return compose_scene(config, pedestrians, occluders, distractors, seed=seed, ignore=ignore)


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def generate_dataset(config: GeneratorConfig, n_scenes: int, seed: int) -> list[Scene]:
    return [generate_scene(config, s) for s in scene_seeds(seed, n_scenes)]


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def _box_json(b: Box) -> list[float]:
    # json writes floats with repr(), i.e. 17 significant digits: exact round-trip
    return [float(v) for v in b.as_list()]


def save_dataset(scenes: Sequence[Scene], path: str | Path, config: GeneratorConfig | None = None) -> None:
    if config is None and scenes:
        config = scenes[0].config
    if scenes and config is None:
        raise ConfigError("scenes carry no generator config; pass one explicitly")
    for s in scenes:
        if s.config is not None and s.config != config:
            raise ConfigError(f"scene {s.id} was generated with a different config")
    doc = {
        "generator_config": config.to_dict() if config is not None else None,
        "scenes": [
            {
                "id": s.id,
                "seed": s.seed,
                "bounds": _box_json(s.bounds),
                "annotations": [
                    {
                        "full": _box_json(a.full),
                        "visible": _box_json(a.visible),
                        "visibility": a.visibility,
                        "height": a.height,
                        "ignore": a.ignore,
                    }
                    for a in s.annotations
                ],
            }
            for s in scenes
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def _get(obj: Any, key: str, where: str, kind: type | tuple[type, ...]) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetFormatError(f"{where}: missing field {key!r}")
    val = obj[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise DatasetFormatError(f"{where}.{key}: expected {kind}, got {type(val).__name__}")
    return val


def _box_field(obj: Any, key: str, where: str) -> Box:
    raw = _get(obj, key, where, list)
    if len(raw) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise DatasetFormatError(f"{where}.{key}: expected four numbers, got {raw!r}")
    try:
        return Box(*(float(v) for v in raw))
    except InvalidBoxError as exc:
        raise DatasetFormatError(f"{where}.{key}: {exc}") from None


def load_dataset(path: str | Path, verify: bool = True) -> list[Scene]:
    """Load a dataset file, regenerating every feature grid from its seed.

    With ``verify`` the regenerated annotations must agree with the stored ones
    to 1e-9, which catches edits that desynchronise file and generator.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise DatasetFormatError(f"{path}: top level must be an object")
    scenes_raw = _get(doc, "scenes", "dataset", list)
    cfg_raw = doc.get("generator_config")
    if cfg_raw is None:
        if scenes_raw:
            raise DatasetFormatError("dataset: generator_config is required when scenes are present")
        return []
    try:
        config = GeneratorConfig.from_dict(cfg_raw)
        config.validate()
    except (ConfigError, TypeError) as exc:
        raise DatasetFormatError(f"dataset.generator_config: {exc}") from None

    scenes = []
    for i, raw in enumerate(scenes_raw):
        where = f"scenes[{i}]"
        sid = _get(raw, "id", where, str)
        seed = _get(raw, "seed", where, int)
        bounds = _box_field(raw, "bounds", where)
        anns = []
        for j, a in enumerate(_get(raw, "annotations", where, list)):
            aw = f"{where}.annotations[{j}]"
            full = _box_field(a, "full", aw)
            vis = _box_field(a, "visible", aw)
            visibility = float(_get(a, "visibility", aw, (int, float)))
            height = float(_get(a, "height", aw, (int, float)))
            ignore = _get(a, "ignore", aw, bool)
            if not full.contains(vis):
                raise DatasetFormatError(f"{aw}: visible box not contained in full box")
            if abs(visibility - area(vis) / area(full)) > 1e-9:
                raise DatasetFormatError(f"{aw}.visibility: inconsistent with box areas")
            anns.append(Annotation(full, vis, visibility, height, ignore))
        regen = generate_scene(config, seed)
        if verify:
            _verify_against(regen, anns, where)
        scenes.append(
            Scene(
                id=sid,
                bounds=bounds,
                feature_grid=regen.feature_grid,
                annotations=anns,
                seed=seed,
                stride=config.stride,
                occluders=regen.occluders,
                config=config,
            )
        )
    return scenes


def _verify_against(regen: Scene, anns: list[Annotation], where: str) -> None:
    if len(regen.annotations) != len(anns):
        raise DatasetFormatError(
            f"{where}: {len(anns)} annotations stored but seed regenerates {len(regen.annotations)}"
        )
    for j, (a, b) in enumerate(zip(regen.annotations, anns)):
        if not np.allclose(a.full.as_array(), b.full.as_array(), rtol=0, atol=1e-9) or not np.allclose(
            a.visible.as_array(), b.visible.as_array(), rtol=0, atol=1e-9
        ):
            raise DatasetFormatError(f"{where}.annotations[{j}]: does not match regenerated scene")
