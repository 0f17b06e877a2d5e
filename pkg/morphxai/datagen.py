"""
MorphXAI synthetic smear generator.
Renders smear-like images with parasite-shaped bodies whose morphology is
known by construction, and writes them as a dataset split on disk.

Every scene is a pure function of (seed, index). Each parasite keeps its
draw plan so tests can re-derive labels from what was actually drawn.
"""

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DatasetIOError
from .schema import (
    ATTRIBUTE_NAMES,
    SPECIES,
    AnnotatedInstance,
    AnnotationSet,
    ImageRecord,
    MorphologyRecord,
    build_vocabulary,
    read_annotation_file,
    saturate_dot_count,
    write_annotation_file,
)


GENERATOR_VERSION = 2

SHAPES = ("oval", "elongated", "amoeboid", "fusiform", "crescent", "other")

# Per-species priors. Species must stay learnable from appearance, so each one
# also gets its own stain hue.
SHAPE_PRIORS = {
    "Leishmania": (0.55, 0.05, 0.20, 0.10, 0.00, 0.10),
    "T_cruzi": (0.05, 0.25, 0.05, 0.25, 0.35, 0.05),
    "T_brucei": (0.05, 0.50, 0.05, 0.30, 0.05, 0.05),
}
BEND_PRIORS = {                       # straight, C-shaped, S-shaped
    "Leishmania": (0.6, 0.2, 0.2),
    "T_cruzi": (0.2, 0.6, 0.2),
    "T_brucei": (0.2, 0.2, 0.6),
}
FLAGELLUM_PRIOR = {"Leishmania": 0.2, "T_cruzi": 0.7, "T_brucei": 0.85}
STAIN = {
    "Leishmania": (0.45, 0.20, 0.60),
    "T_cruzi": (0.72, 0.15, 0.40),
    "T_brucei": (0.20, 0.30, 0.72),
}
DOT_COUNT_PRIOR = (0.2, 0.25, 0.25, 0.15, 0.15)     # raw 0..4 dots
MATURE_PRIOR = 0.6

BACKGROUND = (0.93, 0.86, 0.88)
RED_CELL = (0.86, 0.62, 0.66)
CHROMATIN = (0.22, 0.05, 0.28)

# body length as a fraction of min(width, height)
LENGTH_RANGE = (0.16, 0.24)
EXTENT_FACTOR = 1.5         # body + flagellum reach, in body lengths
MIN_IMAGE_SIDE = 32


# ── Configuration ─────────────────────────────────────────────────────────────

@dataclass
class SceneConfig:
    image_size: Tuple[int, int] = (256, 256)             # width, height
    parasites_per_image: Tuple[int, int] = (1, 3)        # inclusive range
    species_weights: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    attribute_difficulty: Dict[str, float] = field(
        default_factory=lambda: {name: 0.0 for name in ATTRIBUTE_NAMES}
    )
    background_clutter: float = 0.3                     # red cells per 64x64 px
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.parasites_per_image = tuple(int(v) for v in self.parasites_per_image)
        self.species_weights = tuple(float(v) for v in self.species_weights)
        self.attribute_difficulty = {
            **{name: 0.0 for name in ATTRIBUTE_NAMES},
            **{k: float(v) for k, v in dict(self.attribute_difficulty).items()},
        }

    def validate(self) -> None:
        width, height = self.image_size
        if width < MIN_IMAGE_SIDE or height < MIN_IMAGE_SIDE:
            raise ConfigError(f"image_size {self.image_size} below minimum side {MIN_IMAGE_SIDE}")
        lo, hi = self.parasites_per_image
        if lo < 0 or hi < lo:
            raise ConfigError(f"parasites_per_image range {self.parasites_per_image} is empty")
        if len(self.species_weights) != len(SPECIES) or any(w < 0 for w in self.species_weights):
            raise ConfigError(f"species_weights must be {len(SPECIES)} non-negative values")
        if abs(sum(self.species_weights) - 1.0) > 1e-9:
            raise ConfigError(f"species_weights sum to {sum(self.species_weights)}, expected 1")
        unknown = set(self.attribute_difficulty) - set(ATTRIBUTE_NAMES)
        if unknown:
            raise ConfigError(f"attribute_difficulty has unknown attributes: {sorted(unknown)}")
        for name, level in self.attribute_difficulty.items():
            if not 0.0 <= level <= 1.0:
                raise ConfigError(f"attribute_difficulty[{name}]={level} outside [0, 1]")
        if self.background_clutter < 0:
            raise ConfigError("background_clutter must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        max_extent = EXTENT_FACTOR * LENGTH_RANGE[1] * min(width, height)
        if hi * max_extent ** 2 > 0.6 * width * height:
            raise ConfigError(
                f"image {width}x{height} too small to fit {hi} parasites "
                f"(each needs about {max_extent:.0f}x{max_extent:.0f} px)"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["image_size"] = list(self.image_size)
        data["parasites_per_image"] = list(self.parasites_per_image)
        data["species_weights"] = list(self.species_weights)
        return data

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


# ── Draw plans ────────────────────────────────────────────────────────────────

Point = Tuple[float, float]


@dataclass(frozen=True)
class DrawPlan:
    species: str
    shape_type: str
    curvature: str
    n_dots: int                      # raw count actually drawn
    has_flagellum: bool
    mature: bool
    body: Tuple[Point, ...]          # polygon, image coordinates
    dots: Tuple[Point, ...]
    dot_radius: float
    flagellum: Tuple[Point, ...]     # polyline, empty when absent
    flagellum_width: int
    color: Tuple[float, float, float]
    alpha: float
    dot_alpha: float

    def morphology(self) -> MorphologyRecord:
        return MorphologyRecord(
            shape_type=self.shape_type,
            curvature=self.curvature,
            dot_count=saturate_dot_count(self.n_dots),
            flagellum_present=self.has_flagellum,
            development_stage="mature" if self.mature else "immature",
        )

    def extent(self) -> Tuple[float, float, float, float]:
        pts = np.array(self.body + self.dots + self.flagellum, dtype=np.float64)
        pad = max(self.dot_radius, self.flagellum_width) + 1.0
        return (
            float(pts[:, 0].min() - pad),
            float(pts[:, 1].min() - pad),
            float(pts[:, 0].max() + pad),
            float(pts[:, 1].max() + pad),
        )


@dataclass
class SyntheticScene:
    image: np.ndarray                    # H x W x 3 float32 in [0, 1], 8-bit quantized
    instances: List[AnnotatedInstance]
    plans: List[DrawPlan]

    def to_uint8(self) -> np.ndarray:
        return np.round(self.image * 255.0).astype(np.uint8)


def _choice(rng: np.random.Generator, options: Sequence, weights: Sequence[float]):
    p = np.asarray(weights, dtype=np.float64)
    return options[int(rng.choice(len(options), p=p / p.sum()))]


def _centerline(curvature: str, shape: str, length: float, d_curv: float, n: int = 32):
    t = np.linspace(0.0, 1.0, n)
    x = (t - 0.5) * length
    if shape == "crescent":
        y = 0.35 * length * (1.0 - (2 * t - 1) ** 2)
    elif curvature == "C-shaped":
        y = 0.22 * length * (1.0 - 0.6 * d_curv) * (1.0 - (2 * t - 1) ** 2)
    elif curvature == "S-shaped":
        y = 0.15 * length * (1.0 - 0.6 * d_curv) * np.sin(2 * np.pi * t)
    else:
        y = np.zeros_like(t)
    return t, np.stack([x, y - y.mean()], axis=1)


def _ribbon(line: np.ndarray, half_width: np.ndarray) -> np.ndarray:
    tangent = np.gradient(line, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True) + 1e-12
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    left = line + normal * half_width[:, None]
    right = line - normal * half_width[:, None]
    return np.concatenate([left, right[::-1]], axis=0)


def _body_geometry(rng, shape: str, curvature: str, length: float, difficulty: Dict[str, float]):
    """Return (polygon, dot axis, flagellum anchor, outward direction) in local coordinates."""
    d_shape = difficulty["shape_type"]
    d_curv = difficulty["curvature"]
    if shape in ("oval", "amoeboid", "other"):
        a = 0.35 * length
        n = 48
        theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        if shape == "oval":
            b = a * rng.uniform(0.6, 0.75) * (1.0 + 0.3 * d_shape)
            poly = np.stack([a * np.cos(theta), min(b, a) * np.sin(theta)], axis=1)
        elif shape == "amoeboid":
            radius = np.ones_like(theta)
            amp = 0.25 * (1.0 - 0.6 * d_shape)
            for k in (2, 3, 5):
                radius += amp / k * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
            poly = np.stack([0.85 * a * radius * np.cos(theta), 0.85 * a * radius * np.sin(theta)], axis=1)
        else:
            angles = np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
            poly = np.stack([a * np.cos(angles), a * np.sin(angles)], axis=1)
        axis = np.array([[-0.6 * a, 0.0], [0.6 * a, 0.0]])
        anchor = np.array([poly[:, 0].max(), 0.0])
        return poly, axis, anchor, np.array([1.0, 0.0])

    t, line = _centerline(curvature, shape, length, d_curv)
    if shape == "elongated":
        half = 0.09 * length * np.sqrt(np.sin(np.pi * t))
    elif shape == "fusiform":
        half = 0.16 * length * (1.0 - 0.3 * d_shape) * np.sin(np.pi * t)
    else:   # crescent
        half = 0.12 * length * np.sin(np.pi * t)
    poly = _ribbon(line, half)
    direction = line[-1] - line[-2]
    direction /= np.linalg.norm(direction) + 1e-12
    return poly, line, line[-1], direction


def dot_pitch(radius: float) -> float:
    """Minimum distance between dot centres: discs stay apart after rasterization."""
    return max(2.2 * radius, 2.0 * radius + 3.0)


def _dot_positions(axis: np.ndarray, n_dots: int, radius: float) -> np.ndarray:
    """Dot centres along the body axis, at least dot_pitch(radius) apart, centred on its midpoint.

    Short axes are extended along their end tangents; tight bends fall back to a straight
    row through the axis midpoint.
    """
    if n_dots == 0:
        return np.zeros((0, 2))
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(axis, axis=0), axis=1))])
    total = cum[-1]
    pitch = max(dot_pitch(radius), 0.6 * total / n_dots)
    targets = 0.5 * total + (np.arange(n_dots) - 0.5 * (n_dots - 1)) * pitch
    head = axis[0] - axis[1]
    tail = axis[-1] - axis[-2]
    head = head / (np.linalg.norm(head) + 1e-12)
    tail = tail / (np.linalg.norm(tail) + 1e-12)
    points = []
    for s in targets:
        if s < 0.0:
            points.append(axis[0] + head * -s)
        elif s > total:
            points.append(axis[-1] + tail * (s - total))
        else:
            points.append([np.interp(s, cum, axis[:, 0]), np.interp(s, cum, axis[:, 1])])
    points = np.asarray(points, dtype=np.float64)
    gaps = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    if n_dots > 1 and gaps.min() < dot_pitch(radius):
        chord = axis[-1] - axis[0]
        chord = chord / (np.linalg.norm(chord) + 1e-12)
        middle = np.array([np.interp(0.5 * total, cum, axis[:, 0]), np.interp(0.5 * total, cum, axis[:, 1])])
        points = middle + np.outer(targets - 0.5 * total, chord)
    return points


def _flagellum_line(anchor: np.ndarray, direction: np.ndarray, length: float, d_curv: float) -> np.ndarray:
    # high curvature difficulty draws an S-like flagellum next to the body
    s = np.linspace(0.0, 1.0, 12)
    normal = np.array([-direction[1], direction[0]])
    wiggle = (0.03 + 0.12 * d_curv) * length * np.sin(2 * np.pi * s)
    return anchor + np.outer(s * 0.5 * length, direction) + np.outer(wiggle, normal)


def _plan_parasite(rng: np.random.Generator, config: SceneConfig) -> Tuple[DrawPlan, np.ndarray]:
    """Sample attributes and local geometry; returns the plan at origin plus its points."""
    difficulty = config.attribute_difficulty
    width, height = config.image_size
    species = _choice(rng, SPECIES, config.species_weights)
    shape = _choice(rng, SHAPES, SHAPE_PRIORS[species])
    if shape in ("oval", "amoeboid"):
        curvature = "round"
    elif shape == "crescent":
        curvature = "C-shaped"
    elif shape == "other":
        curvature = "straight"
    else:
        curvature = _choice(rng, ("straight", "C-shaped", "S-shaped"), BEND_PRIORS[species])
    n_dots = int(rng.choice(len(DOT_COUNT_PRIOR), p=DOT_COUNT_PRIOR))
    has_flagellum = bool(rng.random() < FLAGELLUM_PRIOR[species])
    mature = bool(rng.random() < MATURE_PRIOR)

    scale = 1.0 if mature else 0.6 + 0.3 * difficulty["development_stage"]
    length = scale * rng.uniform(*LENGTH_RANGE) * min(width, height)
    poly, axis, anchor, direction = _body_geometry(rng, shape, curvature, length, difficulty)
    dot_radius = max(1.0, 0.045 * length * (1.0 - 0.5 * difficulty["dot_count"]))
    dots = _dot_positions(axis, n_dots, dot_radius)
    flagellum = (
        _flagellum_line(anchor, direction, length, difficulty["curvature"])
        if has_flagellum else np.zeros((0, 2))
    )

    rotation = rng.uniform(0.0, 2 * np.pi)
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    jitter = rng.uniform(-0.03, 0.03, size=3)
    color = tuple(float(np.clip(v + j, 0.0, 1.0)) for v, j in zip(STAIN[species], jitter))
    alpha = 0.95 if mature else 0.55 + 0.3 * difficulty["development_stage"]
    plan = DrawPlan(
        species=species,
        shape_type=shape,
        curvature=curvature,
        n_dots=n_dots,
        has_flagellum=has_flagellum,
        mature=mature,
        body=(),
        dots=(),
        dot_radius=dot_radius,
        flagellum=(),
        flagellum_width=max(1, int(round(0.03 * length * (1.0 - 0.5 * difficulty["flagellum_present"])))),
        color=color,
        alpha=float(alpha),
        dot_alpha=float(0.9 * (1.0 - 0.5 * difficulty["dot_count"])),
    )
    return plan, (poly @ rot.T, dots @ rot.T, flagellum @ rot.T)


def _translate(plan: DrawPlan, local, offset: np.ndarray) -> DrawPlan:
    poly, dots, flagellum = (tuple(map(tuple, (pts + offset).tolist())) for pts in local)
    return replace(plan, body=poly, dots=dots, flagellum=flagellum)


# ── Rendering ────────────────────────────────────────────────────────────────

def _raster(size: Tuple[int, int], draw_fn) -> np.ndarray:
    canvas = Image.new("L", size, 0)
    draw_fn(ImageDraw.Draw(canvas))
    return np.asarray(canvas, dtype=np.float64) / 255.0


def _disc(draw: ImageDraw.ImageDraw, centre: Point, radius: float) -> None:
    x, y = centre
    draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=255)


def render_instance_mask(plan: DrawPlan, size: Tuple[int, int]) -> np.ndarray:
    """Boolean H x W foreground of one parasite (body, dots and flagellum)."""
    def draw_all(draw):
        draw.polygon(list(plan.body), fill=255)
        for centre in plan.dots:
            _disc(draw, centre, plan.dot_radius)
        if plan.flagellum:
            draw.line(list(plan.flagellum), fill=255, width=plan.flagellum_width)
    return _raster(size, draw_all) > 0


def render_dot_mask(plan: DrawPlan, size: Tuple[int, int]) -> np.ndarray:
    """H x W coverage of the chromatin dots alone."""
    def draw_dots(draw):
        for centre in plan.dots:
            _disc(draw, centre, plan.dot_radius)
    return _raster(size, draw_dots)


def _blend(image: np.ndarray, mask: np.ndarray, color, alpha: float) -> None:
    weight = (mask * alpha)[..., None]
    image *= 1.0 - weight
    image += weight * np.asarray(color)[None, None, :]


def _draw_background(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    width, height = config.image_size
    image = np.empty((height, width, 3), dtype=np.float64)
    image[...] = BACKGROUND
    image += rng.normal(0.0, 0.02, size=image.shape)
    n_cells = int(rng.poisson(config.background_clutter * width * height / (64 * 64)))
    for _ in range(n_cells):
        radius = rng.uniform(0.04, 0.07) * min(width, height)
        centre = (rng.uniform(0, width), rng.uniform(0, height))
        outer = _raster((width, height), lambda d: _disc(d, centre, radius))
        inner = _raster((width, height), lambda d: _disc(d, centre, 0.5 * radius))
        _blend(image, outer, RED_CELL, 0.7)
        _blend(image, inner, BACKGROUND, 0.4)
    return image


def _draw_parasite(image: np.ndarray, plan: DrawPlan, size: Tuple[int, int]) -> None:
    body = _raster(size, lambda d: d.polygon(list(plan.body), fill=255))
    _blend(image, body, plan.color, plan.alpha)
    if plan.flagellum:
        tail = _raster(size, lambda d: d.line(list(plan.flagellum), fill=255, width=plan.flagellum_width))
        _blend(image, tail, plan.color, plan.alpha)
    if plan.dots:
        _blend(image, render_dot_mask(plan, size), CHROMATIN, plan.dot_alpha)


def _overlaps(a, b, margin: float = 3.0) -> bool:
    return not (
        a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]
    )


def generate_scene(config: SceneConfig, index: int, max_attempts: int = 200) -> SyntheticScene:
    config.validate()
    width, height = config.image_size
    rng = np.random.default_rng([config.seed, int(index)])
    image = _draw_background(rng, config)

    lo, hi = config.parasites_per_image
    count = int(rng.integers(lo, hi + 1))
    plans: List[DrawPlan] = []
    extents = []
    for k in range(count):
        plan, local = _plan_parasite(rng, config)
        probe = _translate(plan, local, np.zeros(2))
        x0, y0, x1, y1 = probe.extent()
        if x1 - x0 >= width - 2 or y1 - y0 >= height - 2:
            raise ConfigError(f"image {width}x{height} too small for a parasite of extent {x1 - x0:.0f}x{y1 - y0:.0f}")
        for _ in range(max_attempts):
            offset = np.array([rng.uniform(1 - x0, width - 1 - x1), rng.uniform(1 - y0, height - 1 - y1)])
            candidate = (x0 + offset[0], y0 + offset[1], x1 + offset[0], y1 + offset[1])
            if not any(_overlaps(candidate, other) for other in extents):
                break
        else:
            raise ConfigError(
                f"could not place parasite {k + 1} of {count} in a {width}x{height} image; "
                "lower parasites_per_image or enlarge image_size"
            )
        extents.append(candidate)
        plans.append(_translate(plan, local, offset))

    instances = []
    for plan in plans:
        _draw_parasite(image, plan, config.image_size)
        ys, xs = np.nonzero(render_instance_mask(plan, config.image_size))
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        instances.append(AnnotatedInstance(box=box, species=plan.species, morphology=plan.morphology()))

    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SyntheticScene(image=quantized.astype(np.float32), instances=instances, plans=plans)


# ── Dataset writer ───────────────────────────────────────────────────────────

def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read an RGB image as H x W x 3 float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetIOError(f"cannot read image {path}: {exc}") from exc


def _write_png(path: Path, pixels: np.ndarray) -> None:
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as exc:
        raise DatasetIOError(f"cannot write image {path}: {exc}") from exc


def generate_dataset(
    config: SceneConfig,
    n_train: int,
    n_val: int,
    out_dir: Union[str, Path],
    workers: int = 1,
) -> dict:
    """Write train/ and val/ splits plus manifest.json; returns the manifest."""
    config.validate()
    vocab = build_vocabulary()
    out = Path(out_dir)
    width, height = config.image_size
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "vocabulary": vocab.fingerprint(),
        "splits": {},
    }
    for split, start, count in (("train", 0, n_train), ("val", n_train, n_val)):
        images_dir = out / split / "images"
        try:
            images_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetIOError(f"cannot create {images_dir}: {exc}") from exc

        indices = list(range(start, start + count))
        render = partial(generate_scene, config)
        if workers > 1 and count > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                scenes = list(pool.map(render, indices))
        else:
            scenes = [render(i) for i in indices]

        records, instances = [], {}
        for index, scene in zip(indices, scenes):
            file_name = f"images/{split}_{index:06d}.png"
            _write_png(out / split / file_name, scene.to_uint8())
            records.append(ImageRecord(index, file_name, width, height))
            instances[index] = scene.instances
        ann_path = write_annotation_file(out / split / "annotations.json", AnnotationSet(records, instances), vocab)
        read_annotation_file(ann_path, vocab)
        manifest["splits"][split] = {
            "images": count,
            "instances": sum(len(v) for v in instances.values()),
            "annotations": f"{split}/annotations.json",
            "files": [record.file_name for record in records],
        }

    manifest_path = out / "manifest.json"
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write manifest {manifest_path}: {exc}") from exc
    return manifest
