"""Synthetic point-scatterer scenes and chip datasets.

The radar sits at the origin looking along +y.  Every scatterer spreads
into a Gaussian blob elongated across range (``sigma_cross = r *
tan(beamwidth)``) and narrow along range (``sigma_range`` = the range
resolution), scaled by ``reflectivity / r**2``.  Images are rendered on the
native cell grid (``range_resolution`` metres per cell).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .augment import Chip, ManifestRecord, quadrant_of, write_manifest
from .detection import DetectionBox, write_boxes
from .errors import InvalidInputError
from .imaging import CartesianImage, RadarParams, resize_bilinear, save_raster

log = logging.getLogger(__name__)

CLASS_NAMES = ("bike", "trolley", "mannequin", "cone", "sign", "dog")
# A unit-reflectivity scatterer at REFERENCE_RANGE peaks at POWER_SCALE.
REFERENCE_RANGE = 5.0
POWER_SCALE = 10.0
CHIP_WINDOW = 400
CHIP_SIZE = 128
BOX_CELLS = 275
RECEIVER_GAINS = (0.9, 1.0, 1.15)
OCCLUSION_RADIUS = 0.1
OCCLUSION_FACTOR = 0.2
PSF_EXTENT = 4.5  # blobs are evaluated out to this many sigmas


@dataclass(frozen=True)
class ObjectTemplate:
    class_id: int
    scatterers: tuple[tuple[float, float, float], ...]
    footprint: float
    name: str = ""

    def __post_init__(self) -> None:
        if not self.scatterers:
            raise InvalidInputError("a template needs at least one scatterer")
        if any(s[2] <= 0 for s in self.scatterers):
            raise InvalidInputError("scatterer reflectivity must be > 0")
        if not self.footprint > 0:
            raise InvalidInputError("footprint must be > 0")

    @property
    def max_reflectivity(self) -> float:
        return max(s[2] for s in self.scatterers)

    def placed(self, position, rotation_deg: float) -> np.ndarray:
        """Scatterers as an ``(n, 3)`` array of world ``x, y, reflectivity``."""
        pts = np.array(self.scatterers, dtype=np.float64)
        a = math.radians(rotation_deg)
        c, s = math.cos(a), math.sin(a)
        x = c * pts[:, 0] - s * pts[:, 1] + position[0]
        y = s * pts[:, 0] + c * pts[:, 1] + position[1]
        return np.column_stack([x, y, pts[:, 2]])


def _line(p0, p1, n, refl):
    return [(p0[0] + (p1[0] - p0[0]) * t, p0[1] + (p1[1] - p0[1]) * t, refl)
            for t in np.linspace(0.0, 1.0, n)]


def _ring(cx, cy, rx, ry, n, refl, phase=0.0):
    return [(cx + rx * math.cos(phase + 2 * math.pi * k / n), cy + ry * math.sin(phase + 2 * math.pi * k / n), refl)
            for k in range(n)]


def builtin_templates() -> list[ObjectTemplate]:
    """The six laboratory objects as top-view scatterer layouts.

    The trolley's four metal corners are the strongest reflectors of all.
    """
    bike = (_line((-0.8, 0.0), (0.8, 0.0), 13, 0.55)
            + [(-0.5, 0.0, 1.1), (0.5, 0.0, 1.1), (-0.15, 0.0, 0.7)]
            + _line((0.45, -0.3), (0.45, 0.3), 5, 0.85))
    trolley = ([(x, y, 1.8) for x in (-0.45, 0.45) for y in (-0.27, 0.27)]
               + _line((-0.2, -0.27), (0.2, -0.27), 3, 0.4) + _line((-0.2, 0.27), (0.2, 0.27), 3, 0.4)
               + _line((-0.6, -0.2), (-0.6, 0.2), 4, 0.6))
    mannequin = (_ring(0.0, 0.0, 0.22, 0.14, 10, 0.8) + [(0.0, 0.0, 1.4)]
                 + [(0.0, 0.3, 0.9), (0.0, -0.3, 0.9)])
    cone = ([(0.0, 0.0, 0.45), (0.006, 0.0, 0.45), (0.0, 0.006, 0.45)]
            + _ring(0.0, 0.0, 0.09, 0.09, 6, 0.5, phase=math.pi / 6))
    sign = _line((0.0, -0.3), (0.0, 0.3), 9, 0.95) + [(0.15, 0.0, 1.0), (0.28, -0.2, 0.7), (0.28, 0.2, 0.7)]
    dog = ([(x, y, 0.55) for x in np.linspace(-0.3, 0.3, 5) for y in (-0.07, 0.07)]
           + [(0.45, 0.0, 1.1), (0.38, 0.08, 0.65)]
           + [(x, y, 0.5) for x in (-0.25, 0.25) for y in (-0.12, 0.12)])
    layouts = [(bike, 1.7), (trolley, 1.3), (mannequin, 0.7), (cone, 0.4), (sign, 0.7), (dog, 1.0)]
    return [ObjectTemplate(i, tuple((float(x), float(y), float(r)) for x, y, r in pts), fp, CLASS_NAMES[i])
            for i, (pts, fp) in enumerate(layouts)]


def source_templates(num_classes: int = 10, seed: int = 1234) -> list[ObjectTemplate]:
    """Procedural layouts for a pretraining task unrelated to the lab objects.

    Each class is a random cloud of 4-18 scatterers arranged as lines,
    rings or scattered points within a 1.4 m footprint.
    """
    out = []
    for cls in range(num_classes):
        g = rngmod.stream(seed, "source-template", cls)
        pts: list[tuple[float, float, float]] = []
        for _ in range(int(g.integers(2, 5))):
            kind = int(g.integers(0, 3))
            cx, cy = g.uniform(-0.45, 0.45, size=2)
            refl = float(g.uniform(0.3, 1.2))
            if kind == 0:
                ang = g.uniform(0, math.pi)
                half = g.uniform(0.1, 0.3)
                d = np.array([math.cos(ang), math.sin(ang)]) * half
                pts += _line((cx - d[0], cy - d[1]), (cx + d[0], cy + d[1]), int(g.integers(3, 7)), refl)
            elif kind == 1:
                r = float(g.uniform(0.08, 0.22))
                pts += _ring(cx, cy, r, r, int(g.integers(4, 9)), refl)
            else:
                pts += [(float(x), float(y), refl) for x, y in g.uniform(-0.1, 0.1, size=(3, 2)) + [cx, cy]]
        out.append(ObjectTemplate(cls, tuple(pts), 1.4, f"source-{cls}"))
    return out


@dataclass(frozen=True)
class Placement:
    template: ObjectTemplate
    position: tuple[float, float]
    rotation_deg: float = 0.0

    @property
    def range_m(self) -> float:
        return float(math.hypot(*self.position))


@dataclass(frozen=True)
class Wall:
    start: tuple[float, float]
    end: tuple[float, float]
    reflectivity: float = 8.0  # per metre of wall
    spacing: float = 0.02

    def scatterers(self) -> np.ndarray:
        length = math.dist(self.start, self.end)
        n = max(int(length / self.spacing) + 1, 2)
        t = np.linspace(0.0, 1.0, n)
        x = self.start[0] + (self.end[0] - self.start[0]) * t
        y = self.start[1] + (self.end[1] - self.start[1]) * t
        return np.column_stack([x, y, np.full(n, self.reflectivity * length / (n - 1))])


@dataclass
class SceneSpec:
    placements: list[Placement] = field(default_factory=list)
    noise_sigma: float = 0.0
    wall: Wall | None = None
    extent: tuple[float, float] = (8.0, 11.0)
    seed: int = 0
    y_min: float = 1.0
    scene_id: str = ""

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        w, d = self.extent
        for p in self.placements:
            x, y = p.position
            if not (-w / 2 <= x <= w / 2 and self.y_min <= y <= self.y_min + d):
                raise InvalidInputError(f"placement at {p.position} lies outside the scene extent")

    @property
    def density(self) -> int:
        return len(self.placements)


# -- rendering --------------------------------------------------------------

def occlusion_gains(points: np.ndarray, radius: float = OCCLUSION_RADIUS,
                    factor: float = OCCLUSION_FACTOR) -> np.ndarray:
    """Per-scatterer gain: ``factor`` when the line of sight passes within
    ``radius`` of a nearer scatterer, else 1.

    A scatterer counts as nearer when its range is smaller by more than
    ``radius``; immediate neighbours on the same surface do not shadow
    each other.
    """
    xy = np.asarray(points, dtype=np.float64)[:, :2]
    n = len(xy)
    gains = np.ones(n)
    if n < 2:
        return gains
    rng = np.hypot(xy[:, 0], xy[:, 1])
    for i in range(n):
        q = xy[rng < rng[i] - radius]
        if len(q) == 0:
            continue
        t = np.clip(q @ xy[i] / (rng[i] * rng[i]), 0.0, 1.0)
        d2 = np.sum((q - t[:, None] * xy[i]) ** 2, axis=1)
        if np.any(d2 < radius * radius):
            gains[i] = factor
    return gains


def psf_sigmas(range_m: float, params: RadarParams) -> tuple[float, float]:
    """``(sigma_range, sigma_cross)`` of the blob of a scatterer at ``range_m``."""
    return params.range_resolution, max(range_m * math.tan(math.radians(params.azimuth_beamwidth)),
                                        params.range_resolution)


def splat(values: np.ndarray, origin, cell: float, x: float, y: float, amplitude: float,
          params: RadarParams) -> None:
    """Add one scatterer's Gaussian blob into ``values`` in place."""
    r = math.hypot(x, y)
    if r == 0 or amplitude == 0:
        return
    sr, sc = psf_sigmas(r, params)
    ux, uy = x / r, y / r
    hx = PSF_EXTENT * math.hypot(sr * ux, sc * uy)
    hy = PSF_EXTENT * math.hypot(sr * uy, sc * ux)
    c0 = max(int(math.floor((x - hx - origin[0]) / cell)), 0)
    c1 = min(int(math.ceil((x + hx - origin[0]) / cell)) + 1, values.shape[1])
    r0 = max(int(math.floor((y - hy - origin[1]) / cell)), 0)
    r1 = min(int(math.ceil((y + hy - origin[1]) / cell)) + 1, values.shape[0])
    if c0 >= c1 or r0 >= r1:
        return
    dx = origin[0] + np.arange(c0, c1) * cell - x
    dy = origin[1] + np.arange(r0, r1) * cell - y
    along = dy[:, None] * uy + dx[None, :] * ux
    across = dy[:, None] * ux - dx[None, :] * uy
    values[r0:r1, c0:c1] += amplitude * np.exp(-0.5 * ((along / sr) ** 2 + (across / sc) ** 2))


def blob_integral(x: float, y: float, amplitude: float, params: RadarParams, cell: float) -> float:
    """Closed-form sum of a blob over an unbounded grid of ``cell`` cells."""
    sr, sc = psf_sigmas(math.hypot(x, y), params)
    return amplitude * 2.0 * math.pi * sr * sc / (cell * cell)


def received(pts: np.ndarray) -> np.ndarray:
    """Reflectivity to peak amplitude: 1/r^2 loss and occlusion."""
    r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
    amp = pts[:, 2] * (POWER_SCALE * REFERENCE_RANGE ** 2) / r2 * occlusion_gains(pts)
    return np.column_stack([pts[:, 0], pts[:, 1], amp])


def scene_scatterers(spec: SceneSpec) -> np.ndarray:
    """World ``x, y, amplitude`` of every scatterer after occlusion and 1/r^2."""
    parts = [p.template.placed(p.position, p.rotation_deg) for p in spec.placements]
    if spec.wall is not None:
        parts.append(spec.wall.scatterers())
    if not parts:
        return np.zeros((0, 3))
    return received(np.concatenate(parts))


def scene_grid(spec: SceneSpec, params: RadarParams):
    cell = params.range_resolution
    w, d = spec.extent
    cols = int(round(w / cell)) + 1
    rows = int(round(d / cell)) + 1
    origin = (-(cols // 2) * cell, spec.y_min)
    return rows, cols, origin


def _render(points: np.ndarray, shape, origin, cell: float, params: RadarParams,
            noise_sigma: float, noise_rng: np.random.Generator | None, gain: float = 1.0) -> np.ndarray:
    values = np.zeros(shape, dtype=np.float64)
    for x, y, a in points:
        splat(values, origin, cell, x, y, a, params)
    if gain != 1.0:
        values *= gain
    if noise_sigma > 0:
        values += noise_rng.rayleigh(noise_sigma, size=shape)
    return values


def truth_box(img: CartesianImage, placement: Placement, scene_id: str = "",
              size_cells: int = BOX_CELLS) -> DetectionBox:
    row, col = img.xy_to_cell(*placement.position)
    return DetectionBox(center_row=int(round(float(row))), center_col=int(round(float(col))),
                        size_cells=size_cells, label=placement.template.class_id, confidence=None,
                        scene_id=scene_id, range_m=placement.range_m)


def render_scene(spec: SceneSpec, params: RadarParams | None = None, box_cells: int = BOX_CELLS):
    """Power image of a scene and one truth box per placed object."""
    params = params or RadarParams()
    rows, cols, origin = scene_grid(spec, params)
    noise_rng = rngmod.stream(spec.seed, "scene-noise")
    values = _render(scene_scatterers(spec), (rows, cols), origin, params.range_resolution, params,
                     spec.noise_sigma, noise_rng)
    img = CartesianImage(values=values, cell_size=params.range_resolution, origin=origin)
    truths = [truth_box(img, p, spec.scene_id, box_cells) for p in spec.placements]
    return img, truths


# -- chips ------------------------------------------------------------------

@dataclass
class ChipConfig:
    noise_sigma: float = 0.2
    window_cells: int = CHIP_WINDOW
    chip_size: int = CHIP_SIZE
    receiver_gains: tuple[float, ...] = RECEIVER_GAINS
    aspect_step_deg: float | None = None  # e.g. 4.0 for a fixed angular grid

    def __post_init__(self) -> None:
        if self.noise_sigma < 0 or self.window_cells < 2 or self.chip_size < 2:
            raise InvalidInputError("invalid chip configuration")


def render_chip(template: ObjectTemplate, range_m: float, aspect_deg: float, params: RadarParams,
                cfg: ChipConfig, noise_rng: np.random.Generator | None = None, gain: float = 1.0) -> CartesianImage:
    """One object at boresight, rendered on a native window and resized."""
    cell = params.range_resolution
    half = cfg.window_cells // 2
    origin = (-half * cell, range_m - half * cell)
    pts = received(template.placed((0.0, range_m), aspect_deg))
    values = _render(pts, (cfg.window_cells, cfg.window_cells), origin, cell, params,
                     cfg.noise_sigma, noise_rng, gain)
    img = CartesianImage(values=values, cell_size=cell, origin=origin)
    return resize_bilinear(img, cfg.chip_size, cfg.chip_size)


def render_chips(n_per_class: int, ranges, seed: int = 0, templates=None, params: RadarParams | None = None,
                 cfg: ChipConfig | None = None) -> list[Chip]:
    """In-memory chip set: ``n_per_class * len(ranges) * len(gains) * classes`` chips.

    Each (class, sample, range) draws one aspect angle and a noise field per
    receiver; the receivers differ only by gain and noise.
    """
    if n_per_class < 1:
        raise InvalidInputError("n_per_class must be >= 1")
    params = params or RadarParams()
    cfg = cfg or ChipConfig()
    templates = builtin_templates() if templates is None else list(templates)
    chips = []
    for t in templates:
        for ri, range_m in enumerate(ranges):
            for i in range(n_per_class):
                g = rngmod.stream(seed, "chip", t.class_id, ri, i)
                if cfg.aspect_step_deg:
                    steps = int(round(360.0 / cfg.aspect_step_deg))
                    aspect = float(g.integers(0, steps)) * cfg.aspect_step_deg % 360.0
                else:
                    aspect = float(g.uniform(0.0, 360.0))
                for rec, gain in enumerate(cfg.receiver_gains):
                    noise = rngmod.stream(seed, "chip-noise", t.class_id, ri, i, rec)
                    img = render_chip(t, float(range_m), aspect, params, cfg, noise, gain)
                    chips.append(Chip(image=img, label=t.class_id, range_m=float(range_m),
                                      receiver_id=rec + 1, aspect_deg=aspect))
    return chips


def write_chip_dataset(chips: list[Chip], out_dir, manifest_name: str = "manifest.jsonl") -> list[ManifestRecord]:
    out = Path(out_dir)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    records = []
    for k, chip in enumerate(chips):
        rel = f"chips/chip_{k:06d}.radr"
        save_raster(out / rel, chip.image)
        records.append(ManifestRecord(rel, chip.label, chip.range_m, chip.receiver_id,
                                      chip.aspect_deg, quadrant_of(chip.aspect_deg)))
    write_manifest(records, out / manifest_name)
    return records


def generate_chip_dataset(n_per_class: int, ranges, rng=0, out_dir=None, templates=None,
                          params: RadarParams | None = None, cfg: ChipConfig | None = None):
    """Render a chip set and, when ``out_dir`` is given, write rasters + manifest.

    Returns the manifest records (or the chips when nothing is written).
    """
    seed = rngmod.derive_seed(rng.integers(0, 2**63), "chips") if isinstance(rng, np.random.Generator) else int(rng)
    chips = render_chips(n_per_class, ranges, seed, templates, params, cfg)
    if out_dir is None:
        return chips
    return write_chip_dataset(chips, out_dir)


# -- scenes -----------------------------------------------------------------

@dataclass
class SceneConfig:
    """Scene population; ``density`` is a count, an inclusive ``(lo, hi)``
    range or a float mean (``1 + Poisson(mean - 1)``, capped)."""

    density: int | tuple[int, int] | float = 3
    range_band: tuple[float, float] = (1.5, 10.5)
    extent: tuple[float, float] = (8.0, 11.0)
    y_min: float = 1.0
    noise_sigma: float = 0.2
    wall_probability: float = 0.0
    wall_reflectivity: tuple[float, float] = (6.0, 12.0)
    min_separation: float = 0.5
    max_objects: int = 12
    max_attempts: int = 1000

    @classmethod
    def easy(cls, **kw) -> "SceneConfig":
        kw.setdefault("density", (1, 3))
        kw.setdefault("range_band", (4.0, 6.0))
        return cls(**kw)

    @classmethod
    def hard(cls, **kw) -> "SceneConfig":
        kw.setdefault("density", (1, 8))
        kw.setdefault("wall_probability", 1.0)
        return cls(**kw)


def draw_density(density, g: np.random.Generator, max_objects: int) -> int:
    if isinstance(density, (int, np.integer)):
        return int(density)
    if isinstance(density, tuple):
        return int(g.integers(density[0], density[1] + 1))
    return int(min(1 + g.poisson(max(float(density) - 1.0, 0.0)), max_objects))


def _random_wall(cfg: SceneConfig, g: np.random.Generator) -> Wall:
    w, d = cfg.extent
    refl = float(g.uniform(*cfg.wall_reflectivity))
    if g.random() < 0.5:
        y = cfg.y_min + d - float(g.uniform(0.2, 1.0))
        return Wall((-w / 2, y), (w / 2, y), refl)
    x = (w / 2 - float(g.uniform(0.2, 0.8))) * (1 if g.random() < 0.5 else -1)
    return Wall((x, cfg.y_min + 1.0), (x, cfg.y_min + d), refl)


def sample_scene(index: int, seed: int, cfg: SceneConfig, templates=None) -> SceneSpec:
    """One scene with rejection-sampled, non-crowding object positions.

    Two objects are far enough apart when the gap between their footprint
    circles is at least ``min_separation``.  Objects that cannot be placed
    within ``max_attempts`` draws are skipped with a warning.
    """
    templates = builtin_templates() if templates is None else list(templates)
    g = rngmod.stream(seed, "scene", index)
    count = draw_density(cfg.density, g, cfg.max_objects)
    w, d = cfg.extent
    placements: list[Placement] = []
    for _ in range(count):
        t = templates[int(g.integers(0, len(templates)))]
        rot = float(g.uniform(0.0, 360.0))
        for _attempt in range(cfg.max_attempts):
            r = float(g.uniform(*cfg.range_band))
            half_fov = math.asin(min(1.0, (w / 2 - t.footprint / 2) / r)) if r > 0 else 0.0
            az = float(g.uniform(-half_fov, half_fov))
            pos = (r * math.sin(az), r * math.cos(az))
            inside = (abs(pos[0]) + t.footprint / 2 <= w / 2
                      and cfg.y_min + t.footprint / 2 <= pos[1] <= cfg.y_min + d - t.footprint / 2)
            clear = all(math.dist(pos, p.position) - (t.footprint + p.template.footprint) / 2 >= cfg.min_separation
                        for p in placements)
            if inside and clear:
                placements.append(Placement(t, pos, rot))
                break
        else:
            log.warning("scene %d: could not place object %d after %d attempts; skipped",
                        index, len(placements), cfg.max_attempts)
    wall = _random_wall(cfg, g) if g.random() < cfg.wall_probability else None
    return SceneSpec(placements, cfg.noise_sigma, wall, cfg.extent, rngmod.derive_seed(seed, "scene", index),
                     cfg.y_min, scene_id=f"scene_{index:04d}")


def generate_scene_specs(n_scenes: int, cfg: SceneConfig | None = None, rng=0, templates=None) -> list[SceneSpec]:
    if n_scenes < 1:
        raise InvalidInputError("n_scenes must be >= 1")
    cfg = cfg or SceneConfig()
    seed = int(rng.integers(0, 2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    return [sample_scene(i, seed, cfg, templates) for i in range(n_scenes)]


def generate_scene_dataset(n_scenes: int, density_law=3, rng=0, out_dir=None, cfg: SceneConfig | None = None,
                           params: RadarParams | None = None, templates=None):
    """Scene specs (and, with ``out_dir``, rasters + truth JSON-lines).

    Returns ``[(spec, image, truths), ...]``; images are only kept in memory
    when nothing is written to disk.
    """
    cfg = cfg or SceneConfig(density=density_law)
    if density_law is not None:
        cfg.density = density_law
    specs = generate_scene_specs(n_scenes, cfg, rng, templates)
    out = None if out_dir is None else Path(out_dir)
    results = []
    all_truths = []
    if out is not None:
        (out / "scenes").mkdir(parents=True, exist_ok=True)
    for spec in specs:
        img, truths = render_scene(spec, params)
        all_truths.extend(truths)
        if out is not None:
            save_raster(out / "scenes" / f"{spec.scene_id}.radr", img)
            results.append((spec, None, truths))
        else:
            results.append((spec, img, truths))
    if out is not None:
        write_boxes(all_truths, out / "truth.jsonl")
        with open(out / "scenes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for spec in specs:
                fh.write(json.dumps({"scene_id": spec.scene_id, "path": f"scenes/{spec.scene_id}.radr",
                                     "density": spec.density, "wall": spec.wall is not None}) + "\n")
    return results
