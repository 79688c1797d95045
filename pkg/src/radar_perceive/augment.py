"""Chip datasets: random 88x88 crops, left-right mirrors and manifests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import InvalidInputError, ManifestError
from .imaging import CartesianImage, load_raster

CROP_SIZE = 88


def quadrant_of(aspect_deg: float) -> int:
    """Aspect quadrant: 1 for [0, 90), 2 for [90, 180), 3, 4."""
    return int((float(aspect_deg) % 360.0) // 90.0) + 1


@dataclass
class Chip:
    image: CartesianImage
    label: int
    range_m: float = 0.0
    receiver_id: int = 0
    aspect_deg: float = 0.0

    @property
    def quadrant(self) -> int:
        return quadrant_of(self.aspect_deg)

    @property
    def values(self) -> np.ndarray:
        return self.image.values


def _sub_image(img: CartesianImage, top: int, left: int, rows: int, cols: int) -> CartesianImage:
    values = img.values[top:top + rows, left:left + cols].copy()
    origin = (img.origin[0] + left * img.cell_size, img.origin[1] + top * img.cell_size)
    return CartesianImage(values=values, cell_size=img.cell_size, origin=origin)


def random_crop(chip: Chip, rng: np.random.Generator, size: int = CROP_SIZE) -> Chip:
    """Uniformly placed ``size`` x ``size`` sub-window (no interpolation)."""
    rows, cols = chip.image.shape
    if rows < size or cols < size:
        raise InvalidInputError(f"chip of {rows}x{cols} is smaller than the {size}x{size} crop")
    top = int(rng.integers(0, rows - size + 1))
    left = int(rng.integers(0, cols - size + 1))
    return replace(chip, image=_sub_image(chip.image, top, left, size, size))


def center_crop(chip: Chip, size: int = CROP_SIZE) -> Chip:
    rows, cols = chip.image.shape
    if rows < size or cols < size:
        raise InvalidInputError(f"chip of {rows}x{cols} is smaller than the {size}x{size} crop")
    return replace(chip, image=_sub_image(chip.image, (rows - size) // 2, (cols - size) // 2, size, size))


def flip_lr(chip: Chip) -> Chip:
    values = chip.image.values[:, ::-1].copy()
    return replace(chip, image=replace(chip.image, values=values))


def augment_dataset(
    chips: list[Chip],
    crops_per_chip: int = 8,
    rng: np.random.Generator | int | None = None,
    flip_originals_only: bool = False,
    size: int = CROP_SIZE,
) -> list[Chip]:
    """Random crops of every chip, each followed by its mirror image.

    The output holds ``len(chips) * crops_per_chip * 2`` chips, ordered chip
    by chip as ``crop, mirror(crop), crop, mirror(crop), ...``.  With
    ``flip_originals_only`` each chip instead contributes its crops plus one
    centre-cropped mirror of the original (``x (crops_per_chip + 1)``).

    Chip ``i`` draws from its own sub-stream, so the result does not
    depend on processing order.
    """
    if crops_per_chip < 1:
        raise InvalidInputError("crops_per_chip must be >= 1")
    base = rng.integers(0, 2**63) if isinstance(rng, np.random.Generator) else (0 if rng is None else int(rng))
    out: list[Chip] = []
    for index, chip in enumerate(chips):
        sub = rngmod.stream(int(base), "augment", index)
        crops = [random_crop(chip, sub, size) for _ in range(crops_per_chip)]
        if flip_originals_only:
            out.extend(crops)
            out.append(center_crop(flip_lr(chip), size))
        else:
            for crop in crops:
                out.append(crop)
                out.append(flip_lr(crop))
    return out


# -- manifests --------------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    label: int
    range_m: float
    receiver_id: int
    aspect_deg: float
    quadrant: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


_MANIFEST_FIELDS = ("path", "label", "range_m", "receiver_id", "aspect_deg", "quadrant")


def write_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = ManifestRecord(
                    path=str(obj["path"]),
                    label=int(obj["label"]),
                    range_m=float(obj["range_m"]),
                    receiver_id=int(obj["receiver_id"]),
                    aspect_deg=float(obj["aspect_deg"]),
                    quadrant=int(obj.get("quadrant", quadrant_of(obj["aspect_deg"]))),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{line_no}: malformed manifest record ({exc})") from None
            if rec.label < 0:
                raise ManifestError(f"{path}:{line_no}: negative label")
            records.append(rec)
    return records


def load_chips(manifest_path, records: list[ManifestRecord] | None = None) -> list[Chip]:
    """Read the rasters a manifest points at; paths are relative to it."""
    root = Path(manifest_path).parent
    if records is None:
        records = read_manifest(manifest_path)
    chips = []
    for rec in records:
        image = load_raster(root / rec.path)
        chips.append(Chip(image=image, label=rec.label, range_m=rec.range_m,
                          receiver_id=rec.receiver_id, aspect_deg=rec.aspect_deg))
    return chips
