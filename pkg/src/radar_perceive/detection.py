"""Two-stage detection: CFAR thresholding, DBSCAN clustering, fixed-size
box proposals and per-box classification with an optional background class."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import Chip
from .errors import FormatError, InvalidInputError
from .imaging import CartesianImage, crop_window, resize_array, resize_bilinear

try:
    import numba as _nb
except ImportError:  # pragma: no cover - exercised only without numba
    _nb = None

log = logging.getLogger(__name__)

BOX_CELLS = 275
NOISE = -1


# -- boxes ------------------------------------------------------------------

@dataclass
class DetectionBox:
    """Square box of ``size_cells`` centred on a cell.

    The box spans ``center +/- size_cells / 2`` in continuous cell
    coordinates.  ``confidence`` is ``None`` for ground truth.
    """

    center_row: float
    center_col: float
    size_cells: int = BOX_CELLS
    label: int = 0
    confidence: float | None = None
    scene_id: str = ""
    range_m: float = 0.0

    def __post_init__(self) -> None:
        if self.size_cells < 0:
            raise InvalidInputError("size_cells must be >= 0")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        return self.center_row, self.center_col

    def bounds(self, shape: tuple[int, int] | None = None) -> tuple[float, float, float, float]:
        """``(row0, col0, row1, col1)``, clipped to ``[0, rows] x [0, cols]`` if given."""
        h = self.size_cells / 2.0
        r0, c0, r1, c1 = self.center_row - h, self.center_col - h, self.center_row + h, self.center_col + h
        if shape is not None:
            r0, r1 = min(max(r0, 0.0), shape[0]), min(max(r1, 0.0), shape[0])
            c0, c1 = min(max(c0, 0.0), shape[1]), min(max(c1, 0.0), shape[1])
        return r0, c0, r1, c1

    def to_dict(self) -> dict:
        out = {"scene_id": self.scene_id, "center_row": self.center_row, "center_col": self.center_col,
               "size_cells": self.size_cells, "class": self.label}
        if self.confidence is not None:
            out["confidence"] = self.confidence
        out["range_m"] = self.range_m
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectionBox":
        conf = obj.get("confidence")
        return cls(center_row=obj["center_row"], center_col=obj["center_col"],
                   size_cells=int(obj.get("size_cells", BOX_CELLS)), label=int(obj["class"]),
                   confidence=None if conf is None else float(conf), scene_id=str(obj.get("scene_id", "")),
                   range_m=float(obj.get("range_m", 0.0)))


def boxes_intersect(a: DetectionBox, b: DetectionBox) -> bool:
    """True when the boxes share a region of positive area."""
    ar0, ac0, ar1, ac1 = a.bounds()
    br0, bc0, br1, bc1 = b.bounds()
    return min(ar1, br1) > max(ar0, br0) and min(ac1, bc1) > max(ac0, bc0)


def write_boxes(boxes, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in boxes:
            fh.write(json.dumps(b.to_dict()) + "\n")


def read_boxes(path) -> list[DetectionBox]:
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                boxes.append(DetectionBox.from_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{line_no}: malformed box record ({exc})") from None
    return boxes


def box_range(img: CartesianImage, row: float, col: float) -> float:
    x, y = img.cell_to_xy(row, col)
    return float(math.hypot(float(x), float(y)))


# -- CFAR -------------------------------------------------------------------

@dataclass
class CfarConfig:
    """``global``: ``value > level * max``.  ``cell_averaging``: ``value >
    scale_factor * mean(training ring)``; with ``pfa`` set instead of
    ``scale_factor`` the scale is derived per cell from its ring size."""

    mode: str = "global"
    level: float = 0.22
    train_cells: int = 8
    guard_cells: int = 2
    scale_factor: float | None = None
    pfa: float | None = 1e-3

    def __post_init__(self) -> None:
        if self.mode not in ("global", "cell_averaging"):
            raise InvalidInputError(f"unknown CFAR mode {self.mode!r}")
        if self.mode == "global" and not 0.0 < self.level <= 1.0:
            raise InvalidInputError("global CFAR level must be in (0, 1]")
        if self.train_cells < 1 or self.guard_cells < 0:
            raise InvalidInputError("train_cells must be >= 1 and guard_cells >= 0")
        if self.mode == "cell_averaging" and self.scale_factor is None and self.pfa is None:
            raise InvalidInputError("cell-averaging CFAR needs scale_factor or pfa")
        if self.pfa is not None and not 0.0 < self.pfa < 1.0:
            raise InvalidInputError("pfa must be in (0, 1)")


def ca_scale_for_pfa(pfa: float, num_cells) -> np.ndarray | float:
    """Scale giving false-alarm rate ``pfa`` on exponential (square-law) noise
    when the noise level is the mean of ``num_cells`` cells:
    ``N * (pfa ** (-1 / N) - 1)``."""
    n = np.asarray(num_cells, dtype=np.float64)
    return n * (pfa ** (-1.0 / n) - 1.0)


def _window_sums(values: np.ndarray, half: int):
    """Sum and count over the ``(2*half+1)``-square window around every cell,
    clipped at the image border."""
    rows, cols = values.shape
    integral = np.zeros((rows + 1, cols + 1), dtype=np.float64)
    np.cumsum(np.cumsum(values, axis=0, dtype=np.float64), axis=1, out=integral[1:, 1:])
    r = np.arange(rows)
    c = np.arange(cols)
    r0, r1 = np.clip(r - half, 0, rows), np.clip(r + half + 1, 0, rows)
    c0, c1 = np.clip(c - half, 0, cols), np.clip(c + half + 1, 0, cols)
    total = (integral[r1[:, None], c1[None, :]] - integral[r0[:, None], c1[None, :]]
             - integral[r1[:, None], c0[None, :]] + integral[r0[:, None], c0[None, :]])
    count = (r1 - r0)[:, None] * (c1 - c0)[None, :]
    return total, count


def cfar_detect(img: CartesianImage | np.ndarray, cfg: CfarConfig | None = None) -> np.ndarray:
    """Boolean detection mask over a non-negative power image."""
    cfg = cfg or CfarConfig()
    values = np.asarray(img.values if isinstance(img, CartesianImage) else img, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidInputError("CFAR needs a 2-D image")
    if values.size == 0:
        return np.zeros(values.shape, dtype=bool)
    if cfg.mode == "global":
        return values > cfg.level * values.max()
    outer_sum, outer_n = _window_sums(values, cfg.train_cells + cfg.guard_cells)
    inner_sum, inner_n = _window_sums(values, cfg.guard_cells)
    ring_n = outer_n - inner_n
    ring_sum = outer_sum - inner_sum
    scale = cfg.scale_factor if cfg.scale_factor is not None else ca_scale_for_pfa(cfg.pfa, np.maximum(ring_n, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        noise = np.where(ring_n > 0, ring_sum / np.maximum(ring_n, 1), np.inf)
    return values > scale * noise


# -- DBSCAN -----------------------------------------------------------------

@dataclass
class DbscanConfig:
    epsilon: float = 0.3
    min_points: int = 40

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be > 0")
        if self.min_points < 1:
            raise InvalidInputError("min_points must be >= 1")


def _bucket_index(points: np.ndarray, eps: float):
    """Sort points into square buckets of side ``eps``."""
    lo = points.min(axis=0)
    cell = np.floor((points - lo) / eps).astype(np.int64)
    width = int(cell[:, 1].max()) + 3
    keys = (cell[:, 0] + 1) * width + (cell[:, 1] + 1)
    order = np.argsort(keys, kind="stable")
    return keys, order, keys[order], width


def _scan_python(points, eps2, min_points, keys, order, sorted_keys, width):  # pragma: no cover - mirrored by jit
    n = points.shape[0]
    labels = np.full(n, -2, dtype=np.int64)  # -2 unvisited, -1 noise
    core = np.zeros(n, dtype=np.bool_)
    nbr = np.empty(n, dtype=np.int64)
    offsets = np.array([-width - 1, -width, -width + 1, -1, 0, 1, width - 1, width, width + 1], dtype=np.int64)

    def neighbours(p):
        m = 0
        for off in offsets:
            k = keys[p] + off
            lo = np.searchsorted(sorted_keys, k, side="left")
            hi = np.searchsorted(sorted_keys, k, side="right")
            for s in range(lo, hi):
                q = order[s]
                dx = points[q, 0] - points[p, 0]
                dy = points[q, 1] - points[p, 1]
                if dx * dx + dy * dy <= eps2:
                    nbr[m] = q
                    m += 1
        return m

    for p in range(n):
        core[p] = neighbours(p) >= min_points
    cluster = -1
    queue = np.empty(n, dtype=np.int64)
    for p in range(n):
        if labels[p] != -2:
            continue
        if not core[p]:
            labels[p] = -1
            continue
        cluster += 1
        labels[p] = cluster
        head, tail = 0, 0
        queue[tail] = p
        tail += 1
        while head < tail:
            q = queue[head]
            head += 1
            m = neighbours(q)
            for t in range(m):
                r = nbr[t]
                if labels[r] == -1:
                    labels[r] = cluster
                elif labels[r] == -2:
                    labels[r] = cluster
                    if core[r]:
                        queue[tail] = r
                        tail += 1
    return labels, core


_scan = _nb.njit(cache=True)(_scan_python) if _nb is not None else _scan_python


def dbscan(points, cfg: DbscanConfig | None = None, return_core: bool = False):
    """Cluster id per point (``-1`` for noise).

    A point is core when at least ``min_points`` points (itself included)
    lie within ``epsilon`` (``dx*dx + dy*dy <= epsilon**2``).  Points are
    scanned in input order; each unvisited core point opens the next
    cluster, which is grown breadth-first through core points.  A border
    point joins the first cluster that reaches it.
    """
    cfg = cfg or DbscanConfig()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        labels, core = np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    else:
        keys, order, sorted_keys, width = _bucket_index(pts, cfg.epsilon)
        labels, core = _scan(np.ascontiguousarray(pts), cfg.epsilon * cfg.epsilon, cfg.min_points,
                             keys, order, sorted_keys, width)
        labels = labels.astype(np.int64)
    if return_core:
        return labels, core
    return labels


# -- proposals and classification ------------------------------------------

def mask_points(mask: np.ndarray, img: CartesianImage) -> tuple[np.ndarray, np.ndarray]:
    """Row-major ``(rows, cols)`` of detected cells and their metric ``(x, y)``."""
    rows, cols = np.nonzero(mask)
    x, y = img.cell_to_xy(rows, cols)
    return np.column_stack([rows, cols]), np.column_stack([x, y])


def propose_boxes(mask: np.ndarray, img: CartesianImage, cfg: DbscanConfig | None = None,
                  size_cells: int = BOX_CELLS) -> list[DetectionBox]:
    """One box per DBSCAN cluster of detected cells, centred on the cluster
    centroid (rounded to the nearest cell), sorted by ``(row, col)``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise InvalidInputError(f"mask shape {mask.shape} differs from image shape {img.shape}")
    cells, xy = mask_points(mask, img)
    if len(xy) == 0:
        return []
    labels = dbscan(xy, cfg)
    boxes = []
    for k in range(int(labels.max()) + 1):
        sel = labels == k
        cx, cy = xy[sel].mean(axis=0)
        row, col = img.xy_to_cell(cx, cy)
        row = int(min(max(round(float(row)), 0), img.rows - 1))
        col = int(min(max(round(float(col)), 0), img.cols - 1))
        boxes.append(DetectionBox(row, col, size_cells, label=-1, range_m=box_range(img, row, col)))
    boxes.sort(key=lambda b: (b.center_row, b.center_col))
    return boxes


def box_input(img: CartesianImage, box: DetectionBox, size: int = 88) -> np.ndarray:
    """Zero-padded crop of a box, resized to the network input."""
    chip = crop_window(img, (int(box.center_row), int(box.center_col)), int(box.size_cells))
    return resize_array(np.asarray(chip.values, dtype=np.float64), size, size)


def detect_and_classify(img: CartesianImage, net, cfar: CfarConfig | None = None, db: DbscanConfig | None = None,
                        size_cells: int = BOX_CELLS, background_class: int | None = -1,
                        scene_id: str = "") -> list[DetectionBox]:
    """CFAR, cluster, propose, then classify every box.

    ``background_class`` names the class whose boxes are dropped (negative
    values count from the end, ``None`` keeps every box).  Confidence is the
    softmax probability of the emitted class.
    """
    from .nn.training import predict_batch, prepare_array

    mask = cfar_detect(img, cfar)
    proposals = propose_boxes(mask, img, db, size_cells)
    if not proposals:
        return []
    size = net.input_shape[0]
    x = np.stack([prepare_array(box_input(img, b, size), size) for b in proposals])[..., None]
    probs = predict_batch(net, x).astype(np.float64)
    bg = None if background_class is None else background_class % net.num_classes
    out = []
    for b, p in zip(proposals, probs):
        cls = int(np.argmax(p))
        if cls == bg:
            continue
        out.append(DetectionBox(b.center_row, b.center_col, b.size_cells, cls,
                                float(min(max(p[cls], 0.0), 1.0)), scene_id, b.range_m))
    return out


def object_chips(scene: CartesianImage, truths, context_cells: int | None = None,
                 chip_size: int | None = None) -> list[Chip]:
    """One training chip per truth box: a ``context_cells`` window around
    its centre (default: the box itself), optionally resized."""
    chips = []
    for t in truths:
        win = crop_window(scene, (t.center_row, t.center_col), context_cells or t.size_cells)
        if chip_size is not None and chip_size != win.rows:
            win = resize_bilinear(win, chip_size, chip_size)
        chips.append(Chip(image=win, label=t.label, range_m=t.range_m))
    return chips


@dataclass
class BackgroundSample:
    chips: list[Chip] = field(default_factory=list)
    boxes: list[DetectionBox] = field(default_factory=list)
    warning: bool = False


def sample_background_boxes(scene: CartesianImage, truths, k: int = 4, rng: np.random.Generator | None = None,
                            size_cells: int = BOX_CELLS, label: int = 0, context_cells: int | None = None,
                            chip_size: int | None = None, max_attempts: int = 1000) -> BackgroundSample:
    """Up to ``k`` boxes that do not intersect any truth box.

    Up to ``max_attempts`` uniformly placed candidates are drawn (boxes lie
    fully inside the scene) and those clear of every truth are kept.  The
    accepted set takes ``ceil(k / 2)`` boxes from candidates whose mean
    power is above the candidates' median, then fills up from the rest, so
    the sample leans towards clutter.  When fewer than ``k`` clear
    candidates exist the result is short and ``warning`` is set.

    Each chip is a ``context_cells`` window around the box (default: the
    box itself), optionally resized to ``chip_size`` cells.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if k < 0:
        raise InvalidInputError("k must be >= 0")
    rows, cols = scene.shape
    if rows < size_cells or cols < size_cells:
        raise InvalidInputError(f"scene {scene.shape} is smaller than the {size_cells}-cell box")
    half = size_cells // 2
    truths = list(truths)
    candidates: list[DetectionBox] = []
    for _ in range(max_attempts):
        if len(candidates) >= max(4 * k, 16):
            break
        r = int(rng.integers(half, rows - (size_cells - half) + 1))
        c = int(rng.integers(half, cols - (size_cells - half) + 1))
        box = DetectionBox(r, c, size_cells, label=label, range_m=box_range(scene, r, c))
        if any(boxes_intersect(box, t) for t in truths):
            continue
        candidates.append(box)
    if not candidates:
        log.warning("no background box clear of the ground truth after %d attempts", max_attempts)
        return BackgroundSample(warning=k > 0)
    power = np.array([crop_window(scene, (b.center_row, b.center_col), size_cells).values.mean()
                      for b in candidates])
    high = [i for i in range(len(candidates)) if power[i] > np.median(power)]
    low = [i for i in range(len(candidates)) if i not in high]
    n_high = min(len(high), (k + 1) // 2)
    pick = list(rng.permutation(high)[:n_high])
    rest = [i for i in rng.permutation(high + low) if i not in pick]
    pick += rest[:k - len(pick)]
    chosen = [candidates[int(i)] for i in pick]
    warning = len(chosen) < k
    if warning:
        log.warning("only %d of %d background boxes could be placed", len(chosen), k)
    context = context_cells or size_cells
    chips = []
    for b in chosen:
        win = crop_window(scene, (b.center_row, b.center_col), context)
        if chip_size is not None and chip_size != context:
            win = resize_bilinear(win, chip_size, chip_size)
        chips.append(Chip(image=win, label=label, range_m=b.range_m))
    return BackgroundSample(chips=chips, boxes=chosen, warning=warning)
