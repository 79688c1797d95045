"""Radar image formation: range profiles, polar to cartesian, chips.

Conventions used throughout the package:

* The sensor sits at metric ``(0, 0)`` and looks along ``+y``.  Azimuth is
  measured from boresight, positive towards ``+x``.
* A :class:`CartesianImage` maps column ``j`` to ``x = origin_x + j * cell``
  and row ``i`` to ``y = origin_y + i * cell``.
* Power is kept linear.  Only :func:`save_raster` may log-compress, and only
  for export.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

SPEED_OF_LIGHT = 299_792_458.0

RADR_MAGIC = b"RADR"
RADR_VERSION = 1
_RADR_HEADER = struct.Struct("<4sIIIddd")


@dataclass(frozen=True)
class RadarParams:
    """Sensor constants.  Defaults follow the 300 GHz prototype."""

    sweep_bandwidth: float = 20e9
    range_resolution: float = 0.0075
    azimuth_beamwidth: float = 1.2
    azimuth_step: float = 0.3
    max_range: float = 12.0

    def __post_init__(self) -> None:
        for name in ("sweep_bandwidth", "range_resolution", "azimuth_beamwidth",
                     "azimuth_step", "max_range"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"RadarParams.{name} must be > 0")
        nominal = SPEED_OF_LIGHT / (2.0 * self.sweep_bandwidth)
        if abs(self.range_resolution - nominal) > 0.01 * nominal:
            raise InvalidInputError(
                f"range_resolution {self.range_resolution} m is inconsistent with "
                f"c/(2B) = {nominal:.6g} m"
            )


@dataclass
class PolarFrame:
    """Time-domain beat signal, one row per azimuth."""

    data: np.ndarray
    params: RadarParams = field(default_factory=RadarParams)

    @property
    def num_azimuths(self) -> int:
        return self.data.shape[0]

    @property
    def samples_per_sweep(self) -> int:
        return self.data.shape[1]


@dataclass
class PolarImage:
    """Range profiles: ``power[azimuth, range_bin]``."""

    power: np.ndarray
    params: RadarParams = field(default_factory=RadarParams)

    @property
    def num_azimuths(self) -> int:
        return self.power.shape[0]

    @property
    def num_range_bins(self) -> int:
        return self.power.shape[1]

    def azimuths_deg(self) -> np.ndarray:
        return azimuth_angles(self.num_azimuths, self.params.azimuth_step)

    def ranges_m(self) -> np.ndarray:
        return np.arange(self.num_range_bins) * self.params.range_resolution


@dataclass
class CartesianImage:
    values: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InvalidInputError(f"image values must be 2-D, got shape {self.values.shape}")
        if not self.cell_size > 0:
            raise InvalidInputError("cell_size must be > 0")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cell_to_xy(self, row, col):
        """Metric position of (possibly fractional) cell indices."""
        return (self.origin[0] + np.asarray(col) * self.cell_size,
                self.origin[1] + np.asarray(row) * self.cell_size)

    def xy_to_cell(self, x, y):
        """Fractional (row, col) of a metric position."""
        return ((np.asarray(y) - self.origin[1]) / self.cell_size,
                (np.asarray(x) - self.origin[0]) / self.cell_size)

    def center_cell(self) -> tuple[int, int]:
        return self.rows // 2, self.cols // 2


def azimuth_angles(num_azimuths: int, step_deg: float) -> np.ndarray:
    """Azimuth of each sweep in degrees, centred on boresight."""
    return (np.arange(num_azimuths) - (num_azimuths - 1) / 2.0) * step_deg


# -- range profiles ---------------------------------------------------------

def full_spectrum(frame: PolarFrame) -> np.ndarray:
    """Complex FFT of every sweep, all ``samples_per_sweep`` bins."""
    data = np.asarray(frame.data)
    if data.ndim != 2 or data.size == 0:
        raise InvalidInputError(f"empty or malformed polar frame, shape {data.shape}")
    if data.shape[1] < 2:
        raise InvalidInputError("samples_per_sweep must be >= 2")
    return np.fft.fft(data.astype(np.float64, copy=False), axis=1)


def range_fft(frame: PolarFrame) -> PolarImage:
    """Squared FFT magnitude over the positive-frequency half of each sweep."""
    spectrum = full_spectrum(frame)
    half = frame.samples_per_sweep // 2
    power = np.abs(spectrum[:, :half]) ** 2
    return PolarImage(power=power, params=frame.params)


# -- polar to cartesian -----------------------------------------------------

def cartesian_grid(params: RadarParams, num_azimuths: int, cell_size: float):
    """Row/column layout covering the sensor's angular sector.

    Returns ``(rows, cols, origin)``; column ``cols // 2`` sits on ``x = 0``.
    """
    half_span = np.deg2rad(max(num_azimuths - 1, 0) * params.azimuth_step / 2.0)
    x_extent = params.max_range * (np.sin(half_span) if half_span < np.pi / 2 else 1.0)
    half_cols = int(np.floor(x_extent / cell_size + 1e-9))
    rows = int(np.floor(params.max_range / cell_size + 1e-9)) + 1
    cols = 2 * half_cols + 1
    return rows, cols, (-half_cols * cell_size, 0.0)


def polar_to_cartesian(img: PolarImage, cell_size: float, method: str = "bilinear") -> CartesianImage:
    """Resample range profiles onto a metric grid.

    Each output cell at ``(x, y)`` reads the polar image at range
    ``hypot(x, y)`` and azimuth ``atan2(x, y)``, interpolated in
    (range-bin, azimuth-index) coordinates.  Cells outside the scanned
    sector or beyond ``max_range`` are 0.
    """
    if not cell_size > 0:
        raise InvalidInputError("cell_size must be > 0")
    if method not in ("bilinear", "nearest"):
        raise InvalidInputError(f"unknown interpolation method {method!r}")
    params = img.params
    power = np.asarray(img.power, dtype=np.float64)
    n_az, n_bins = power.shape
    rows, cols, origin = cartesian_grid(params, n_az, cell_size)

    x = origin[0] + np.arange(cols) * cell_size
    y = origin[1] + np.arange(rows) * cell_size
    xx, yy = np.meshgrid(x, y)
    r = np.hypot(xx, yy)
    theta = np.rad2deg(np.arctan2(xx, yy))

    fr = r / params.range_resolution
    fa = theta / params.azimuth_step + (n_az - 1) / 2.0
    eps = 1e-9
    inside = ((fa >= -eps) & (fa <= n_az - 1 + eps) & (fr <= n_bins - 1 + eps)
              & (r <= params.max_range + eps))
    fr = np.clip(fr, 0.0, n_bins - 1)
    fa = np.clip(fa, 0.0, n_az - 1)

    if method == "nearest":
        out = power[np.rint(fa).astype(int), np.rint(fr).astype(int)]
    else:
        a0 = np.minimum(np.floor(fa).astype(int), max(n_az - 2, 0))
        b0 = np.minimum(np.floor(fr).astype(int), max(n_bins - 2, 0))
        a1 = np.minimum(a0 + 1, n_az - 1)
        b1 = np.minimum(b0 + 1, n_bins - 1)
        ta = fa - a0
        tb = fr - b0
        out = ((1 - ta) * (1 - tb) * power[a0, b0] + (1 - ta) * tb * power[a0, b1]
               + ta * (1 - tb) * power[a1, b0] + ta * tb * power[a1, b1])
    out = np.where(inside, out, 0.0)
    return CartesianImage(values=out, cell_size=cell_size, origin=origin)


# -- chip manipulation ------------------------------------------------------

def whiten(img: CartesianImage, mean: float | None = None) -> CartesianImage:
    """Subtract the image mean, or a supplied dataset mean.

    The result is float64 so its mean is zero to round-off.
    """
    values = np.asarray(img.values)
    if mean is None:
        mean = float(values.mean(dtype=np.float64)) if values.size else 0.0
    return replace(img, values=values.astype(np.float64) - mean)


def crop_window(img: CartesianImage, center: tuple[int, int], size_cells: int) -> CartesianImage:
    """Square chip of ``size_cells`` whose cell ``size_cells // 2`` is ``center``.

    Parts of the window outside the source image are zero.
    """
    if size_cells < 1:
        raise InvalidInputError("size_cells must be >= 1")
    top = int(center[0]) - size_cells // 2
    left = int(center[1]) - size_cells // 2
    src = img.values
    out = np.zeros((size_cells, size_cells), dtype=src.dtype)
    r0, r1 = max(top, 0), min(top + size_cells, img.rows)
    c0, c1 = max(left, 0), min(left + size_cells, img.cols)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = src[r0:r1, c0:c1]
    origin = (img.origin[0] + left * img.cell_size, img.origin[1] + top * img.cell_size)
    return CartesianImage(values=out, cell_size=img.cell_size, origin=origin)


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(int), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = pos - i0
    return i0, i1, t


def resize_array(values: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D array.

    Output cell ``k`` samples input coordinate ``k * (n_in - 1) / (n_out - 1)``.
    """
    if out_rows < 1 or out_cols < 1:
        raise InvalidInputError("output dimensions must be >= 1")
    values = np.asarray(values)
    if values.shape == (out_rows, out_cols):
        return values.copy()
    dtype = values.dtype if values.dtype.kind == "f" else np.float64
    r0, r1, tr = _axis_weights(values.shape[0], out_rows)
    c0, c1, tc = _axis_weights(values.shape[1], out_cols)
    v = values.astype(np.float64, copy=False)
    rows = (1 - tr)[:, None] * v[r0] + tr[:, None] * v[r1]
    out = (1 - tc)[None, :] * rows[:, c0] + tc[None, :] * rows[:, c1]
    return out.astype(dtype, copy=False)


def resize_bilinear(img: CartesianImage, out_rows: int, out_cols: int) -> CartesianImage:
    values = resize_array(img.values, out_rows, out_cols)
    if img.rows > 1 and out_rows > 1:
        cell = img.cell_size * (img.rows - 1) / (out_rows - 1)
    else:
        cell = img.cell_size * img.rows / out_rows
    return CartesianImage(values=values, cell_size=cell, origin=img.origin)


# -- RADR raster files ------------------------------------------------------

def save_raster(path, img: CartesianImage, log_scale: bool = False) -> None:
    """Write ``img`` as a little-endian RADR raster.

    ``log_scale`` stores ``10*log10(max(v, 1e-12))`` and is meant for
    viewing only; the pipeline always reads linear rasters.
    """
    values = np.asarray(img.values, dtype=np.float64)
    if log_scale:
        values = 10.0 * np.log10(np.maximum(values, 1e-12))
    header = _RADR_HEADER.pack(RADR_MAGIC, RADR_VERSION, img.rows, img.cols,
                               float(img.cell_size), img.origin[0], img.origin[1])
    body = np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_raster(path) -> CartesianImage:
    blob = Path(path).read_bytes()
    if len(blob) < _RADR_HEADER.size:
        raise FormatError(f"{path}: truncated RADR header")
    magic, version, rows, cols, cell, ox, oy = _RADR_HEADER.unpack_from(blob)
    if magic != RADR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RADR_VERSION:
        raise FormatError(f"{path}: unsupported RADR version {version}")
    expected = _RADR_HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=_RADR_HEADER.size).reshape(rows, cols)
    return CartesianImage(values=values.astype(np.float32), cell_size=cell, origin=(ox, oy))
