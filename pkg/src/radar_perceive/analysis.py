"""Penultimate-layer features, exact t-SNE and scatter plots."""

from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ArchitectureError, InvalidInputError
from .nn.network import NetworkWeights, conv_indices, forward
from .nn.training import stack_inputs

_LOG_BETA_BOUNDS = (-50.0, 50.0)


@dataclass
class FeatureSet:
    matrix: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.matrix.ndim != 2 or len(self.labels) != len(self.matrix):
            raise InvalidInputError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.matrix)):
            raise InvalidInputError("features contain non-finite values")


def extract_features(net: NetworkWeights, chips, batch_size: int = 200) -> FeatureSet:
    """Flattened infer-mode input of the final convolution, one row per chip."""
    convs = conv_indices(net.layers)
    if len(convs) < 2:
        raise ArchitectureError("feature extraction needs at least two conv layers")
    final = convs[-1]
    x = stack_inputs(list(chips), net.input_shape[0])
    rows = []
    for start in range(0, len(x), batch_size):
        fp = forward(net, x[start:start + batch_size], "infer", keep_cache=False)
        feat = fp.activations[final - 1]
        rows.append(feat.reshape(len(feat), -1).astype(np.float64))
    matrix = np.concatenate(rows) if rows else np.zeros((0, 0))
    return FeatureSet(matrix, np.array([c.label for c in chips], dtype=int))


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 4.0
    exaggeration_iterations: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if not self.perplexity > 0 or not self.learning_rate > 0:
            raise InvalidInputError("perplexity and learning_rate must be > 0")


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: float
    kl_after_exaggeration: float
    kl_history: list[tuple[int, float]] = field(default_factory=list)


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d: np.ndarray, log_beta: float):
    beta = math.exp(log_beta)
    logits = -beta * (d - d.min())
    p = np.exp(logits)
    s = p.sum()
    p /= s
    entropy = math.log(s) - float(np.dot(p, logits))
    return entropy, p


def conditional_p(x: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50) -> np.ndarray:
    """Row-stochastic ``p_{j|i}`` whose rows have entropy ``log(perplexity)``.

    The Gaussian precision of each row is found by bisection on its
    logarithm (distances are scaled by their row mean first).
    """
    n = len(x)
    if n < 2 or not perplexity < n:
        raise InvalidInputError(f"perplexity {perplexity} must be below the sample count {n}")
    target = math.log(perplexity)
    dist = squared_distances(np.asarray(x, dtype=np.float64))
    out = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist[i], i)
        scale = d.mean()
        if scale <= 0:
            d_scaled = d
        else:
            d_scaled = d / scale
        lo, hi = _LOG_BETA_BOUNDS
        log_beta = 0.0
        entropy, p = _row_entropy(d_scaled, log_beta)
        for _ in range(max_iter):
            if abs(entropy - target) <= tol:
                break
            if entropy > target:
                lo = log_beta
            else:
                hi = log_beta
            log_beta = 0.5 * (lo + hi)
            entropy, p = _row_entropy(d_scaled, log_beta)
        if abs(entropy - target) > tol:
            raise InvalidInputError(
                f"bandwidth search for point {i} missed the target entropy by {abs(entropy - target):.2e}")
        out[i, np.arange(n) != i] = p
    return out


def joint_p(x: np.ndarray, perplexity: float) -> np.ndarray:
    cond = conditional_p(x, perplexity)
    p = (cond + cond.T) / (2.0 * len(x))
    return np.maximum(p, 1e-12)


def student_q(y: np.ndarray):
    """Low-dimensional affinities ``q_ij`` and the kernel ``1 / (1 + d_ij)``."""
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    return q, num


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    q, _ = student_q(y)
    mask = ~np.eye(len(p), dtype=bool)
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``dKL/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)``."""
    q, num = student_q(y)
    w = (p - q) * num
    np.fill_diagonal(w, 0.0)
    return 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)


def tsne(features: FeatureSet | np.ndarray, cfg: TsneConfig | None = None) -> TsneResult:
    """Exact t-SNE by gradient descent with momentum and adaptive gains."""
    cfg = cfg or TsneConfig()
    x = features.matrix if isinstance(features, FeatureSet) else np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise InvalidInputError("t-SNE needs at least 4 samples")
    p = joint_p(x, cfg.perplexity)
    g = rngmod.stream(cfg.seed, "tsne")
    y = 1e-4 * g.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    kl_after = float("nan")
    for it in range(cfg.iterations):
        exaggerate = it < cfg.exaggeration_iterations
        pe = p * cfg.exaggeration if exaggerate else p
        grad = kl_gradient(pe, y)
        momentum = cfg.initial_momentum if it < cfg.momentum_switch else cfg.final_momentum
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - cfg.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if it + 1 == cfg.exaggeration_iterations:
            kl_after = kl_divergence(p, y)
        if (it + 1) % 50 == 0:
            history.append((it + 1, kl_divergence(p, y)))
    kl = kl_divergence(p, y)
    if math.isnan(kl_after):
        kl_after = kl
    return TsneResult(y, kl, kl_after, history)


# -- output -----------------------------------------------------------------

_PALETTE = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
            (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207)]


def class_colors(n: int) -> list[tuple[int, int, int]]:
    if n <= len(_PALETTE):
        return _PALETTE[:n]
    out = list(_PALETTE)
    for k in range(n - len(_PALETTE)):
        r, g, b = colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.75, 0.85)
        out.append((int(r * 255), int(g * 255), int(b * 255)))
    return out


@dataclass
class PlotInfo:
    bounds: tuple[float, float, float, float]  # x0, x1, y0, y1 of the axes
    colors: dict[int, tuple[int, int, int]]
    size: tuple[int, int]


def plot_embedding(embedding: np.ndarray, labels, path, size: int = 512, marker: int = 2) -> PlotInfo:
    """Scatter plot as a binary PPM (P6), one colour per distinct label."""
    emb = np.asarray(embedding, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[1] != 2 or len(emb) != len(labels):
        raise InvalidInputError("embedding must be (n, 2) with one label per row")
    classes = sorted(set(labels.tolist()))
    colors = dict(zip(classes, class_colors(len(classes))))
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    margin = 10
    canvas[margin, margin:size - margin] = 0
    canvas[size - margin - 1, margin:size - margin] = 0
    canvas[margin:size - margin, margin] = 0
    canvas[margin:size - margin, size - margin - 1] = 0
    if len(emb):
        lo, hi = emb.min(axis=0), emb.max(axis=0)
    else:
        lo, hi = np.zeros(2), np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 0.05 * span
    x0, y0 = lo - pad
    x1, y1 = hi + pad
    inner = size - 2 * margin - 2 * marker - 3
    for (px, py), lab in zip(emb, labels.tolist()):
        cx = margin + marker + 1 + int(round((px - x0) / (x1 - x0) * inner))
        cy = size - 1 - (margin + marker + 1 + int(round((py - y0) / (y1 - y0) * inner)))
        canvas[cy - marker:cy + marker + 1, cx - marker:cx + marker + 1] = colors[lab]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{size} {size}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())
    return PlotInfo((float(x0), float(x1), float(y0), float(y1)), colors, (size, size))


def read_ppm(path) -> np.ndarray:
    """Pixels of a P6 file written by :func:`plot_embedding`."""
    with open(path, "rb") as fh:
        data = fh.read()
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0] != b"P6":
        raise InvalidInputError(f"{path} is not a binary PPM")
    w, h = (int(v) for v in lines[1].split())
    return np.frombuffer(lines[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def write_embedding_csv(embedding: np.ndarray, labels, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "x", "y", "label"])
        for i, ((x, y), lab) in enumerate(zip(np.asarray(embedding), labels)):
            writer.writerow([i, repr(float(x)), repr(float(y)), int(lab)])
