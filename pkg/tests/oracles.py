"""Independent reference implementations used by the tests.

Everything here is written from the definitions with plain loops, so it
shares no code paths with the package beyond the data types.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from radar_perceive.nn.network import (LayerSpec, NetworkWeights, conv, dropout, forward, init_weights, layer_shapes,
                                       loss_and_grads, maxpool, relu, softmax)


# -- finite-difference gradients --------------------------------------------

def random_tiny_net(g: np.random.Generator) -> tuple[NetworkWeights, np.ndarray, np.ndarray, dict]:
    """A random stack of at most three convolutions on an input of at most
    12x12 that ends in ``1 x 1 x C``, a float64 input batch, one-hot labels
    and fixed dropout masks."""
    while True:
        size = int(g.integers(4, 13))
        channels = int(g.integers(1, 3))
        n_conv = int(g.integers(1, 4))
        layers: list[LayerSpec] = []
        h = size
        ok = True
        for k in range(n_conv):
            last = k == n_conv - 1
            if last:
                kernel = h
                layers.append(conv(int(g.integers(2, 5)), kernel))
                break
            kernel = int(g.integers(1, min(4, h) + 1))
            stride = int(g.integers(1, 3))
            layers.append(conv(int(g.integers(1, 4)), kernel, stride))
            h = (h - kernel) // stride + 1
            if g.random() < 0.7:
                layers.append(relu())
            if h >= 2 and g.random() < 0.5:
                layers.append(maxpool(2))
                h //= 2
            if g.random() < 0.3:
                layers.append(dropout(float(g.uniform(0.1, 0.6))))
            if h < 1:
                ok = False
                break
        if not ok:
            continue
        layers.append(softmax())
        shape = (size, size, channels)
        try:
            shapes = layer_shapes(layers, shape)
        except Exception:
            continue
        if shapes[-1][:2] != (1, 1):
            continue
        net = init_weights(layers, g, shape, dtype=np.float64)
        for p in net.params:
            p.bias[...] = g.uniform(-0.5, 0.5, size=p.bias.shape)
        batch = int(g.integers(1, 4))
        x = g.standard_normal((batch,) + shape)
        classes = net.num_classes
        y = np.eye(classes)[g.integers(0, classes, size=batch)]
        masks = {i: g.random((batch,) + shapes[i]) >= spec.rate
                 for i, spec in enumerate(layers) if spec.kind == "dropout"}
        return net, x, y, masks


def _loss(net: NetworkWeights, x, y, masks) -> float:
    loss, _, _ = loss_and_grads(net, x, y, mode="train", masks=masks)
    return loss


def _pattern(net: NetworkWeights, x, masks) -> bytes:
    """Which ReLU units are active and which input wins every pooling
    window; the loss is smooth wherever this signature is constant."""
    acts = forward(net, x, "train", masks=masks, keep_cache=False).activations
    parts = []
    for i, spec in enumerate(net.layers):
        if spec.kind == "relu":
            parts.append(np.packbits(acts[i] > 0).tobytes())
        elif spec.kind == "maxpool":
            h = x if i == 0 else acts[i - 1]
            b, rows, cols, c = h.shape
            w, s = spec.window, spec.stride
            for r in range((rows - w) // s + 1):
                for q in range((cols - w) // s + 1):
                    win = h[:, r * s:r * s + w, q * s:q * s + w, :].reshape(b, w * w, c)
                    parts.append(np.argmax(win, axis=1).astype(np.int16).tobytes())
    return b"".join(parts)


def gradient_check(net: NetworkWeights, x, y, masks, step: float = 1e-4, min_step: float = 1e-8) -> float:
    """Largest relative deviation between analytic and central-difference
    gradients over every weight and bias.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, 1e-6)``.
    A central difference whose two probes change the ReLU / max-pool
    signature straddles a kink and estimates no derivative, so the step is
    divided by 10 until both probes keep the base signature (down to
    ``min_step``, after which the entry is compared as is).
    """
    _, grads, _ = loss_and_grads(net, x, y, mode="train", masks=masks)
    base = _pattern(net, x, masks)
    worst = 0.0
    for p, gp in zip(net.params, grads):
        for arr, garr in ((p.weights, gp.weights), (p.bias, gp.bias)):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                h = step
                while True:
                    arr[idx] = orig + h
                    up, up_pat = _loss(net, x, y, masks), _pattern(net, x, masks)
                    arr[idx] = orig - h
                    down, down_pat = _loss(net, x, y, masks), _pattern(net, x, masks)
                    arr[idx] = orig
                    if (up_pat == base and down_pat == base) or h / 10 < min_step:
                        break
                    h /= 10
                num = (up - down) / (2 * h)
                ana = float(garr[idx])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                worst = max(worst, rel)
    return worst


# -- DBSCAN -------------------------------------------------------------------

def brute_dbscan(points: np.ndarray, eps: float, min_pts: int):
    """Core flags, noise flags and the partition of core points into
    density-connected components, by explicit O(n^2) adjacency."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    adj = [[j for j in range(n) if (pts[i, 0] - pts[j, 0]) ** 2 + (pts[i, 1] - pts[j, 1]) ** 2 <= eps * eps]
           for i in range(n)]
    core = [len(a) >= min_pts for a in adj]
    comp = [-1] * n
    k = 0
    for i in range(n):
        if not core[i] or comp[i] >= 0:
            continue
        stack = [i]
        comp[i] = k
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if core[v] and comp[v] < 0:
                    comp[v] = k
                    stack.append(v)
        k += 1
    reachable = [core[i] or any(core[j] for j in adj[i]) for i in range(n)]
    border_options = [sorted({comp[j] for j in adj[i] if core[j]}) for i in range(n)]
    return np.array(core), ~np.array(reachable), comp, border_options


# -- average precision -----------------------------------------------------

def brute_average_precision(confidences, is_tp, n_truth: int) -> float:
    """AP by enumerating every confidence threshold.

    For each distinct threshold t the detections with confidence >= t give
    one (recall, precision) point; AP sums recall increments times the best
    precision at that recall or above.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    tp = np.asarray(is_tp, dtype=bool)
    points = []
    for t in sorted(set(conf.tolist()), reverse=True):
        keep = conf >= t
        n_tp = int(np.sum(tp & keep))
        n_det = int(np.sum(keep))
        points.append((n_tp / n_truth, n_tp / n_det))
    total, prev = 0.0, 0.0
    for r, _ in points:
        best = max(p for rr, p in points if rr >= r)
        total += (r - prev) * best
        prev = r
    return total


# -- misc -------------------------------------------------------------------

def direct_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of ``x (H, W, C)`` with ``w (K, C, M, N)``."""
    h, wd, c = x.shape
    k, _, m, n = w.shape
    ho, wo = (h - m) // stride + 1, (wd - n) // stride + 1
    out = np.zeros((ho, wo, k))
    for i, j, q in itertools.product(range(ho), range(wo), range(k)):
        s = b[q]
        for u, v, d in itertools.product(range(m), range(n), range(c)):
            s += w[q, d, u, v] * x[i * stride + u, j * stride + v, d]
        out[i, j, q] = s
    return out


def direct_softmax(x) -> list[float]:
    from decimal import Decimal, getcontext

    getcontext().prec = 40
    e = [Decimal(v).exp() for v in x]
    s = sum(e)
    return [float(v / s) for v in e]


def gaussian_q(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


__all__ = ["random_tiny_net", "gradient_check", "brute_dbscan", "brute_average_precision", "direct_conv",
           "direct_softmax", "gaussian_q"]
