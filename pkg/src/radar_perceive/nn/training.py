"""Minibatch SGD with momentum, transfer initialisation and inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from ..augment import CROP_SIZE, Chip, augment_dataset, center_crop
from ..errors import ArchitectureError, InvalidInputError
from ..imaging import CartesianImage, resize_array
from . import layers as L
from .layers import ConvLayerParams
from .network import (NetworkWeights, a_convnet, backward, conv_indices, forward, init_conv,
                      init_weights, layer_shapes)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 100
    validation_fraction: float = 0.2
    seed: int = 0
    micro_batch: int = 25

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.micro_batch < 1:
            raise InvalidInputError("epochs, batch_size and micro_batch must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise InvalidInputError("validation_fraction must be in (0, 1)")


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_to_target: int | None = None
    selected_on: str = "validation"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_accuracy"])
            for row in zip(self.epoch, self.train_loss, self.val_accuracy):
                writer.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


def zeros_like_params(net: NetworkWeights) -> list[ConvLayerParams]:
    return [ConvLayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in net.params]


def sgd_step(net: NetworkWeights, grads, velocity, cfg: TrainConfig):
    """One momentum update: ``dW' = -lr * grad + momentum * dW``; ``W' = W + dW'``.

    ``velocity`` is the previous update ``dW`` (zeros on the first step).
    Returns ``(new_weights, new_velocity)``; inputs are not modified.
    """
    new_params, new_velocity = [], []
    for p, g, v in zip(net.params, grads, velocity):
        dt = p.weights.dtype.type
        dw = dt(-cfg.learning_rate) * g.weights + dt(cfg.momentum) * v.weights
        db = dt(-cfg.learning_rate) * g.bias + dt(cfg.momentum) * v.bias
        new_velocity.append(ConvLayerParams(dw.astype(p.weights.dtype), db.astype(p.bias.dtype)))
        new_params.append(ConvLayerParams((p.weights + dw).astype(p.weights.dtype),
                                          (p.bias + db).astype(p.bias.dtype)))
    out = NetworkWeights(net.layers, new_params, net.input_shape, net.fingerprint)
    return out, new_velocity


def batch_gradients(net: NetworkWeights, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                    micro_batch: int = 25):
    """Train-mode loss and gradients of the batch-mean cross-entropy.

    The batch is pushed through in slices of ``micro_batch`` samples (which
    keeps the patch matrices cache-sized) and the slice gradients are
    combined with weights ``len(slice) / len(batch)``.  Dropout masks are
    drawn slice after slice from ``rng``, which yields the same masks as one
    draw for the whole batch.
    """
    total = len(x)
    loss = 0.0
    grads = None
    for start in range(0, total, micro_batch):
        xs, ys = x[start:start + micro_batch], y[start:start + micro_batch]
        fp = forward(net, xs, "train", rng=rng)
        loss += L.cross_entropy(fp.probs, ys) * len(xs)
        part = backward(net, fp, ys)
        del fp
        w = net.params[0].weights.dtype.type(len(xs) / total)
        if grads is None:
            grads = [ConvLayerParams(g.weights * w, g.bias * w) for g in part]
        else:
            for acc, g in zip(grads, part):
                acc.weights += g.weights * w
                acc.bias += g.bias * w
    return loss / total, grads


# -- input preparation ------------------------------------------------------

def prepare_array(values: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    """Resize to ``size`` x ``size`` if needed and subtract the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (size, size):
        values = resize_array(values, size, size)
    return (values - values.mean()).astype(np.float32)


def chip_input(chip: Chip, size: int = CROP_SIZE) -> np.ndarray:
    """Network input for an evaluation chip: centre crop, then whitening."""
    rows, cols = chip.image.shape
    if rows >= size and cols >= size:
        chip = center_crop(chip, size)
    return prepare_array(chip.image.values, size)


def stack_inputs(chips, size: int = CROP_SIZE) -> np.ndarray:
    if not chips:
        return np.zeros((0, size, size, 1), dtype=np.float32)
    return np.stack([chip_input(c, size) for c in chips])[..., None]


def predict_batch(net: NetworkWeights, x: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """Infer-mode class probabilities for a stack of prepared inputs."""
    out = []
    for start in range(0, len(x), batch_size):
        out.append(forward(net, x[start:start + batch_size], "infer", keep_cache=False).probs)
    if not out:
        return np.zeros((0, net.num_classes), dtype=np.float32)
    return np.concatenate(out)


def predict(net: NetworkWeights, image: CartesianImage | np.ndarray):
    """Class id and probability vector for one image.

    The image is resized to the network input with corner-aligned bilinear
    resampling, whitened and run in infer mode.  Ties go to the lowest id.
    """
    values = image.values if isinstance(image, CartesianImage) else np.asarray(image)
    x = prepare_array(values, net.input_shape[0])[..., None]
    logits = forward(net, x, "infer", keep_cache=False).logits.astype(np.float64)
    probs = L.softmax(logits)  # renormalised in float64 so the vector sums to 1
    return int(np.argmax(probs)), probs


def accuracy_of(net: NetworkWeights, x: np.ndarray, labels: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict_batch(net, x).argmax(axis=1) == labels))


# -- training ---------------------------------------------------------------

def stratified_split(labels, fraction: float, rng: np.random.Generator):
    """Indices ``(train, held_out)``; each class keeps at least one training sample."""
    labels = np.asarray(labels)
    train, held = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_held = min(int(round(fraction * len(idx))), len(idx) - 1)
        held.extend(idx[:n_held].tolist())
        train.extend(idx[n_held:].tolist())
    return np.array(sorted(train), dtype=int), np.array(sorted(held), dtype=int)


def train(
    dataset: list[Chip],
    cfg: TrainConfig | None = None,
    init: NetworkWeights | None = None,
    num_classes: int | None = None,
    layers=None,
    augment: bool = True,
    crops_per_chip: int = 8,
    flip_originals_only: bool = False,
    target_accuracy: float | None = None,
    progress=None,
):
    """Train on ``dataset`` and return ``(best_weights, history)``.

    A stratified ``validation_fraction`` of the chips is held out before
    augmentation.  Training chips are expanded by random crops and mirrors
    (``augment``); held-out chips are centre-cropped.  The returned weights
    are those of the epoch with the highest validation accuracy (earliest on
    ties).  When no chip can be held out, selection uses training accuracy.
    ``target_accuracy`` stops training at the first epoch reaching it.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise InvalidInputError("empty training set")
    labels = np.array([c.label for c in dataset])
    if init is not None:
        net = init.copy()
    else:
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        layers = tuple(layers) if layers is not None else a_convnet(num_classes)
        net = init_weights(layers, rngmod.stream(cfg.seed, "init"))
    net.check()
    n_classes = net.num_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidInputError(f"labels outside [0, {n_classes})")

    train_idx, val_idx = stratified_split(labels, cfg.validation_fraction, rngmod.stream(cfg.seed, "split"))
    present = set(labels[train_idx].tolist())
    missing = sorted(set(range(n_classes)) - present)
    if missing:
        raise InvalidInputError(f"classes {missing} are absent from the training split")

    size = net.input_shape[0]
    train_chips = [dataset[i] for i in train_idx]
    if augment and min(train_chips[0].image.shape) >= size:
        train_chips = augment_dataset(train_chips, crops_per_chip, rngmod.derive_seed(cfg.seed, "augment"),
                                      flip_originals_only=flip_originals_only, size=size)
    x_train = stack_inputs(train_chips, size)
    y_train = np.array([c.label for c in train_chips])
    x_val = stack_inputs([dataset[i] for i in val_idx], size)
    y_val = labels[val_idx]
    select_x, select_y = (x_val, y_val) if len(val_idx) else (x_train, y_train)
    history = History(selected_on="validation" if len(val_idx) else "training")
    eye = np.eye(n_classes, dtype=np.float32)

    velocity = zeros_like_params(net)
    best_net, best_acc = net.copy(), -1.0
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        order = rngmod.stream(cfg.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_gradients(net, x_train[idx], eye[y_train[idx]],
                                          rngmod.stream(cfg.seed, "dropout", epoch, b), cfg.micro_batch)
            total += loss * len(idx)
            net, velocity = sgd_step(net, grads, velocity, cfg)
        acc = accuracy_of(net, select_x, select_y)
        history.epoch.append(epoch)
        history.train_loss.append(total / n)
        history.val_accuracy.append(acc)
        if acc > best_acc:
            best_acc, best_net, history.best_epoch = acc, net.copy(), epoch
        if progress is not None:
            progress(epoch, total / n, acc)
        log.debug("epoch %d loss %.5f acc %.4f", epoch, total / n, acc)
        if target_accuracy is not None and acc >= target_accuracy:
            history.epochs_to_target = epoch
            break
    return best_net, history


def transfer_init(source: NetworkWeights, num_classes: int | None = None, layers=None,
                  seed: int = 0) -> NetworkWeights:
    """Initial weights for a target task from a trained source network.

    Every layer is copied; when the class count changes the final
    convolution is freshly Glorot-initialised from ``seed``.
    """
    source.check()
    if layers is None:
        n = source.num_classes if num_classes is None else num_classes
        final = conv_indices(source.layers)[-1]
        spec = source.layers[final]
        layers = list(source.layers)
        layers[final] = type(spec)("conv", out_channels=n, kernel=spec.kernel, stride=spec.stride)
    layers = tuple(layers)
    if len(layers) != len(source.layers):
        raise ArchitectureError("target and source have different depths")
    final = conv_indices(layers)[-1]
    for i, (a, b) in enumerate(zip(layers, source.layers)):
        if i == final:
            same = a.kind == b.kind and a.kernel == b.kernel and a.stride == b.stride
        else:
            same = a == b
        if not same:
            raise ArchitectureError(f"layer {i} differs between source and target: {b} vs {a}")
    shapes = layer_shapes(layers, source.input_shape)
    params = [p.copy() for p in source.params]
    if layers[final].out_channels != source.layers[final].out_channels:
        in_ch = shapes[final - 1][2] if final > 0 else source.input_shape[2]
        params[-1] = init_conv(layers[final], in_ch, rngmod.stream(seed, "transfer"), source.params[-1].weights.dtype)
    return NetworkWeights(layers, params, source.input_shape)
