"""Layer stacks, weights, forward and backward passes, ACNW files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ArchitectureError, FormatError, InvalidInputError, InvalidStateError
from . import layers as L
from .layers import ConvLayerParams

INPUT_SHAPE = (88, 88, 1)

ACNW_MAGIC = b"ACNW"
ACNW_VERSION = 1

LAYER_KINDS = ("conv", "relu", "maxpool", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    window: int = 2
    rate: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise InvalidInputError("stride must be >= 1")
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidInputError("dropout rate must be in [0, 1]")
        if self.kind == "conv" and (self.out_channels < 1 or min(self.kernel) < 1):
            raise InvalidInputError("conv layers need out_channels >= 1 and a kernel >= 1x1")

    def canonical(self) -> dict:
        if self.kind == "conv":
            return {"kind": "conv", "out_channels": self.out_channels,
                    "kernel": list(self.kernel), "stride": self.stride}
        if self.kind == "maxpool":
            return {"kind": "maxpool", "window": self.window, "stride": self.stride}
        if self.kind == "dropout":
            return {"kind": "dropout", "rate": self.rate}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, obj: dict) -> "LayerSpec":
        obj = dict(obj)
        if "kernel" in obj:
            obj["kernel"] = tuple(obj["kernel"])
        return cls(**obj)


def conv(out_channels: int, kernel: int | tuple[int, int], stride: int = 1) -> LayerSpec:
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return LayerSpec("conv", out_channels=out_channels, kernel=tuple(kernel), stride=stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=window if stride is None else stride)


def dropout(rate: float = 0.5) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def a_convnet(num_classes: int = 6, dropout_rate: float = 0.5) -> tuple[LayerSpec, ...]:
    """The all-convolutional classifier for 88x88 single-channel chips."""
    return (
        conv(16, 5), relu(), maxpool(2),
        conv(32, 5), relu(), maxpool(2),
        conv(64, 6), relu(), maxpool(2),
        conv(128, 5), relu(), dropout(dropout_rate),
        conv(num_classes, 3), softmax(),
    )


def fingerprint(layers) -> int:
    """64-bit architecture hash of a layer list."""
    text = json.dumps([spec.canonical() for spec in layers], sort_keys=True, separators=(",", ":"))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def layer_shapes(layers, input_shape=INPUT_SHAPE) -> list[tuple[int, int, int]]:
    """Activation shape after every layer; raises if the stack does not chain
    to ``1 x 1 x C`` followed by softmax."""
    h, w, c = input_shape
    shapes = []
    for index, spec in enumerate(layers):
        if spec.kind == "conv":
            kh, kw = spec.kernel
            if h < kh or w < kw:
                raise ArchitectureError(f"layer {index}: kernel {spec.kernel} exceeds input {h}x{w}")
            h, w, c = L.conv_output_size(h, kh, spec.stride), L.conv_output_size(w, kw, spec.stride), spec.out_channels
        elif spec.kind == "maxpool":
            if h < spec.window or w < spec.window:
                raise ArchitectureError(f"layer {index}: pool window {spec.window} exceeds input {h}x{w}")
            h, w = L.conv_output_size(h, spec.window, spec.stride), L.conv_output_size(w, spec.window, spec.stride)
        elif spec.kind == "softmax" and index != len(layers) - 1:
            raise ArchitectureError("softmax must be the last layer")
        shapes.append((h, w, c))
    if not layers or layers[-1].kind != "softmax":
        raise ArchitectureError("architecture must end with softmax")
    if (h, w) != (1, 1):
        raise ArchitectureError(f"architecture ends in a {h}x{w}x{c} map, expected 1x1xC")
    if sum(spec.kind == "conv" for spec in layers) < 1:
        raise ArchitectureError("architecture has no convolution")
    return shapes


def conv_indices(layers) -> list[int]:
    return [i for i, spec in enumerate(layers) if spec.kind == "conv"]


@dataclass
class NetworkWeights:
    """Convolution parameters of one layer stack, in layer order."""

    layers: tuple[LayerSpec, ...]
    params: list[ConvLayerParams]
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    fingerprint: int = field(default=0)

    def __post_init__(self) -> None:
        self.layers = tuple(self.layers)
        if not self.fingerprint:
            self.fingerprint = fingerprint(self.layers)

    @property
    def num_classes(self) -> int:
        return self.params[-1].out_channels

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.layers, [p.copy() for p in self.params], self.input_shape, self.fingerprint)

    def check(self) -> None:
        """Raise :class:`ArchitectureError` unless weights and layers agree."""
        if self.fingerprint != fingerprint(self.layers):
            raise ArchitectureError(
                f"weights fingerprint {self.fingerprint:016x} does not match layers "
                f"{fingerprint(self.layers):016x}"
            )
        shapes = layer_shapes(self.layers, self.input_shape)
        c = self.input_shape[2]
        convs = conv_indices(self.layers)
        if len(convs) != len(self.params):
            raise ArchitectureError(f"{len(self.params)} parameter sets for {len(convs)} conv layers")
        for p, i in zip(self.params, convs):
            spec = self.layers[i]
            expected = (spec.out_channels, c if i == 0 else shapes[i - 1][2]) + tuple(spec.kernel)
            if p.weights.shape != expected or p.bias.shape != (spec.out_channels,):
                raise ArchitectureError(f"layer {i}: weights {p.weights.shape} / bias {p.bias.shape}, expected {expected}")

    def to_dtype(self, dtype) -> "NetworkWeights":
        params = [ConvLayerParams(p.weights.astype(dtype), p.bias.astype(dtype)) for p in self.params]
        return NetworkWeights(self.layers, params, self.input_shape, self.fingerprint)


def glorot_limit(spec: LayerSpec, in_channels: int) -> float:
    kh, kw = spec.kernel
    return float(np.sqrt(6.0 / (in_channels * kh * kw + spec.out_channels * kh * kw)))


def init_conv(spec: LayerSpec, in_channels: int, rng: np.random.Generator, dtype=np.float32) -> ConvLayerParams:
    limit = glorot_limit(spec, in_channels)
    shape = (spec.out_channels, in_channels) + tuple(spec.kernel)
    weights = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ConvLayerParams(weights, np.zeros(spec.out_channels, dtype=dtype))


def init_weights(layers, rng: np.random.Generator, input_shape=INPUT_SHAPE, dtype=np.float32) -> NetworkWeights:
    """Glorot-uniform weights and zero biases."""
    layers = tuple(layers)
    shapes = layer_shapes(layers, input_shape)
    params = []
    c = input_shape[2]
    for i in conv_indices(layers):
        params.append(init_conv(layers[i], c if i == 0 else shapes[i - 1][2], rng, dtype))
    return NetworkWeights(layers, params, input_shape)


def zero_weights(layers, input_shape=INPUT_SHAPE, dtype=np.float32) -> NetworkWeights:
    net = init_weights(layers, np.random.default_rng(0), input_shape, dtype)
    for p in net.params:
        p.weights[...] = 0
    return net


@dataclass
class ForwardPass:
    """Everything a forward pass leaves behind for :func:`backward`."""

    probs: np.ndarray
    logits: np.ndarray
    activations: list[np.ndarray]
    net_id: int
    caches: list = field(default_factory=list, repr=False)
    consumed: bool = False


def forward(net: NetworkWeights, x: np.ndarray, mode: str = "infer",
            rng: np.random.Generator | None = None, masks: dict | None = None,
            keep_cache: bool = True) -> ForwardPass:
    """Run the stack on ``x`` of shape ``(B, H, W, C)`` or ``(H, W, C)``.

    ``probs`` has shape ``(B, num_classes)`` (or ``(num_classes,)`` for a
    single image).  ``activations[i]`` is the output of layer ``i``.
    ``masks`` maps layer index to a dropout keep-mask to replay.
    """
    net.check()
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ArchitectureError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    params = iter(net.params)
    acts: list[np.ndarray] = []
    caches: list = []
    h = x
    for i, spec in enumerate(net.layers):
        if spec.kind == "conv":
            p = next(params)
            out, cols = L.conv_forward(h, p, spec.stride, return_cols=True)
            caches.append((cols if keep_cache else None, h.shape))
        elif spec.kind == "relu":
            out = L.relu(h)
            caches.append(None)
        elif spec.kind == "maxpool":
            out, arg = L.maxpool(h, spec.window, spec.stride, return_argmax=True)
            caches.append((arg, h.shape))
        elif spec.kind == "dropout":
            given = None if masks is None else masks.get(i)
            out, mask = L.dropout(h, spec.rate, mode, rng=rng, mask=given)
            caches.append(mask)
        else:
            logits = h.reshape(h.shape[0], -1)
            out = L.softmax(logits)
            caches.append(None)
        acts.append(out)
        h = out
    probs = acts[-1]
    logits = acts[-2].reshape(probs.shape) if len(acts) > 1 else x.reshape(probs.shape)
    if single:
        probs, logits = probs[0], logits[0]
    return ForwardPass(probs=probs, logits=logits, activations=acts, net_id=id(net),
                       caches=caches if keep_cache else [])


def backward(net: NetworkWeights, fp: ForwardPass, y: np.ndarray) -> list[ConvLayerParams]:
    """Gradients of the batch-mean cross-entropy for every conv layer."""
    if fp.net_id != id(net) or not fp.caches:
        raise InvalidStateError("activations do not come from a forward pass of these weights")
    probs = fp.activations[-1]
    y = np.asarray(y, dtype=probs.dtype).reshape(probs.shape)
    batch = probs.shape[0]
    grad = L.softmax_cross_entropy_grad(probs, y) / probs.dtype.type(batch)
    conv_ids = conv_indices(net.layers)
    grads: dict[int, ConvLayerParams] = {}
    params = dict(zip(conv_ids, net.params))
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        if spec.kind == "softmax":
            grad = grad.reshape(fp.activations[i - 1].shape) if i > 0 else grad
        elif spec.kind == "conv":
            cols, x_shape = fp.caches[i]
            dx, dw, db = L.conv_backward(grad, cols, x_shape, params[i], spec.stride, need_dx=i > 0)
            grads[i] = ConvLayerParams(dw, db)
            grad = dx
        elif spec.kind == "relu":
            grad = L.relu_backward(grad, fp.activations[i])
        elif spec.kind == "maxpool":
            arg, x_shape = fp.caches[i]
            grad = L.maxpool_backward(grad, arg, x_shape, spec.window, spec.stride)
        elif spec.kind == "dropout":
            grad = L.dropout_backward(grad, fp.caches[i], spec.rate)
    return [grads[i] for i in conv_ids]


def loss_and_grads(net: NetworkWeights, x: np.ndarray, y: np.ndarray, mode: str = "infer",
                   rng: np.random.Generator | None = None, masks: dict | None = None):
    fp = forward(net, x, mode, rng=rng, masks=masks)
    probs = fp.probs if fp.probs.ndim == 2 else fp.probs[None]
    loss = L.cross_entropy(probs, np.asarray(y).reshape(probs.shape))
    return loss, backward(net, fp, y), fp


# -- ACNW weight files ------------------------------------------------------

_HEAD = struct.Struct("<4sIQI")
_LAYER = struct.Struct("<IIIII")


def weights_to_bytes(net: NetworkWeights) -> bytes:
    chunks = [_HEAD.pack(ACNW_MAGIC, ACNW_VERSION, net.fingerprint, len(net.params))]
    for p in net.params:
        chunks.append(_LAYER.pack(*p.weights.shape, p.bias.shape[0]))
        chunks.append(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(net: NetworkWeights, path) -> None:
    Path(path).write_bytes(weights_to_bytes(net))


def weights_from_bytes(blob: bytes, layers=None, input_shape=INPUT_SHAPE, source: str = "<bytes>") -> NetworkWeights:
    """Parse an ACNW blob.

    Without ``layers`` the file must hold the default classifier for the
    class count found in its last layer; otherwise its fingerprint must
    match ``layers``.
    """
    if len(blob) < _HEAD.size:
        raise FormatError(f"{source}: truncated ACNW header")
    magic, version, fp_value, count = _HEAD.unpack_from(blob)
    if magic != ACNW_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != ACNW_VERSION:
        raise FormatError(f"{source}: unsupported ACNW version {version}")
    offset = _HEAD.size
    params = []
    for index in range(count):
        if len(blob) < offset + _LAYER.size:
            raise FormatError(f"{source}: truncated at layer {index} header")
        dims = _LAYER.unpack_from(blob, offset)
        offset += _LAYER.size
        n_w = int(np.prod(dims[:4]))
        n_b = dims[4]
        end = offset + 4 * (n_w + n_b)
        if len(blob) < end:
            raise FormatError(f"{source}: truncated at layer {index} data")
        flat = np.frombuffer(blob, dtype="<f4", count=n_w + n_b, offset=offset).astype(np.float32)
        params.append(ConvLayerParams(flat[:n_w].reshape(dims[:4]).copy(), flat[n_w:].copy()))
        offset = end
    if offset != len(blob):
        raise FormatError(f"{source}: {len(blob) - offset} trailing bytes")
    if not params:
        raise FormatError(f"{source}: no layers")
    if layers is None:
        layers = a_convnet(params[-1].out_channels)
        if fingerprint(layers) != fp_value:
            raise ArchitectureError(
                f"{source}: fingerprint {fp_value:016x} is not the default classifier; pass its layer list"
            )
    layers = tuple(layers)
    if fingerprint(layers) != fp_value:
        raise ArchitectureError(
            f"{source}: file fingerprint {fp_value:016x} does not match requested layers {fingerprint(layers):016x}"
        )
    net = NetworkWeights(layers, params, input_shape, fp_value)
    net.check()
    return net


def load_weights(path, layers=None, input_shape=INPUT_SHAPE) -> NetworkWeights:
    return weights_from_bytes(Path(path).read_bytes(), layers, input_shape, source=str(path))


def layers_to_json(layers) -> str:
    return json.dumps([spec.canonical() for spec in layers], indent=1)


def layers_from_json(text: str) -> tuple[LayerSpec, ...]:
    try:
        return tuple(LayerSpec.from_dict(obj) for obj in json.loads(text))
    except (TypeError, ValueError, KeyError) as exc:
        raise InvalidInputError(f"malformed layer list: {exc}") from None
