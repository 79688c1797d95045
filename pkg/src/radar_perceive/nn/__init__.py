"""Fully-convolutional classifier written directly on NumPy arrays."""

from .layers import (ConvLayerParams, conv_forward, cross_entropy, dropout, maxpool, one_hot, relu,
                     softmax, softmax_cross_entropy_grad)
from .network import (LayerSpec, NetworkWeights, a_convnet, backward, fingerprint, forward,
                      init_weights, load_weights, save_weights, zero_weights)
from .training import TrainConfig, History, predict, sgd_step, train, transfer_init

__all__ = [
    "ConvLayerParams", "LayerSpec", "NetworkWeights", "TrainConfig", "History",
    "a_convnet", "backward", "conv_forward", "cross_entropy", "dropout", "fingerprint",
    "forward", "init_weights", "load_weights", "maxpool", "one_hot", "predict", "relu",
    "save_weights", "sgd_step", "softmax", "softmax_cross_entropy_grad", "train",
    "transfer_init", "zero_weights",
]
