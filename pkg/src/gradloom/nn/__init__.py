"""From-scratch feed-forward networks: layer chains, backprop, AdaGrad, archives."""

from gradloom.nn.tensor import Tensor, ShapeError
from gradloom.nn.spec import (
    NetworkSpec,
    LayerSpec,
    SpecError,
    input_layer,
    conv_layer,
    pool_layer,
    fc_layer,
    relu_layer,
    softmax_layer,
)
from gradloom.nn.params import Params, AdaGradState, GradientBundle, ArraySet, LayerArrays
from gradloom.nn.network import Network, build_network, forward, backward, add_output_class
from gradloom.nn.optim import Hyperparams, adagrad_update, NonFiniteGradientError
from gradloom.nn.archive import ModelArchive, ArchiveError, serialize, deserialize

__all__ = [
    "Tensor",
    "ShapeError",
    "NetworkSpec",
    "LayerSpec",
    "SpecError",
    "input_layer",
    "conv_layer",
    "pool_layer",
    "fc_layer",
    "relu_layer",
    "softmax_layer",
    "Params",
    "AdaGradState",
    "GradientBundle",
    "ArraySet",
    "LayerArrays",
    "Network",
    "build_network",
    "forward",
    "backward",
    "add_output_class",
    "Hyperparams",
    "adagrad_update",
    "NonFiniteGradientError",
    "ModelArchive",
    "ArchiveError",
    "serialize",
    "deserialize",
]
