"""Network compilation, forward/backward passes, and dynamic class growth.

Compilation desugars the user-facing spec into an executable node chain:
conv and fc layers get an implicit ReLU inserted after them unless the spec
already places an explicit relu there. Softmax is a trainable classifier
layer (it owns the output weight matrix), so growing the label set appends a
zero row to it without disturbing any existing logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from gradloom.rng import SplitMix64
from gradloom.nn import layers as K
from gradloom.nn.params import AdaGradState, ArraySet, LayerArrays, Params
from gradloom.nn.spec import NetworkSpec, Shape
from gradloom.nn.tensor import ShapeError, Tensor


@dataclass
class Node:
    kind: str
    fields: dict[str, Any]
    in_shape: Shape | None
    out_shape: Shape
    param_index: int | None = None  # position in ArraySet for trainables


@dataclass
class Network:
    spec: NetworkSpec
    nodes: list[Node]
    input_shape: Shape
    labels: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.labels)


@dataclass
class ForwardCache:
    """Per-node intermediates kept for the backward pass."""

    node_caches: list[Any]
    training: bool
    drop_masks: dict[int, np.ndarray] = field(default_factory=dict)
    drop_scale: float = 1.0


def _compile_nodes(spec: NetworkSpec) -> tuple[list[Node], Shape, list[str]]:
    shapes = spec.validate()
    nodes: list[Node] = []
    param_index = 0
    prev_shape: Shape | None = None
    n_layers = len(spec.layers)
    for i, layer in enumerate(spec.layers):
        node = Node(layer.kind, dict(layer.fields), prev_shape, shapes[i])
        if layer.kind in ("conv", "fc", "softmax"):
            node.param_index = param_index
            param_index += 1
        nodes.append(node)
        prev_shape = shapes[i]
        needs_relu = layer.kind in ("conv", "fc") and (
            i + 1 >= n_layers or spec.layers[i + 1].kind != "relu"
        )
        if needs_relu:
            nodes.append(Node("relu", {}, prev_shape, prev_shape))
    return nodes, spec.input_shape, spec.labels


def _flat_size(shape: Shape) -> int:
    return shape[0] * shape[1] * shape[2]


def _weight_geometry(node: Node) -> tuple[int, int, int]:
    """(weight_len, bias_len, fan_in) for a trainable node."""
    assert node.in_shape is not None
    if node.kind == "conv":
        k = node.fields["size"]
        fan_in = k * k * node.in_shape[2]
        return node.fields["filters"] * fan_in, node.fields["filters"], fan_in
    if node.kind == "fc":
        fan_in = _flat_size(node.in_shape)
        return node.fields["neurons"] * fan_in, node.fields["neurons"], fan_in
    if node.kind == "softmax":
        fan_in = _flat_size(node.in_shape)
        n = len(node.fields["labels"])
        return n * fan_in, n, fan_in
    raise AssertionError(node.kind)


def build_network(spec: NetworkSpec, seed: int) -> tuple[Network, Params, AdaGradState]:
    """Compile a spec and initialize parameters from the given seed.

    Weights are Gaussian(0, 1/sqrt(fan_in)) drawn from a SplitMix64 stream in
    node order; biases start at zero. The same (spec, seed) pair always builds
    bit-identical parameters.
    """
    nodes, input_shape, labels = _compile_nodes(spec)
    net = Network(spec=spec, nodes=nodes, input_shape=input_shape, labels=labels)
    rng = SplitMix64(seed)
    arrays = ArraySet()
    for node in nodes:
        if node.param_index is None:
            continue
        w_len, b_len, fan_in = _weight_geometry(node)
        std = 1.0 / math.sqrt(fan_in)
        arrays.layers.append(
            LayerArrays(rng.gaussians(w_len, std), np.zeros(b_len, dtype=np.float64))
        )
    return net, Params(version=0, arrays=arrays), AdaGradState(arrays.zeros_like())


def _check_params(net: Network, params: Params) -> None:
    trainables = [n for n in net.nodes if n.param_index is not None]
    if len(params.arrays.layers) != len(trainables):
        raise ShapeError(
            f"params carry {len(params.arrays.layers)} layers, network has {len(trainables)}"
        )
    for node in trainables:
        w_len, b_len, _ = _weight_geometry(node)
        la = params.arrays.layers[node.param_index]
        if la.weights.size != w_len or la.biases.size != b_len:
            raise ShapeError(
                f"{node.kind} layer expects {w_len}+{b_len} params, "
                f"got {la.weights.size}+{la.biases.size}"
            )


def forward(
    net: Network,
    params: Params,
    x: Tensor | np.ndarray,
    training: bool = False,
    dropout_p: float = 0.0,
    rng: SplitMix64 | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the chain on one example; returns (class probabilities, cache).

    Dropout (fc layers only) is applied only when `training` is set and
    dropout_p > 0; a fresh mask is drawn from `rng` per call.
    """
    _check_params(net, params)
    if isinstance(x, Tensor):
        a = x.as_hwd()
    else:
        a = np.asarray(x, dtype=np.float64)
    w, h, d = net.input_shape
    if a.shape != (h, w, d):
        raise ShapeError(f"input shape {a.shape} != expected {(h, w, d)}")

    use_dropout = training and dropout_p > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout requires an rng")
    drop_scale = 1.0 / (1.0 - dropout_p) if use_dropout else 1.0

    cache = ForwardCache(node_caches=[], training=training, drop_scale=drop_scale)
    probs: np.ndarray | None = None
    for i, node in enumerate(net.nodes):
        f = node.fields
        if node.kind == "input":
            cache.node_caches.append(None)
        elif node.kind == "conv":
            la = params.arrays.layers[node.param_index]
            a, c = K.conv_forward(
                a, la.weights, la.biases, f["filters"], f["size"], f["stride"], f["padding"]
            )
            cache.node_caches.append(c)
        elif node.kind == "pool":
            a, c = K.pool_forward(a, f["size"], f["stride"])
            cache.node_caches.append(c)
        elif node.kind == "fc":
            la = params.arrays.layers[node.param_index]
            mask = None
            if use_dropout:
                mask = rng.bernoulli_keep_mask(f["neurons"], dropout_p)
                cache.drop_masks[i] = mask
            a, c = K.fc_forward(a, la.weights, la.biases, f["neurons"], mask, drop_scale)
            cache.node_caches.append(c)
        elif node.kind == "relu":
            a, c = K.relu_forward(a)
            cache.node_caches.append(c)
        elif node.kind == "softmax":
            la = params.arrays.layers[node.param_index]
            probs, c = K.softmax_forward(a, la.weights, la.biases, net.n_classes)
            cache.node_caches.append(c)
    assert probs is not None
    return probs, cache


def backward(
    net: Network, params: Params, cache: ForwardCache, label_index: int
) -> tuple[ArraySet, float]:
    """Backpropagate cross-entropy loss for one example.

    Returns (gradients congruent to params, loss = -log p[label]).
    Requires a cache produced with training=True.
    """
    if not cache.training:
        raise ValueError("backward requires a cache from forward(training=True)")
    if not 0 <= label_index < net.n_classes:
        raise IndexError(
            f"label index {label_index} out of range for {net.n_classes} classes"
        )
    grads = params.arrays.zeros_like()
    loss = 0.0
    dx: np.ndarray | None = None
    for i in range(len(net.nodes) - 1, -1, -1):
        node = net.nodes[i]
        f = node.fields
        c = cache.node_caches[i]
        if node.kind == "softmax":
            la = params.arrays.layers[node.param_index]
            dx, dw, db, loss = K.softmax_backward(label_index, la.weights, c, net.n_classes)
            g = grads.layers[node.param_index]
            g.weights += dw
            g.biases += db
        elif node.kind == "relu":
            dx = K.relu_backward(dx, c)
        elif node.kind == "fc":
            la = params.arrays.layers[node.param_index]
            mask = cache.drop_masks.get(i)
            dx, dw, db = K.fc_backward(
                dx, la.weights, c, f["neurons"], mask, cache.drop_scale
            )
            g = grads.layers[node.param_index]
            g.weights += dw
            g.biases += db
        elif node.kind == "pool":
            dx = K.pool_backward(dx, c, f["size"], f["stride"])
        elif node.kind == "conv":
            la = params.arrays.layers[node.param_index]
            dx, dw, db = K.conv_backward(
                dx, la.weights, c, f["filters"], f["size"], f["stride"], f["padding"]
            )
            g = grads.layers[node.param_index]
            g.weights += dw
            g.biases += db
        elif node.kind == "input":
            break
    return grads, loss


def add_output_class(
    net: Network, params: Params, state: AdaGradState, label: str
) -> tuple[Network, Params, AdaGradState]:
    """Grow the softmax layer by one zero-initialized output.

    No-op if the label already exists. Existing logits are untouched: the new
    row is all zeros, and prior rows are copied bit-for-bit.
    """
    if label in net.labels:
        return net, params, state
    new_spec = net.spec.with_label(label)
    nodes, input_shape, labels = _compile_nodes(new_spec)
    new_net = Network(spec=new_spec, nodes=nodes, input_shape=input_shape, labels=labels)

    fan_in = params.arrays.layers[-1].weights.size // len(net.labels)
    new_arrays = params.arrays.copy()
    last = new_arrays.layers[-1]
    last.weights = np.concatenate([last.weights, np.zeros(fan_in)])
    last.biases = np.concatenate([last.biases, np.zeros(1)])

    new_acc = state.accumulators.copy()
    acc_last = new_acc.layers[-1]
    acc_last.weights = np.concatenate([acc_last.weights, np.zeros(fan_in)])
    acc_last.biases = np.concatenate([acc_last.biases, np.zeros(1)])

    return new_net, Params(params.version, new_arrays), AdaGradState(new_acc)
