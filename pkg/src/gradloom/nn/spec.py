"""Layer-chain architecture descriptions and their validation.

A NetworkSpec is an ordered list of layer specs. The first layer must be
`input`, the last `softmax`; every intermediate layer must accept the shape
produced by its predecessor. Shapes are (width, height, depth).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

Shape = tuple[int, int, int]

LAYER_KINDS = ("input", "conv", "pool", "fc", "relu", "softmax")


class SpecError(ValueError):
    """Invalid architecture description."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fields: dict[str, Any] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.fields[name]
        except KeyError:
            raise AttributeError(name) from None


def input_layer(w: int, h: int, d: int) -> LayerSpec:
    return LayerSpec("input", {"w": w, "h": h, "d": d})


def conv_layer(filters: int, size: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(
        "conv", {"filters": filters, "size": size, "stride": stride, "padding": padding}
    )


def pool_layer(size: int, stride: int) -> LayerSpec:
    return LayerSpec("pool", {"size": size, "stride": stride})


def fc_layer(neurons: int) -> LayerSpec:
    return LayerSpec("fc", {"neurons": neurons})


def relu_layer() -> LayerSpec:
    return LayerSpec("relu", {})


def softmax_layer(labels: list[str]) -> LayerSpec:
    return LayerSpec("softmax", {"labels": list(labels)})


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    def __init__(self, layers):
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def labels(self) -> list[str]:
        return list(self.layers[-1].fields["labels"])

    @property
    def input_shape(self) -> Shape:
        f = self.layers[0].fields
        return (f["w"], f["h"], f["d"])

    def validate(self) -> list[Shape]:
        """Check chain invariants; return per-layer output shapes."""
        return _chain_shapes(self.layers)

    def with_label(self, label: str) -> "NetworkSpec":
        """Copy with `label` appended to the softmax layer's class list."""
        last = self.layers[-1]
        new_last = softmax_layer(list(last.fields["labels"]) + [label])
        return NetworkSpec(self.layers[:-1] + (new_last,))

    def to_obj(self) -> list[dict]:
        out = []
        for layer in self.layers:
            d = {"kind": layer.kind}
            d.update(layer.fields)
            out.append(d)
        return out

    @staticmethod
    def from_obj(obj: Any) -> "NetworkSpec":
        if not isinstance(obj, list) or not obj:
            raise SpecError("spec must be a non-empty list of layers")
        layers = []
        for i, entry in enumerate(obj):
            if not isinstance(entry, dict) or "kind" not in entry:
                raise SpecError(f"layer {i}: expected object with 'kind'")
            kind = entry["kind"]
            fields = {k: v for k, v in entry.items() if k != "kind"}
            if kind not in LAYER_KINDS:
                raise SpecError(f"layer {i}: unknown layer kind {kind!r}")
            try:
                layers.append(_BUILDERS[kind](**fields))
            except TypeError as e:
                raise SpecError(f"layer {i} ({kind}): {e}") from None
        spec = NetworkSpec(layers)
        spec.validate()
        return spec


_BUILDERS = {
    "input": input_layer,
    "conv": conv_layer,
    "pool": pool_layer,
    "fc": fc_layer,
    "relu": relu_layer,
    "softmax": softmax_layer,
}


def _positive_int(layer_idx: int, name: str, value) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise SpecError(f"layer {layer_idx}: {name} must be a positive integer, got {value!r}")
    return value


def conv_out_dim(layer_idx: int, in_dim: int, size: int, stride: int, padding: int) -> int:
    span = in_dim + 2 * padding - size
    if span < 0 or span % stride != 0:
        raise SpecError(
            f"layer {layer_idx}: window {size} stride {stride} padding {padding} "
            f"does not tile input dim {in_dim}"
        )
    return span // stride + 1


def _chain_shapes(layers: tuple[LayerSpec, ...]) -> list[Shape]:
    if not layers:
        raise SpecError("empty layer chain")
    if layers[0].kind != "input":
        raise SpecError(f"layer 0: first layer must be input, got {layers[0].kind!r}")
    if layers[-1].kind != "softmax":
        raise SpecError(f"layer {len(layers) - 1}: last layer must be softmax, got {layers[-1].kind!r}")

    shapes: list[Shape] = []
    cur: Shape | None = None
    for i, layer in enumerate(layers):
        f = layer.fields
        if layer.kind == "input":
            if i != 0:
                raise SpecError(f"layer {i}: input layer only allowed first")
            cur = (
                _positive_int(i, "w", f["w"]),
                _positive_int(i, "h", f["h"]),
                _positive_int(i, "d", f["d"]),
            )
        elif layer.kind == "conv":
            assert cur is not None
            filters = _positive_int(i, "filters", f["filters"])
            size = _positive_int(i, "size", f["size"])
            stride = _positive_int(i, "stride", f["stride"])
            padding = f["padding"]
            if not isinstance(padding, int) or padding < 0:
                raise SpecError(f"layer {i}: padding must be a non-negative integer")
            ow = conv_out_dim(i, cur[0], size, stride, padding)
            oh = conv_out_dim(i, cur[1], size, stride, padding)
            cur = (ow, oh, filters)
        elif layer.kind == "pool":
            assert cur is not None
            size = _positive_int(i, "size", f["size"])
            stride = _positive_int(i, "stride", f["stride"])
            ow = conv_out_dim(i, cur[0], size, stride, 0)
            oh = conv_out_dim(i, cur[1], size, stride, 0)
            cur = (ow, oh, cur[2])
        elif layer.kind == "fc":
            assert cur is not None
            n = _positive_int(i, "neurons", f["neurons"])
            cur = (1, 1, n)
        elif layer.kind == "relu":
            if cur is None:
                raise SpecError(f"layer {i}: relu cannot be first")
        elif layer.kind == "softmax":
            assert cur is not None
            labels = f["labels"]
            if (
                not isinstance(labels, (list, tuple))
                or not labels
                or not all(isinstance(x, str) for x in labels)
            ):
                raise SpecError(f"layer {i}: labels must be a non-empty list of strings")
            if len(set(labels)) != len(labels):
                raise SpecError(f"layer {i}: duplicate class labels")
            if i != len(layers) - 1:
                raise SpecError(f"layer {i}: softmax only allowed last")
            cur = (1, 1, len(labels))
        shapes.append(cur)
    return shapes
