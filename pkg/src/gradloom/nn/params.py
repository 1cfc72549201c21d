"""Flat parameter arrays, gradient bundles, and AdaGrad accumulators.

Trainable layers (conv, fc, softmax) each own one flat weight array and one
flat bias array. Gradients and accumulators are congruent: same layer count,
same array lengths, same ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LayerArrays:
    weights: np.ndarray
    biases: np.ndarray

    def copy(self) -> "LayerArrays":
        return LayerArrays(self.weights.copy(), self.biases.copy())


@dataclass
class ArraySet:
    """One (weights, biases) pair per trainable layer, chain order."""

    layers: list[LayerArrays] = field(default_factory=list)

    def copy(self) -> "ArraySet":
        return ArraySet([la.copy() for la in self.layers])

    def zeros_like(self) -> "ArraySet":
        return ArraySet(
            [
                LayerArrays(np.zeros_like(la.weights), np.zeros_like(la.biases))
                for la in self.layers
            ]
        )

    def congruent(self, other: "ArraySet") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.weights.shape == b.weights.shape and a.biases.shape == b.biases.shape
            for a, b in zip(self.layers, other.layers)
        )

    def add_(self, other: "ArraySet") -> None:
        for a, b in zip(self.layers, other.layers):
            a.weights += b.weights
            a.biases += b.biases

    def scaled(self, factor: float) -> "ArraySet":
        return ArraySet(
            [LayerArrays(la.weights * factor, la.biases * factor) for la in self.layers]
        )

    def arrays(self):
        for la in self.layers:
            yield la.weights
            yield la.biases

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def max_abs_diff(self, other: "ArraySet") -> float:
        worst = 0.0
        for a, b in zip(self.arrays(), other.arrays()):
            if a.size:
                worst = max(worst, float(np.max(np.abs(a - b))))
        return worst

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class Params:
    """Model parameters plus the reduce-step version counter."""

    version: int
    arrays: ArraySet

    def copy(self) -> "Params":
        return Params(self.version, self.arrays.copy())


@dataclass
class AdaGradState:
    """Per-parameter squared-gradient accumulators; entries never decrease."""

    accumulators: ArraySet

    def copy(self) -> "AdaGradState":
        return AdaGradState(self.accumulators.copy())


@dataclass
class GradientBundle:
    """Gradient sums over some number of examples, congruent to Params."""

    params_version: int
    grads: ArraySet
    example_count: int
    compute_ms: float = 0.0
