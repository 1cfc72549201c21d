"""AdaGrad update with optional L1/L2 penalties."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from gradloom.nn.params import AdaGradState, ArraySet, Params


class NonFiniteGradientError(ValueError):
    """Raised when an averaged gradient carries a NaN or infinity."""


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    l1_decay: float = 0.0
    l2_decay: float = 0.0
    dropout_p: float = 0.0
    adagrad_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.l1_decay < 0 or self.l2_decay < 0:
            raise ValueError(
                f"decay terms must be >= 0, got l1={self.l1_decay} l2={self.l2_decay}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.adagrad_eps <= 0:
            raise ValueError(f"adagrad_eps must be positive, got {self.adagrad_eps}")

    def updated(self, **changes) -> "Hyperparams":
        return replace(self, **changes)

    def to_obj(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "l1_decay": self.l1_decay,
            "l2_decay": self.l2_decay,
            "dropout_p": self.dropout_p,
            "adagrad_eps": self.adagrad_eps,
        }

    @staticmethod
    def from_obj(obj: dict) -> "Hyperparams":
        if not isinstance(obj, dict):
            raise ValueError(f"hyperparams must be an object, got {type(obj).__name__}")
        known = {"learning_rate", "l1_decay", "l2_decay", "dropout_p", "adagrad_eps"}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown hyperparameter fields: {sorted(extra)}")
        return Hyperparams(**{k: float(v) for k, v in obj.items()})


def adagrad_update(
    params: Params, state: AdaGradState, avg_grad: ArraySet, hyper: Hyperparams
) -> tuple[Params, AdaGradState]:
    """One optimizer step on the averaged gradient; bumps the version by 1.

    Per element: g' = g + l2*theta + l1*sign(theta), accumulator += g'*g',
    theta -= lr * g' / (sqrt(accumulator) + eps). Inputs are not mutated.
    """
    if not params.arrays.congruent(avg_grad):
        raise ValueError("gradient arrays not congruent with params")
    if not avg_grad.all_finite():
        raise NonFiniteGradientError("averaged gradient contains NaN or inf")
    new_arrays = params.arrays.copy()
    new_acc = state.accumulators.copy()
    for theta, acc, g in zip(new_arrays.arrays(), new_acc.arrays(), avg_grad.arrays()):
        gp = g + hyper.l2_decay * theta + hyper.l1_decay * np.sign(theta)
        acc += gp * gp
        theta -= hyper.learning_rate * gp / (np.sqrt(acc) + hyper.adagrad_eps)
    return Params(params.version + 1, new_arrays), AdaGradState(new_acc)
