"""Self-contained JSON model archives.

The document carries the network spec, parameters, optimizer state,
hyperparameters, labels, iteration counter, and init seed. Floats render as
shortest round-trip decimals, so serialize/deserialize is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gradloom import ARCHIVE_FORMAT_VERSION
from gradloom.nn.network import _compile_nodes, _weight_geometry
from gradloom.nn.optim import Hyperparams
from gradloom.nn.params import AdaGradState, ArraySet, LayerArrays, Params
from gradloom.nn.spec import NetworkSpec, SpecError

_TOP_KEYS = {"format_version", "spec", "params", "adagrad", "hyper", "labels", "iteration", "seed"}


class ArchiveError(ValueError):
    """Malformed or mismatched archive document; message names the field path."""


@dataclass
class ModelArchive:
    spec: NetworkSpec
    params: Params
    adagrad: AdaGradState
    hyper: Hyperparams
    labels: list[str]
    iteration: int
    seed: int


def _float_list(a: np.ndarray) -> list[float]:
    return a.tolist()


def _arrayset_obj(arrays: ArraySet) -> list[dict]:
    return [
        {"weights": _float_list(la.weights), "biases": _float_list(la.biases)}
        for la in arrays.layers
    ]


def serialize(archive: ModelArchive) -> str:
    doc = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "spec": archive.spec.to_obj(),
        "params": {
            "version": archive.params.version,
            "layers": _arrayset_obj(archive.params.arrays),
        },
        "adagrad": {"layers": _arrayset_obj(archive.adagrad.accumulators)},
        "hyper": archive.hyper.to_obj(),
        "labels": list(archive.labels),
        "iteration": archive.iteration,
        "seed": archive.seed,
    }
    return json.dumps(doc, allow_nan=False)


def _need(obj: dict, key: str, path: str):
    if key not in obj:
        raise ArchiveError(f"missing field: {path}{key}")
    return obj[key]


def _int_field(obj: dict, key: str, path: str, minimum: int | None = None) -> int:
    v = _need(obj, key, path)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ArchiveError(f"{path}{key} must be an integer, got {type(v).__name__}")
    if minimum is not None and v < minimum:
        raise ArchiveError(f"{path}{key} must be >= {minimum}, got {v}")
    return v


def _float_array(v, path: str) -> np.ndarray:
    if not isinstance(v, list):
        raise ArchiveError(f"{path} must be a number array")
    try:
        a = np.asarray(v, dtype=np.float64)
    except (TypeError, ValueError):
        raise ArchiveError(f"{path} must be a number array") from None
    if a.ndim != 1:
        raise ArchiveError(f"{path} must be a flat array")
    if not np.all(np.isfinite(a)):
        raise ArchiveError(f"{path} contains non-finite values")
    return a


def _parse_arrayset(obj, geometry: list[tuple[int, int]], path: str) -> ArraySet:
    if not isinstance(obj, dict):
        raise ArchiveError(f"{path} must be an object")
    layers = _need(obj, "layers", f"{path}.")
    if not isinstance(layers, list):
        raise ArchiveError(f"{path}.layers must be an array")
    if len(layers) != len(geometry):
        raise ArchiveError(
            f"{path}.layers has {len(layers)} entries, network needs {len(geometry)}"
        )
    out = ArraySet()
    for i, (entry, (w_len, b_len)) in enumerate(zip(layers, geometry)):
        p = f"{path}.layers[{i}]"
        if not isinstance(entry, dict):
            raise ArchiveError(f"{p} must be an object")
        w = _float_array(_need(entry, "weights", f"{p}."), f"{p}.weights")
        b = _float_array(_need(entry, "biases", f"{p}."), f"{p}.biases")
        if w.size != w_len or b.size != b_len:
            raise ArchiveError(
                f"{p} expects {w_len} weights and {b_len} biases, got {w.size} and {b.size}"
            )
        out.layers.append(LayerArrays(w, b))
    return out


def deserialize(document: str | bytes) -> ModelArchive:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as e:
        raise ArchiveError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ArchiveError("document root must be an object")

    fv = _need(doc, "format_version", "")
    if fv != ARCHIVE_FORMAT_VERSION:
        raise ArchiveError(
            f"format_version mismatch: got {fv!r}, expected {ARCHIVE_FORMAT_VERSION!r}"
        )
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise ArchiveError(f"unknown top-level fields: {sorted(extra)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise ArchiveError(f"missing field: {sorted(missing)[0]}")

    try:
        spec = NetworkSpec.from_obj(doc["spec"])
        nodes, _, labels = _compile_nodes(spec)
    except SpecError as e:
        raise ArchiveError(f"spec: {e}") from None

    doc_labels = doc["labels"]
    if not isinstance(doc_labels, list) or not all(isinstance(s, str) for s in doc_labels):
        raise ArchiveError("labels must be an array of strings")
    if doc_labels != labels:
        raise ArchiveError("labels do not match the spec's softmax labels")

    geometry = [
        (_weight_geometry(n)[0], _weight_geometry(n)[1])
        for n in nodes
        if n.param_index is not None
    ]
    params_obj = doc["params"]
    if not isinstance(params_obj, dict):
        raise ArchiveError("params must be an object")
    version = _int_field(params_obj, "version", "params.", minimum=0)
    arrays = _parse_arrayset(params_obj, geometry, "params")
    acc = _parse_arrayset(doc["adagrad"], geometry, "adagrad")
    for i, la in enumerate(acc.layers):
        if np.any(la.weights < 0) or np.any(la.biases < 0):
            raise ArchiveError(f"adagrad.layers[{i}] has negative accumulator entries")

    try:
        hyper = Hyperparams.from_obj(doc["hyper"])
    except (ValueError, TypeError) as e:
        raise ArchiveError(f"hyper: {e}") from None

    iteration = _int_field(doc, "iteration", "", minimum=0)
    seed = _int_field(doc, "seed", "")

    return ModelArchive(
        spec=spec,
        params=Params(version, arrays),
        adagrad=AdaGradState(acc),
        hyper=hyper,
        labels=list(doc_labels),
        iteration=iteration,
        seed=seed,
    )
