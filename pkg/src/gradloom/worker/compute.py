"""Budgeted gradient computation, test-set evaluation, and prediction.

All functions here are synchronous and self-contained: they take their
inputs as arguments and share nothing, so the session can run them on a
separate thread while the control connection stays responsive.
"""

from __future__ import annotations

import time
import zlib
from bisect import bisect_right

import numpy as np

from gradloom.nn.network import Network, forward, backward
from gradloom.nn.optim import Hyperparams
from gradloom.nn.params import GradientBundle, Params
from gradloom.rng import SplitMix64


def dropout_rng(worker_id: str, params_version: int) -> SplitMix64:
    """Deterministic per-(worker, version) stream; stable across processes."""
    seed = zlib.crc32(f"{worker_id}:{params_version}".encode())
    return SplitMix64(seed)


def train_budget(
    net: Network,
    params: Params,
    hyper: Hyperparams,
    items: dict[str, tuple[str, np.ndarray]],
    budget_ms: int | None,
    steps: int | None,
    cursor: str | None,
    worker_id: str,
    throttle_ms: float = 0.0,
) -> tuple[GradientBundle | None, str | None, str | None]:
    """One budget window; returns (bundle, new_cursor, diagnostic).

    Time mode walks the cached ids cyclically from just past `cursor`,
    checking the clock between examples; even a zero budget processes one
    example so slow workers still make progress. Step mode processes
    exactly min(steps, cache size) ids from the start of the ascending
    order, which makes the result independent of timing.

    A non-finite loss abandons the window: bundle is None and the
    diagnostic names the offending example.
    """
    if (budget_ms is None) == (steps is None):
        raise ValueError("need exactly one of budget_ms or steps")
    ids = sorted(items)
    grads = params.arrays.zeros_like()
    t0 = time.perf_counter()
    if not ids:
        return GradientBundle(params.version, grads, 0, 0.0), cursor, None

    rng = dropout_rng(worker_id, params.version)
    count = 0
    if steps is not None:
        todo = ids[: min(steps, len(ids))]
        pos = None
    else:
        todo = None
        pos = bisect_right(ids, cursor) % len(ids) if cursor is not None else 0

    i = 0
    last_id = cursor
    while True:
        if todo is not None:
            if i >= len(todo):
                break
            qid = todo[i]
        else:
            qid = ids[(pos + i) % len(ids)]
        label, x = items[qid]
        try:
            label_index = net.labels.index(label)
        except ValueError:
            return None, last_id, f"label {label!r} unknown to this model"
        _, fwd_cache = forward(
            net, params, x, training=True, dropout_p=hyper.dropout_p, rng=rng
        )
        g, loss = backward(net, params, fwd_cache, label_index)
        if not np.isfinite(loss):
            return None, last_id, f"non-finite loss on {qid}"
        grads.add_(g)
        count += 1
        last_id = qid
        i += 1
        if throttle_ms > 0:
            time.sleep(throttle_ms / 1000.0)
        if todo is None and (time.perf_counter() - t0) * 1000.0 >= budget_ms:
            break

    compute_ms = (time.perf_counter() - t0) * 1000.0
    bundle = GradientBundle(params.version, grads, count, compute_ms)
    return bundle, (last_id if todo is None else cursor), None


def evaluate(net: Network, params: Params, items) -> float:
    """Fraction misclassified by argmax over the full item list."""
    if not items:
        raise ValueError("empty test set")
    wrong = 0
    for label, x in items:
        probs, _ = forward(net, params, x)
        if net.labels[int(np.argmax(probs))] != label:
            wrong += 1
    return wrong / len(items)


def predict_label(net: Network, params: Params, x: np.ndarray) -> tuple[str, float]:
    probs, _ = forward(net, params, x)
    k = int(np.argmax(probs))
    return net.labels[k], float(probs[k])
