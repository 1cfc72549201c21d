"""Message schema shared by workers, the coordinator, and the dashboard.

One JSON document per message. Every message carries the envelope triple
{project_id, sender_id, msg_seq}; msg_seq must strictly increase per sender.
Bulk float arrays (parameters, gradient sums) travel as base64-encoded
little-endian float64 bytes, so round-trips are bit-exact even for NaN
payloads. The decoder is total: any input yields a Message or ProtocolError.

Wire form:
    {"project_id": "p", "sender_id": "w1", "msg_seq": 3,
     "type": "ping", "body": {"sent_at_ms": 12}}
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from gradloom import PROTOCOL_VERSION
from gradloom.nn.archive import ArchiveError, ModelArchive, deserialize as archive_loads
from gradloom.nn.archive import serialize as archive_dumps
from gradloom.nn.optim import Hyperparams
from gradloom.nn.params import ArraySet, GradientBundle, LayerArrays, Params
from gradloom.nn.spec import NetworkSpec, SpecError
from gradloom.nn.tensor import ShapeError, Tensor

MAX_FRAME_BYTES = 64 * 1024 * 1024

WORKER_MODES = ("train", "track", "predict")


class ProtocolError(ValueError):
    """Any malformed, unknown, or oversized message."""


# ---------------------------------------------------------------------------
# variants


@dataclass
class Message:
    project_id: str
    sender_id: str
    msg_seq: int


@dataclass
class Join(Message):
    worker_id: str = ""
    mode: str = "train"
    capacity: int = 0


@dataclass
class Welcome(Message):
    protocol_version: int = PROTOCOL_VERSION
    spec: NetworkSpec | None = None
    hyper: Hyperparams | None = None
    params: Params | None = None


@dataclass
class AllocationUpdate(Message):
    add_ids: list[str] = field(default_factory=list)
    remove_ids: list[str] = field(default_factory=list)


@dataclass
class WorkOrder(Message):
    params: Params | None = None
    budget_ms: int | None = None
    steps: int | None = None
    deadline_hint_ms: int = 0


@dataclass
class GradientReport(Message):
    bundle: GradientBundle | None = None


@dataclass
class StatsReport(Message):
    iteration: int = 0
    metric_name: str = ""
    value: float = 0.0


@dataclass
class HyperUpdate(Message):
    hyper: Hyperparams | None = None


@dataclass
class PredictRequest(Message):
    tensor: Tensor | None = None
    image_png: bytes | None = None  # exactly one of tensor/image_png


@dataclass
class PredictResponse(Message):
    label: str = ""
    probability: float = 0.0


@dataclass
class SaveRequest(Message):
    pass


@dataclass
class ModelSnapshot(Message):
    archive: ModelArchive | None = None


@dataclass
class WorkerIterationStats:
    latency_ewma_ms: float = 0.0
    budget_ms: float = 0.0
    example_count: int = 0

    def to_obj(self) -> dict:
        return {
            "latency_ewma_ms": self.latency_ewma_ms,
            "budget_ms": self.budget_ms,
            "example_count": self.example_count,
        }


@dataclass
class IterationRecord:
    iteration: int = 0
    params_version: int = 0
    reports_received: int = 0
    total_examples: int = 0
    wall_ms: float = 0.0
    power: float = 0.0
    stale_reports: int = 0
    workers: dict[str, WorkerIterationStats] = field(default_factory=dict)
    # hyperparameters active for this iteration's reduce
    hyper: dict | None = None
    # latest StatsReport value per metric name since the previous record
    metrics: dict[str, float] = field(default_factory=dict)

    def to_obj(self) -> dict:
        out = {
            "iteration": self.iteration,
            "params_version": self.params_version,
            "reports_received": self.reports_received,
            "total_examples": self.total_examples,
            "wall_ms": self.wall_ms,
            "power": self.power,
            "stale_reports": self.stale_reports,
            "workers": {w: s.to_obj() for w, s in self.workers.items()},
            "metrics": dict(self.metrics),
        }
        if self.hyper is not None:
            out["hyper"] = dict(self.hyper)
        return out

    @staticmethod
    def from_obj(obj) -> "IterationRecord":
        if not isinstance(obj, dict):
            raise ProtocolError("telemetry record must be an object")
        hyper = obj.get("hyper")
        if hyper is not None and not isinstance(hyper, dict):
            raise ProtocolError("telemetry record hyper must be an object")
        try:
            workers = {
                str(w): WorkerIterationStats(
                    latency_ewma_ms=float(s["latency_ewma_ms"]),
                    budget_ms=float(s["budget_ms"]),
                    example_count=int(s["example_count"]),
                )
                for w, s in obj.get("workers", {}).items()
            }
            metrics = {str(k): float(v) for k, v in obj.get("metrics", {}).items()}
            return IterationRecord(
                iteration=int(obj["iteration"]),
                params_version=int(obj["params_version"]),
                reports_received=int(obj["reports_received"]),
                total_examples=int(obj["total_examples"]),
                wall_ms=float(obj["wall_ms"]),
                power=float(obj["power"]),
                stale_reports=int(obj.get("stale_reports", 0)),
                workers=workers,
                hyper=dict(hyper) if hyper is not None else None,
                metrics=metrics,
            )
        except (KeyError, TypeError, ValueError, AttributeError, OverflowError) as e:
            raise ProtocolError(f"bad telemetry record: {e}") from None


@dataclass
class Telemetry(Message):
    record: IterationRecord | None = None


@dataclass
class ParamBroadcast(Message):
    params: Params | None = None


@dataclass
class Bye(Message):
    reason: str = ""


@dataclass
class Ping(Message):
    sent_at_ms: int = 0


@dataclass
class Pong(Message):
    sent_at_ms: int = 0


# ---------------------------------------------------------------------------
# array payload helpers


def _b64_floats(a: np.ndarray) -> str:
    return base64.b64encode(np.asarray(a, dtype="<f8").tobytes()).decode("ascii")


def _floats_b64(s, path: str) -> np.ndarray:
    if not isinstance(s, str):
        raise ProtocolError(f"{path}: expected base64 string")
    try:
        raw = base64.b64decode(s.encode("ascii"), validate=True)
    except Exception:
        raise ProtocolError(f"{path}: invalid base64") from None
    if len(raw) % 8:
        raise ProtocolError(f"{path}: byte length {len(raw)} not a multiple of 8")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _arrayset_obj(arrays: ArraySet) -> list[dict]:
    return [
        {"w": _b64_floats(la.weights), "b": _b64_floats(la.biases)} for la in arrays.layers
    ]


def _obj_arrayset(obj, path: str) -> ArraySet:
    if not isinstance(obj, list):
        raise ProtocolError(f"{path}: expected array of layers")
    out = ArraySet()
    for i, entry in enumerate(obj):
        if not isinstance(entry, dict) or "w" not in entry or "b" not in entry:
            raise ProtocolError(f"{path}[{i}]: expected object with 'w' and 'b'")
        out.layers.append(
            LayerArrays(
                _floats_b64(entry["w"], f"{path}[{i}].w"),
                _floats_b64(entry["b"], f"{path}[{i}].b"),
            )
        )
    return out


def _params_obj(p: Params) -> dict:
    return {"version": p.version, "layers": _arrayset_obj(p.arrays)}


def _obj_params(obj, path: str) -> Params:
    if not isinstance(obj, dict):
        raise ProtocolError(f"{path}: expected object")
    version = obj.get("version")
    if not isinstance(version, int) or isinstance(version, bool) or version < 0:
        raise ProtocolError(f"{path}.version: expected non-negative integer")
    return Params(version, _obj_arrayset(obj.get("layers"), f"{path}.layers"))


# ---------------------------------------------------------------------------
# field extraction


def _get_str(body: dict, key: str) -> str:
    v = body.get(key)
    if not isinstance(v, str):
        raise ProtocolError(f"body.{key}: expected string")
    return v


def _get_int(body: dict, key: str, minimum: int | None = None) -> int:
    v = body.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ProtocolError(f"body.{key}: expected integer")
    if minimum is not None and v < minimum:
        raise ProtocolError(f"body.{key}: must be >= {minimum}")
    return v


def _get_num(body: dict, key: str) -> float:
    v = body.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ProtocolError(f"body.{key}: expected number")
    out = float(v)
    if not np.isfinite(out):
        raise ProtocolError(f"body.{key}: must be finite")
    return out


def _get_id_list(body: dict, key: str) -> list[str]:
    v = body.get(key)
    if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
        raise ProtocolError(f"body.{key}: expected array of strings")
    return v


# ---------------------------------------------------------------------------
# per-variant body codecs


def _join_body(m: Join) -> dict:
    return {"worker_id": m.worker_id, "mode": m.mode, "capacity": m.capacity}


def _join_parse(env, body) -> Join:
    mode = _get_str(body, "mode")
    if mode not in WORKER_MODES:
        raise ProtocolError(f"body.mode: unknown mode {mode!r}")
    return Join(*env, worker_id=_get_str(body, "worker_id"), mode=mode,
                capacity=_get_int(body, "capacity", minimum=0))


def _welcome_body(m: Welcome) -> dict:
    if m.spec is None or m.hyper is None or m.params is None:
        raise ProtocolError("welcome requires spec, hyper, and params")
    return {
        "protocol_version": m.protocol_version,
        "spec": m.spec.to_obj(),
        "hyper": m.hyper.to_obj(),
        "params": _params_obj(m.params),
    }


def _welcome_parse(env, body) -> Welcome:
    try:
        spec = NetworkSpec.from_obj(body.get("spec"))
    except SpecError as e:
        raise ProtocolError(f"body.spec: {e}") from None
    try:
        hyper = Hyperparams.from_obj(body.get("hyper"))
    except (ValueError, TypeError) as e:
        raise ProtocolError(f"body.hyper: {e}") from None
    return Welcome(*env, protocol_version=_get_int(body, "protocol_version"),
                   spec=spec, hyper=hyper, params=_obj_params(body.get("params"), "body.params"))


def _alloc_body(m: AllocationUpdate) -> dict:
    return {"add_ids": list(m.add_ids), "remove_ids": list(m.remove_ids)}


def _alloc_parse(env, body) -> AllocationUpdate:
    return AllocationUpdate(*env, add_ids=_get_id_list(body, "add_ids"),
                            remove_ids=_get_id_list(body, "remove_ids"))


def _work_order_body(m: WorkOrder) -> dict:
    if (m.budget_ms is None) == (m.steps is None):
        raise ProtocolError("work order must set exactly one of budget_ms/steps")
    if m.params is None:
        raise ProtocolError("work order requires params")
    out = {"params": _params_obj(m.params), "deadline_hint_ms": m.deadline_hint_ms}
    if m.budget_ms is not None:
        out["budget_ms"] = m.budget_ms
    else:
        out["steps"] = m.steps
    return out


def _work_order_parse(env, body) -> WorkOrder:
    has_budget = "budget_ms" in body
    has_steps = "steps" in body
    if has_budget == has_steps:
        raise ProtocolError("work order must set exactly one of budget_ms/steps")
    return WorkOrder(
        *env,
        params=_obj_params(body.get("params"), "body.params"),
        budget_ms=_get_int(body, "budget_ms", minimum=0) if has_budget else None,
        steps=_get_int(body, "steps", minimum=1) if has_steps else None,
        deadline_hint_ms=_get_int(body, "deadline_hint_ms", minimum=0),
    )


def _gradient_body(m: GradientReport) -> dict:
    if m.bundle is None:
        raise ProtocolError("gradient report requires a bundle")
    b = m.bundle
    return {
        "params_version": b.params_version,
        "grads": _arrayset_obj(b.grads),
        "example_count": b.example_count,
        "compute_ms": b.compute_ms,
    }


def _gradient_parse(env, body) -> GradientReport:
    bundle = GradientBundle(
        params_version=_get_int(body, "params_version", minimum=0),
        grads=_obj_arrayset(body.get("grads"), "body.grads"),
        example_count=_get_int(body, "example_count", minimum=0),
        compute_ms=_get_num(body, "compute_ms"),
    )
    return GradientReport(*env, bundle=bundle)


def _stats_body(m: StatsReport) -> dict:
    return {"iteration": m.iteration, "metric_name": m.metric_name, "value": m.value}


def _stats_parse(env, body) -> StatsReport:
    return StatsReport(*env, iteration=_get_int(body, "iteration", minimum=0),
                       metric_name=_get_str(body, "metric_name"),
                       value=_get_num(body, "value"))


def _hyper_body(m: HyperUpdate) -> dict:
    if m.hyper is None:
        raise ProtocolError("hyper update requires hyper")
    return {"hyper": m.hyper.to_obj()}


def _hyper_parse(env, body) -> HyperUpdate:
    try:
        return HyperUpdate(*env, hyper=Hyperparams.from_obj(body.get("hyper")))
    except (ValueError, TypeError) as e:
        raise ProtocolError(f"body.hyper: {e}") from None


def _predict_req_body(m: PredictRequest) -> dict:
    if (m.tensor is None) == (m.image_png is None):
        raise ProtocolError("predict request must set exactly one of tensor/image_png")
    if m.tensor is not None:
        return {"tensor": {"shape": list(m.tensor.shape), "data": _b64_floats(m.tensor.data)}}
    return {"image_png": base64.b64encode(m.image_png).decode("ascii")}


def _predict_req_parse(env, body) -> PredictRequest:
    has_tensor = "tensor" in body
    has_image = "image_png" in body
    if has_tensor == has_image:
        raise ProtocolError("predict request must set exactly one of tensor/image_png")
    if has_tensor:
        t = body["tensor"]
        if not isinstance(t, dict):
            raise ProtocolError("body.tensor: expected object")
        shape = t.get("shape")
        if (not isinstance(shape, list) or len(shape) != 3
                or not all(isinstance(i, int) and not isinstance(i, bool) for i in shape)):
            raise ProtocolError("body.tensor.shape: expected [w, h, d] integers")
        data = _floats_b64(t.get("data"), "body.tensor.data")
        try:
            return PredictRequest(*env, tensor=Tensor(tuple(shape), data))
        except ShapeError as e:
            raise ProtocolError(f"body.tensor: {e}") from None
    raw = body["image_png"]
    if not isinstance(raw, str):
        raise ProtocolError("body.image_png: expected base64 string")
    try:
        return PredictRequest(*env, image_png=base64.b64decode(raw.encode("ascii"), validate=True))
    except Exception:
        raise ProtocolError("body.image_png: invalid base64") from None


def _predict_resp_body(m: PredictResponse) -> dict:
    return {"label": m.label, "probability": m.probability}


def _predict_resp_parse(env, body) -> PredictResponse:
    prob = _get_num(body, "probability")
    if not 0.0 <= prob <= 1.0:
        raise ProtocolError("body.probability: must be in [0, 1]")
    return PredictResponse(*env, label=_get_str(body, "label"), probability=prob)


def _snapshot_body(m: ModelSnapshot) -> dict:
    if m.archive is None:
        raise ProtocolError("model snapshot requires an archive")
    return {"archive": json.loads(archive_dumps(m.archive))}


def _snapshot_parse(env, body) -> ModelSnapshot:
    try:
        arch = archive_loads(json.dumps(body.get("archive")))
    except ArchiveError as e:
        raise ProtocolError(f"body.archive: {e}") from None
    return ModelSnapshot(*env, archive=arch)


def _telemetry_body(m: Telemetry) -> dict:
    if m.record is None:
        raise ProtocolError("telemetry requires a record")
    return {"record": m.record.to_obj()}


def _telemetry_parse(env, body) -> Telemetry:
    return Telemetry(*env, record=IterationRecord.from_obj(body.get("record")))


def _param_broadcast_body(m: ParamBroadcast) -> dict:
    if m.params is None:
        raise ProtocolError("param broadcast requires params")
    return {"params": _params_obj(m.params)}


def _param_broadcast_parse(env, body) -> ParamBroadcast:
    return ParamBroadcast(*env, params=_obj_params(body.get("params"), "body.params"))


_CODECS = {
    "join": (Join, _join_body, _join_parse),
    "welcome": (Welcome, _welcome_body, _welcome_parse),
    "allocation_update": (AllocationUpdate, _alloc_body, _alloc_parse),
    "work_order": (WorkOrder, _work_order_body, _work_order_parse),
    "gradient_report": (GradientReport, _gradient_body, _gradient_parse),
    "stats_report": (StatsReport, _stats_body, _stats_parse),
    "hyper_update": (HyperUpdate, _hyper_body, _hyper_parse),
    "predict_request": (PredictRequest, _predict_req_body, _predict_req_parse),
    "predict_response": (PredictResponse, _predict_resp_body, _predict_resp_parse),
    "save_request": (SaveRequest, lambda m: {}, lambda env, body: SaveRequest(*env)),
    "model_snapshot": (ModelSnapshot, _snapshot_body, _snapshot_parse),
    "telemetry": (Telemetry, _telemetry_body, _telemetry_parse),
    "param_broadcast": (ParamBroadcast, _param_broadcast_body, _param_broadcast_parse),
    "bye": (Bye, lambda m: {"reason": m.reason},
            lambda env, body: Bye(*env, reason=_get_str(body, "reason"))),
    "ping": (Ping, lambda m: {"sent_at_ms": m.sent_at_ms},
             lambda env, body: Ping(*env, sent_at_ms=_get_int(body, "sent_at_ms"))),
    "pong": (Pong, lambda m: {"sent_at_ms": m.sent_at_ms},
             lambda env, body: Pong(*env, sent_at_ms=_get_int(body, "sent_at_ms"))),
}

_CLASS_TO_TAG = {cls: tag for tag, (cls, _, _) in _CODECS.items()}


def encode(msg: Message, max_bytes: int = MAX_FRAME_BYTES) -> bytes:
    """Serialize one message to a JSON byte frame."""
    tag = _CLASS_TO_TAG.get(type(msg))
    if tag is None:
        raise ProtocolError(f"not an encodable message: {type(msg).__name__}")
    if not isinstance(msg.msg_seq, int) or msg.msg_seq < 0:
        raise ProtocolError("msg_seq must be a non-negative integer")
    _, to_body, _ = _CODECS[tag]
    doc = {
        "project_id": msg.project_id,
        "sender_id": msg.sender_id,
        "msg_seq": msg.msg_seq,
        "type": tag,
        "body": to_body(msg),
    }
    raw = json.dumps(doc, allow_nan=False).encode("utf-8")
    if len(raw) > max_bytes:
        raise ProtocolError(f"encoded message is {len(raw)} bytes, cap is {max_bytes}")
    return raw


def decode(raw: bytes | str, max_bytes: int = MAX_FRAME_BYTES) -> Message:
    """Parse one frame; raises ProtocolError on any malformed input."""
    if isinstance(raw, str):
        raw = raw.encode("utf-8", errors="replace")
    if not isinstance(raw, (bytes, bytearray)):
        raise ProtocolError(f"expected bytes, got {type(raw).__name__}")
    if len(raw) > max_bytes:
        raise ProtocolError(f"frame is {len(raw)} bytes, cap is {max_bytes}")
    try:
        doc = json.loads(raw.decode("utf-8", errors="strict"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ProtocolError("message root must be an object")
    for key in ("project_id", "sender_id"):
        if not isinstance(doc.get(key), str):
            raise ProtocolError(f"{key}: expected string")
    seq = doc.get("msg_seq")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ProtocolError("msg_seq: expected non-negative integer")
    tag = doc.get("type")
    if not isinstance(tag, str) or tag not in _CODECS:
        raise ProtocolError(f"unknown message type {tag!r}")
    body = doc.get("body")
    if not isinstance(body, dict):
        raise ProtocolError("body: expected object")
    env = (doc["project_id"], doc["sender_id"], seq)
    _, _, parse = _CODECS[tag]
    try:
        return parse(env, body)
    except ProtocolError:
        raise
    except (KeyError, TypeError, ValueError, OverflowError) as e:
        raise ProtocolError(f"malformed {tag}: {e}") from None


class SequenceTracker:
    """Per-sender strict monotonicity check for msg_seq."""

    def __init__(self) -> None:
        self._last: dict[str, int] = {}

    def accept(self, msg: Message) -> bool:
        last = self._last.get(msg.sender_id)
        if last is not None and msg.msg_seq <= last:
            return False
        self._last[msg.sender_id] = msg.msg_seq
        return True
