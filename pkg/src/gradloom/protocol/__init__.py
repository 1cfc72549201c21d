"""Wire protocol: typed messages, JSON encoding, and stream framing."""

from gradloom.protocol.messages import (
    MAX_FRAME_BYTES,
    AllocationUpdate,
    Bye,
    GradientReport,
    HyperUpdate,
    IterationRecord,
    Join,
    Message,
    ModelSnapshot,
    ParamBroadcast,
    Ping,
    Pong,
    PredictRequest,
    PredictResponse,
    ProtocolError,
    SaveRequest,
    SequenceTracker,
    StatsReport,
    Telemetry,
    Welcome,
    WorkOrder,
    WorkerIterationStats,
    decode,
    encode,
)
from gradloom.protocol.framing import FrameDecoder, FrameError, encode_frame

__all__ = [
    "MAX_FRAME_BYTES",
    "AllocationUpdate",
    "Bye",
    "FrameDecoder",
    "FrameError",
    "GradientReport",
    "HyperUpdate",
    "IterationRecord",
    "Join",
    "Message",
    "ModelSnapshot",
    "ParamBroadcast",
    "Ping",
    "Pong",
    "PredictRequest",
    "PredictResponse",
    "ProtocolError",
    "SaveRequest",
    "SequenceTracker",
    "StatsReport",
    "Telemetry",
    "Welcome",
    "WorkOrder",
    "WorkerIterationStats",
    "decode",
    "encode",
    "encode_frame",
]
