from gradloom.datastore.decode import (
    DecodeError,
    decode_item,
    decode_mlb1,
    decode_png,
    encode_mlb1,
)
from gradloom.datastore.store import (
    DatasetStore,
    IngestError,
    ShardError,
    read_shard,
)

__all__ = [
    "DatasetStore",
    "DecodeError",
    "IngestError",
    "ShardError",
    "decode_item",
    "decode_mlb1",
    "decode_png",
    "encode_mlb1",
    "read_shard",
]
