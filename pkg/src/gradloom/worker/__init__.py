from gradloom.worker.cache import (
    DEFAULT_SHARD_BATCH,
    CacheError,
    WorkerCache,
    load_labeled_dir,
    split_qualified,
)
from gradloom.worker.compute import dropout_rng, evaluate, predict_label, train_budget
from gradloom.worker.runtime import EXIT_OK, EXIT_RUNTIME, WorkerSession

__all__ = [
    "DEFAULT_SHARD_BATCH",
    "CacheError",
    "WorkerCache",
    "load_labeled_dir",
    "split_qualified",
    "dropout_rng",
    "evaluate",
    "predict_label",
    "train_budget",
    "EXIT_OK",
    "EXIT_RUNTIME",
    "WorkerSession",
]
