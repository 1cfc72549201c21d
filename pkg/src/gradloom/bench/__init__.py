from gradloom.bench.data import (
    build_zip, convert_idx, render_digit, synth_vectors, write_digit_corpus,
    zip_labeled_dir,
)
from gradloom.bench.harness import (
    HarnessError, Service, run_convergence, run_scaling,
)

__all__ = [
    "HarnessError", "Service", "build_zip", "convert_idx", "render_digit",
    "run_convergence", "run_scaling", "synth_vectors", "write_digit_corpus",
    "zip_labeled_dir",
]
