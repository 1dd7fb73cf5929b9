"""Few-shot class-incremental learning on frozen embeddings with hyperbolic adapters."""

from .data import BundleFormatError, DataError, EmbeddingDataset, load_bundle, write_bundle
from .hyperbolic import exp_map_zero, hyperbolic_distance, mobius_add
from .metrics import RunReport, aggregate
from .protocol import MemoryBuffer, TrainConfig, run_full_stream

__version__ = "0.1.0"

__all__ = [
    "BundleFormatError", "DataError", "EmbeddingDataset", "load_bundle", "write_bundle",
    "exp_map_zero", "hyperbolic_distance", "mobius_add",
    "RunReport", "aggregate", "MemoryBuffer", "TrainConfig", "run_full_stream",
]
