"""Two-stage image clustering on frozen vision-language embeddings.

Stage 1 builds image/text pairs from noun retrieval, stage 2 aligns four
small heads on the frozen pairs, stage 3 fine-tunes low-rank adapters with
confidence-weighted pseudo-labels.
"""

from .embedding_store import EmbeddingMatrix, normalize_rows, read_embeddings, write_embeddings
from .heads import HeadSet, attach_lora, init_heads
from .metrics import ClusteringReport, clustering_accuracy, evaluate
from .pairgen import PairGenConfig, generate_pairs
from .trainer import TrainConfig, predict_clusters, run_alignment, run_self_enhancement

__version__ = "0.1.0"

__all__ = [
    "ClusteringReport",
    "EmbeddingMatrix",
    "HeadSet",
    "PairGenConfig",
    "TrainConfig",
    "attach_lora",
    "clustering_accuracy",
    "evaluate",
    "generate_pairs",
    "init_heads",
    "normalize_rows",
    "predict_clusters",
    "read_embeddings",
    "run_alignment",
    "run_self_enhancement",
    "write_embeddings",
]
