"""flashmeans: IO-aware batched Lloyd's k-means.

Exact k-means with two interchangeable engines: a materializing baseline
that builds the full point-by-centroid distance matrix, and a fused tiled
engine that streams centroid tiles through an online argmin and aggregates
updates by sorting assignments and merging once per cluster segment. Both
produce identical assignments at matching precision; the fused engine does
it without materializing any N-by-K intermediate.
"""

from .baseline import (
    DistanceMatrix,
    argmin_rows,
    baseline_iteration,
    compute_distance_matrix,
    normalize,
    scatter_update,
)
from .core import (
    Assignments,
    Centroids,
    ClusterStats,
    Counters,
    DataFormatError,
    DataMatrix,
    KMeansConfig,
    KMeansResult,
    ResourceLimitError,
    expanded_distance,
    generate_dataset,
    init_centroids,
    kmeans_objective,
    row_norms,
    squared_distance,
    worker_count,
)
from .fileio import (
    AssignmentStore,
    read_fka1,
    read_fkm1,
    read_fkm1_header,
    write_fka1,
    write_fkm1,
)
from .flash_assign import ArgminState, TilingConfig, flash_assign, online_argmin_merge, tile_distances
from .pipeline import ChunkStream, PartialStats, chunked_stream_run, lloyd_run, out_of_core_iteration
from .sort_inverse import (
    Segment,
    SortedIndex,
    argsort_assignments,
    detect_segments,
    sort_inverse_update,
)
from .tuner import (
    CacheModel,
    ProblemShape,
    TuneReport,
    enumerate_candidates,
    exhaustive_tune,
    heuristic_config,
)

__version__ = "0.1.0"

__all__ = [
    "ArgminState",
    "AssignmentStore",
    "Assignments",
    "CacheModel",
    "Centroids",
    "ChunkStream",
    "ClusterStats",
    "Counters",
    "DataFormatError",
    "DataMatrix",
    "DistanceMatrix",
    "KMeansConfig",
    "KMeansResult",
    "PartialStats",
    "ProblemShape",
    "ResourceLimitError",
    "Segment",
    "SortedIndex",
    "TilingConfig",
    "TuneReport",
    "argmin_rows",
    "argsort_assignments",
    "baseline_iteration",
    "chunked_stream_run",
    "compute_distance_matrix",
    "detect_segments",
    "enumerate_candidates",
    "exhaustive_tune",
    "expanded_distance",
    "flash_assign",
    "generate_dataset",
    "heuristic_config",
    "init_centroids",
    "kmeans_objective",
    "lloyd_run",
    "normalize",
    "online_argmin_merge",
    "out_of_core_iteration",
    "read_fka1",
    "read_fkm1",
    "read_fkm1_header",
    "row_norms",
    "scatter_update",
    "sort_inverse_update",
    "squared_distance",
    "tile_distances",
    "worker_count",
    "write_fka1",
    "write_fkm1",
]
