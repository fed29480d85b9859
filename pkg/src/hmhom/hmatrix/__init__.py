"""Hierarchical matrix engine: trees, ACA compression, H-LU and Krylov solvers."""

from .aca import (ACAConvergenceError, LowRankBlock, aca_full, aca_partial, compress_dense,
                  svd_recompress)
from .cluster import (Block, BlockTree, Cluster, ClusterTree, build_block_tree, build_cluster_tree,
                      is_admissible)
from .generator import DenseGenerator, EntryGenerator, FunctionGenerator, SubGenerator
from .hmat import CompressionStats, HMatrix, HNode, assemble, matvec, stats
from .lu import HLU, HLUError, h_lu
from .solvers import SolveReport, gmres, pcg

__all__ = [
    "ACAConvergenceError", "LowRankBlock", "aca_full", "aca_partial", "compress_dense",
    "svd_recompress", "Block", "BlockTree", "Cluster", "ClusterTree", "build_block_tree",
    "build_cluster_tree", "is_admissible", "DenseGenerator", "EntryGenerator",
    "FunctionGenerator", "SubGenerator", "CompressionStats", "HMatrix", "HNode", "assemble",
    "matvec", "stats", "HLU", "HLUError", "h_lu", "SolveReport", "gmres", "pcg",
]
