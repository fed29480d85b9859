"""Hierarchical matrices: storage, assembly, products and accounting."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .aca import LowRankBlock, aca_full, aca_partial, svd_recompress
from .cluster import Block, BlockTree
from .generator import EntryGenerator, SubGenerator


class HNode:
    """Block of an H-matrix in permuted coordinates.

    ``kind`` is ``"dense"`` (``data`` is an array), ``"lowrank"`` (``data`` is
    a :class:`LowRankBlock`) or ``"sub"`` (``children`` is a 2x2 nested list
    over the sons of the row and column clusters).
    """

    __slots__ = ("r0", "r1", "c0", "c1", "kind", "data", "children", "admissible", "_leaves",
                 "pending")

    def __init__(self, r0, r1, c0, c1, kind, data=None, children=None, admissible=False):
        self.r0, self.r1, self.c0, self.c1 = r0, r1, c0, c1
        self.kind = kind
        self.data = data
        self.children = children
        self.admissible = admissible
        self._leaves = None
        self.pending = None  # deferred low-rank updates (H-LU only)

    @property
    def shape(self):
        return (self.r1 - self.r0, self.c1 - self.c0)

    def leaves(self):
        if self._leaves is None:
            if self.kind == "sub":
                self._leaves = [lf for row in self.children for ch in row for lf in ch.leaves()]
            else:
                self._leaves = [self]
        return self._leaves

    @property
    def rank(self):
        if self.kind == "lowrank":
            return self.data.rank
        return None

    @property
    def storage(self) -> int:
        if self.kind == "dense":
            return self.data.size
        if self.kind == "lowrank":
            return self.data.storage
        return sum(lf.storage for lf in self.leaves())

    def matmat(self, X):
        """Block times X, with X indexed by the local columns."""
        if self.kind == "dense":
            return self.data @ X
        if self.kind == "lowrank":
            return self.data.left @ (self.data.right.T @ X)
        out = np.zeros((self.r1 - self.r0,) + X.shape[1:])
        for lf in self.leaves():
            out[lf.r0 - self.r0:lf.r1 - self.r0] += lf.matmat(X[lf.c0 - self.c0:lf.c1 - self.c0])
        return out

    def rmatmat(self, X):
        """Block transpose times X."""
        if self.kind == "dense":
            return self.data.T @ X
        if self.kind == "lowrank":
            return self.data.right @ (self.data.left.T @ X)
        out = np.zeros((self.c1 - self.c0,) + X.shape[1:])
        for lf in self.leaves():
            out[lf.c0 - self.c0:lf.c1 - self.c0] += lf.rmatmat(X[lf.r0 - self.r0:lf.r1 - self.r0])
        return out

    def to_dense(self):
        if self.kind == "dense":
            return self.data.copy()
        if self.kind == "lowrank":
            return self.data.dense()
        out = np.zeros(self.shape)
        for lf in self.leaves():
            out[lf.r0 - self.r0:lf.r1 - self.r0, lf.c0 - self.c0:lf.c1 - self.c0] = lf.to_dense()
        return out

    def to_dict(self):
        d = {"kind": self.kind, "rows": [self.r0, self.r1], "cols": [self.c0, self.c1]}
        if self.kind == "lowrank":
            d["rank"] = self.data.rank
        elif self.kind == "sub":
            d["children"] = [ch.to_dict() for row in self.children for ch in row]
        return d


def _copy_node(nd: HNode) -> HNode:
    if nd.kind == "sub":
        ch = [[_copy_node(c) for c in row] for row in nd.children]
        return HNode(nd.r0, nd.r1, nd.c0, nd.c1, "sub", children=ch, admissible=nd.admissible)
    if nd.kind == "dense":
        data = nd.data.copy()
    else:
        data = LowRankBlock(nd.data.left.copy(), nd.data.right.copy(), nd.data.converged,
                            dict(nd.data.info))
    return HNode(nd.r0, nd.r1, nd.c0, nd.c1, nd.kind, data, admissible=nd.admissible)


@dataclass
class CompressionStats:
    n: int
    stored: int
    dense: int
    ratio: float
    rank_min: int
    rank_max: int
    rank_mean: float
    rank_histogram: dict
    n_lowrank: int
    n_dense: int
    times: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "stored": self.stored,
            "dense": self.dense,
            "ratio": self.ratio,
            "ranks": {"min": self.rank_min, "max": self.rank_max, "mean": self.rank_mean},
            "times": dict(self.times),
        }


class HMatrix:
    """H-matrix over a block tree. ``row_perm[k]`` is the original index at
    permuted position k (likewise ``col_perm``)."""

    def __init__(self, root: HNode, row_perm, col_perm, tree: BlockTree | None = None):
        self.root = root
        self.row_perm = np.asarray(row_perm)
        self.col_perm = np.asarray(col_perm)
        self.tree = tree
        self.times: dict = {}
        self.aca_failures: list = []

    @property
    def shape(self):
        return (len(self.row_perm), len(self.col_perm))

    @property
    def n(self):
        return self.shape[0]

    def leaves(self):
        return self.root.leaves()

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"dimension mismatch: {x.shape[0]} != {self.shape[1]}")
        y = self.root.matmat(x[self.col_perm])
        out = np.empty_like(y)
        out[self.row_perm] = y
        return out

    __matmul__ = matvec

    def rmatvec(self, x):
        x = np.asarray(x, dtype=float)
        y = self.root.rmatmat(x[self.row_perm])
        out = np.empty_like(y)
        out[self.col_perm] = y
        return out

    def to_dense(self):
        d = self.root.to_dense()
        out = np.empty_like(d)
        out[np.ix_(self.row_perm, self.col_perm)] = d
        return out

    def copy(self) -> "HMatrix":
        h = HMatrix(_copy_node(self.root), self.row_perm, self.col_perm, self.tree)
        h.times = dict(self.times)
        return h

    def structure_json(self) -> str:
        return json.dumps({"n": self.n, "root": self.root.to_dict()})


def assemble(gen: EntryGenerator, bt: BlockTree, epsilon: float, mode: str = "partial",
             recompress: bool = True, k_max: int | None = None,
             dense_fallback: bool = True) -> HMatrix:
    """Fill every leaf of ``bt`` from ``gen``.

    Dense leaves are generated exactly. Admissible leaves are compressed by
    ACA (``mode`` "partial" reads only pivot rows/columns, "full" generates
    the block) and truncated by SVD at the same tolerance. With
    ``dense_fallback`` (default) an admissible leaf whose factors would not
    save memory is stored in full.
    """
    if mode not in ("partial", "full"):
        raise ValueError("mode must be 'partial' or 'full'")
    if gen.shape != (bt.rows.n, bt.cols.n):
        raise ValueError(f"generator shape {gen.shape} does not match tree {(bt.rows.n, bt.cols.n)}")
    rperm, cperm = bt.rows.perm, bt.cols.perm
    failures = []
    t0 = time.perf_counter()

    def build(b: Block) -> HNode:
        r0, r1, c0, c1 = b.row.lo, b.row.hi, b.col.lo, b.col.hi
        if b.kind == "subdivided":
            ch = [build(c) for c in b.children]
            return HNode(r0, r1, c0, c1, "sub", children=[ch[0:2], ch[2:4]])
        rows, cols = rperm[r0:r1], cperm[c0:c1]
        if b.kind == "dense":
            return HNode(r0, r1, c0, c1, "dense", gen.block(rows, cols))
        if mode == "full":
            lr = aca_full(gen.block(rows, cols), epsilon, k_max)
        else:
            lr = aca_partial(SubGenerator(gen, rows, cols), epsilon, k_max)
        if not lr.converged:
            failures.append(((r0, r1), (c0, c1)))
        if recompress:
            lr = svd_recompress(lr, epsilon)
        m, n = r1 - r0, c1 - c0
        if dense_fallback and lr.rank * (m + n) >= m * n:
            # storage format only: the stored values remain the approximation
            return HNode(r0, r1, c0, c1, "dense", lr.dense(), admissible=True)
        return HNode(r0, r1, c0, c1, "lowrank", lr, admissible=True)

    H = HMatrix(build(bt.root), rperm, cperm, bt)
    H.times["assembly"] = time.perf_counter() - t0
    H.aca_failures = failures
    return H


def matvec(H: HMatrix, x):
    return H.matvec(x)


def stats(H: HMatrix) -> CompressionStats:
    """Exact storage accounting (both triangles are stored)."""
    stored = 0
    ranks = []
    n_dense = 0
    for lf in H.leaves():
        stored += lf.storage
        if lf.kind == "lowrank":
            ranks.append(lf.data.rank)
        else:
            n_dense += 1
    m, n = H.shape
    hist: dict = {}
    for r in ranks:
        hist[r] = hist.get(r, 0) + 1
    return CompressionStats(
        n=m,
        stored=int(stored),
        dense=int(m * n),
        ratio=stored / (m * n),
        rank_min=int(min(ranks)) if ranks else 0,
        rank_max=int(max(ranks)) if ranks else 0,
        rank_mean=float(np.mean(ranks)) if ranks else 0.0,
        rank_histogram=dict(sorted(hist.items())),
        n_lowrank=len(ranks),
        n_dense=n_dense,
        times=dict(H.times),
    )
