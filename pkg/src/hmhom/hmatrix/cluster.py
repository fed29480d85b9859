"""Cluster trees, the admissibility condition and block trees."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_SHIFTS = np.array([s for s in itertools.product((-1, 0, 1), repeat=3)], dtype=float)


@dataclass
class Cluster:
    """Node of a cluster tree.

    ``lo:hi`` is a contiguous range of the permuted index list
    (``ClusterTree.perm[lo:hi]`` are the original indices).
    """

    lo: int
    hi: int
    bmin: np.ndarray
    bmax: np.ndarray
    level: int = 0
    children: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bmax - self.bmin))

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            for c in self.children:
                yield from c.leaves()

    def nodes(self):
        yield self
        for c in self.children:
            yield from c.nodes()


@dataclass
class ClusterTree:
    root: Cluster
    perm: np.ndarray
    points: np.ndarray
    leaf_size: int

    @property
    def n(self) -> int:
        return len(self.perm)

    def leaves(self):
        return list(self.root.leaves())

    def depth(self) -> int:
        return max(c.level for c in self.root.nodes())

    def expand(self, dof: int) -> "ClusterTree":
        """Tree over ``dof`` scalar unknowns per point (point p -> dof*p + 0..dof-1)."""
        if dof == 1:
            return self

        def grow(c):
            out = Cluster(c.lo * dof, c.hi * dof, c.bmin, c.bmax, c.level)
            out.children = [grow(ch) for ch in c.children]
            return out

        perm = (self.perm[:, None] * dof + np.arange(dof)[None, :]).ravel()
        return ClusterTree(grow(self.root), perm, self.points, self.leaf_size * dof)


def _bbox(points: np.ndarray):
    return points.min(axis=0), points.max(axis=0)


def build_cluster_tree(points, leaf_size: int = 15) -> ClusterTree:
    """Binary cluster tree by geometric bisection.

    A node with at least ``leaf_size`` points is split across the longest
    axis of its bounding box at the coordinate median, so leaves hold fewer
    than ``leaf_size`` points (a single point when ``leaf_size`` is 1).
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("cluster tree needs a non-empty (n, d) point array")
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    perm = np.arange(len(points))
    threshold = max(leaf_size, 2)

    def build(lo, hi, level):
        idx = perm[lo:hi]
        bmin, bmax = _bbox(points[idx])
        node = Cluster(lo, hi, bmin, bmax, level)
        if hi - lo >= threshold:
            axis = int(np.argmax(bmax - bmin))
            order = np.argsort(points[idx, axis], kind="stable")
            perm[lo:hi] = idx[order]
            mid = lo + (hi - lo) // 2
            node.children = [build(lo, mid, level + 1), build(mid, hi, level + 1)]
        return node

    root = build(0, len(points), 0)
    return ClusterTree(root, perm, points, leaf_size)


def box_distance(amin, amax, bmin, bmax) -> float:
    gap = np.maximum(0.0, np.maximum(bmin - amax, amin - bmax))
    return float(np.sqrt(gap @ gap))


def is_admissible(row: Cluster, col: Cluster, eta: float, period: float | None = None) -> bool:
    """min(diam) <= eta * dist on axis-aligned bounding boxes.

    With ``period`` set, the distance is the smallest one over the 27
    translated copies of the column box (periodic kernels).
    """
    if period is None:
        dist = box_distance(row.bmin, row.bmax, col.bmin, col.bmax)
    else:
        shifts = _SHIFTS * period
        lo = col.bmin[None, :] + shifts
        hi = col.bmax[None, :] + shifts
        gap = np.maximum(0.0, np.maximum(lo - row.bmax, row.bmin - hi))
        dist = float(np.sqrt((gap * gap).sum(axis=1)).min())
    return min(row.diameter, col.diameter) <= eta * dist and dist > 0.0


@dataclass
class Block:
    row: Cluster
    col: Cluster
    kind: str = "subdivided"  # "admissible" | "dense" | "subdivided"
    children: list = field(default_factory=list)

    @property
    def shape(self):
        return (self.row.size, self.col.size)

    def leaves(self):
        if self.kind == "subdivided":
            for c in self.children:
                yield from c.leaves()
        else:
            yield self


@dataclass
class BlockTree:
    root: Block
    rows: ClusterTree
    cols: ClusterTree
    eta: float

    def leaves(self):
        return list(self.root.leaves())

    def tiling_defect(self) -> int:
        """n*m minus the covered area, and raise if any entry is covered twice."""
        n, m = self.rows.n, self.cols.n
        cover = np.zeros((n, m), dtype=np.int8) if n * m <= 4_000_000 else None
        area = 0
        for b in self.leaves():
            area += b.row.size * b.col.size
            if cover is not None:
                cover[b.row.lo:b.row.hi, b.col.lo:b.col.hi] += 1
        if cover is not None and cover.max(initial=1) > 1:
            raise AssertionError("block tree leaves overlap")
        return n * m - area


def build_block_tree(rows: ClusterTree, eta: float, cols: ClusterTree | None = None,
                     period: float | None = None) -> BlockTree:
    """Recursive block partition of rows x cols.

    A pair is subdivided into the four pairs of sons when it is not
    admissible and both clusters were split (both have at least
    ``leaf_size`` points); otherwise it becomes an admissible or dense leaf.
    """
    cols = rows if cols is None else cols

    def build(r, c):
        if is_admissible(r, c, eta, period):
            return Block(r, c, "admissible")
        if r.is_leaf or c.is_leaf:
            return Block(r, c, "dense")
        b = Block(r, c, "subdivided")
        b.children = [build(rc, cc) for rc in r.children for cc in c.children]
        return b

    return BlockTree(build(rows.root, cols.root), rows, cols, eta)
