"""Entry oracles: the only way the H-matrix code reads matrix entries."""

from __future__ import annotations

import numpy as np


class EntryGenerator:
    """Abstract matrix whose entries are computed on demand.

    Subclasses implement :meth:`_block`; everything is expressed in original
    (unpermuted) indices. ``queries`` counts generated scalars.
    """

    shape: tuple = (0, 0)

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.queries = 0

    def _block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def block(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self.queries += rows.size * cols.size
        return self._block(rows, cols)

    def entry(self, i: int, j: int) -> float:
        return float(self.block([i], [j])[0, 0])

    def row(self, i: int, cols) -> np.ndarray:
        return self.block([i], cols)[0]

    def col(self, rows, j: int) -> np.ndarray:
        return self.block(rows, [j])[:, 0]

    def dense(self) -> np.ndarray:
        return self.block(np.arange(self.shape[0]), np.arange(self.shape[1]))


class DenseGenerator(EntryGenerator):
    """Wraps an explicit array."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        super().__init__(self.matrix.shape)

    def _block(self, rows, cols):
        return self.matrix[np.ix_(rows, cols)]


class FunctionGenerator(EntryGenerator):
    """Kernel matrix k(x_i, y_j) for a vectorised ``kernel(x, y)``."""

    def __init__(self, kernel, xs, ys=None):
        self.kernel = kernel
        self.xs = np.asarray(xs, dtype=float)
        self.ys = self.xs if ys is None else np.asarray(ys, dtype=float)
        super().__init__((len(self.xs), len(self.ys)))

    def _block(self, rows, cols):
        return self.kernel(self.xs[rows][:, None, :], self.ys[cols][None, :, :])


class SubGenerator(EntryGenerator):
    """Local view of a parent generator on fixed row and column index lists."""

    def __init__(self, parent: EntryGenerator, rows, cols):
        self.parent = parent
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        super().__init__((len(self.rows), len(self.cols)))

    def _block(self, rows, cols):
        return self.parent.block(self.rows[rows], self.cols[cols])
