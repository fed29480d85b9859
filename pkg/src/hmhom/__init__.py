"""H-matrix accelerated integral-equation solvers for composite homogenization."""

__version__ = "0.1.0"
