"""Random particulate microstructures and inclusion surface meshes.

Two geometries are supported: spheres inside a spherical RVE (used by the
equivalent inclusion method) and spheres inside the periodic unit cell
(-1/2, 1/2)^3 (used by the boundary element solver).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Sphere",
    "Domain",
    "Microstructure",
    "TriangleMesh",
    "PlacementError",
    "generate_rsa",
    "icosphere_mesh",
    "mesh_microstructure",
    "volume_fraction",
    "unit_volume_ball_radius",
    "radius_for_fraction",
]

# 26 neighbour translations of the unit cell, plus the identity at index 13
CELL_SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


class PlacementError(RuntimeError):
    """Raised when random sequential adsorption cannot place every sphere."""


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    kappa: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 3:
            raise ValueError("sphere center must be a 3-vector")
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")
        if not self.kappa > 0:
            raise ValueError(f"sphere kappa must be positive, got {self.kappa}")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius**3


@dataclass(frozen=True)
class Domain:
    """Either a ball of radius ``radius`` centred at the origin, or the
    periodic unit cube (-1/2, 1/2)^3."""

    kind: str = "ball"
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ball", "periodic-cube"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "ball" and not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def volume(self) -> float:
        if self.kind == "ball":
            return 4.0 / 3.0 * math.pi * self.radius**3
        return 1.0

    @property
    def periodic(self) -> bool:
        return self.kind == "periodic-cube"

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "radius": self.radius}
        return {"kind": "periodic-cube", "side": 1.0}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        if d["kind"] == "ball":
            return cls("ball", float(d["radius"]))
        return cls("periodic-cube")


def unit_volume_ball_radius() -> float:
    """Radius of the ball of volume 1."""
    return (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)


def radius_for_fraction(domain: Domain, count: int, fraction: float) -> float:
    """Equal radius giving ``count`` spheres the volume fraction ``fraction``."""
    return (fraction * domain.volume / (count * 4.0 / 3.0 * math.pi)) ** (1.0 / 3.0)


def _min_image(d: np.ndarray) -> np.ndarray:
    return d - np.round(d)


@dataclass(frozen=True)
class Microstructure:
    domain: Domain
    spheres: tuple = ()
    kappa_matrix: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "spheres", tuple(self.spheres))
        if not self.kappa_matrix > 0:
            raise ValueError("kappa_matrix must be positive")

    def __len__(self):
        return len(self.spheres)

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.spheres], dtype=float).reshape(-1, 3)

    @property
    def radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.spheres], dtype=float)

    @property
    def kappas(self) -> np.ndarray:
        return np.array([s.kappa for s in self.spheres], dtype=float)

    @property
    def volumes(self) -> np.ndarray:
        return 4.0 / 3.0 * math.pi * self.radii**3

    def overlapping_pairs(self) -> list:
        """All pairs (a, b) whose spheres touch or overlap, by exhaustive check.

        In the periodic cell the minimum over the 27 image translations is used.
        """
        c, r = self.centers, self.radii
        bad = []
        for a in range(len(c)):
            d = c[a + 1:] - c[a]
            if self.domain.periodic:
                d = _min_image(d)
            dist = np.linalg.norm(d, axis=1)
            for off in np.nonzero(dist <= r[a] + r[a + 1:])[0]:
                bad.append((a, a + 1 + int(off)))
        return bad

    def validate(self) -> None:
        c, r = self.centers, self.radii
        if self.domain.kind == "ball":
            out = np.linalg.norm(c, axis=1) + r >= self.domain.radius
        else:
            out = np.any(np.abs(c) + r[:, None] >= 0.5, axis=1)
        if np.any(out):
            raise ValueError(f"spheres {np.nonzero(out)[0].tolist()} leave the domain")
        bad = self.overlapping_pairs()
        if bad:
            raise ValueError(f"overlapping spheres: {bad[:5]}")

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "kappa_matrix": self.kappa_matrix,
            "spheres": [
                {"center": list(s.center), "radius": s.radius, "kappa": s.kappa}
                for s in self.spheres
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Microstructure":
        spheres = [Sphere(tuple(s["center"]), s["radius"], s.get("kappa", 1.0)) for s in d["spheres"]]
        ms = cls(Domain.from_dict(d["domain"]), tuple(spheres), float(d.get("kappa_matrix", 1.0)))
        ms.validate()
        return ms

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Microstructure":
        return cls.from_dict(json.loads(text))

    def with_kappa(self, kappa_incl: float) -> "Microstructure":
        spheres = tuple(Sphere(s.center, s.radius, kappa_incl) for s in self.spheres)
        return Microstructure(self.domain, spheres, self.kappa_matrix)

    def transformed(self, rotation=None, shift=None) -> "Microstructure":
        """Rigidly move every center (rotation about the origin, then shift)."""
        c = self.centers
        if rotation is not None:
            c = c @ np.asarray(rotation, dtype=float).T
        if shift is not None:
            c = c + np.asarray(shift, dtype=float)
        spheres = tuple(Sphere(tuple(ci), s.radius, s.kappa) for ci, s in zip(c, self.spheres))
        return Microstructure(self.domain, spheres, self.kappa_matrix)


def volume_fraction(ms: Microstructure) -> float:
    """Total inclusion volume over domain volume."""
    if not ms.spheres:
        return 0.0
    return float(ms.volumes.sum() / ms.domain.volume)


def generate_rsa(
    domain: Domain,
    count: int,
    radius: float | Sequence[float],
    seed: int = 0,
    max_attempts: int = 20_000_000,
    kappa: float = 100.0,
    kappa_matrix: float = 1.0,
    min_gap: float = 0.0,
) -> Microstructure:
    """Random sequential adsorption of non-overlapping spheres.

    Candidate centers are drawn one after the other, uniformly (numpy PCG64
    seeded by ``seed``) from the region that keeps the sphere strictly inside
    the domain, and rejected when they come within ``min_gap`` of an already
    placed sphere (periodic images included in the cube). Candidates are
    generated in chunks and screened with a k-d tree; the accepted sequence
    is the same as a one-at-a-time loop over the same random stream. ``radius`` is either one value
    or one value per sphere. ``max_attempts`` bounds the total number of
    candidates drawn.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    radii = np.broadcast_to(np.asarray(radius, dtype=float), (count,)).copy()
    if count and not np.all(radii > 0):
        raise ValueError("radius must be positive")
    if min_gap < 0:
        raise ValueError("min_gap must be non-negative")
    if domain.kind == "ball" and count and np.any(radii >= domain.radius):
        raise ValueError("radius does not fit inside the ball")
    if domain.periodic and count and np.any(radii >= 0.5):
        raise ValueError("radius does not fit inside the unit cell")

    rng = np.random.default_rng(seed)
    centers = np.empty((count, 3))
    buf = np.empty((0, 3))  # unit uniforms not consumed yet
    attempts = 0
    rmax = 0.0
    for k in range(count):
        r = radii[k]
        tree = None
        if k:
            pts = centers[:k] + 0.5 if domain.periodic else centers[:k]
            tree = cKDTree(np.mod(pts, 1.0) if domain.periodic else pts,
                           boxsize=1.0 if domain.periodic else None)
        chunk = 8
        while True:
            if attempts >= max_attempts:
                raise PlacementError(
                    f"placed {k} of {count} spheres after {attempts} attempts; "
                    "packing is too dense for random sequential adsorption"
                )
            take = min(chunk, max_attempts - attempts)
            if len(buf) < take:
                buf = np.vstack([buf, rng.random((max(take, 1024), 3))])
            u = buf[:take]
            if domain.kind == "ball":
                reach = domain.radius - r
                cand = -reach + 2.0 * reach * u
                ok = np.einsum("ij,ij->i", cand, cand) < reach * reach
            else:
                cand = -0.5 + r + (1.0 - 2.0 * r) * u
                ok = np.ones(take, dtype=bool)
            if tree is not None and ok.any():
                idx = np.nonzero(ok)[0]
                q = np.mod(cand[idx] + 0.5, 1.0) if domain.periodic else cand[idx]
                hits = tree.query_ball_point(q, r + rmax + min_gap)
                for t, h in zip(idx, hits):
                    if h:
                        d = centers[h] - cand[t]
                        if domain.periodic:
                            d = _min_image(d)
                        lim = radii[h] + r + min_gap
                        if np.any(np.einsum("ij,ij->i", d, d) <= lim * lim):
                            ok[t] = False
            good = np.nonzero(ok)[0]
            if good.size:
                first = int(good[0])
                attempts += first + 1
                buf = buf[first + 1:]
                centers[k] = cand[first]
                rmax = max(rmax, r)
                break
            attempts += take
            buf = buf[take:]
            chunk = min(2 * chunk, 1 << 16)

    spheres = tuple(Sphere(tuple(centers[k]), float(radii[k]), kappa) for k in range(count))
    return Microstructure(domain, spheres, kappa_matrix)


# ---------------------------------------------------------------------------
# surface meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    owner: np.ndarray
    inclusion_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.owner = np.asarray(self.owner, dtype=np.int64)
        p = self.vertices[self.triangles]
        self.centroids = p.mean(axis=1)
        cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        twice = np.linalg.norm(cr, axis=1)
        self.areas = 0.5 * twice
        self.normals = cr / twice[:, None]
        # panel diameter: longest edge
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        self.diameters = np.linalg.norm(e, axis=2).max(axis=1)

    def __len__(self):
        return len(self.triangles)

    def edge_use_counts(self) -> dict:
        counts: dict = {}
        for t in self.triangles:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return all(v == 2 for v in self.edge_use_counts().values())

    def outward_dots(self) -> np.ndarray:
        """normal . (centroid - owning center), positive for outward normals."""
        return np.einsum("ij,ij->i", self.normals, self.centroids - self.inclusion_centers[self.owner])

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "owner": self.owner.tolist(),
        }

    def to_obj(self) -> str:
        lines = [f"v {x:.12g} {y:.12g} {z:.12g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.triangles]
        return "\n".join(lines) + "\n"


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _unit_icosphere(level: int):
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(level):
        cache: dict = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new, dtype=np.int64)
    return np.array(verts), faces


_ICO_CACHE: dict = {}


def icosphere_mesh(sphere: Sphere, level: int) -> TriangleMesh:
    """Subdivided icosahedron with ``20 * 4**level`` triangles projected on the sphere."""
    if level < 0:
        raise ValueError("level must be >= 0")
    if level not in _ICO_CACHE:
        _ICO_CACHE[level] = _unit_icosphere(level)
    v, f = _ICO_CACHE[level]
    c = np.asarray(sphere.center)
    return TriangleMesh(c + sphere.radius * v, f.copy(), np.zeros(len(f), dtype=np.int64), c[None, :])


def mesh_microstructure(ms: Microstructure, level: int) -> TriangleMesh:
    """Union of the icosphere meshes of every inclusion."""
    vs, fs, owners = [], [], []
    offset = 0
    for k, s in enumerate(ms.spheres):
        m = icosphere_mesh(s, level)
        vs.append(m.vertices)
        fs.append(m.triangles + offset)
        owners.append(np.full(len(m.triangles), k))
        offset += len(m.vertices)
    if not vs:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
    return TriangleMesh(np.vstack(vs), np.vstack(fs), np.concatenate(owners), ms.centers)
