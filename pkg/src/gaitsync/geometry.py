"""Point-cloud and triangle-mesh primitives, exact nearest neighbours and CPGD.

All coordinates are millimetres. Containers hold read-only numpy arrays so they
can be shared between threads without copying.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Raised for invalid geometric input (empty clouds, bad faces, ...)."""


def _frozen(a, dtype=np.float64, width=3):
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape(0, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise GeometryError(f"expected an (n, {width}) array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered set of 3-D points."""

    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)))

    def translated(self, offset) -> PointCloud:
        return PointCloud(self.points + np.asarray(offset, dtype=float))


@dataclass(frozen=True, eq=False)
class Frame:
    """One timestamped capture from one camera.

    ``timestamp`` is the camera's own clock reading; it carries whatever
    drift the camera has accumulated.
    """

    camera_id: int
    frame_index: int
    timestamp: float
    cloud: PointCloud


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = _frozen(self.vertices)
        faces = _frozen(self.faces, dtype=np.int64)
        if not np.all(np.isfinite(verts)):
            raise GeometryError("vertex coordinates must be finite")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise GeometryError("face index out of range")
        if faces.size and np.any(
            (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        ):
            raise GeometryError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) rows with i < j."""
        if self.faces.size == 0:
            return np.zeros((0, 2), dtype=np.int64)
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    def with_vertices(self, vertices) -> TriMesh:
        return TriMesh(vertices, self.faces)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return n

    def vertex_normals(self) -> np.ndarray:
        fn = self.face_normals()
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(norm > 0, norm, 1.0)


def as_points(x) -> np.ndarray:
    """Accept a PointCloud, TriMesh or array-like and return an (n, 3) array."""
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected (n, 3) points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class NnIndex:
    """Exact nearest-neighbour index over a fixed point set."""

    points: np.ndarray
    _tree: cKDTree = field(repr=False)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries, k: int = 1):
        """Return ``(distances, indices)`` of the ``k`` nearest points for each query."""
        q = as_points(queries)
        k = min(k, len(self))
        dist, idx = self._tree.query(q, k=k)
        return dist, idx

    def query_radius(self, queries, r: float):
        return self._tree.query_ball_point(as_points(queries), r)


def build_nn_index(cloud) -> NnIndex:
    pts = as_points(cloud)
    if len(pts) == 0:
        raise GeometryError("empty cloud")
    pts = np.array(pts, dtype=float)
    pts.setflags(write=False)
    return NnIndex(pts, cKDTree(pts))


def nearest_distances(a, b, index: NnIndex | None = None) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest neighbour in ``b``."""
    pa = as_points(a)
    if len(pa) == 0:
        raise GeometryError("empty cloud")
    index = index if index is not None else build_nn_index(b)
    d, _ = index.query(pa)
    return np.asarray(d, dtype=float)


def cpgd(a, b, index: NnIndex | None = None) -> float:
    """Mean closest-point geometry distance from ``a`` to ``b`` (directional)."""
    return float(nearest_distances(a, b, index).mean())


def cpgd_sym(a, b) -> float:
    return 0.5 * (cpgd(a, b) + cpgd(b, a))


def rmse(values) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise GeometryError("rmse of an empty list")
    if np.any(v < 0):
        raise GeometryError("rmse expects non-negative distances")
    return float(np.sqrt(np.mean(v * v)))


def median_spacing(points) -> float:
    """Median distance from each point to its nearest other point."""
    pts = as_points(points)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))
