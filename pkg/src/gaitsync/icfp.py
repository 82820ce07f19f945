"""Nonrigid Iterative Closest-Farthest Points (ICFP) and dynamic graphs.

Correspondences are gathered from the target to the (deformed) source: every
target point nominates its closest source point, so one source point may
collect several candidates.  Among them the closest is kept, unless *all*
candidate distances exceed the bound ``l = mean + zeta * std`` of the current
distance population, in which case the farthest is kept.

Between iterations the source is deformed by a Gaussian-smoothed field of the
match displacements, which is enough to lock onto consecutive-frame motion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .geometry import GeometryError, as_points, build_nn_index, median_spacing

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcfpParams:
    zeta: float = 1.7
    max_iterations: int = 30
    convergence_tol: float = 1e-3
    min_density_fraction: float = 0.2
    kernel_scale: float = 3.0
    accept_unclaimed: bool = True

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.min_density_fraction <= 1:
            raise ValueError("min_density_fraction must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Source-to-target matches; each source index appears at most once."""

    source: np.ndarray
    target: np.ndarray
    distance: np.ndarray
    source_size: int
    target_size: int

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.int64)
        if len(np.unique(src)) != len(src):
            raise ValueError("duplicate source index in correspondence map")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.int64))
        object.__setattr__(self, "distance", np.asarray(self.distance, dtype=float))

    def __len__(self):
        return len(self.source)

    @property
    def pairs(self):
        return list(zip(self.source.tolist(), self.target.tolist(), self.distance.tolist()))

    def target_of(self) -> np.ndarray:
        """Array of length ``source_size``: matched target index or -1."""
        out = np.full(self.source_size, -1, dtype=np.int64)
        out[self.source] = self.target
        return out

    def mean_residual(self) -> float:
        return float(self.distance.mean()) if len(self.distance) else float("inf")


def correspondence_bound(distances, zeta: float) -> float:
    """``mean + zeta * std`` of the distances (population standard deviation)."""
    d = np.asarray(distances, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("correspondence_bound of an empty distance list")
    return float(d.mean() + zeta * d.std())


def select_correspondence(candidates, bound: float):
    """Pick one ``(target_index, distance)`` pair from a non-empty candidate list.

    Farthest candidate if every distance exceeds ``bound``, otherwise the
    closest.  Ties go to the smaller target index.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("no candidates")
    if all(d > bound for _, d in cands):
        return min(cands, key=lambda c: (-c[1], c[0]))
    return min(cands, key=lambda c: (c[1], c[0]))


def _select_grouped(src_of_target, dist, bound):
    """Vectorised :func:`select_correspondence` over all sources at once."""
    n_t = len(src_of_target)
    tidx = np.arange(n_t)
    # closest: sort by (source, distance, target)
    order = np.lexsort((tidx, dist, src_of_target))
    s_sorted = src_of_target[order]
    first = np.ones(n_t, dtype=bool)
    first[1:] = s_sorted[1:] != s_sorted[:-1]
    starts = np.flatnonzero(first)
    sources = s_sorted[starts]
    closest = order[starts]
    min_d = dist[closest]
    # farthest: sort by (source, -distance, target)
    order_f = np.lexsort((tidx, -dist, src_of_target))
    farthest = order_f[starts]
    use_far = min_d > bound
    chosen = np.where(use_far, farthest, closest)
    return sources, chosen, dist[chosen]


class _Smoother:
    """Gaussian-weighted neighbourhood averaging on a fixed point set."""

    def __init__(self, points, scale: float):
        spacing = median_spacing(points)
        radius = max(scale * spacing, 1e-9)
        tree = cKDTree(points)
        pairs = tree.query_pairs(radius, output_type="ndarray")
        n = len(points)
        if len(pairs):
            d2 = np.sum((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2, axis=1)
            w = np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
            rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
            cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
            vals = np.concatenate([w, w, np.ones(n)])
        else:
            rows = cols = np.arange(n)
            vals = np.ones(n)
        self.W = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def __call__(self, values, mask):
        m = mask.astype(float)
        num = self.W @ (values * m[:, None])
        den = self.W @ m
        out = np.zeros_like(values)
        ok = den > 1e-12
        out[ok] = num[ok] / den[ok, None]
        return out


def _matches(deformed, target_pts, target_index, params: IcfpParams):
    d_t, s_of_t = build_nn_index(deformed).query(target_pts)
    bound = correspondence_bound(d_t, params.zeta)
    src, tgt, dist = _select_grouped(s_of_t, d_t, bound)
    if params.accept_unclaimed:
        claimed = np.zeros(len(deformed), dtype=bool)
        claimed[src] = True
        free = np.flatnonzero(~claimed)
        if len(free):
            d_s, t_of_s = target_index.query(deformed[free])
            ok = d_s <= bound
            src = np.concatenate([src, free[ok]])
            tgt = np.concatenate([tgt, t_of_s[ok]])
            dist = np.concatenate([dist, d_s[ok]])
    return src, tgt, dist, bound


def icfp_step(source, target, params: IcfpParams, displacement=None, *, _cache=None):
    """One ICFP iteration.

    Returns ``(CorrespondenceMap, new displacement field, mean residual)``.
    The residual is the mean matched distance *before* the update.
    """
    src_pts = as_points(source)
    tgt_pts = as_points(target)
    if len(src_pts) == 0 or len(tgt_pts) == 0:
        raise GeometryError("empty cloud")
    if len(tgt_pts) > 1 and np.allclose(tgt_pts, tgt_pts[0]):
        raise GeometryError("degenerate target")
    disp = np.zeros_like(src_pts) if displacement is None else np.asarray(displacement, float)
    cache = _cache if _cache is not None else {}
    if "tindex" not in cache:
        cache["tindex"] = build_nn_index(tgt_pts)
    if "smoother" not in cache:
        cache["smoother"] = _Smoother(src_pts, params.kernel_scale)
    deformed = src_pts + disp
    src, tgt, dist, _ = _matches(deformed, tgt_pts, cache["tindex"], params)
    cmap = CorrespondenceMap(src, tgt, dist, len(src_pts), len(tgt_pts))
    match = np.zeros_like(src_pts)
    mask = np.zeros(len(src_pts), dtype=bool)
    match[src] = tgt_pts[tgt] - deformed[src]
    mask[src] = True
    new_disp = disp + cache["smoother"](match, mask)
    return cmap, new_disp, cmap.mean_residual()


def _kabsch(a, b):
    """Rotation ``R`` and translation ``t`` minimising ``|a @ R.T + t - b|``."""
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    U, _, Vt = np.linalg.svd((a - ca).T @ (b - cb))
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cb - ca @ R.T


def rigid_prealign(source, target, iterations: int = 20) -> np.ndarray:
    """Source points after centroid matching and a few rigid ICP iterations.

    The rigid result is kept only if it lowers the mean nearest-neighbour
    distance, so clouds that already coincide are left untouched.
    """
    src = as_points(source)
    tgt = as_points(target)
    index = build_nn_index(tgt)
    best = src + (tgt.mean(axis=0) - src.mean(axis=0))
    best_d = float(index.query(best)[0].mean())
    if best_d == 0.0 or len(src) < 3 or len(tgt) < 3:
        return best
    cur = best
    for _ in range(iterations):
        d, j = index.query(cur)
        R, t = _kabsch(src, tgt[j])
        cur = src @ R.T + t
        md = float(index.query(cur)[0].mean())
        if md < best_d - 1e-12:
            best, best_d = cur, md
        else:
            break
    return best


@dataclass
class IcfpResult:
    correspondences: CorrespondenceMap
    displacement: np.ndarray
    residuals: list
    converged: bool


def icfp_register(source, target, params: IcfpParams | None = None, init_displacement=None,
                  return_details: bool = False):
    """Iterate :func:`icfp_step` until the residual settles; always terminates.

    Without an initial displacement the source is first moved by
    :func:`rigid_prealign`.
    """
    params = params or IcfpParams()
    src_pts = as_points(source)
    tgt_pts = as_points(target)
    if len(src_pts) == 0 or len(tgt_pts) == 0:
        raise GeometryError("empty cloud")
    if init_displacement is None:
        disp = rigid_prealign(src_pts, tgt_pts) - src_pts
    else:
        disp = np.asarray(init_displacement, float).copy()
    cache: dict = {}
    residuals = []
    converged = False
    cmap = None
    for _ in range(params.max_iterations):
        cmap, disp, res = icfp_step(src_pts, tgt_pts, params, disp, _cache=cache)
        residuals.append(res)
        if res == 0.0 or (len(residuals) > 1 and abs(residuals[-2] - res) < params.convergence_tol):
            converged = True
            break
    # final correspondences against the converged deformation
    if not converged or residuals[-1] > 0:
        cmap, _, res = icfp_step(src_pts, tgt_pts, params, disp, _cache=cache)
        residuals.append(res)
    if return_details:
        return IcfpResult(cmap, disp, residuals, converged)
    return cmap


@dataclass(frozen=True, eq=False)
class DynamicGraph:
    """Key-node trajectories of one camera.

    ``positions[i, f]`` is node ``i`` at retained frame ``valid_frames[f]``.
    """

    positions: np.ndarray
    valid_frames: tuple
    edges: np.ndarray
    camera_id: int = 0
    timestamps: tuple = field(default=())

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ValueError("positions must have shape (nodes, frames, 3)")
        if pos.shape[1] != len(self.valid_frames):
            raise ValueError("positions do not cover every valid frame")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loop in adjacency")
            e = np.unique(np.sort(e, axis=1), axis=0)
            if e.max() >= pos.shape[0]:
                raise ValueError("edge index out of range")
        pos.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "valid_frames", tuple(int(f) for f in self.valid_frames))
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))

    @property
    def node_count(self) -> int:
        return self.positions.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def trajectories(self) -> list:
        return [{f: self.positions[i, j] for j, f in enumerate(self.valid_frames)}
                for i in range(self.node_count)]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def frame_positions(self, frame_index: int) -> np.ndarray:
        return self.positions[:, self.valid_frames.index(frame_index)]

    def subgraph(self, nodes) -> DynamicGraph:
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = -np.ones(self.node_count, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = remap[self.edges] if len(self.edges) else self.edges
        e = e[(e >= 0).all(axis=1)] if len(e) else e
        return DynamicGraph(self.positions[nodes], self.valid_frames, e, self.camera_id, self.timestamps)

    def to_dict(self) -> dict:
        return {
            "format": "gaitsync.dynamic_graph",
            "version": 1,
            "camera_id": self.camera_id,
            "node_count": self.node_count,
            "valid_frames": list(self.valid_frames),
            "timestamps": list(self.timestamps),
            "trajectories": [np.round(self.positions[i].ravel(), 6).tolist() for i in range(self.node_count)],
            "edges": self.edges.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> DynamicGraph:
        if d.get("format") != "gaitsync.dynamic_graph":
            raise ValueError("not a dynamic graph document")
        if d.get("version") != 1:
            raise ValueError(f"unsupported dynamic graph version {d.get('version')!r} (expected 1)")
        nf = len(d["valid_frames"])
        pos = np.asarray(d["trajectories"], dtype=float).reshape(int(d["node_count"]), nf, 3)
        return cls(pos, tuple(d["valid_frames"]), np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
                   int(d.get("camera_id", 0)), tuple(d.get("timestamps", ())))


def knn_edges(points, k: int) -> np.ndarray:
    """Symmetrised k-nearest-neighbour edge list (i < j)."""
    pts = as_points(points)
    n = len(pts)
    if n < 2 or k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, idx = cKDTree(pts).query(pts, k=min(k + 1, n))
    rows = np.repeat(np.arange(n), idx.shape[1] - 1)
    cols = idx[:, 1:].ravel()
    e = np.sort(np.stack([rows, cols], axis=1), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def retained_frames(frames, min_density_fraction: float) -> list:
    """Indices (into ``frames``) whose cloud is not abnormally sparse."""
    sizes = np.array([len(f.cloud) for f in frames])
    med = np.median(sizes)
    return [i for i, s in enumerate(sizes) if s > 0 and s >= min_density_fraction * med]


def build_dynamic_graph(frames, params: IcfpParams | None = None, knn_edges_k: int = 4) -> DynamicGraph:
    """Chain ICFP correspondences through consecutive retained frames.

    A node is a point of the first retained frame whose chain of matches is
    unbroken up to the last retained frame.
    """
    params = params or IcfpParams()
    frames = list(frames)
    keep = retained_frames(frames, params.min_density_fraction)
    if len(keep) < 2:
        raise ValueError("insufficient frames")
    kept = [frames[i] for i in keep]
    first = kept[0].cloud.points
    current = np.arange(len(first))
    track = [current.copy()]
    for a, b in zip(kept[:-1], kept[1:]):
        res = icfp_register(a.cloud, b.cloud, params, return_details=True)
        tgt = res.correspondences.target_of()
        nxt = np.where(current >= 0, tgt[np.maximum(current, 0)], -1)
        current = nxt
        track.append(current.copy())
    alive = current >= 0
    if not np.any(alive):
        raise ValueError("no persistent correspondences")
    idx = np.stack(track, axis=1)[alive]  # (nodes, frames)
    positions = np.stack([kept[f].cloud.points[idx[:, f]] for f in range(len(kept))], axis=1)
    edges = knn_edges(positions[:, 0], knn_edges_k)
    return DynamicGraph(positions, tuple(f.frame_index for f in kept), edges,
                        camera_id=kept[0].camera_id, timestamps=tuple(f.timestamp for f in kept))
