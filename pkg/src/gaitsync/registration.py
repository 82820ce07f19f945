"""Template-to-scan non-rigid registration and foot measurements.

The unknown is a stack of per-vertex 4x3 affine transforms ``X`` (``4n x 3``)
acting on homogeneous row vectors ``[v^T 1]``.  Each solve minimises

    || [alpha * (M kron G); W D] X - [0; W U] ||_F^2

through the sparse normal equations.  The curvature block is reserved but
left out (``beta = 0``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .geometry import GeometryError, PointCloud, TriMesh, as_points, build_nn_index
from .icfp import CorrespondenceMap, IcfpParams, _matches

log = logging.getLogger(__name__)


class RankDeficientError(GeometryError):
    pass


@dataclass(frozen=True)
class RegistrationParams:
    alphas: tuple = (50.0, 20.0, 5.0, 2.0, 0.8)
    gamma: float = 1.0
    beta: float = 0.0
    inner_iterations: int = 3
    inner_tol: float = 1e-4
    zeta: float = 1.7
    init: str = "bbox"  # identity | centroid | bbox

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if a.size == 0 or np.any(a <= 0) or np.any(np.diff(a) >= 0):
            raise ValueError("alphas must be positive and strictly decreasing")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.beta != 0:
            raise NotImplementedError("the curvature block is reserved; beta must be 0")
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be >= 1")
        if self.init not in ("identity", "centroid", "bbox"):
            raise ValueError("init must be 'identity', 'centroid' or 'bbox'")


@dataclass(frozen=True, eq=False)
class SystemBlocks:
    D: sparse.csr_matrix  # n x 4n
    W: sparse.dia_matrix  # n x n
    U: np.ndarray  # n x 3
    M: sparse.csr_matrix  # e x n
    G: np.ndarray  # 4 x 4
    Wc: object = None
    Ac: object = None
    Bc: object = None

    @property
    def n(self) -> int:
        return self.D.shape[0]


def identity_stack(n: int) -> np.ndarray:
    X = np.zeros((n, 4, 3))
    X[:, :3, :] = np.eye(3)
    return X.reshape(4 * n, 3)


def translation_stack(n: int, t) -> np.ndarray:
    X = identity_stack(n).reshape(n, 4, 3)
    X[:, 3, :] = np.asarray(t, dtype=float)
    return X.reshape(4 * n, 3)


def apply_stack(vertices, X) -> np.ndarray:
    v = as_points(vertices)
    Xb = np.asarray(X, dtype=float).reshape(len(v), 4, 3)
    return np.einsum("ni,nij->nj", v, Xb[:, :3, :]) + Xb[:, 3, :]


def vertex_matrix(vertices) -> sparse.csr_matrix:
    """``D = diag(v_1^T, ..., v_n^T)`` with homogeneous rows ``(x, y, z, 1)``."""
    v = as_points(vertices)
    n = len(v)
    data = np.hstack([v, np.ones((n, 1))]).ravel()
    rows = np.repeat(np.arange(n), 4)
    cols = np.arange(4 * n)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, 4 * n))


def incidence_matrix(edges, n: int) -> sparse.csr_matrix:
    """Node-arc incidence: row ``r`` of edge ``(i, j)`` has -1 at ``i`` and +1 at ``j``."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    m = len(e)
    rows = np.repeat(np.arange(m), 2)
    cols = e.ravel()
    data = np.tile([-1.0, 1.0], m)
    return sparse.csr_matrix((data, (rows, cols)), shape=(m, n))


def build_blocks(template: TriMesh, target, correspondences: CorrespondenceMap,
                 params: RegistrationParams | None = None, weights=None) -> SystemBlocks:
    """Assemble ``D, W, U, M, G`` for matches from template vertices to ``target`` points.

    ``weights`` overrides the default binary ``w_i = 1`` for matched vertices.
    """
    params = params or RegistrationParams()
    n = len(template.vertices)
    tgt = as_points(target)
    src = np.asarray(correspondences.source, dtype=np.int64)
    t_idx = np.asarray(correspondences.target, dtype=np.int64)
    if len(src) and (src.min() < 0 or src.max() >= n):
        raise IndexError("correspondence source index out of range for the template")
    if len(t_idx) and (t_idx.min() < 0 or t_idx.max() >= len(tgt)):
        raise IndexError("correspondence target index out of range for the target")
    w = np.zeros(n)
    if weights is None:
        w[src] = 1.0
    else:
        wv = np.asarray(weights, dtype=float)
        if wv.shape != src.shape or np.any(wv <= 0) or np.any(wv > 1):
            raise ValueError("weights must lie in (0, 1], one per correspondence")
        w[src] = wv
    U = np.zeros((n, 3))
    U[src] = tgt[t_idx]
    G = np.diag([1.0, 1.0, 1.0, params.gamma])
    return SystemBlocks(vertex_matrix(template.vertices), sparse.diags(w), U,
                        incidence_matrix(template.edges, n), G)


def stiffness_matrix(blocks: SystemBlocks) -> sparse.csr_matrix:
    return sparse.kron(blocks.M, sparse.csr_matrix(blocks.G), format="csr")


def stacked_system(blocks: SystemBlocks, alpha: float):
    """Explicit ``(A, B)`` of the least-squares problem."""
    K = stiffness_matrix(blocks)
    A = sparse.vstack([alpha * K, blocks.W @ blocks.D], format="csr")
    B = np.vstack([np.zeros((K.shape[0], 3)), blocks.W @ blocks.U])
    return A, B


def energy(blocks: SystemBlocks, X, alpha: float) -> float:
    A, B = stacked_system(blocks, alpha)
    R = A @ np.asarray(X, dtype=float) - B
    return float(np.sum(R * R))


def distance_energy(blocks: SystemBlocks, X) -> float:
    R = blocks.W @ (blocks.D @ np.asarray(X, dtype=float) - blocks.U)
    return float(np.sum(R * R))


def _check_rank(blocks: SystemBlocks):
    # every connected piece of the template needs an affine-determining set of weighted rows
    ncomp, comp = csgraph.connected_components(abs(blocks.M.T @ blocks.M), directed=False)
    w = blocks.W.diagonal()
    hom = _homogeneous_rows(blocks.D)
    for c in range(ncomp):
        rows = np.flatnonzero((comp == c) & (w > 0))
        if len(rows) < 4 or np.linalg.matrix_rank(hom[rows]) < 4:
            raise RankDeficientError("rank deficient")


def _homogeneous_rows(D: sparse.csr_matrix) -> np.ndarray:
    n = D.shape[0]
    i = np.arange(n)[:, None]
    rows = D[i, 4 * i + np.arange(4)]
    return rows.toarray() if sparse.issparse(rows) else np.asarray(rows)


@dataclass
class SolveInfo:
    normal_residual: float
    energy: float


def assemble_and_solve(blocks: SystemBlocks, params: RegistrationParams | None, alpha: float,
                       return_info: bool = False):
    """Minimise the registration energy for fixed correspondences; returns ``X`` (``4n x 3``)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    _check_rank(blocks)
    A, B = stacked_system(blocks, alpha)
    AtA = (A.T @ A).tocsc()
    AtB = A.T @ B
    try:
        lu = splu(AtA)
        X = lu.solve(AtB)
    except RuntimeError as exc:
        raise RankDeficientError("rank deficient") from exc
    if not np.all(np.isfinite(X)):
        raise RankDeficientError("rank deficient")
    if not return_info:
        return X
    denom = np.linalg.norm(AtB)
    res = np.linalg.norm(AtA @ X - AtB) / denom if denom > 0 else 0.0
    R = A @ X - B
    return X, SolveInfo(float(res), float(np.sum(R * R)))


@dataclass
class RegistrationResult:
    mesh: TriMesh
    X: np.ndarray
    residual: float  # RMS matched distance at the end
    converged: bool
    distance_energy: list = field(default_factory=list)  # at the end of each alpha step


def _bbox_centre(p) -> np.ndarray:
    return 0.5 * (p.min(axis=0) + p.max(axis=0))


def register_template(template: TriMesh, target, params: RegistrationParams | None = None,
                      init_X=None) -> RegistrationResult:
    """Deform ``template`` onto the ``target`` cloud over the alpha schedule.

    Each inner iteration re-estimates correspondences with the ICFP
    selection rule from the deformed template to the target, then solves.
    """
    params = params or RegistrationParams()
    tgt = as_points(target)
    if len(tgt) == 0:
        raise GeometryError("empty cloud")
    n = len(template.vertices)
    if init_X is not None:
        X = np.asarray(init_X, dtype=float).copy()
    elif params.init == "centroid":
        X = translation_stack(n, tgt.mean(axis=0) - template.vertices.mean(axis=0))
    elif params.init == "bbox":
        X = translation_stack(n, _bbox_centre(tgt) - _bbox_centre(template.vertices))
    else:
        X = identity_stack(n)
    tindex = build_nn_index(PointCloud(tgt))
    ip = IcfpParams(zeta=params.zeta, accept_unclaimed=False)
    converged = True
    e_dist = []
    blocks = None
    for alpha in params.alphas:
        step_converged = False
        for _ in range(params.inner_iterations):
            deformed = apply_stack(template.vertices, X)
            src, tgt_i, dist, _ = _matches(deformed, tgt, tindex, ip)
            cmap = CorrespondenceMap(src, tgt_i, dist, n, len(tgt))
            blocks = build_blocks(template, tgt, cmap, params)
            X_new = assemble_and_solve(blocks, params, alpha)
            delta = float(np.abs(X_new - X).max())
            X = X_new
            if delta < params.inner_tol:
                step_converged = True
                break
        converged = step_converged
        e_dist.append(distance_energy(blocks, X))
    if not converged:
        log.warning("registration stopped at the inner iteration cap before settling")
    verts = apply_stack(template.vertices, X)
    d, _ = tindex.query(verts[blocks.W.diagonal() > 0])
    rms = float(np.sqrt(np.mean(d ** 2))) if len(d) else float("inf")
    return RegistrationResult(template.with_vertices(verts), X, rms, converged, e_dist)


# -- measurements ------------------------------------------------------------------

@dataclass(frozen=True)
class FootDimensions:
    length: float
    width: float
    ball_width: float


def foot_dimensions(mesh, length_axis: int = 0, width_axis: int = 1,
                    ball_band: tuple = (0.60, 0.75)) -> FootDimensions:
    """Length, maximum width and ball-band width (mm) from vertex extents.

    The heel is the low end of the length axis; the ball band spans
    ``ball_band`` fractions of the length measured from the heel.
    """
    v = mesh.vertices if isinstance(mesh, TriMesh) else as_points(mesh)
    if len(v) == 0:
        raise GeometryError("empty mesh")
    x = v[:, length_axis]
    y = v[:, width_axis]
    lo, hi = x.min(), x.max()
    L = float(hi - lo)
    W = float(y.max() - y.min())
    band = (x >= lo + ball_band[0] * L) & (x <= lo + ball_band[1] * L)
    BW = float(y[band].max() - y[band].min()) if band.any() else 0.0
    return FootDimensions(L, W, BW)


@dataclass(frozen=True)
class DimensionVariation:
    delta_length: float
    delta_width: float
    delta_ball_width: float
    mean_length: float

    def relative_to_length(self) -> dict:
        """Each variation divided by the mean length."""
        m = self.mean_length
        return {"length": self.delta_length / m, "width": self.delta_width / m,
                "ball_width": self.delta_ball_width / m}


def dimension_variation(dims) -> DimensionVariation:
    """Max minus min of every dimension over a sequence of meshes or :class:`FootDimensions`."""
    dims = [d if isinstance(d, FootDimensions) else foot_dimensions(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least two measurements")
    L = np.array([d.length for d in dims])
    W = np.array([d.width for d in dims])
    B = np.array([d.ball_width for d in dims])
    return DimensionVariation(float(np.ptp(L)), float(np.ptp(W)), float(np.ptp(B)), float(L.mean()))
