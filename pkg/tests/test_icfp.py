import numpy as np
import pytest

from gaitsync import icfp
from gaitsync.geometry import Frame, GeometryError, PointCloud


def grid_cloud(n=12, spacing=1.0):
    g = np.arange(n) * spacing
    x, y = np.meshgrid(g, g, indexing="ij")
    z = 0.05 * (x - g.mean()) ** 2
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def foot_like(n=500, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * np.array([120.0, 45.0, 35.0])


def test_bound_examples():
    assert icfp.correspondence_bound([2.0, 2.0, 2.0], 1.7) == 2.0
    assert icfp.correspondence_bound([1.0, 3.0], 1.7) == pytest.approx(3.7, abs=1e-15)
    d = np.random.default_rng(0).uniform(0, 5, 500)
    m = sum(d) / len(d)
    s = np.sqrt(sum((x - m) ** 2 for x in d) / len(d))
    assert icfp.correspondence_bound(d, 1.7) == pytest.approx(m + 1.7 * s, rel=1e-12)
    with pytest.raises(ValueError):
        icfp.correspondence_bound([], 1.7)


def test_select_examples():
    assert icfp.select_correspondence([(7, 1.0), (2, 4.0)], 2.0) == (7, 1.0)
    assert icfp.select_correspondence([(7, 3.0), (2, 4.0)], 2.0) == (2, 4.0)
    assert icfp.select_correspondence([(5, 9.0)], 0.1) == (5, 9.0)
    assert icfp.select_correspondence([(5, 1.0), (3, 1.0)], 2.0) == (3, 1.0)
    with pytest.raises(ValueError):
        icfp.select_correspondence([], 1.0)


def test_grouped_selection_agrees_with_scalar_rule():
    rng = np.random.default_rng(1)
    src = rng.integers(0, 6, 40)
    dist = rng.integers(0, 5, 40).astype(float)
    bound = 2.5
    s, t, d = icfp._select_grouped(src, dist, bound)
    for si, ti, di in zip(s, t, d):
        cands = [(j, dist[j]) for j in np.flatnonzero(src == si)]
        assert (ti, di) == icfp.select_correspondence(cands, bound)


def test_step_identity():
    pts = grid_cloud()
    cmap, disp, res = icfp.icfp_step(pts, pts, icfp.IcfpParams())
    assert res == 0.0
    assert np.all(cmap.distance == 0)
    np.testing.assert_array_equal(disp, 0.0)


def test_conflict_fixture():
    # sources 0 and 1 both claim target 0; target 1 is claimed by source 2
    src = np.array([[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [10.0, 0.0, 0.0]])
    tgt = np.array([[0.1, 0.0, 0.0], [10.0, 0.0, 0.0]])
    cmap, _, _ = icfp.icfp_step(src, tgt, icfp.IcfpParams(accept_unclaimed=False))
    # target->source distances: 0.1 (source 0) and 0.0 (source 2); each source has one candidate
    pairs = sorted(cmap.pairs)
    assert pairs == [(0, 0, pytest.approx(0.1)), (2, 1, 0.0)]


def test_conflict_rule_when_all_exceed_bound():
    # two targets both nearest to source 0, straddling the bound from above
    src = np.array([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0], [-50.0, 0.0, 0.0]])
    tgt = np.array([[3.0, 0.0, 0.0], [0.0, 4.0, 0.0], [50.0, 0.0, 0.0], [-50.0, 0.0, 0.0]])
    d = np.array([3.0, 4.0, 0.0, 0.0])
    bound = icfp.correspondence_bound(d, 0.1)
    assert bound < 3.0  # both candidates of source 0 exceed l -> farthest
    cmap, _, _ = icfp.icfp_step(src, tgt, icfp.IcfpParams(zeta=0.1, accept_unclaimed=False))
    assert dict(zip(cmap.source.tolist(), cmap.target.tolist()))[0] == 1


def test_translation_recovered():
    pts = grid_cloud(16, 1.0)
    shift = np.array([1.0, 0.0, 0.0])
    res = icfp.icfp_register(pts, pts + shift, icfp.IcfpParams(max_iterations=60, convergence_tol=1e-6),
                             return_details=True)
    assert res.residuals[-1] < 0.01
    interior = np.all((pts[:, :2] > 2) & (pts[:, :2] < 13), axis=1)
    assert np.abs(res.displacement[interior] - shift).max() < 0.05


def test_register_identical_zero_residual():
    pts = foot_like()
    res = icfp.icfp_register(pts, pts, return_details=True)
    assert res.residuals[-1] == 0.0
    assert len(res.residuals) <= 2
    np.testing.assert_array_equal(res.correspondences.source, res.correspondences.target)


def test_register_rotated_copy():
    pts = foot_like()
    a = np.deg2rad(5.0)
    R = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    cmap = icfp.icfp_register(pts, pts @ R.T, icfp.IcfpParams(max_iterations=60))
    ok = cmap.source == cmap.target
    assert ok.sum() >= 0.95 * len(pts)


def test_disjoint_clouds_terminate():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(60, 3))
    b = rng.normal(size=(60, 3)) + 1000.0
    res = icfp.icfp_register(a, b, icfp.IcfpParams(max_iterations=5, convergence_tol=1e-12),
                             init_displacement=np.zeros((60, 3)), return_details=True)
    # the smoothed update drags the blob across, so only termination is contractual
    assert not res.converged
    assert len(res.residuals) == 6
    assert res.residuals[0] > 900


def test_degenerate_target():
    with pytest.raises(GeometryError, match="degenerate target"):
        icfp.icfp_step(grid_cloud(), np.zeros((5, 3)), icfp.IcfpParams())


def _frames(clouds):
    return [Frame(1, k, k / 15, PointCloud(c)) for k, c in enumerate(clouds)]


def test_graph_identical_frames():
    pts = foot_like(100, 4)
    g = icfp.build_dynamic_graph(_frames([pts, pts, pts]))
    assert g.node_count == 100
    assert g.valid_frames == (0, 1, 2)
    np.testing.assert_array_equal(g.positions[:, 0], g.positions[:, 2])
    a = g.adjacency()
    assert np.array_equal(a, a.T) and not np.any(np.diag(a))


def test_graph_drops_sparse_frames():
    rng = np.random.default_rng(5)
    full = foot_like(1000, 6)
    sparse_frame = full[rng.choice(1000, 50, replace=False)]
    g = icfp.build_dynamic_graph(_frames([full, full, sparse_frame, full]))
    assert g.valid_frames == (0, 1, 3)


def test_graph_errors():
    pts = foot_like(50)
    with pytest.raises(ValueError, match="insufficient frames"):
        icfp.build_dynamic_graph(_frames([pts]))


def test_graph_document_round_trip():
    pts = foot_like(40, 7)
    g = icfp.build_dynamic_graph(_frames([pts, pts + 0.5]))
    back = icfp.DynamicGraph.from_dict(g.to_dict())
    np.testing.assert_allclose(back.positions, g.positions, atol=1e-6)
    np.testing.assert_array_equal(back.edges, g.edges)
    doc = g.to_dict()
    doc["version"] = 9
    with pytest.raises(ValueError, match="version"):
        icfp.DynamicGraph.from_dict(doc)
