import numpy as np
import pytest

from gaitsync import registration as rg
from gaitsync import sim
from gaitsync.geometry import TriMesh
from gaitsync.icfp import CorrespondenceMap


def small_shape():
    return sim.DeformingShape(n_lat=16, n_lon=24)


def tetra():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, f)


def full_map(n):
    i = np.arange(n)
    return CorrespondenceMap(i, i, np.zeros(n), n, n)


def test_incidence_single_edge():
    M = rg.incidence_matrix([[0, 1]], 2).toarray()
    np.testing.assert_array_equal(M, [[-1.0, 1.0]])


def test_vertex_matrix_row():
    D = rg.vertex_matrix([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).toarray()
    np.testing.assert_array_equal(D[0], [1, 2, 3, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(D[1, 4:], [4, 5, 6, 1])


def test_blocks_from_partial_correspondences():
    m = tetra()
    cm = CorrespondenceMap(np.array([2]), np.array([0]), np.array([0.5]), 4, 1)
    b = rg.build_blocks(m, [[9.0, 9.0, 9.0]], cm)
    np.testing.assert_array_equal(b.W.diagonal(), [0, 0, 1, 0])
    np.testing.assert_array_equal(b.U[2], [9, 9, 9])
    assert np.all(b.U[[0, 1, 3]] == 0)
    with pytest.raises(IndexError):
        rg.build_blocks(m, [[0.0, 0.0, 0.0]], CorrespondenceMap(np.array([7]), np.array([0]), np.zeros(1), 4, 1))


@pytest.mark.parametrize("seed", range(5))
def test_stiffness_annihilates_uniform_stack(seed):
    rng = np.random.default_rng(seed)
    m = sim.template_mesh(small_shape())
    b = rg.build_blocks(m, m.vertices, full_map(len(m.vertices)), rg.RegistrationParams(gamma=rng.uniform(0.1, 5)))
    X = np.tile(rng.normal(size=(4, 3)), (len(m.vertices), 1))
    assert np.linalg.norm(rg.stiffness_matrix(b) @ X) < 1e-10


def test_identity_fit():
    m = sim.template_mesh(small_shape())
    b = rg.build_blocks(m, m.vertices, full_map(len(m.vertices)))
    X, info = rg.assemble_and_solve(b, None, 5.0, return_info=True)
    np.testing.assert_allclose(X, rg.identity_stack(len(m.vertices)), atol=1e-8)
    assert info.energy < 1e-12


def test_translation_fit_is_uniform():
    m = sim.template_mesh(small_shape())
    t = np.array([3.0, -2.0, 5.0])
    b = rg.build_blocks(m, m.vertices + t, full_map(len(m.vertices)))
    X = rg.assemble_and_solve(b, None, 2.0)
    blocks = X.reshape(-1, 4, 3)
    assert np.abs(blocks - blocks[0]).max() < 1e-8
    np.testing.assert_allclose(rg.apply_stack(m.vertices, X), m.vertices + t, atol=1e-8)


def test_solution_matches_dense_lstsq():
    rng = np.random.default_rng(3)
    m = tetra()
    tgt = m.vertices + rng.normal(scale=0.1, size=(4, 3))
    b = rg.build_blocks(m, tgt, full_map(4), rg.RegistrationParams(gamma=0.7))
    A, B = rg.stacked_system(b, 1.5)
    X_dense = np.linalg.lstsq(A.toarray(), B, rcond=None)[0]
    X, info = rg.assemble_and_solve(b, None, 1.5, return_info=True)
    np.testing.assert_allclose(X, X_dense, atol=1e-8)
    assert info.normal_residual < 1e-8
    assert info.energy <= rg.energy(b, rg.identity_stack(4), 1.5) + 1e-12


def test_rank_deficient():
    m = tetra()
    empty = CorrespondenceMap(np.zeros(0, int), np.zeros(0, int), np.zeros(0), 4, 0)
    with pytest.raises(rg.RankDeficientError, match="rank deficient"):
        rg.assemble_and_solve(rg.build_blocks(m, np.zeros((1, 3)), empty), None, 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        rg.RegistrationParams(alphas=(1.0, 2.0))
    with pytest.raises(ValueError):
        rg.RegistrationParams(gamma=0.0)
    with pytest.raises(ValueError):
        rg.RegistrationParams(init="nope")
    d = rg.RegistrationParams()
    assert d.alphas == (50.0, 20.0, 5.0, 2.0, 0.8) and d.gamma == 1.0 and d.beta == 0.0


def test_self_registration():
    m = sim.template_mesh(small_shape())
    res = rg.register_template(m, m.vertices)
    rms = np.sqrt(np.mean(np.sum((res.mesh.vertices - m.vertices) ** 2, axis=1)))
    assert rms < 0.05
    np.testing.assert_array_equal(res.mesh.faces, m.faces)
    e = res.distance_energy
    assert all(b <= a + 1e-9 for a, b in zip(e, e[1:]))


def test_stretch_recovered():
    shape = sim.DeformingShape()
    m = sim.template_mesh(shape)
    target = m.vertices * np.array([1.03, 1.0, 1.0])
    res = rg.register_template(m, target)
    L = rg.foot_dimensions(res.mesh).length
    L_t = rg.foot_dimensions(target).length
    assert abs(L - L_t) / L_t < 0.005


def test_partial_scan_deforms_smoothly():
    m = sim.template_mesh(small_shape())
    target = m.vertices + np.array([2.0, 0.0, 0.0])
    half = target[m.vertices[:, 0] > 0]
    res = rg.register_template(m, half, rg.RegistrationParams(init="identity"))
    disp = np.linalg.norm(res.mesh.vertices - m.vertices, axis=1)
    front = m.vertices[:, 0] > 0
    assert disp[~front].max() <= 2 * disp[front].max()


def test_foot_dimensions_box():
    g = np.array([[x, y, z] for x in (0, 240) for y in (0, 90) for z in (0, 60)], float)
    d = rg.foot_dimensions(g)
    assert (d.length, d.width) == (240.0, 90.0)
    with pytest.raises(Exception):
        rg.foot_dimensions(np.zeros((0, 3)))


def test_length_scaling_is_exact():
    m = sim.template_mesh()
    a = rg.foot_dimensions(m).length
    b = rg.foot_dimensions(m.vertices * np.array([1.03, 1, 1])).length
    assert (b - a) / a == pytest.approx(0.03, abs=1e-12)


def test_dimension_variation():
    m = sim.template_mesh(small_shape())
    const = rg.dimension_variation([m, m, m])
    assert const.delta_length == const.delta_width == const.delta_ball_width == 0.0
    seq = [m.vertices * np.array([s, 1, 1]) for s in (1.015, 0.985, 1.015, 0.985)]
    var = rg.dimension_variation(seq)
    assert var.relative_to_length()["length"] == pytest.approx(0.03, rel=1e-12)
    with pytest.raises(ValueError):
        rg.dimension_variation([m])
