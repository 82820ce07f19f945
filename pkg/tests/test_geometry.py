import numpy as np
import pytest

from gaitsync import geometry as gm
from gaitsync import meshio


def brute_nn(points, queries):
    d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
    return d.min(axis=1), d.argmin(axis=1)


def test_single_point_index():
    idx = gm.build_nn_index(gm.PointCloud([[0.0, 0.0, 0.0]]))
    d, i = idx.query([[1.0, 0.0, 0.0]])
    assert i[0] == 0 and d[0] == 1.0


def test_coincident_query_distance_zero():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    d, i = gm.build_nn_index(pts).query(pts[17])
    assert i[0] == 17 and d[0] == 0.0


def test_nn_matches_linear_scan():
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(1000, 3))
    q = rng.uniform(size=(100, 3))
    d, i = gm.build_nn_index(pts).query(q)
    d0, i0 = brute_nn(pts, q)
    np.testing.assert_array_equal(i, i0)
    np.testing.assert_allclose(d, d0, rtol=0, atol=1e-12)


def test_empty_cloud_rejected():
    with pytest.raises(gm.GeometryError, match="empty cloud"):
        gm.build_nn_index(gm.PointCloud.empty())
    with pytest.raises(gm.GeometryError):
        gm.cpgd(np.zeros((0, 3)), np.zeros((1, 3)))


def test_cpgd_examples():
    a = np.random.default_rng(2).normal(size=(30, 3))
    assert gm.cpgd(a, a) == 0.0
    assert gm.cpgd([[0, 0, 0]], [[3, 4, 0]]) == 5.0


def test_cpgd_matches_double_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
    oracle = np.mean([min(np.sqrt(sum((p[k] - q[k]) ** 2 for k in range(3))) for q in b) for p in a])
    assert abs(gm.cpgd(a, b) - oracle) < 1e-9
    assert gm.cpgd_sym(a, b) == pytest.approx(0.5 * (gm.cpgd(a, b) + gm.cpgd(b, a)), abs=1e-15)


def test_cpgd_translation_invariant():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(60, 3))
    t = np.array([12.0, -3.0, 7.5])
    assert abs(gm.cpgd(a + t, b + t) - gm.cpgd(a, b)) < 1e-9


def test_rmse_examples():
    assert gm.rmse([0, 0, 0]) == 0.0
    assert gm.rmse([3, 4]) == pytest.approx(np.sqrt(12.5), abs=1e-15)
    v = np.random.default_rng(5).uniform(size=1000)
    acc = 0.0
    for x in v[::-1]:
        acc += x * x
    assert gm.rmse(v) == pytest.approx(np.sqrt(acc / len(v)), rel=1e-12)
    with pytest.raises(gm.GeometryError):
        gm.rmse([])


def test_mesh_validation():
    with pytest.raises(gm.GeometryError):
        gm.TriMesh([[0, 0, 0], [1, 0, 0]], [[0, 1, 2]])
    with pytest.raises(gm.GeometryError):
        gm.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    m = gm.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]])
    assert m.edges.tolist() == [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]]


# -- file formats ------------------------------------------------------------------

TRI = gm.TriMesh([[0.0, 0.0, 0.0], [1.25, 0.0, 0.0], [0.0, 1.0, 0.1]], [[0, 1, 2]])


@pytest.mark.parametrize("name,binary", [("m.ply", True), ("m.ply", False), ("m.obj", False)])
def test_mesh_round_trip(tmp_path, name, binary):
    p = tmp_path / name
    meshio.save_mesh(p, TRI, binary=binary)
    back = meshio.load_mesh(p)
    np.testing.assert_array_equal(back.faces, TRI.faces)
    np.testing.assert_array_equal(back.vertices, TRI.vertices.astype(np.float32))


def test_ascii_and_binary_ply_agree(tmp_path):
    pts = np.random.default_rng(6).normal(size=(40, 3)) * 100
    c = gm.PointCloud(pts)
    meshio.save_cloud(tmp_path / "a.ply", c, binary=False)
    meshio.save_cloud(tmp_path / "b.ply", c, binary=True)
    a = meshio.load_cloud(tmp_path / "a.ply").points
    b = meshio.load_cloud(tmp_path / "b.ply").points
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, pts.astype(np.float32))


def test_obj_one_based_faces(tmp_path):
    p = tmp_path / "nine.obj"
    lines = [f"v {i} {i % 3} 0" for i in range(9)] + ["f 1 2 3", "vn 0 0 1"]
    p.write_text("\n".join(lines) + "\n")
    m = meshio.load_mesh(p)
    assert len(m.vertices) == 9
    assert m.faces.tolist() == [[0, 1, 2]]


def test_ply_errors_carry_offsets(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"plx\n")
    with pytest.raises(meshio.MalformedHeaderError) as e:
        meshio.load_mesh(p)
    assert e.value.offset == 0
    meshio.save_mesh(p, TRI, binary=True)
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(meshio.TruncatedPayloadError):
        meshio.load_mesh(p)
    q = tmp_path / "idx.obj"
    q.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n")
    with pytest.raises(meshio.IndexOutOfRangeError) as e:
        meshio.load_mesh(q)
    assert e.value.offset == len("v 0 0 0\nv 1 0 0\nv 0 1 0\n")
