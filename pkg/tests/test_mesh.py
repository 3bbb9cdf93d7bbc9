from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gammacount.mesh import Mesh, MeshError, PointOutsideMeshError, build_mesh

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def circumcircle_empty(mesh: Mesh, tri_ids, tol=1e-9) -> bool:
    """Empty-circumcircle predicate with the in-circle determinant."""
    v = mesh.vertices
    for k in tri_ids:
        a, b, c = v[mesh.triangles[k]]
        others = np.delete(np.arange(len(v)), mesh.triangles[k])
        d = v[others]
        m = np.stack(
            [
                a[0] - d[:, 0], a[1] - d[:, 1], (a[0] - d[:, 0]) ** 2 + (a[1] - d[:, 1]) ** 2,
                b[0] - d[:, 0], b[1] - d[:, 1], (b[0] - d[:, 0]) ** 2 + (b[1] - d[:, 1]) ** 2,
                c[0] - d[:, 0], c[1] - d[:, 1], (c[0] - d[:, 0]) ** 2 + (c[1] - d[:, 1]) ** 2,
            ],
            axis=1,
        ).reshape(-1, 3, 3)
        # counter-clockwise triangle: a positive determinant means d is inside
        scale = np.max(np.abs(m), axis=(1, 2)) ** 2
        if np.any(np.linalg.det(m) > tol * scale):
            return False
    return True


class TestBuildMesh:
    def test_square_corners(self):
        mesh = build_mesh(SQUARE, max_edge=2.0, extension=0.0)
        assert mesh.n_vertices == 4
        assert mesh.n_triangles == 2
        assert mesh.area() == pytest.approx(1.0, abs=1e-14)

    def test_extension_contains_sites_strictly(self):
        mesh = build_mesh(SQUARE, max_edge=2.0, extension=0.5)
        tri, bary = mesh.locate(SQUARE)
        assert np.all(tri >= 0)
        # strictly interior: the sites are not on the mesh boundary
        on_boundary = np.unique(mesh.boundary_edges())
        site_ids = [int(np.argmin(np.linalg.norm(mesh.vertices - p, axis=1))) for p in SQUARE]
        assert not set(site_ids) & set(on_boundary.tolist())

    def test_edge_budget_and_delaunay(self):
        pts = np.random.default_rng(0).uniform(size=(200, 2))
        mesh = build_mesh(pts, max_edge=0.1, extension=0.0)
        assert mesh.edge_lengths().max() <= 0.1 + 1e-12
        assert np.all(mesh.locate(pts)[0] >= 0)
        picks = np.random.default_rng(1).choice(mesh.n_triangles, 40, replace=False)
        assert circumcircle_empty(mesh, picks)

    def test_exterior_budget(self):
        pts = np.random.default_rng(2).uniform(size=(50, 2))
        mesh = build_mesh(pts, max_edge=0.1, extension=0.3)
        assert mesh.edge_lengths().max() <= 0.2 + 1e-12
        assert mesh.boundary_extension == 0.3

    def test_min_angle_on_random_sites(self):
        pts = np.random.default_rng(3).uniform(size=(150, 2))
        mesh = build_mesh(pts, max_edge=0.1, extension=0.2)
        assert mesh.min_angle() > 10.0

    def test_deterministic(self):
        pts = np.random.default_rng(4).uniform(size=(60, 2))
        a = build_mesh(pts, 0.15, 0.2)
        b = build_mesh(pts, 0.15, 0.2)
        assert a.to_text() == b.to_text()

    def test_collinear_rejected(self):
        with pytest.raises(MeshError):
            build_mesh(np.column_stack([np.linspace(0, 1, 5), np.linspace(0, 1, 5)]), 0.5)

    @pytest.mark.parametrize("kwargs", [{"max_edge": 0.0}, {"max_edge": 1.0, "extension": -0.1}])
    def test_bad_settings(self, kwargs):
        with pytest.raises(MeshError):
            build_mesh(SQUARE, **kwargs)

    def test_too_few_points(self):
        with pytest.raises(MeshError):
            build_mesh(SQUARE[:2], 1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_conforming_and_covering(self, seed):
        pts = np.random.default_rng(seed).uniform(-2, 3, size=(25, 2))
        mesh = build_mesh(pts, max_edge=1.0, extension=0.1)
        # every interior edge is shared by exactly two triangles, boundary edges by one
        t = mesh.triangles
        e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        assert set(counts.tolist()) <= {1, 2}
        # Euler characteristic of a triangulated disk
        assert mesh.n_vertices - len(counts) + mesh.n_triangles == 1
        assert np.all(mesh.areas() > 0)
        assert np.all(mesh.contains(pts))


class TestMeshObject:
    def test_text_round_trip(self, tmp_path):
        mesh = build_mesh(np.random.default_rng(5).uniform(size=(30, 2)), 0.3, 0.2)
        path = tmp_path / "mesh.txt"
        mesh.save(path)
        back = Mesh.load(path)
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        assert back.boundary_extension == mesh.boundary_extension
        text = path.read_text()
        assert any(line.startswith("v ") for line in text.splitlines())
        assert any(line.startswith("t ") for line in text.splitlines())

    def test_bad_text(self):
        with pytest.raises(MeshError):
            Mesh.from_text("v 0 0\nv 1 0\nt 0 1 5\n")

    def test_locate_outside(self):
        mesh = build_mesh(SQUARE, 2.0)
        with pytest.raises(PointOutsideMeshError) as info:
            mesh.locate(np.array([[0.5, 0.5], [2.0, 2.0]]))
        assert info.value.index == 1
        tri, bary = mesh.locate(np.array([[2.0, 2.0]]), strict=False)
        assert tri[0] == -1 and np.isnan(bary).all()

    def test_orientation_normalized(self):
        mesh = Mesh(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), np.array([[0, 1, 2]]))
        assert mesh.areas()[0] == pytest.approx(0.5)

    def test_stats(self):
        mesh = build_mesh(SQUARE, 2.0)
        st_ = mesh.stats()
        assert st_["vertices"] == 4 and st_["triangles"] == 2
        assert st_["min_angle_deg"] == pytest.approx(45.0)
        assert st_["area"] == pytest.approx(1.0)
