import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from ksnslide.mesh import (
    DegenerateRegionError,
    TriMesh,
    build_mesh,
    quadrature_of,
    rectangle,
    write_mesh_csv,
)
from ksnslide.raster import GridHeader, Raster


def test_square_km_at_tenth_km2():
    mesh = build_mesh(rectangle(0, 0, 1000, 1000), 1e5)
    assert 6 <= mesh.n_triangles <= 16
    assert abs(mesh.signed_areas().sum() - 1e6) <= 0.1e6


def test_coarse_target_keeps_a_triangle():
    region = rectangle(0, 0, 1000, 1000)
    mesh = build_mesh(region, 1e6)
    assert mesh.n_triangles >= 1
    assert quadrature_of(mesh).total == pytest.approx(1e6, rel=1e-9)


def test_mesh_is_deterministic():
    a = build_mesh(rectangle(0, 0, 3300, 2100), 1e5)
    b = build_mesh(rectangle(0, 0, 3300, 2100), 1e5)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)


def test_region_smaller_than_triangle():
    with pytest.raises(DegenerateRegionError):
        build_mesh(rectangle(0, 0, 100, 100), 1e5)


def test_single_triangle_quadrature():
    verts = np.array([[0.0, 0.0], [500.0, 0.0], [0.0, 200.0]])
    mesh = TriMesh(verts, np.array([[0, 1, 2]]), Polygon(verts))
    q = quadrature_of(mesh)
    assert q.weights.tolist() == [50000.0]
    assert np.allclose(q.points[0], verts.mean(axis=0))


def test_empty_mesh_gives_empty_quadrature():
    mesh = TriMesh(np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64), rectangle(0, 0, 1, 1))
    q = quadrature_of(mesh)
    assert len(q) == 0 and q.total == 0.0


@settings(max_examples=30, deadline=None)
@given(w=st.floats(800, 6000), h=st.floats(800, 6000), x0=st.floats(-1e5, 1e5),
       target=st.sampled_from([2e4, 5e4, 1e5, 2e5]))
def test_rectangle_invariants(w, h, x0, target):
    region = rectangle(x0, 0, x0 + w, h)
    mesh = build_mesh(region, target)
    areas = mesh.signed_areas()
    assert np.all(areas > 0)
    # non-overlapping: the union has the summed area
    union = shapely.union_all(shapely.polygons(mesh.vertices[mesh.triangles]))
    assert union.area == pytest.approx(areas.sum(), rel=1e-9)
    q = quadrature_of(mesh)
    assert np.all(q.weights > 0)
    assert abs(q.total - w * h) <= 0.005 * w * h
    # quadrature of a constant is exact up to rounding
    assert np.sum(q.weights * 3.5) == pytest.approx(3.5 * q.total, rel=1e-12)
    assert np.all(shapely.contains_xy(region.buffer(1e-6), q.points[:, 0], q.points[:, 1]))


def test_irregular_polygon_area():
    region = Point(5000, 5000).buffer(3000, 64)
    q = quadrature_of(build_mesh(region, 1e5))
    assert abs(q.total - region.area) <= 0.005 * region.area


def test_raster_region_counts_cells():
    h = GridHeader(40, 30, 1000.0, 2000.0, 100.0)
    yy, xx = np.mgrid[0:30, 0:40]
    inside = ((xx - 20) ** 2 + (yy - 15) ** 2 < 150).astype(np.int64)
    region = Raster(h, inside)
    q = quadrature_of(build_mesh(region, 1e5))
    assert q.total == inside.sum() * 1e4
    row, col, ok = h.index_of(q.points[:, 0], q.points[:, 1])
    assert ok.all() and inside[row, col].all()


def test_mesh_csv(tmp_path):
    mesh = build_mesh(rectangle(0, 0, 1000, 1000), 1e5)
    write_mesh_csv(mesh, tmp_path / "v.csv", tmp_path / "t.csv")
    v = (tmp_path / "v.csv").read_text().splitlines()
    t = (tmp_path / "t.csv").read_text().splitlines()
    assert v[0] == "vid,x,y" and t[0] == "tid,v0,v1,v2"
    assert len(v) == len(mesh.vertices) + 1 and len(t) == mesh.n_triangles + 1
