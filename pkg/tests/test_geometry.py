import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as sk_marching_cubes

from moe_inr import geometry
from moe_inr.geometry import TriangleMesh
from moe_inr.metrics import GridField
from moe_inr.signals import sphere_sdf, torus_sdf


def field(fn, res, lo=-1.2, hi=1.2):
    return GridField.from_function(fn, res, lo, hi)


def skimage_vertices(grid, iso=0.0, on_edges=False):
    # skimage works in float32 and may add cube-interior vertices for ambiguous cases
    verts, faces, _, _ = sk_marching_cubes(grid.values.astype(np.float64), iso)
    if on_edges:
        frac = np.abs(verts - np.round(verts))
        verts = verts[np.count_nonzero(frac > 1e-4, axis=1) <= 1]
    return verts.astype(np.float64) * grid.spacing + grid.lo, faces


class AnalyticModel:
    """Stand-in with the routing surface of a trained model."""

    def __init__(self, sdf):
        self.sdf = sdf

    def route_and_reconstruct(self, x):
        return self.sdf(x)[:, None], (x[:, 0] > 0).astype(np.int64)


@pytest.fixture(scope="module")
def sphere_mesh():
    return geometry.marching_cubes(field(sphere_sdf, 64))


def test_sphere_mesh_watertight_and_outward(sphere_mesh):
    assert geometry.is_watertight(sphere_mesh)
    vol = geometry.signed_volume(sphere_mesh)
    assert vol == pytest.approx(4 / 3 * math.pi * 0.5 ** 3, rel=0.01)


def test_sphere_vertices_near_surface(sphere_mesh):
    spacing = 2.4 / 63
    err = np.abs(np.linalg.norm(sphere_mesh.vertices, axis=1) - 0.5)
    assert err.max() < 0.05 * spacing


def test_matches_skimage_on_sphere(sphere_mesh):
    grid = field(sphere_sdf, 64)
    ref, ref_faces = skimage_vertices(grid)
    assert len(sphere_mesh.vertices) == len(ref)
    assert len(sphere_mesh.triangles) == len(ref_faces)
    d, _ = cKDTree(ref).query(sphere_mesh.vertices)
    assert d.max() < 1e-6


def test_negated_field_flips_orientation(sphere_mesh):
    inv = geometry.marching_cubes(GridField(-field(sphere_sdf, 64).values))
    assert geometry.signed_volume(inv) == pytest.approx(-geometry.signed_volume(sphere_mesh), rel=1e-9)


def test_torus_mesh():
    grid = field(torus_sdf, 48)
    mesh = geometry.marching_cubes(grid)
    assert geometry.is_watertight(mesh)
    exact = 2 * math.pi ** 2 * 0.6 * 0.25 ** 2
    assert geometry.signed_volume(mesh) == pytest.approx(exact, rel=0.03)
    # genus one closed surface: V - E + F = 0
    n_edges = len(geometry.edge_use_counts(mesh))
    assert len(mesh.vertices) - n_edges + len(mesh.triangles) == 0


def test_constant_field_gives_empty_mesh():
    mesh = geometry.marching_cubes(GridField(np.ones((5, 5, 5))))
    assert mesh.is_empty
    assert geometry.signed_volume(mesh) == 0.0
    assert not geometry.is_watertight(mesh)


def test_single_inside_corner():
    v = np.ones((3, 3, 3))
    v[1, 1, 1] = -1.0
    mesh = geometry.marching_cubes(GridField(v, 0.0, 2.0))
    # an octahedron around the middle lattice point
    assert len(mesh.vertices) == 6 and len(mesh.triangles) == 8
    assert geometry.is_watertight(mesh)
    assert geometry.signed_volume(mesh) > 0
    np.testing.assert_allclose(np.abs(mesh.vertices - 1.0).sum(axis=1), 0.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), iso=st.floats(-0.5, 0.5))
def test_vertex_set_matches_skimage_on_random_fields(seed, iso):
    values = np.random.default_rng(seed).normal(size=(7, 7, 7))
    grid = GridField(values, -1.0, 1.0)
    mesh = geometry.marching_cubes(grid, iso)
    if mesh.is_empty:
        return
    ref, _ = skimage_vertices(grid, iso, on_edges=True)
    assert cKDTree(ref).query(mesh.vertices)[0].max() < 1e-5
    assert cKDTree(mesh.vertices).query(ref)[0].max() < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_vertices_lie_on_lattice_edges_at_iso(seed):
    values = np.random.default_rng(seed).normal(size=(6, 6, 6))
    grid = GridField(values, 0.0, 5.0)
    mesh = geometry.marching_cubes(grid, 0.1)
    for p in mesh.vertices:
        frac = p - np.floor(p)
        assert np.count_nonzero(frac > 1e-9) <= 1
    assert np.all(mesh.areas() > 0)


# -- mesh helpers ------------------------------------------------------------

def test_triangle_mesh_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]], colors=np.zeros((2, 3)))


def test_clean_mesh_merges_and_drops():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [5, 5, 5]], dtype=float)
    mesh = TriangleMesh(verts, [[0, 1, 2], [0, 3, 1], [2, 3, 0]])
    out = geometry.clean_mesh(mesh)
    assert len(out.vertices) == 3
    assert len(out.triangles) == 2


def test_sample_surface_on_sphere(sphere_mesh):
    pts = geometry.sample_surface(sphere_mesh, 2000, seed=0)
    assert pts.shape == (2000, 3)
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.5).max() < 0.01
    assert np.abs(pts.mean(axis=0)).max() < 0.03


def test_colors():
    np.testing.assert_array_equal(geometry.expert_colors(np.array([0, 8])), geometry.PALETTE[[0, 0]])
    c = geometry.error_colors(np.array([0.0, 0.5, 2.0]), vmax=1.0)
    np.testing.assert_array_equal(c[0], [255, 255, 255])
    np.testing.assert_array_equal(c[2], [255, 0, 0])
    assert c[1, 1] == 128 or c[1, 1] == 127
    assert np.all(geometry.error_colors(np.zeros(3)) == 255)


# -- grid evaluation ---------------------------------------------------------

def test_eval_grid_matches_direct_lattice():
    sdf, idx = geometry.eval_grid(AnalyticModel(sphere_sdf), resolution=20, slab=3)
    ref = field(sphere_sdf, 20)
    np.testing.assert_allclose(sdf.values, ref.values, atol=1e-12)
    assert idx.values[0].max() == 0 and idx.values[-1].min() == 1


def test_eval_grid_resolution_limits():
    with pytest.raises(geometry.ResolutionError):
        geometry.eval_grid(AnalyticModel(sphere_sdf), resolution=600)
    with pytest.raises(geometry.ResolutionError):
        geometry.eval_grid(AnalyticModel(sphere_sdf), resolution=40, cap=32)
    with pytest.raises(ValueError):
        geometry.eval_grid(AnalyticModel(sphere_sdf), resolution=1)


# -- files -------------------------------------------------------------------

@pytest.mark.parametrize("fmt", ["obj", "ply"])
def test_mesh_file_round_trip(tmp_path, sphere_mesh, fmt):
    path = geometry.export_mesh(sphere_mesh, tmp_path / f"m.{fmt}")
    back = geometry.import_mesh(path)
    np.testing.assert_array_equal(back.triangles, sphere_mesh.triangles)
    np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=1e-6)


def test_ply_colors_round_trip(tmp_path):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    colors = geometry.expert_colors(np.array([0, 1, 2]))
    mesh = TriangleMesh(verts, [[0, 1, 2]], colors)
    back = geometry.import_mesh(geometry.export_mesh(mesh, tmp_path / "c.ply"))
    np.testing.assert_array_equal(back.colors, colors)
    header = (tmp_path / "c.ply").read_bytes().split(b"end_header")[0]
    assert b"binary_little_endian" in header and b"property uchar red" in header


def test_export_rejects_unknown_format(tmp_path, sphere_mesh):
    with pytest.raises(ValueError):
        geometry.export_mesh(sphere_mesh, tmp_path / "m.stl")


def test_empty_mesh_exports(tmp_path):
    empty = geometry.marching_cubes(GridField(np.ones((3, 3, 3))))
    for fmt in ("obj", "ply"):
        back = geometry.import_mesh(geometry.export_mesh(empty, tmp_path / f"e.{fmt}"))
        assert back.is_empty
