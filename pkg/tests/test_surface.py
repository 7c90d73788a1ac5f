"""Isosurface extraction, mesh topology checks, OBJ round-trips."""

import io

import numpy as np
import pytest

from voxflow.field import analytic_sdf, build_surface_latents, parse_shape
from voxflow.hierdec import DecodeConfig, hierarchical_decode
from voxflow.surface import (Mesh, ObjParseError, boundary_edge_count,
                             euler_characteristic, marching_cubes, read_obj,
                             sign_volume, signed_mesh_volume, write_obj)


# ---------------------------------------------------------------------------
# marching cubes


def test_uniform_positive_empty():
    mesh = marching_cubes(np.ones((8, 8, 8)))
    assert mesh.is_empty
    assert boundary_edge_count(mesh) == 0
    assert euler_characteristic(mesh) == 0


def test_min_resolution_rejected():
    with pytest.raises(ValueError):
        marching_cubes(np.ones((1, 4, 4)))


def test_sphere_vertex_radius(sphere_volume_64):
    mesh = marching_cubes(sphere_volume_64)
    assert len(mesh.triangles) > 0
    radii = np.linalg.norm(mesh.vertices, axis=1)
    h = 2.0 / 64
    assert np.max(np.abs(radii - 0.5)) <= 2.0 * h


def test_sphere_mesh_closed(sphere_volume_64):
    mesh = marching_cubes(sphere_volume_64)
    assert boundary_edge_count(mesh) == 0
    assert euler_characteristic(mesh) == 2


def test_sphere_winding_outward(sphere_volume_64):
    # outward normals make the signed enclosed volume positive and close
    # to the analytic sphere volume
    mesh = marching_cubes(sphere_volume_64)
    vol = signed_mesh_volume(mesh)
    assert vol == pytest.approx(4.0 / 3.0 * np.pi * 0.5 ** 3, rel=0.02)


def test_vertices_on_level_set(sphere_volume_64):
    # linear interpolation puts vertices where the analytic field is near 0
    mesh = marching_cubes(sphere_volume_64)
    sdf = analytic_sdf(parse_shape("sphere:r=0.5"), mesh.vertices)
    assert np.max(np.abs(sdf)) <= 2.0 * (2.0 / 64)


def test_gamma_shifts_surface(sphere_volume_64):
    # positive gamma enlarges the occupied region: extracted radius grows
    inner = marching_cubes(sphere_volume_64, gamma=0.0)
    outer = marching_cubes(sphere_volume_64, gamma=0.3)
    assert (np.linalg.norm(outer.vertices, axis=1).mean()
            > np.linalg.norm(inner.vertices, axis=1).mean())


def test_sign_consistent_volumes_same_topology(sphere_volume_64):
    a = marching_cubes(sphere_volume_64)
    b = marching_cubes(np.sign(sphere_volume_64) * 0.25
                       + 1e-6 * (sphere_volume_64 == 0))
    assert len(a.triangles) == len(b.triangles)
    np.testing.assert_array_equal(a.triangles, b.triangles)


def test_masked_extraction_opens_boundary(sphere_volume_64):
    # masking out half the grid cuts the sphere open
    mask = np.zeros(sphere_volume_64.shape, dtype=bool)
    mask[:32] = True
    mesh = marching_cubes(sphere_volume_64, mask=mask)
    assert not mesh.is_empty
    assert boundary_edge_count(mesh) > 0
    with pytest.raises(ValueError):
        marching_cubes(sphere_volume_64, mask=mask[:10])


def test_mask_all_false_empty(sphere_volume_64):
    mesh = marching_cubes(sphere_volume_64,
                          mask=np.zeros(sphere_volume_64.shape, bool))
    assert mesh.is_empty


def test_decode_final_mask_keeps_mesh_closed(sphere_latents_small):
    # the refinement pipeline evaluates every surface-crossing cell, so
    # restricting extraction to its evaluated voxels loses nothing
    cfg = DecodeConfig(target_res=64, base_res=32)
    volume, rep = hierarchical_decode(sphere_latents_small, cfg)
    mesh = marching_cubes(volume, mask=rep.final_mask)
    assert boundary_edge_count(mesh) == 0


def test_determinism(sphere_volume_64):
    a = marching_cubes(sphere_volume_64)
    b = marching_cubes(sphere_volume_64.copy())
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)


# ---------------------------------------------------------------------------
# mesh invariants


def test_mesh_validation():
    v = np.zeros((3, 3))
    with pytest.raises(ValueError):
        Mesh(v, np.array([[0, 1, 3]]))      # index out of range
    with pytest.raises(ValueError):
        Mesh(v, np.array([[0, 1, 1]]))      # repeated vertex
    with pytest.raises(ValueError):
        Mesh(np.array([[0.0, 0.0, np.inf]]), np.empty((0, 3), dtype=np.int64))


def test_boundary_edges_examples():
    tri1 = Mesh(np.eye(3), np.array([[0, 1, 2]]))
    assert boundary_edge_count(tri1) == 3
    quad = Mesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]]),
                np.array([[0, 1, 2], [0, 2, 3]]))
    assert boundary_edge_count(quad) == 4


def test_euler_tetrahedron():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tris = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    mesh = Mesh(verts, tris)
    assert boundary_edge_count(mesh) == 0
    assert euler_characteristic(mesh) == 2


# ---------------------------------------------------------------------------
# occupancy grids


def test_sign_volume_examples(sphere_volume_64):
    assert not sign_volume(np.ones((2, 2, 2))).any()
    assert sign_volume(np.random.default_rng(0).uniform(-1, 1, (3, 3, 3)),
                       gamma=2.0).all()
    frac = sign_volume(sphere_volume_64).mean()
    assert frac == pytest.approx(4.0 / 3.0 * np.pi * 0.5 ** 3 / 8.0, abs=0.005)


# ---------------------------------------------------------------------------
# OBJ I/O


def test_obj_empty():
    assert write_obj(Mesh()) == ""
    assert read_obj("").is_empty


def test_obj_single_triangle():
    mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]))
    text = write_obj(mesh)
    lines = text.strip().splitlines()
    assert sum(1 for l in lines if l.startswith("v ")) == 3
    assert sum(1 for l in lines if l.startswith("f ")) == 1
    assert lines[-1] == "f 1 2 3"


def test_obj_roundtrip_exact(sphere_volume_64):
    mesh = marching_cubes(sphere_volume_64)
    text = write_obj(mesh)
    back = read_obj(text)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    # write(read(x)) is a fixed point
    assert write_obj(back) == text


def test_obj_file_and_stream(tmp_path):
    mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]))
    path = str(tmp_path / "tri.obj")
    write_obj(mesh, path)
    np.testing.assert_array_equal(read_obj(path).vertices, mesh.vertices)
    buf = io.StringIO()
    write_obj(mesh, buf)
    np.testing.assert_array_equal(read_obj(io.StringIO(buf.getvalue())).triangles,
                                  mesh.triangles)


def test_obj_comments_and_slash_indices():
    mesh = read_obj("# header\n\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n")
    assert len(mesh.triangles) == 1


@pytest.mark.parametrize("text, line", [
    ("v 0 0\n", 1),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n", 4),
    ("v 0 0 0\nf 0 1 2\n", 2),
    ("vn 0 0 1\n", 1),
    ("v a b c\n", 1),
])
def test_obj_parse_errors_with_line_number(text, line):
    with pytest.raises(ObjParseError, match=f"line {line}:"):
        read_obj(text)


def test_signed_mesh_volume_examples():
    assert signed_mesh_volume(Mesh()) == 0.0
    # unit-ish tetrahedron with outward winding: volume 1/6
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tris = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    assert signed_mesh_volume(Mesh(verts, tris)) == pytest.approx(1.0 / 6.0)
    flipped = Mesh(verts, tris[:, ::-1])
    assert signed_mesh_volume(flipped) == pytest.approx(-1.0 / 6.0)
