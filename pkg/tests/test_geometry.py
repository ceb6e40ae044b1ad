import numpy as np
import pytest

from swept_sdf.exceptions import InputError, MeshError
from swept_sdf.geometry import (
    MeshDistanceIndex,
    TriangleMesh,
    build_index,
    closest_points_on_triangles,
    exact_winding_numbers,
    load_mesh,
    make_box,
    make_icosphere,
    save_mesh,
    sdf_gradient,
    sdf_hessian,
    signed_distance,
    unsigned_distance,
    winding_number,
)


def brute_force_distances(mesh, points):
    tri = mesh.triangles
    rows = np.repeat(points, len(tri), axis=0)
    cp = closest_points_on_triangles(
        rows, np.tile(tri[:, 0], (len(points), 1)), np.tile(tri[:, 1], (len(points), 1)),
        np.tile(tri[:, 2], (len(points), 1)),
    )
    return np.linalg.norm(rows - cp, axis=1).reshape(len(points), len(tri)).min(axis=1)


def shell_points(rng, n, inner, outer):
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    return directions * rng.uniform(inner, outer, size=(n, 1))


def test_primitives():
    """Face counts, volume and outward orientation of the built-in meshes"""
    box = make_box((1.0, 2.0, 3.0))
    assert len(box) == 12
    assert box.volume == pytest.approx(6.0)
    np.testing.assert_allclose(box.bounds, [[-0.5, -1.0, -1.5], [0.5, 1.0, 1.5]])
    for s in range(3):
        assert len(make_icosphere(s)) == 20 * 4 ** s
    sphere = make_icosphere(3)
    assert sphere.volume == pytest.approx(4.0 / 3.0 * np.pi, rel=1e-2)
    assert sphere.circumscribed_radius == pytest.approx(1.0)
    # face normals point away from the center
    centers = sphere.triangles.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", sphere.face_normals, centers) > 0)


def test_inward_mesh_is_flipped(cube):
    inward = TriangleMesh.from_arrays(cube.vertices, cube.faces[:, [0, 2, 1]])
    assert inward.volume == pytest.approx(1.0)


def test_open_and_empty_meshes(cube):
    with pytest.raises(MeshError, match="non-watertight"):
        TriangleMesh.from_arrays(cube.vertices, cube.faces[1:])
    with pytest.raises(MeshError, match="empty"):
        TriangleMesh.from_arrays(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    faces = cube.faces.copy()
    faces[0] = faces[0, [0, 2, 1]]
    with pytest.raises(MeshError, match="orientation"):
        TriangleMesh.from_arrays(cube.vertices, faces)


def test_degenerate_faces_are_dropped(cube):
    vertices = np.vstack([cube.vertices, cube.vertices[:1]])
    faces = np.vstack([cube.faces, [[0, 1, 0]]])
    cleaned = TriangleMesh.from_arrays(vertices, faces)
    assert len(cleaned) == 12
    assert len(cleaned.vertices) == 8


def test_obj_round_trip(tmp_path):
    sphere = make_icosphere(1)
    path = tmp_path / "sphere.obj"
    save_mesh(sphere, path)
    loaded = load_mesh(path)
    np.testing.assert_array_equal(loaded.vertices, sphere.vertices)
    np.testing.assert_array_equal(loaded.faces, sphere.faces)


def test_obj_polygons_and_negative_indices(tmp_path):
    path = tmp_path / "box.obj"
    lines = ["# unit cube with quads"]
    lines += ["v %g %g %g" % tuple(v) for v in make_box().vertices]
    lines += [
        "f -8/1 -6/2 -5/3 -7/4",
        "f 5 6 8 7",
        "f 1 2 6 5",
        "f 3 7 8 4",
        "f 1 5 7 3",
        "f 2 4 8 6",
    ]
    path.write_text("\n".join(lines) + "\n")
    mesh = load_mesh(path)
    assert len(mesh) == 12
    assert mesh.volume == pytest.approx(1.0)


def test_obj_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(MeshError, match="line 2"):
        load_mesh(path)


def test_stl_round_trip(tmp_path):
    sphere = make_icosphere(2)
    path = tmp_path / "sphere.stl"
    save_mesh(sphere, path)
    loaded = load_mesh(path)
    assert len(loaded) == len(sphere)
    assert len(loaded.vertices) == len(sphere.vertices)
    assert loaded.volume == pytest.approx(sphere.volume, rel=1e-5)


def test_ascii_stl(tmp_path, cube):
    facets = []
    for a, b, c in cube.triangles:
        facets.append("facet normal 0 0 0\nouter loop")
        facets += ["vertex %.17g %.17g %.17g" % tuple(v) for v in (a, b, c)]
        facets.append("endloop\nendfacet")
    path = tmp_path / "cube.stl"
    path.write_text("solid cube\n" + "\n".join(facets) + "\nendsolid cube\n")
    mesh = load_mesh(path)
    assert len(mesh.vertices) == 8
    assert mesh.volume == pytest.approx(1.0)


def test_unsupported_format(tmp_path):
    with pytest.raises(MeshError, match="unsupported"):
        load_mesh(tmp_path / "mesh.ply")


def test_index_is_deterministic(sphere):
    first = MeshDistanceIndex(sphere)
    second = build_index(sphere)
    np.testing.assert_array_equal(first.node_boxes(), second.node_boxes())
    np.testing.assert_array_equal(first.traversal_order(), second.traversal_order())
    assert sorted(first.traversal_order().tolist()) == list(range(len(sphere)))
    assert all(len(faces) <= first.leaf_size for _, faces in first.leaves())


def test_cube_distances(cube_index):
    """Face, edge and corner regions of the unit cube"""
    assert signed_distance(cube_index, [1.0, 0.2, 0.1]) == pytest.approx(0.5)
    assert signed_distance(cube_index, [1.0, 1.0, 0.1]) == pytest.approx(np.sqrt(0.5))
    assert signed_distance(cube_index, [1.0, 1.0, 1.0]) == pytest.approx(np.sqrt(0.75))
    assert signed_distance(cube_index, [0.0, 0.0, 0.0]) == pytest.approx(-0.5)
    assert signed_distance(cube_index, [0.3, 0.1, 0.0]) == pytest.approx(-0.2)
    assert signed_distance(cube_index, [0.5, 0.1, 0.2]) == pytest.approx(0.0, abs=1e-12)
    distance, closest, face = unsigned_distance(cube_index, [2.0, 0.1, -0.2])
    assert distance == pytest.approx(1.5)
    np.testing.assert_allclose(closest, [0.5, 0.1, -0.2])
    assert np.allclose(cube_index.mesh.face_normals[face], [1.0, 0.0, 0.0])


def test_matches_brute_force(sphere, sphere_index, rng):
    points = shell_points(rng, 200, 0.1, 2.0)
    np.testing.assert_allclose(
        sphere_index.closest_points(points).distances, brute_force_distances(sphere, points), atol=1e-12
    )


def test_unit_sphere_distances(unit_sphere_index, rng):
    points = shell_points(rng, 1000, 0.5, 3.0)
    signed = unit_sphere_index.signed_distances(points)
    np.testing.assert_allclose(signed, np.linalg.norm(points, axis=1) - 1.0, atol=5e-3)
    # the faceted sphere lies between its inscribed radius and the unit sphere
    mesh = unit_sphere_index.mesh
    inradius = np.abs(np.einsum("ij,ij->i", mesh.face_normals, mesh.triangles[:, 0])).min()
    radii = np.linalg.norm(points, axis=1)
    assert np.all(signed >= radii - 1.0 - 1e-12)
    assert np.all(signed <= radii - inradius + 1e-12)


def test_winding_numbers(cube, cube_index, unit_sphere_index, rng):
    assert winding_number(cube_index, [0.0, 0.0, 0.0]) == pytest.approx(1.0, abs=1e-9)
    assert winding_number(cube_index, [0.2, -0.1, 0.3]) == pytest.approx(1.0, abs=1e-9)
    exact = exact_winding_numbers(cube, [[0.1, 0.2, 0.3], [3.0, 0.0, 0.0], [0.0, -5.0, 2.0]])
    np.testing.assert_allclose(exact, [1.0, 0.0, 0.0], atol=1e-12)
    points = shell_points(rng, 1000, 0.0, 3.0)
    hierarchical = unit_sphere_index.winding_numbers(points)
    reference = exact_winding_numbers(unit_sphere_index.mesh, points)
    np.testing.assert_allclose(hierarchical, reference, atol=1e-4)
    assert np.array_equal(hierarchical > 0.5, reference > 0.5)


def test_far_field_expansion(sphere):
    """With the remainder bound switched off, every node past beta radii is expanded"""
    index = MeshDistanceIndex(sphere, beta=16.0, winding_tol=1e9)
    directions = np.array([[1.0, 0.0, 0.0], [0.3, -0.8, 0.52], [-0.6, 0.6, 0.6]])
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    points = np.concatenate([0.6 * directions, 1.5 * directions, 4.0 * directions])
    np.testing.assert_allclose(index.winding_numbers(points), exact_winding_numbers(sphere, points), atol=1e-4)


def test_index_parameters(cube):
    with pytest.raises(InputError, match="beta"):
        MeshDistanceIndex(cube, beta=1.0)
    with pytest.raises(InputError, match="winding_tol"):
        MeshDistanceIndex(cube, winding_tol=0.0)


def test_far_field_winding(cube_index):
    far = np.array([[10.0, 0.0, 0.0], [0.0, 7.0, -7.0], [20.0, 20.0, 20.0]])
    np.testing.assert_allclose(cube_index.winding_numbers(far), 0.0, atol=1e-6)


def test_cube_gradients(cube_index):
    np.testing.assert_allclose(sdf_gradient(cube_index, [1.0, 0.2, 0.1]), [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(sdf_gradient(cube_index, [0.3, 0.0, 0.05]), [1.0, 0.0, 0.0], atol=1e-12)
    edge = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    np.testing.assert_allclose(sdf_gradient(cube_index, [1.0, 1.0, 0.1]), edge, atol=1e-12)
    # on the surface the gradient comes from central differences
    np.testing.assert_allclose(sdf_gradient(cube_index, [0.5, 0.1, 0.2]), [1.0, 0.0, 0.0], atol=1e-6)


def test_cube_hessians(cube_index):
    np.testing.assert_allclose(sdf_hessian(cube_index, [1.0, 0.2, 0.1]), np.zeros((3, 3)), atol=1e-6)
    n = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    edge = (np.eye(3) - np.outer(n, n) - np.diag([0.0, 0.0, 1.0])) / np.sqrt(0.5)
    np.testing.assert_allclose(sdf_hessian(cube_index, [1.0, 1.0, 0.0]), edge, atol=1e-5)
    n = np.ones(3) / np.sqrt(3.0)
    corner = (np.eye(3) - np.outer(n, n)) / np.sqrt(0.75)
    np.testing.assert_allclose(sdf_hessian(cube_index, [1.0, 1.0, 1.0]), corner, atol=1e-5)


def test_transformed_mesh(cube):
    moved = cube.transformed(np.eye(3), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(moved.bounds, [[0.5, 1.5, 2.5], [1.5, 2.5, 3.5]])
    assert signed_distance(MeshDistanceIndex(moved), [1.0, 2.0, 3.0]) == pytest.approx(-0.5)
