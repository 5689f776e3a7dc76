import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from clothloop.errors import InputError
from clothloop.mesh import (
    DeformableMesh,
    PointCloud,
    chamfer,
    fold_line_success,
    geodesic_distances,
    make_strip,
    midline_directions,
    vertex_l2,
    vertex_normals,
)


def test_path_graph_geodesics() -> None:
    mesh = DeformableMesh.build(
        [[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 0]],
        [[0, 1, 3], [1, 2, 3]],
        [0, 1, 2],
    )
    dist = geodesic_distances(mesh, 0)
    assert dist[:3] == pytest.approx([0.0, 1.0, 2.0])


def test_geodesics_match_exhaustive_paths() -> None:
    mesh = make_strip(3.0, 2.0, 4, 3)
    n = mesh.vertex_count
    weights = {}
    for (a, b), length in zip(mesh.edges, mesh.rest_lengths, strict=True):
        weights[int(a), int(b)] = weights[int(b), int(a)] = float(length)
    best = np.full(n, np.inf)
    best[0] = 0.0

    def walk(path: list[int], length: float) -> None:
        tail = path[-1]
        best[tail] = min(best[tail], length)
        for nxt in range(n):
            if (tail, nxt) in weights and nxt not in path:
                walk([*path, nxt], length + weights[tail, nxt])

    walk([0], 0.0)
    assert geodesic_distances(mesh, 0) == pytest.approx(best)


def test_geodesics_symmetric_and_above_euclidean() -> None:
    mesh = make_strip(0.5, 0.1, 11, 5)
    dist = geodesic_distances(mesh, np.arange(mesh.vertex_count))
    assert np.allclose(dist, dist.T)
    assert np.all(np.diag(dist) == 0)
    euclid = np.linalg.norm(mesh.vertices[:, None] - mesh.vertices[None], axis=2)
    assert np.all(dist >= euclid - 1e-9)


def test_geodesic_source_out_of_range() -> None:
    with pytest.raises(InputError):
        geodesic_distances(make_strip(1.0, 0.2, 3, 3), 99)


def test_disconnected_mesh_rejected() -> None:
    with pytest.raises(InputError, match="connected components"):
        DeformableMesh.build(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]],
            [[0, 1, 2], [3, 4, 5]],
            [0, 1],
        )


def test_midline_must_be_connected() -> None:
    with pytest.raises(InputError, match="not connected"):
        DeformableMesh.build(
            [[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 0]],
            [[0, 1, 3], [1, 2, 3]],
            [0, 2],
        )


def test_flat_strip_normals_point_down() -> None:
    normals = vertex_normals(make_strip(0.5, 0.1, 11, 5))
    assert np.allclose(normals, [0.0, 0.0, -1.0])


@settings(max_examples=20, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
def test_normals_and_midlines_rotate_with_mesh(a: float, b: float, c: float) -> None:
    mesh = make_strip(0.5, 0.1, 11, 5)
    mesh.vertices[:, 2] = 0.02 * np.sin(mesh.vertices[:, 0] * 6)
    rotation = Rotation.from_euler("xyz", [a, b, c])
    rotated = mesh.with_vertices(rotation.apply(mesh.vertices))
    assert np.allclose(vertex_normals(rotated), rotation.apply(vertex_normals(mesh)), atol=1e-9)
    assert np.allclose(midline_directions(rotated), rotation.apply(midline_directions(mesh)), atol=1e-9)


def test_folded_half_flips_normals() -> None:
    mesh = make_strip(1.0, 0.2, 11, 3)
    folded = mesh.vertices.copy()
    right = folded[:, 0] > 0.5
    folded[right, 0] = 1.0 - folded[right, 0]
    folded[right, 2] = 0.05
    normals = vertex_normals(mesh.with_vertices(folded))
    assert np.allclose(normals[mesh.vertices[:, 0] < 0.45], [0, 0, -1])
    far = mesh.vertices[:, 0] > 0.65
    assert np.allclose(normals[far], [0, 0, 1])


def test_straight_midline_direction() -> None:
    assert np.allclose(midline_directions(make_strip(0.5, 0.1, 11, 5)), [1.0, 0.0, 0.0])


def test_bent_midline_direction() -> None:
    mesh = make_strip(1.0, 0.2, 11, 3)
    bent = mesh.vertices.copy()
    after = bent[:, 0] > 0.5
    bent[after, 0] = 0.5 - mesh.vertices[after, 1]
    bent[after, 1] = mesh.vertices[after, 0] - 0.5
    dirs = midline_directions(mesh.with_vertices(bent))
    assert np.allclose(dirs[mesh.vertices[:, 0] < 0.45], [1, 0, 0])
    assert np.allclose(dirs[mesh.vertices[:, 0] > 0.55], [0, 1, 0])


def test_midline_matches_polyline_tangents() -> None:
    rng = np.random.default_rng(3)
    mesh = make_strip(0.5, 0.1, 11, 5)
    moved = mesh.with_vertices(mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape))
    line = moved.vertices[moved.midline]
    tangents = np.diff(line, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    expected = tangents[mesh.topology.midline_segment]
    assert np.allclose(midline_directions(moved), expected, atol=1e-9)


def test_short_midline_rejected() -> None:
    mesh = DeformableMesh.build([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [0])
    with pytest.raises(InputError):
        midline_directions(mesh)


def test_chamfer_examples() -> None:
    assert chamfer(PointCloud([[0, 0, 0]]), PointCloud([[1, 0, 0]])) == pytest.approx(2.0)
    cloud = PointCloud(np.random.default_rng(0).random((10, 3)))
    assert chamfer(cloud, cloud) == 0.0


def test_chamfer_matches_brute_force() -> None:
    rng = np.random.default_rng(1)
    a, b = rng.random((10, 3)), rng.random((10, 3))
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    expected = d.min(axis=1).mean() + d.min(axis=0).mean()
    assert chamfer(a, b) == pytest.approx(expected)
    assert chamfer(b, a) == pytest.approx(expected)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_chamfer_rigid_invariance(seed: int) -> None:
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 3)), rng.random((9, 3))
    rotation = Rotation.random(random_state=seed)
    shift = rng.random(3)
    moved = chamfer(rotation.apply(a) + shift, rotation.apply(b) + shift)
    assert moved == pytest.approx(chamfer(a, b), abs=1e-9)


def test_chamfer_ignores_hidden_points() -> None:
    cloud = PointCloud([[0, 0, 0], [5, 0, 0]], visible=[True, False])
    assert chamfer(cloud, [[0, 0, 0]]) == 0.0


def test_vertex_l2() -> None:
    mesh = make_strip(0.5, 0.1, 11, 5)
    assert vertex_l2(mesh, mesh) == 0.0
    assert vertex_l2(mesh, mesh.vertices + [0.1, 0.0, 0.0]) == pytest.approx(0.1)
    rng = np.random.default_rng(2)
    other = rng.random(mesh.vertices.shape)
    expected = sum(np.sqrt(sum((p - q) ** 2)) for p, q in zip(mesh.vertices, other, strict=True)) / mesh.vertex_count
    assert vertex_l2(mesh, other) == pytest.approx(expected)


def test_vertex_l2_count_mismatch() -> None:
    with pytest.raises(InputError):
        vertex_l2(make_strip(0.5, 0.1, 11, 5), make_strip(0.5, 0.1, 5, 5))


def test_point_cloud_invariants() -> None:
    with pytest.raises(InputError):
        PointCloud(np.empty((0, 3)))
    with pytest.raises(InputError):
        PointCloud([[0, 0, 0]], visible=[True, False])


@pytest.mark.parametrize(("nx", "ny"), [(1, 3), (3, 4), (3, 1)])
def test_make_strip_rejects_bad_grids(nx: int, ny: int) -> None:
    with pytest.raises(InputError):
        make_strip(1.0, 0.2, nx, ny)


def test_make_strip_layout() -> None:
    mesh = make_strip(0.5, 0.1, 21, 5)
    assert mesh.vertex_count == 105
    assert len(mesh.midline) == 21
    assert np.allclose(mesh.vertices[mesh.midline, 1], 0.0)
    assert mesh.mean_edge_length > 0
    for a, b in itertools.pairwise(mesh.midline):
        assert b in mesh.topology.neighbors[a]


def test_fold_line_success() -> None:
    mesh = make_strip(0.5, 0.1, 11, 5)
    assert fold_line_success(mesh, [0.0, 0, 0], [1, 0, 0])
    assert not fold_line_success(mesh, [0.25, 0, 0], [1, 0, 0])
    assert fold_line_success(mesh, [0.25, 0, 0], [1, 0, 0], tolerance=0.25)
