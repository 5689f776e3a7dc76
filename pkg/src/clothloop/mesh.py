"""Deformable mesh geometry: geodesics, normals, midline field and set distances."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from clothloop.errors import InputError, NumericalError
from clothloop.util.enum.warning_types import WarningTypes

logger = logging.getLogger("clothloop")

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

_DEGENERATE_AREA2 = 1e-18
_PARALLEL_EPS = 1e-6


class MeshTopology:
    """Connectivity and rest metrics shared by every deformed copy of a mesh."""

    def __init__(
        self,
        faces: ArrayLike,
        midline: ArrayLike,
        rest_vertices: ArrayLike,
        side_flags: ArrayLike | None = None,
    ) -> None:
        """Build and validate the topology.

        Args:
            faces: (F, 3) vertex index triples.
            midline: Ordered vertex indices along the strip's central axis.
            rest_vertices: (V, 3) rest positions defining edge rest lengths.
            side_flags: Per-face +1/-1 side markers; all +1 when omitted.

        Raises:
            InputError: If any mesh invariant is violated.
        """
        self.rest_vertices = np.array(rest_vertices, dtype=float).reshape(-1, 3)
        self.faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        self.midline = np.array(midline, dtype=np.int64).reshape(-1)
        n = len(self.rest_vertices)
        if side_flags is None:
            self.side_flags = np.ones(len(self.faces), dtype=np.int64)
        else:
            self.side_flags = np.sign(np.array(side_flags, dtype=np.int64).reshape(-1))
        if len(self.side_flags) != len(self.faces) or np.any(self.side_flags == 0):
            msg = "side_flags must hold one non-zero marker per face"
            raise InputError(msg)
        if len(self.faces) == 0 or self.faces.min() < 0 or self.faces.max() >= n:
            msg = f"face indices must lie in [0, {n})"
            raise InputError(msg)

        pairs = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        pairs.sort(axis=1)
        self.edges = np.unique(pairs, axis=0)
        self.rest_lengths = np.linalg.norm(
            self.rest_vertices[self.edges[:, 0]] - self.rest_vertices[self.edges[:, 1]],
            axis=1,
        )
        if np.any(self.rest_lengths <= 0):
            bad = self.edges[np.argmin(self.rest_lengths)]
            msg = f"edge {tuple(int(i) for i in bad)} has zero rest length"
            raise InputError(msg)

        self.graph: csr_matrix = coo_matrix(
            (
                np.concatenate([self.rest_lengths, self.rest_lengths]),
                (
                    np.concatenate([self.edges[:, 0], self.edges[:, 1]]),
                    np.concatenate([self.edges[:, 1], self.edges[:, 0]]),
                ),
            ),
            shape=(n, n),
        ).tocsr()
        n_components, _ = connected_components(self.graph, directed=False)
        if n_components != 1:
            msg = f"mesh has {n_components} connected components; expected 1"
            raise InputError(msg)

        if len(np.unique(self.midline)) != len(self.midline):
            msg = "midline indices must be distinct"
            raise InputError(msg)
        if len(self.midline) and (self.midline.min() < 0 or self.midline.max() >= n):
            msg = f"midline indices must lie in [0, {n})"
            raise InputError(msg)
        for a, b in zip(self.midline[:-1], self.midline[1:], strict=True):
            if self.graph[a, b] == 0:
                msg = f"midline vertices {a} and {b} are not connected by an edge"
                raise InputError(msg)

    @property
    def vertex_count(self) -> int:
        """Number of vertices."""
        return len(self.rest_vertices)

    @cached_property
    def neighbors(self) -> list[IntArray]:
        """Sorted 1-ring neighbor indices of every vertex."""
        return [
            np.sort(self.graph.indices[self.graph.indptr[v] : self.graph.indptr[v + 1]])
            for v in range(self.vertex_count)
        ]

    @cached_property
    def edge_colors(self) -> list[IntArray]:
        """Edge batches in which no two edges share a vertex (greedy coloring)."""
        vertex_colors: list[set[int]] = [set() for _ in range(self.vertex_count)]
        colors = np.empty(len(self.edges), dtype=np.int64)
        for e, (a, b) in enumerate(self.edges):
            used = vertex_colors[a] | vertex_colors[b]
            color = 0
            while color in used:
                color += 1
            colors[e] = color
            vertex_colors[a].add(color)
            vertex_colors[b].add(color)
        return [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]

    @cached_property
    def mean_edge_length(self) -> float:
        """Mean rest edge length in meters."""
        return float(self.rest_lengths.mean())

    @cached_property
    def midline_segment(self) -> IntArray:
        """Index of the nearest midline segment of every vertex, in the rest configuration."""
        if len(self.midline) < 2:  # noqa: PLR2004
            msg = "midline needs at least 2 vertices"
            raise InputError(msg)
        starts = self.rest_vertices[self.midline[:-1]]
        ends = self.rest_vertices[self.midline[1:]]
        return np.argmin(
            _point_segment_distances(self.rest_vertices, starts, ends), axis=1
        )


def _point_segment_distances(
    points: FloatArray, starts: FloatArray, ends: FloatArray
) -> FloatArray:
    """(N, S) distances from every point to every segment."""
    seg = ends - starts
    seg_len2 = np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-300)
    rel = points[:, None, :] - starts[None, :, :]
    t = np.clip(np.einsum("nsk,sk->ns", rel, seg) / seg_len2, 0.0, 1.0)
    closest = starts[None, :, :] + t[..., None] * seg[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


@dataclass(eq=False)
class DeformableMesh:
    """Vertex positions over a shared, validated topology."""

    vertices: FloatArray
    topology: MeshTopology

    def __post_init__(self) -> None:
        """Check the vertex array against the topology."""
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        if len(self.vertices) != self.topology.vertex_count:
            msg = f"{len(self.vertices)} vertices given for a {self.topology.vertex_count}-vertex topology"
            raise InputError(msg)

    @classmethod
    def build(
        cls,
        vertices: ArrayLike,
        faces: ArrayLike,
        midline: ArrayLike,
        side_flags: ArrayLike | None = None,
        rest_vertices: ArrayLike | None = None,
    ) -> DeformableMesh:
        """Validate a mesh and return it at the given positions.

        Args:
            vertices: (V, 3) current positions in meters.
            faces: (F, 3) triangles.
            midline: Ordered midline vertex indices.
            side_flags: Per-face side markers.
            rest_vertices: Rest positions; defaults to ``vertices``.

        Returns:
            DeformableMesh: The validated mesh.
        """
        vertices = np.array(vertices, dtype=float).reshape(-1, 3)
        rest = vertices if rest_vertices is None else rest_vertices
        return cls(vertices, MeshTopology(faces, midline, rest, side_flags))

    def with_vertices(self, vertices: ArrayLike) -> DeformableMesh:
        """Same topology at new positions."""
        return DeformableMesh(np.array(vertices, dtype=float), self.topology)

    def copy(self) -> DeformableMesh:
        """Independent copy of the positions over the shared topology."""
        return self.with_vertices(self.vertices.copy())

    @property
    def faces(self) -> IntArray:
        """Triangles."""
        return self.topology.faces

    @property
    def edges(self) -> IntArray:
        """Undirected edges (sorted index pairs)."""
        return self.topology.edges

    @property
    def rest_lengths(self) -> FloatArray:
        """Edge rest lengths in meters."""
        return self.topology.rest_lengths

    @property
    def midline(self) -> IntArray:
        """Ordered midline vertex indices."""
        return self.topology.midline

    @property
    def side_flags(self) -> IntArray:
        """Per-face side markers."""
        return self.topology.side_flags

    @property
    def vertex_count(self) -> int:
        """Number of vertices."""
        return self.topology.vertex_count

    @property
    def mean_edge_length(self) -> float:
        """Mean rest edge length in meters."""
        return self.topology.mean_edge_length

    def as_cloud(self) -> PointCloud:
        """Vertices as a fully visible point cloud."""
        return PointCloud(self.vertices.copy())


@dataclass(eq=False)
class PointCloud:
    """3D points with an optional visibility mask."""

    points: FloatArray
    visible: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        """Validate shape and mask."""
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            msg = "point cloud is empty"
            raise InputError(msg)
        if self.visible is not None:
            self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
            if len(self.visible) != len(self.points):
                msg = f"visibility mask has {len(self.visible)} entries for {len(self.points)} points"
                raise InputError(msg)

    def __len__(self) -> int:
        """Number of points."""
        return len(self.points)

    def visible_points(self) -> FloatArray:
        """Points with the mask applied (all points when there is no mask)."""
        if self.visible is None:
            return self.points
        return self.points[self.visible]


def _as_points(value: PointCloud | DeformableMesh | ArrayLike) -> FloatArray:
    if isinstance(value, PointCloud):
        return value.visible_points()
    if isinstance(value, DeformableMesh):
        return value.vertices
    points = np.asarray(value, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        msg = "point set is empty"
        raise InputError(msg)
    return points


def geodesic_distances(mesh: DeformableMesh, source: int | ArrayLike) -> FloatArray:
    """Shortest-path distances over the edge graph weighted by rest lengths.

    Args:
        mesh: The mesh.
        source: One vertex index, or several (returns one row per source).

    Returns:
        FloatArray: (V,) or (S, V) distances; unreachable vertices are ``inf``.

    Raises:
        InputError: If a source index is out of range.
    """
    sources = np.atleast_1d(np.asarray(source, dtype=np.int64))
    if sources.min() < 0 or sources.max() >= mesh.vertex_count:
        msg = f"source vertex must lie in [0, {mesh.vertex_count})"
        raise InputError(msg)
    dist = dijkstra(mesh.topology.graph, directed=False, indices=sources)
    unreachable = int(np.isinf(dist).sum())
    if unreachable:
        logger.debug("%d vertex distances are unreachable (inf)", unreachable)
    return dist[0] if np.ndim(source) == 0 else dist


def face_normals(mesh: DeformableMesh) -> tuple[FloatArray, NDArray[np.bool_]]:
    """Area-weighted face normals oriented from the positive to the negative side.

    Returns:
        tuple: (F, 3) normals with magnitude twice the face area, and the
        mask of non-degenerate faces.
    """
    v = mesh.vertices[mesh.faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    oriented = -mesh.side_flags[:, None] * cross
    valid = np.einsum("ij,ij->i", cross, cross) > _DEGENERATE_AREA2
    return oriented, valid


def vertex_normals(mesh: DeformableMesh) -> FloatArray:
    """Unit normals: area-weighted average of incident non-degenerate faces.

    Raises:
        InputError: If every face around some vertex is degenerate.
    """
    oriented, valid = face_normals(mesh)
    if not valid.all():
        logger.warning(
            "%s: %d zero-area faces excluded from normal averaging",
            WarningTypes.DEGENERATE_FACE.name,
            int((~valid).sum()),
        )
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[valid, k], oriented[valid])
    norms = np.linalg.norm(acc, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        msg = f"vertex {bad} has no non-degenerate incident face"
        raise InputError(msg)
    return acc / norms[:, None]


def midline_directions(mesh: DeformableMesh) -> FloatArray:
    """Unit tangent of each vertex's nearest midline segment.

    The nearest segment is fixed in the rest configuration and its direction
    is the forward tangent ``line[i + 1] - line[i]`` at the current positions.

    Raises:
        InputError: If the midline has fewer than 2 vertices.
        NumericalError: If a midline segment has collapsed to zero length.
    """
    segment = mesh.topology.midline_segment
    line = mesh.vertices[mesh.midline]
    tangents = line[1:] - line[:-1]
    lengths = np.linalg.norm(tangents, axis=1)
    if np.any(lengths == 0):
        msg = f"midline segment {int(np.argmin(lengths))} has zero length"
        raise NumericalError(msg)
    return (tangents / lengths[:, None])[segment]


def orthonormal_frames(x_raw: FloatArray, z: FloatArray) -> FloatArray:
    """Assemble right-handed frames with columns (x, y, z) from raw axes.

    ``x`` is ``x_raw`` with its ``z`` component removed; ``y = z × x``.
    Rows whose ``x_raw`` is parallel to ``z`` get an arbitrary perpendicular ``x``.

    Args:
        x_raw: (K, 3) rough midline directions.
        z: (K, 3) unit normals.

    Returns:
        FloatArray: (K, 3, 3) rotation matrices.
    """
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    x = x_raw - np.einsum("ij,ij->i", x_raw, z)[:, None] * z
    norms = np.linalg.norm(x, axis=1)
    parallel = norms < _PARALLEL_EPS
    if parallel.any():
        helper = np.where(np.abs(z[parallel, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])  # noqa: PLR2004
        fallback = np.cross(helper, z[parallel])
        x[parallel] = fallback
        norms[parallel] = np.linalg.norm(fallback, axis=1)
    x = x / norms[:, None]
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=2)


def vertex_frames(mesh: DeformableMesh) -> FloatArray:
    """Oriented local frame (x = midline, z = normal) at every vertex."""
    return orthonormal_frames(midline_directions(mesh), vertex_normals(mesh))


def chamfer(
    a: PointCloud | DeformableMesh | ArrayLike, b: PointCloud | DeformableMesh | ArrayLike
) -> float:
    """Symmetric mean-of-nearest chamfer distance in meters."""
    pa = _as_points(a)
    pb = _as_points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(d_ab.mean() + d_ba.mean())


def vertex_l2(a: DeformableMesh | ArrayLike, b: DeformableMesh | ArrayLike) -> float:
    """Mean Euclidean distance between corresponding vertices.

    Raises:
        InputError: If the vertex counts differ.
    """
    va = a.vertices if isinstance(a, DeformableMesh) else np.asarray(a, dtype=float)
    vb = b.vertices if isinstance(b, DeformableMesh) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        msg = f"vertex count mismatch: {len(va)} vs {len(vb)}"
        raise InputError(msg)
    return float(np.linalg.norm(va - vb, axis=1).mean())


def nearest_vertices(mesh: DeformableMesh, points: ArrayLike) -> IntArray:
    """Index of the nearest mesh vertex for every point."""
    _, idx = cKDTree(mesh.vertices).query(np.asarray(points, dtype=float).reshape(-1, 3))
    return np.asarray(idx, dtype=np.int64)


def make_strip(
    length: float,
    width: float,
    nx: int,
    ny: int,
    origin: ArrayLike = (0.0, 0.0, 0.0),
) -> DeformableMesh:
    """Flat rectangular strip in the z=origin plane, long axis along +x.

    Quads are split along alternating diagonals; every face is wound so its
    right-hand normal points to +z (the positive side faces up).

    Args:
        length: Extent along x in meters.
        width: Extent along y in meters (centered on the origin's y).
        nx: Vertices along x (>= 2).
        ny: Vertices along y (odd, so the midline is a vertex row).
        origin: Position of the strip's x=0 end on the midline.

    Returns:
        DeformableMesh: The strip at rest.

    Raises:
        InputError: For a too coarse grid or an even ``ny``.
    """
    if nx < 2 or ny < 3 or ny % 2 == 0:  # noqa: PLR2004
        msg = f"strip grid needs nx >= 2 and odd ny >= 3 (got {nx} x {ny})"
        raise InputError(msg)
    xs = np.linspace(0.0, length, nx)
    ys = np.linspace(-width / 2, width / 2, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)], axis=1)
    vertices += np.asarray(origin, dtype=float)

    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            v00, v10 = i * ny + j, (i + 1) * ny + j
            v01, v11 = i * ny + j + 1, (i + 1) * ny + j + 1
            if (i + j) % 2 == 0:
                faces += [(v00, v10, v11), (v00, v11, v01)]
            else:
                faces += [(v00, v10, v01), (v10, v11, v01)]
    midline = [i * ny + ny // 2 for i in range(nx)]
    return DeformableMesh.build(vertices, faces, midline)


def fold_line_success(
    mesh: DeformableMesh, line_point: ArrayLike, line_normal: ArrayLike, tolerance: float = 0.0
) -> bool:
    """Whether every vertex lies on one side of a vertical folding plane.

    Args:
        mesh: The folded cloth.
        line_point: A point on the folding line.
        line_normal: Horizontal normal of the folding line, pointing to the
            side the cloth must stay on.
        tolerance: Allowed overshoot in meters.

    Returns:
        bool: True when no vertex crosses to the other side.
    """
    normal = np.asarray(line_normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    signed = (mesh.vertices - np.asarray(line_point, dtype=float)) @ normal
    return bool(np.all(signed >= -tolerance))
