"""Geodesic keypoint heatmaps and oriented keypoint decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import (
    DeformableMesh,
    FloatArray,
    IntArray,
    PointCloud,
    geodesic_distances,
    nearest_vertices,
    vertex_frames,
)

ORTHONORMAL_TOLERANCE = 1e-6
ESTIMATION_FRACTIONS = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class CodecConfig:
    """Heatmap encoding and decoding parameters."""

    sigma: float = 0.15
    top_fraction: float = 0.05
    frame_radius: float = 0.06

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> CodecConfig:
        """Build from a converted settings dictionary."""
        return cls(
            sigma=float(settings["SIGMA"]),
            top_fraction=float(settings["TOP_FRACTION"]),
            frame_radius=float(settings["FRAME_RADIUS"]),
        )


@dataclass(frozen=True)
class KeypointAnnotation:
    """Ordered key vertices and the heatmap width."""

    key_vertices: tuple[int, ...]
    sigma: float = 0.15

    def __post_init__(self) -> None:
        """Check distinct indices and a positive sigma."""
        if len(set(self.key_vertices)) != len(self.key_vertices) or not self.key_vertices:
            msg = "key vertices must be a non-empty list of distinct indices"
            raise InputError(msg)
        if self.sigma <= 0:
            msg = f"sigma must be positive (got {self.sigma})"
            raise InputError(msg)

    def validate(self, mesh: DeformableMesh) -> None:
        """Check the key vertices exist on ``mesh``."""
        if min(self.key_vertices) < 0 or max(self.key_vertices) >= mesh.vertex_count:
            msg = f"key vertices must lie in [0, {mesh.vertex_count})"
            raise InputError(msg)


@dataclass(eq=False)
class Heatmap:
    """N x K per-point keypoint probabilities."""

    probs: FloatArray

    def __post_init__(self) -> None:
        """Check shape and range."""
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:  # noqa: PLR2004
            msg = f"heatmap must be N x K (got shape {self.probs.shape})"
            raise InputError(msg)
        if not np.all((self.probs >= 0) & (self.probs <= 1)):
            msg = "heatmap probabilities must lie in [0, 1]"
            raise InputError(msg)

    @property
    def keypoint_count(self) -> int:
        """K."""
        return self.probs.shape[1]


@dataclass(eq=False)
class OrientedKeypointSet:
    """Keypoint positions with right-handed frames (columns x, y, z)."""

    positions: FloatArray
    frames: FloatArray

    def __post_init__(self) -> None:
        """Check every frame is a rotation."""
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.frames = np.asarray(self.frames, dtype=float).reshape(-1, 3, 3)
        if len(self.positions) != len(self.frames):
            msg = "one frame is needed per keypoint"
            raise InputError(msg)
        gram = np.einsum("kji,kjl->kil", self.frames, self.frames)
        if not np.allclose(gram, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            msg = "keypoint frames must be orthonormal"
            raise InputError(msg)
        if not np.allclose(np.linalg.det(self.frames), 1.0, atol=ORTHONORMAL_TOLERANCE):
            msg = "keypoint frames must be right-handed"
            raise InputError(msg)

    def __len__(self) -> int:
        """Number of keypoints."""
        return len(self.positions)


def dist2prob(distance: ArrayLike, sigma: float) -> FloatArray:
    """Gaussian of the geodesic distance; infinite distances map to 0."""
    d = np.asarray(distance, dtype=float)
    return np.exp(-(d**2) / (2 * sigma**2))


def point_distances(mesh: DeformableMesh, points: FloatArray, key_vertices: ArrayLike) -> FloatArray:
    """(N, K) geodesic distance from each point's nearest vertex to each key vertex."""
    dist = geodesic_distances(mesh, np.asarray(key_vertices, dtype=np.int64))
    return dist[:, nearest_vertices(mesh, points)].T


def encode(mesh: DeformableMesh, cloud: PointCloud, ann: KeypointAnnotation) -> Heatmap:
    """Per-point keypoint probabilities for a cloud sampled from ``mesh``.

    Args:
        mesh: Mesh whose geodesics label the cloud.
        cloud: Observed points; each is snapped to its nearest vertex.
        ann: Key vertices and sigma.

    Returns:
        Heatmap: N x K probabilities.
    """
    ann.validate(mesh)
    return Heatmap(dist2prob(point_distances(mesh, cloud.points, ann.key_vertices), ann.sigma))


def inlier_count(n_points: int, top_fraction: float = 0.05) -> int:
    """Number of points kept per heatmap column."""
    return max(1, math.ceil(round(top_fraction * n_points, 9)))


def inlier_mask(heatmap: Heatmap, top_fraction: float = 0.05) -> NDArray[np.bool_]:
    """N x K mask of the top-probability points of each column (stable on ties)."""
    n = heatmap.probs.shape[0]
    keep = inlier_count(n, top_fraction)
    order = np.argsort(-heatmap.probs, axis=0, kind="stable")[:keep]
    mask = np.zeros_like(heatmap.probs, dtype=bool)
    np.put_along_axis(mask, order, values=True, axis=0)
    return mask


def decode_positions(heatmap: Heatmap, cloud: PointCloud, top_fraction: float = 0.05) -> FloatArray:
    """Weighted average of each column's inlier points.

    Args:
        heatmap: N x K probabilities.
        cloud: The N points the heatmap scores.
        top_fraction: Share of points kept per column.

    Returns:
        FloatArray: (K, 3) positions.

    Raises:
        InputError: If sizes disagree.
        NumericalError: If a column has no positive inlier weight.
    """
    if heatmap.probs.shape[0] != len(cloud):
        msg = f"heatmap has {heatmap.probs.shape[0]} rows for {len(cloud)} points"
        raise InputError(msg)
    weights = np.where(inlier_mask(heatmap, top_fraction), heatmap.probs, 0.0)
    totals = weights.sum(axis=0)
    if np.any(totals <= 0):
        k = int(np.flatnonzero(totals <= 0)[0])
        msg = f"keypoint {k} has an all-zero heatmap column"
        raise NumericalError(msg)
    return (weights / totals).T @ cloud.points


def decode_frames(
    positions: ArrayLike,
    cloud: PointCloud,
    normals: ArrayLike,
    midlines: ArrayLike,
    radius: float,
) -> OrientedKeypointSet:
    """Assemble keypoint frames from per-point normal and midline predictions.

    Args:
        positions: (K, 3) decoded positions.
        cloud: Points the direction predictions belong to.
        normals: (N, 3) predicted normals.
        midlines: (N, 3) predicted midline directions.
        radius: Neighborhood radius in meters.

    Returns:
        OrientedKeypointSet: Positions with orthonormalized frames.

    Raises:
        InputError: If a keypoint has no neighbor or the inputs disagree in size.
        NumericalError: If the midline average is parallel to the normal.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    midlines = np.asarray(midlines, dtype=float).reshape(-1, 3)
    if len(normals) != len(cloud) or len(midlines) != len(cloud):
        msg = "normals and midlines must have one row per cloud point"
        raise InputError(msg)
    neighborhoods = cKDTree(cloud.points).query_ball_point(positions, r=radius)
    frames = np.empty((len(positions), 3, 3))
    for k, idx in enumerate(neighborhoods):
        if not idx:
            msg = f"keypoint {k} has no cloud point within {radius} m"
            raise InputError(msg)
        z = normals[idx].mean(axis=0)
        z_norm = np.linalg.norm(z)
        x_raw = midlines[idx].mean(axis=0)
        x_raw_norm = np.linalg.norm(x_raw)
        if z_norm == 0 or x_raw_norm == 0:
            msg = f"keypoint {k} direction predictions cancel out"
            raise NumericalError(msg)
        z = z / z_norm
        x_raw = x_raw / x_raw_norm
        x = x_raw - (x_raw @ z) * z
        x_norm = np.linalg.norm(x)
        if x_norm < ORTHONORMAL_TOLERANCE:
            msg = f"keypoint {k} midline direction is parallel to its normal"
            raise NumericalError(msg)
        x = x / x_norm
        frames[k] = np.column_stack([x, np.cross(z, x), z])
    return OrientedKeypointSet(positions, frames)


def _mean_axis_angle(pred: FloatArray, truth: FloatArray) -> float:
    cos = np.clip(np.einsum("ki,ki->k", pred, truth), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def angular_error(pred: OrientedKeypointSet, truth: OrientedKeypointSet) -> tuple[float, float, float]:
    """Mean position error (m) and mean absolute z-axis and x-axis angles (degrees)."""
    if len(pred) != len(truth):
        msg = f"keypoint count mismatch: {len(pred)} vs {len(truth)}"
        raise InputError(msg)
    position = float(np.linalg.norm(pred.positions - truth.positions, axis=1).mean())
    z_error = _mean_axis_angle(pred.frames[:, :, 2], truth.frames[:, :, 2])
    x_error = _mean_axis_angle(pred.frames[:, :, 0], truth.frames[:, :, 0])
    return position, z_error, x_error


def midline_key_vertices(mesh: DeformableMesh, fractions: ArrayLike = ESTIMATION_FRACTIONS) -> IntArray:
    """Midline vertices closest to the given fractions of the midline's rest arc length."""
    rest = mesh.topology.rest_vertices[mesh.midline]
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(rest, axis=0), axis=1))])
    wanted = np.asarray(fractions, dtype=float) * arc[-1]
    picks = mesh.midline[np.argmin(np.abs(arc[None, :] - wanted[:, None]), axis=1)]
    if len(np.unique(picks)) != len(picks):
        msg = "midline is too coarse for the requested keypoint fractions"
        raise InputError(msg)
    return picks


def keypoints_from_mesh(mesh: DeformableMesh, key_vertices: ArrayLike) -> OrientedKeypointSet:
    """Exact oriented keypoints at mesh vertices."""
    idx = np.asarray(key_vertices, dtype=np.int64)
    return OrientedKeypointSet(mesh.vertices[idx], vertex_frames(mesh)[idx])
