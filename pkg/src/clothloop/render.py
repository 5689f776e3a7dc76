"""Depth-camera stand-in: surface sampling, pinhole culling and ray-cast visibility."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from clothloop.errors import InputError
from clothloop.mesh import DeformableMesh, FloatArray, IntArray, PointCloud

_RAY_CHUNK = 256
_MAX_ROUNDS = 20


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking from ``position`` toward ``target``."""

    position: tuple[float, float, float] = (0.5, 0.0, 1.5)
    target: tuple[float, float, float] = (0.5, 0.0, 0.0)
    fov_deg: float = 60.0
    width: int = 160
    height: int = 120

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Camera:
        """Build from a scenario ``camera`` block."""
        return cls(
            position=tuple(data.get("position", cls.position)),
            target=tuple(data.get("target", cls.target)),
            fov_deg=float(data.get("fov_deg", cls.fov_deg)),
            width=int(data.get("width", cls.width)),
            height=int(data.get("height", cls.height)),
        )

    def axes(self) -> FloatArray:
        """Rows: right, down, forward."""
        forward = np.asarray(self.target, dtype=float) - np.asarray(self.position, dtype=float)
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 0.99:  # noqa: PLR2004
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def project(self, points: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Pixel coordinates (u, v) and depth of world points."""
        cam = (points - np.asarray(self.position, dtype=float)) @ self.axes().T
        focal = (self.width / 2) / math.tan(math.radians(self.fov_deg) / 2)
        depth = cam[:, 2]
        safe = np.where(depth > 0, depth, np.inf)
        u = focal * cam[:, 0] / safe + self.width / 2
        v = focal * cam[:, 1] / safe + self.height / 2
        return u, v, depth

    def in_view(self, points: FloatArray) -> NDArray[np.bool_]:
        """Points in front of the camera that land inside the image."""
        u, v, depth = self.project(points)
        return (depth > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def face_areas(mesh: DeformableMesh) -> FloatArray:
    """Triangle areas at the current positions."""
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_surface(
    mesh: DeformableMesh, n: int, rng: np.random.Generator
) -> tuple[FloatArray, IntArray, FloatArray]:
    """Area-weighted uniform samples on the mesh surface.

    Returns:
        tuple: (n, 3) points, their face indices, and (n, 3) barycentric weights.
    """
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        msg = "mesh has no surface area to sample"
        raise InputError(msg)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[faces]]
    return np.einsum("ni,nij->nj", bary, tri), faces, bary


def occluded(mesh: DeformableMesh, origin: ArrayLike, points: FloatArray, own_faces: IntArray) -> NDArray[np.bool_]:
    """Whether any triangle blocks the segment from ``origin`` to each point.

    Möller-Trumbore against every face; a point's own face is ignored.
    """
    origin = np.asarray(origin, dtype=float)
    tri = mesh.vertices[mesh.faces]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    tvec = origin - v0
    qvec = np.cross(tvec, e1)
    blocked = np.zeros(len(points), dtype=bool)
    for start in range(0, len(points), _RAY_CHUNK):
        d = points[start : start + _RAY_CHUNK] - origin
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("fk,pfk->pf", e1, pvec)
        ok = np.abs(det) > 1e-14  # noqa: PLR2004
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("fk,pfk->pf", tvec, pvec) * inv
        v = (d @ qvec.T) * inv
        t = np.einsum("fk,fk->f", e2, qvec)[None, :] * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9) & (t < 1 - 1e-6)  # noqa: PLR2004
        rows = np.arange(len(d))
        hit[rows, own_faces[start : start + _RAY_CHUNK]] = False
        blocked[start : start + _RAY_CHUNK] = hit.any(axis=1)
    return blocked


@dataclass(eq=False)
class RenderedCloud:
    """A rendered observation plus where each point came from."""

    cloud: PointCloud
    faces: IntArray
    bary: FloatArray

    def interpolate(self, mesh: DeformableMesh, per_vertex: FloatArray, normalize: bool = False) -> FloatArray:  # noqa: FBT001, FBT002
        """Barycentric interpolation of a per-vertex field at the rendered points."""
        values = np.einsum("ni,nij->nj", self.bary, per_vertex[mesh.faces[self.faces]])
        if normalize:
            values /= np.maximum(np.linalg.norm(values, axis=1, keepdims=True), 1e-12)
        return values


def render(
    mesh: DeformableMesh,
    camera: Camera,
    n_points: int,
    rng: np.random.Generator,
    depth_noise: float = 0.0,
    visibility: bool = True,  # noqa: FBT001, FBT002
) -> RenderedCloud:
    """Sample ``n_points`` camera-visible surface points.

    Candidates are drawn area-weighted, culled to the image and, when
    ``visibility`` is set, to points no triangle hides from the camera.
    Depth noise moves points along their camera ray.

    Raises:
        InputError: If too little of the surface is visible.
    """
    kept_points, kept_faces, kept_bary = [], [], []
    count = 0
    for _ in range(_MAX_ROUNDS):
        points, faces, bary = sample_surface(mesh, 2 * n_points, rng)
        keep = camera.in_view(points)
        if visibility:
            keep &= ~occluded(mesh, camera.position, points, faces)
        kept_points.append(points[keep])
        kept_faces.append(faces[keep])
        kept_bary.append(bary[keep])
        count += int(keep.sum())
        if count >= n_points:
            break
    else:
        msg = f"only {count} of {n_points} requested points are visible to the camera"
        raise InputError(msg)
    points = np.concatenate(kept_points)[:n_points]
    faces = np.concatenate(kept_faces)[:n_points]
    bary = np.concatenate(kept_bary)[:n_points]
    if depth_noise > 0:
        rays = points - np.asarray(camera.position, dtype=float)
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        points = points + rays * rng.normal(0.0, depth_noise, (len(points), 1))
    return RenderedCloud(PointCloud(points), faces, bary)
