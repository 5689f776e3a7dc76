"""Position-based cloth dynamics with ground contact and rigid control regions."""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial.transform import Rotation, Slerp

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import DeformableMesh, FloatArray, IntArray, vertex_frames
from clothloop.util.enum.warning_types import WarningTypes

logger = logging.getLogger("clothloop")

GROUND_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SimConfig:
    """Integrator and actuation parameters."""

    dt: float = 1 / 60
    iterations: int = 20
    gravity: float = 9.81
    damping: float = 0.98
    ground_friction: float = 0.5
    drag_steps: int = 20
    relax_steps: int = 50
    lift_ratio: float = 0.5

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> SimConfig:
        """Build from a converted settings dictionary."""
        return cls(
            dt=float(settings["SIM_DT"]),
            iterations=int(settings["SIM_ITERATIONS"]),
            gravity=float(settings["SIM_GRAVITY"]),
            damping=float(settings["SIM_DAMPING"]),
            ground_friction=float(settings["SIM_GROUND_FRICTION"]),
            drag_steps=int(settings["DRAG_STEPS"]),
            relax_steps=int(settings["RELAX_STEPS"]),
            lift_ratio=float(settings["PULL_LIFT_RATIO"]),
        )


@dataclass(eq=False)
class SimState:
    """Positions, velocities and pinned control vertices at one instant."""

    positions: FloatArray
    velocities: FloatArray
    pin_indices: IntArray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    pin_targets: FloatArray = field(default_factory=lambda: np.empty((0, 3)))
    time: float = 0.0

    def __post_init__(self) -> None:
        """Normalize array shapes and check the pins."""
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        self.pin_indices = np.asarray(self.pin_indices, dtype=np.int64).reshape(-1)
        self.pin_targets = np.asarray(self.pin_targets, dtype=float).reshape(-1, 3)
        if self.positions.shape != self.velocities.shape:
            msg = "positions and velocities must have the same shape"
            raise InputError(msg)
        if len(self.pin_indices) != len(self.pin_targets):
            msg = "every pinned vertex needs exactly one target"
            raise InputError(msg)
        if len(self.pin_indices) and (
            self.pin_indices.min() < 0 or self.pin_indices.max() >= len(self.positions)
        ):
            msg = f"pinned indices must lie in [0, {len(self.positions)})"
            raise InputError(msg)

    @classmethod
    def at_rest(cls, mesh: DeformableMesh) -> SimState:
        """State at the mesh's current positions with zero velocity and no pins."""
        return cls(mesh.vertices.copy(), np.zeros_like(mesh.vertices))

    def copy(self) -> SimState:
        """Deep copy."""
        return SimState(
            self.positions.copy(),
            self.velocities.copy(),
            self.pin_indices.copy(),
            self.pin_targets.copy(),
            self.time,
        )

    def with_pins(self, indices: ArrayLike, targets: ArrayLike) -> SimState:
        """Copy with the given pins replacing the current ones."""
        return SimState(
            self.positions.copy(),
            self.velocities.copy(),
            np.asarray(indices, dtype=np.int64),
            np.asarray(targets, dtype=float),
            self.time,
        )

    def released(self) -> SimState:
        """Copy without pins."""
        return self.with_pins(np.empty(0, dtype=np.int64), np.empty((0, 3)))

    def kinetic_energy(self) -> float:
        """Total kinetic energy with unit vertex masses."""
        return 0.5 * float(np.sum(self.velocities**2))


@dataclass(frozen=True)
class RigidPose:
    """Rotation plus translation of a control region."""

    rotation: Rotation
    translation: FloatArray

    @classmethod
    def from_frame(cls, frame: ArrayLike, origin: ArrayLike) -> RigidPose:
        """Pose whose rotation matrix columns are the given frame axes."""
        return cls(Rotation.from_matrix(np.asarray(frame, dtype=float)), np.asarray(origin, dtype=float))

    def apply(self, local: FloatArray) -> FloatArray:
        """Map local offsets to world positions."""
        return self.rotation.apply(local) + self.translation

    def rotated_local(self, rotation: Rotation) -> RigidPose:
        """Same origin, rotated about the region's own axes."""
        return RigidPose(self.rotation * rotation, self.translation)

    def translated(self, offset: ArrayLike) -> RigidPose:
        """Same orientation, moved by a world offset."""
        return RigidPose(self.rotation, self.translation + np.asarray(offset, dtype=float))


@dataclass(eq=False)
class ControlRegion:
    """A center vertex and its 1-ring, moved as one rigid body."""

    center: int
    members: IntArray
    offsets: FloatArray
    pose: RigidPose

    @classmethod
    def around(cls, mesh: DeformableMesh, center: int) -> ControlRegion:
        """Region at ``center`` posed in the vertex's current local frame.

        Args:
            mesh: The mesh at its current positions.
            center: Center vertex index.

        Returns:
            ControlRegion: The region with member offsets in the local frame.
        """
        if not 0 <= center < mesh.vertex_count:
            msg = f"control vertex {center} out of range [0, {mesh.vertex_count})"
            raise InputError(msg)
        members = np.concatenate([[center], mesh.topology.neighbors[center]]).astype(np.int64)
        frame = vertex_frames(mesh)[center]
        pose = RigidPose.from_frame(frame, mesh.vertices[center])
        offsets = pose.rotation.inv().apply(mesh.vertices[members] - pose.translation)
        return cls(center, members, offsets, pose)

    def member_targets(self, pose: RigidPose) -> FloatArray:
        """Member positions when the region sits at ``pose``."""
        return pose.apply(self.offsets)


def interpolate_poses(
    start: RigidPose, end: RigidPose, steps: int, lift: float = 0.0
) -> list[RigidPose]:
    """Slerp/lerp poses for substeps 1..steps (the last equals ``end``).

    ``lift`` raises the path by ``lift * sin(pi * alpha)`` so a pull arcs over
    the cloth instead of sliding through it.
    """
    slerp = Slerp([0.0, 1.0], Rotation.concatenate([start.rotation, end.rotation]))
    alphas = np.arange(1, steps + 1) / steps
    rotations = slerp(alphas)
    return [
        RigidPose(
            rotations[i],
            (1 - a) * start.translation + a * end.translation + [0.0, 0.0, lift * np.sin(np.pi * a)],
        )
        for i, a in enumerate(alphas)
    ]


class ClothSimulator:
    """Steps one cloth mesh; pins, regions and relaxation act on SimState copies."""

    def __init__(
        self,
        mesh: DeformableMesh,
        config: SimConfig | None = None,
        record: bool = False,  # noqa: FBT001, FBT002
    ) -> None:
        """Initialize the simulator.

        Args:
            mesh: Any mesh sharing the topology to simulate.
            config: Integrator parameters.
            record: Keep every stepped position array for a trajectory dump.
        """
        self.mesh = mesh
        self.config = config or SimConfig()
        self.record = record
        self.trajectory: list[FloatArray] = []

    def mesh_at(self, state: SimState) -> DeformableMesh:
        """The simulated mesh at a state's positions."""
        return self.mesh.with_vertices(state.positions)

    def step(self, state: SimState, dt: float | None = None) -> SimState:
        """Advance one time step.

        Semi-implicit Euler prediction, Gauss-Seidel stretch projection over
        edge color batches, ground clamping, pins applied last, and velocities
        recovered from the position change.

        Args:
            state: Current state (not modified).
            dt: Step size in seconds; the configured step when omitted.

        Returns:
            SimState: The next state.

        Raises:
            InputError: If ``dt`` is not positive.
            NumericalError: If a position becomes non-finite.
        """
        dt = self.config.dt if dt is None else dt
        p, v_next = self.integrate(state.positions, state.velocities, state.pin_indices, state.pin_targets, dt)
        if self.record:
            self.trajectory.append(p.copy())
        return SimState(p, v_next, state.pin_indices, state.pin_targets, state.time + dt)

    def integrate(
        self,
        x: FloatArray,
        v: FloatArray,
        pin_indices: IntArray,
        pin_targets: FloatArray,
        dt: float | None = None,
    ) -> tuple[FloatArray, FloatArray]:
        """One step on raw arrays with any leading batch shape (..., V, 3).

        Pin indices are shared by the batch; targets may carry the batch shape.
        """
        dt = self.config.dt if dt is None else dt
        if dt <= 0:
            msg = f"time step must be positive (got {dt})"
            raise InputError(msg)
        _check_finite(x, "input position")
        topo = self.mesh.topology
        v = v.copy()
        v[..., 2] -= self.config.gravity * dt
        v *= self.config.damping
        p = x + v * dt

        inv_mass = np.ones(x.shape[-2])
        inv_mass[pin_indices] = 0.0
        p[..., pin_indices, :] = pin_targets
        for _ in range(self.config.iterations):
            for batch in topo.edge_colors:
                a = topo.edges[batch, 0]
                b = topo.edges[batch, 1]
                w_sum = inv_mass[a] + inv_mass[b]
                active = w_sum > 0
                if not active.all():
                    a, b, w_sum, batch = a[active], b[active], w_sum[active], batch[active]  # noqa: PLW2901
                delta = p[..., b, :] - p[..., a, :]
                length = np.linalg.norm(delta, axis=-1)
                length = np.where(length > 0, length, 1.0)
                correction = ((length - topo.rest_lengths[batch]) / (w_sum * length))[..., None] * delta
                p[..., a, :] += inv_mass[a][:, None] * correction
                p[..., b, :] -= inv_mass[b][:, None] * correction
            np.maximum(p[..., 2], 0.0, out=p[..., 2])
            p[..., pin_indices, :] = pin_targets

        _check_finite(p, "position")
        v_next = (p - x) / dt
        contact = p[..., 2] <= GROUND_TOLERANCE
        v_xy = v_next[..., :2]
        v_xy[contact] *= 1.0 - self.config.ground_friction
        v_z = v_next[..., 2]
        v_z[contact] = np.maximum(v_z[contact], 0.0)
        return p, v_next

    def relax(
        self,
        state: SimState,
        steps: int | None = None,
        keep_pins: bool = False,  # noqa: FBT001, FBT002
    ) -> SimState:
        """Step freely (releasing pins unless ``keep_pins``) for ``steps`` steps."""
        steps = self.config.relax_steps if steps is None else steps
        current = state if keep_pins else state.released()
        for _ in range(steps):
            current = self.step(current)
        return current

    def drag_region(
        self,
        state: SimState,
        region: ControlRegion,
        target_pose: RigidPose,
        steps: int | None = None,
    ) -> SimState:
        """Drag one control region from its current pose to ``target_pose``."""
        return self.drag_regions(state, [region], [target_pose], steps)

    def drag_regions(
        self,
        state: SimState,
        regions: Sequence[ControlRegion],
        target_poses: Sequence[RigidPose],
        steps: int | None = None,
        point_pins: tuple[IntArray, FloatArray] | None = None,
        lift: float = 0.0,
    ) -> SimState:
        """Drag several regions together along interpolated rigid poses.

        Members of every region are pinned to their interpolated targets at
        each substep; other vertices follow through the stretch constraints.
        The returned state keeps the final pins.

        Args:
            state: Start state.
            regions: Regions posed at the start state.
            target_poses: One final pose per region.
            steps: Number of substeps (>= 1).
            point_pins: (indices, targets) of single vertices moved linearly
                from their current positions alongside the regions; region
                members override them.
            lift: Peak height added to the interpolated region path.

        Returns:
            SimState: State after the last substep, pins still applied.

        Raises:
            InputError: If ``steps < 1`` or any member target is below ground.
        """
        steps = self.config.drag_steps if steps is None else steps
        if steps < 1:
            msg = f"drag needs at least one substep (got {steps})"
            raise InputError(msg)
        if len(regions) != len(target_poses):
            msg = "each control region needs one target pose"
            raise InputError(msg)

        schedules = []
        for region, target in zip(regions, target_poses, strict=True):
            poses = interpolate_poses(region.pose, target, steps, lift)
            targets = np.stack([region.member_targets(pose) for pose in poses])
            if targets[..., 2].min() < -GROUND_TOLERANCE:
                msg = f"control region at vertex {region.center} would be dragged below the ground"
                raise InputError(msg)
            schedules.append(np.maximum(targets, [-np.inf, -np.inf, 0.0]))

        members = np.concatenate([r.members for r in regions]) if regions else np.empty(0, dtype=np.int64)
        if len(np.unique(members)) != len(members):
            logger.warning(
                "%s: %d vertices belong to more than one control region; the later region wins",
                WarningTypes.REGION_OVERLAP.name,
                len(members) - len(np.unique(members)),
            )
        if point_pins is not None:
            point_idx = np.asarray(point_pins[0], dtype=np.int64)
            point_start = state.positions[point_idx]
            point_end = np.asarray(point_pins[1], dtype=float).reshape(-1, 3)

        current = state
        for s in range(steps):
            targets = np.concatenate([sched[s] for sched in schedules]) if schedules else np.empty((0, 3))
            moving = None
            if point_pins is not None:
                alpha = (s + 1) / steps
                moving = (point_idx, (1 - alpha) * point_start + alpha * point_end)
            indices, pinned = merge_pins(moving, (members, targets))
            current = self.step(current.with_pins(indices, pinned))
        return current

    def pull_to_targets(
        self,
        state: SimState,
        grasp: Sequence[int],
        poses: Sequence[RigidPose],
        steps: int | None = None,
    ) -> SimState:
        """Grasp regions around ``grasp``, drag them to ``poses``, release and relax.

        The drag path is lifted by ``lift_ratio`` times the longest horizontal
        travel of any region.
        """
        mesh = self.mesh_at(state)
        regions = [ControlRegion.around(mesh, int(g)) for g in grasp]
        travel = max(
            (float(np.linalg.norm((p.translation - r.pose.translation)[:2])) for r, p in zip(regions, poses, strict=True)),
            default=0.0,
        )
        dragged = self.drag_regions(state, regions, poses, steps, lift=self.config.lift_ratio * travel)
        return self.relax(dragged)

    def pull_to_subgoal(
        self,
        state: SimState,
        grasp: Sequence[int],
        subgoal: DeformableMesh,
        steps: int | None = None,
    ) -> SimState:
        """Pull grasped vertices to their poses on a vertex-aligned subgoal.

        Args:
            state: Start state.
            grasp: One or two grasp vertex indices.
            subgoal: Target mesh with the same vertex order.
            steps: Drag substeps.

        Returns:
            SimState: Relaxed state after release.
        """
        if subgoal.vertex_count != self.mesh.vertex_count:
            msg = "subgoal is not vertex-aligned with the simulated mesh"
            raise InputError(msg)
        if not 1 <= len(grasp) <= 2:  # noqa: PLR2004
            msg = f"a pull grasps one or two vertices (got {len(grasp)})"
            raise InputError(msg)
        frames = vertex_frames(subgoal)
        poses = [RigidPose.from_frame(frames[g], subgoal.vertices[g]) for g in grasp]
        return self.pull_to_targets(state, grasp, poses, steps)

    def dump_trajectory(self, csv_path: Path, metadata: dict[str, Any]) -> None:
        """Write recorded positions as (step, vertex_id, x, y, z) rows plus a JSON sidecar."""
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with csv_path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "vertex_id", "x", "y", "z"])
            for step, positions in enumerate(self.trajectory):
                for vid, (x, y, z) in enumerate(positions):
                    writer.writerow([step, vid, f"{x:.9f}", f"{y:.9f}", f"{z:.9f}"])
        meta = {"dt": self.config.dt, "steps": len(self.trajectory), **metadata}
        csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def merge_pins(
    *pin_sets: tuple[IntArray, FloatArray] | None,
) -> tuple[IntArray, FloatArray]:
    """Combine pin sets; a later set overrides an earlier one on shared vertices."""
    merged: dict[int, FloatArray] = {}
    for pins in pin_sets:
        if pins is None:
            continue
        for idx, target in zip(pins[0], pins[1], strict=True):
            merged[int(idx)] = target
    if not merged:
        return np.empty(0, dtype=np.int64), np.empty((0, 3))
    indices = np.fromiter(merged.keys(), dtype=np.int64, count=len(merged))
    return indices, np.stack(list(merged.values()))


def _check_finite(positions: FloatArray, what: str) -> None:
    finite = np.isfinite(positions).all(axis=-1)
    if not finite.all():
        vertex = int(np.nonzero(~finite)[-1][0])
        msg = f"non-finite {what} at vertex {vertex}"
        raise NumericalError(msg)
