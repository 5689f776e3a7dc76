import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import chamfer, make_strip, vertex_frames, vertex_l2, vertex_normals
from clothloop.sim import (
    ClothSimulator,
    ControlRegion,
    RigidPose,
    SimConfig,
    SimState,
    interpolate_poses,
    merge_pins,
)
from clothloop.util.serialize import read_rows


def strip():
    return make_strip(0.5, 0.1, 11, 5)


def test_rest_state_is_equilibrium_without_gravity() -> None:
    mesh = strip()
    sim = ClothSimulator(mesh, SimConfig(gravity=0.0))
    state = sim.step(SimState.at_rest(mesh))
    assert np.allclose(state.positions, mesh.vertices, atol=1e-9)


def test_stretched_edge_shortens() -> None:
    mesh = strip()
    a, b = mesh.edges[0]
    stretched = mesh.vertices.copy()
    stretched[b] = stretched[a] + 2 * (stretched[b] - stretched[a])
    sim = ClothSimulator(mesh, SimConfig(gravity=0.0, iterations=1))
    before = np.linalg.norm(stretched[b] - stretched[a])
    after = sim.step(SimState(stretched, np.zeros_like(stretched)))
    assert np.linalg.norm(after.positions[b] - after.positions[a]) < before


def test_free_fall_matches_ballistics() -> None:
    mesh = strip()
    lifted = mesh.vertices + [0.0, 0.0, 1.0]
    dt = 0.01
    sim = ClothSimulator(mesh, SimConfig(dt=dt, damping=1.0))
    state = SimState(lifted, np.zeros_like(lifted))
    for _ in range(10):
        state = sim.step(state)
    drop = lifted[0, 2] - state.positions[0, 2]
    # Semi-implicit Euler: g dt^2 n(n+1)/2
    assert drop == pytest.approx(9.81 * dt**2 * 55, rel=1e-6)
    assert drop == pytest.approx(0.049, abs=0.006)


def test_ground_is_never_penetrated() -> None:
    mesh = strip()
    sim = ClothSimulator(mesh)
    state = SimState(mesh.vertices + [0, 0, 0.05], np.tile([0.0, 0.0, -3.0], (mesh.vertex_count, 1)))
    for _ in range(30):
        state = sim.step(state)
        assert state.positions[:, 2].min() >= -1e-6


def test_kinetic_energy_does_not_grow_without_gravity() -> None:
    mesh = strip()
    sim = ClothSimulator(mesh, SimConfig(gravity=0.0))
    drift = np.tile([0.3, -0.1, 0.2], (mesh.vertex_count, 1))
    state = SimState(mesh.vertices + [0, 0, 0.2], drift)
    energy = state.kinetic_energy()
    for _ in range(20):
        state = sim.step(state)
        assert state.kinetic_energy() <= energy + 1e-12
        energy = state.kinetic_energy()

    rng = np.random.default_rng(0)
    state = SimState(mesh.vertices + [0, 0, 0.2], 0.1 * rng.standard_normal(mesh.vertices.shape))
    start = state.kinetic_energy()
    for _ in range(20):
        state = sim.step(state)
    assert state.kinetic_energy() < start


def test_non_positive_dt_rejected() -> None:
    mesh = strip()
    with pytest.raises(InputError):
        ClothSimulator(mesh).step(SimState.at_rest(mesh), dt=0.0)


def test_nan_state_names_vertex() -> None:
    mesh = strip()
    positions = mesh.vertices.copy()
    positions[7, 1] = np.nan
    with pytest.raises(NumericalError, match="vertex 7"):
        ClothSimulator(mesh).step(SimState(positions, np.zeros_like(positions)))


def test_state_validates_pins() -> None:
    mesh = strip()
    with pytest.raises(InputError):
        SimState.at_rest(mesh).with_pins([mesh.vertex_count], [[0, 0, 0]])
    with pytest.raises(InputError):
        SimState.at_rest(mesh).with_pins([0, 1], [[0, 0, 0]])


def test_pins_end_at_targets() -> None:
    mesh = strip()
    target = mesh.vertices[3] + [0.0, 0.0, 0.2]
    state = ClothSimulator(mesh).step(SimState.at_rest(mesh).with_pins([3], [target]))
    assert np.array_equal(state.positions[3], target)


def test_simulation_is_deterministic() -> None:
    mesh = strip()
    region = ControlRegion.around(mesh, int(mesh.midline[-1]))
    target = region.pose.translated([0.0, 0.0, 0.1])
    runs = [ClothSimulator(mesh).drag_region(SimState.at_rest(mesh), region, target, 10) for _ in range(2)]
    assert np.array_equal(runs[0].positions, runs[1].positions)


def test_region_members_are_center_and_ring() -> None:
    mesh = strip()
    center = int(mesh.midline[5])
    region = ControlRegion.around(mesh, center)
    assert region.members[0] == center
    assert set(region.members[1:]) == set(mesh.topology.neighbors[center])
    assert np.allclose(region.member_targets(region.pose), mesh.vertices[region.members])


def test_drag_to_current_pose_keeps_members_still() -> None:
    mesh = strip()
    region = ControlRegion.around(mesh, int(mesh.midline[5]))
    out = ClothSimulator(mesh).drag_region(SimState.at_rest(mesh), region, region.pose, 5)
    assert np.allclose(out.positions[region.members], mesh.vertices[region.members], atol=1e-12)


def test_drag_translation_moves_center() -> None:
    mesh = strip()
    center = int(mesh.midline[-1])
    region = ControlRegion.around(mesh, center)
    out = ClothSimulator(mesh).drag_region(SimState.at_rest(mesh), region, region.pose.translated([0, 0, 0.1]), 10)
    assert out.positions[center] == pytest.approx(mesh.vertices[center] + [0, 0, 0.1], abs=1e-6)


def test_members_follow_interpolated_targets() -> None:
    mesh = strip()
    region = ControlRegion.around(mesh, int(mesh.midline[-1]))
    end = region.pose.translated([-0.1, 0.0, 0.15])
    sim = ClothSimulator(mesh, record=True)
    sim.drag_region(SimState.at_rest(mesh), region, end, 4)
    for positions, pose in zip(sim.trajectory, interpolate_poses(region.pose, end, 4), strict=True):
        assert np.allclose(positions[region.members], region.member_targets(pose))


def test_half_turn_about_region_axis_flips_normals() -> None:
    mesh = strip()
    center = int(mesh.midline[5])
    region = ControlRegion.around(mesh, center)
    lifted = region.pose.translated([0.0, 0.0, 0.1])
    flipped = lifted.rotated_local(Rotation.from_euler("x", 180, degrees=True))
    sim = ClothSimulator(mesh, SimConfig(gravity=0.0))
    up = sim.drag_region(SimState.at_rest(mesh), region, lifted, 5)
    out = sim.drag_region(up, ControlRegion.around(sim.mesh_at(up), center), flipped, 20)
    normal = vertex_normals(sim.mesh_at(out))[center]
    assert normal @ vertex_normals(mesh)[center] < 0


def test_drag_below_ground_rejected() -> None:
    mesh = strip()
    region = ControlRegion.around(mesh, int(mesh.midline[5]))
    with pytest.raises(InputError, match="below the ground"):
        ClothSimulator(mesh).drag_region(SimState.at_rest(mesh), region, region.pose.translated([0, 0, -0.1]), 5)


def test_drag_needs_a_substep() -> None:
    mesh = strip()
    region = ControlRegion.around(mesh, 0)
    with pytest.raises(InputError):
        ClothSimulator(mesh).drag_region(SimState.at_rest(mesh), region, region.pose, 0)


def test_interpolate_poses_ends_at_target() -> None:
    start = RigidPose(Rotation.identity(), np.zeros(3))
    end = RigidPose(Rotation.from_euler("z", 90, degrees=True), np.array([1.0, 0.0, 0.0]))
    poses = interpolate_poses(start, end, 4, lift=0.2)
    assert len(poses) == 4
    assert np.allclose(poses[-1].translation, end.translation)
    assert np.allclose(poses[-1].rotation.as_matrix(), end.rotation.as_matrix())
    assert poses[1].translation[2] == pytest.approx(0.2)


def test_merge_pins_later_set_wins() -> None:
    indices, targets = merge_pins(
        (np.array([1, 2]), np.array([[0, 0, 0], [0, 0, 0.0]])),
        None,
        (np.array([2]), np.array([[1.0, 1.0, 1.0]])),
    )
    assert dict(zip(indices.tolist(), targets.tolist(), strict=True)) == {1: [0, 0, 0], 2: [1, 1, 1]}


def test_pull_to_current_subgoal_does_not_worsen() -> None:
    mesh = strip()
    sim = ClothSimulator(mesh)
    grasp = [int(mesh.midline[-1])]
    out = sim.pull_to_subgoal(SimState.at_rest(mesh), grasp, mesh)
    assert vertex_l2(sim.mesh_at(out), mesh) <= 1e-6
    assert np.linalg.norm(out.positions[grasp[0]] - mesh.vertices[grasp[0]]) <= 1e-6


def test_pull_both_ends_translates_strip() -> None:
    mesh = strip()
    subgoal = mesh.with_vertices(mesh.vertices + [0.0, 0.1, 0.0])
    sim = ClothSimulator(mesh)
    grasp = [int(mesh.midline[0]), int(mesh.midline[-1])]
    out = sim.pull_to_subgoal(SimState.at_rest(mesh), grasp, subgoal)
    assert vertex_l2(sim.mesh_at(out), subgoal) < 0.02


def test_pull_free_end_into_half_fold() -> None:
    mesh = strip()
    sim = ClothSimulator(mesh)
    region = ControlRegion.around(mesh, int(mesh.midline[-1]))
    flip = region.pose.rotated_local(Rotation.from_euler("y", 175, degrees=True)).translated([-0.25, 0.0, 0.012])
    folded = sim.mesh_at(sim.relax(sim.drag_regions(SimState.at_rest(mesh), [region], [flip], 30, lift=0.1)))
    out = sim.pull_to_subgoal(SimState.at_rest(mesh), [int(mesh.midline[-1])], folded)
    assert chamfer(sim.mesh_at(out), folded) < 2 * mesh.mean_edge_length


def test_pull_validates_grasp_and_subgoal() -> None:
    mesh = strip()
    sim = ClothSimulator(mesh)
    with pytest.raises(InputError):
        sim.pull_to_subgoal(SimState.at_rest(mesh), [0, 1, 2], mesh)
    with pytest.raises(InputError):
        sim.pull_to_subgoal(SimState.at_rest(mesh), [0], make_strip(0.5, 0.1, 5, 5))


def test_region_frame_matches_vertex_frame() -> None:
    mesh = strip()
    center = int(mesh.midline[3])
    region = ControlRegion.around(mesh, center)
    assert np.allclose(region.pose.rotation.as_matrix(), vertex_frames(mesh)[center])


def test_dump_trajectory(tmp_path) -> None:
    mesh = make_strip(0.2, 0.1, 3, 3)
    sim = ClothSimulator(mesh, record=True)
    sim.relax(SimState.at_rest(mesh), steps=2)
    path = tmp_path / "trajectory.csv"
    sim.dump_trajectory(path, {"seed": 4, "scenario": "unit"})
    rows = read_rows(path)
    assert len(rows) == 2 * mesh.vertex_count
    assert list(rows[0]) == ["step", "vertex_id", "x", "y", "z"]
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta == {"dt": sim.config.dt, "steps": 2, "seed": 4, "scenario": "unit"}
