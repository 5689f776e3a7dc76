import numpy as np
import pytest

from clothloop.distill import (
    GRASP_SLOTS,
    PLACE_OUTPUTS,
    DistillConfig,
    Student,
    distill_dataset,
    distill_train,
    make_pair,
    place_targets,
    student_rollouts,
    teacher_rollouts,
)
from clothloop.errors import InputError
from clothloop.heatmap import CodecConfig
from clothloop.logs import clear_warnings, get_warnings
from clothloop.mesh import make_strip, vertex_frames
from clothloop.policy import ActorCritic, GraspEnv, RewardConfig
from clothloop.regressor import TrainConfig
from clothloop.render import Camera
from clothloop.util.enum.warning_types import WarningTypes

CAMERA = Camera(position=(0.25, 0.0, 1.0), target=(0.25, 0.0, 0.0))
TINY_TRAIN = TrainConfig(epochs=2, batch_size=4, encoder=(8, 16), decoder=8)


def strip():
    return make_strip(0.5, 0.1, 11, 5)


def tiny_config(**kwargs) -> DistillConfig:
    base = {"pairs": 4, "cloud_points": 100, "camera": CAMERA, "train": TINY_TRAIN}
    return DistillConfig(**{**base, **kwargs})


def easy_env(threshold: float = 1e6) -> GraspEnv:
    mesh = strip()
    return GraspEnv(mesh, [mesh, mesh], RewardConfig(thresholds=(threshold, threshold)), candidates=3)


def test_place_targets_mask_unused_slot() -> None:
    mesh = strip()
    grasp = [int(mesh.midline[-1])]
    target, mask = place_targets(mesh, grasp)
    assert target.shape == mask.shape == (PLACE_OUTPUTS,)
    slots = target.reshape(GRASP_SLOTS, 3, 3)
    assert np.allclose(slots[0, 0], mesh.vertices[grasp[0]])
    assert np.allclose(slots[0, 1], vertex_frames(mesh)[grasp[0]][:, 0])
    assert np.allclose(slots[0, 2], vertex_frames(mesh)[grasp[0]][:, 2])
    assert mask.reshape(GRASP_SLOTS, 9)[0].all()
    assert not mask.reshape(GRASP_SLOTS, 9)[1].any()


def test_single_grasp_pair_leaves_second_column_empty() -> None:
    mesh = strip()
    pair = make_pair(mesh, mesh, [int(mesh.midline[0])], tiny_config(), np.random.default_rng(0))
    assert pair.heatmap.shape == (len(pair.cloud), GRASP_SLOTS)
    assert pair.heatmap[:, 0].max() > 0.5
    assert not pair.heatmap[:, 1].any()
    assert np.allclose(pair.grasp_positions, mesh.vertices[[int(mesh.midline[0])]])


def test_double_grasp_pair_fills_both_columns() -> None:
    mesh = strip()
    grasp = [int(mesh.midline[0]), int(mesh.midline[-1])]
    pair = make_pair(mesh, mesh, grasp, tiny_config(), np.random.default_rng(1))
    assert pair.heatmap[:, 1].max() > 0.5
    assert pair.place_mask.all()


def test_dataset_has_exact_size() -> None:
    env = easy_env()
    teacher = ActorCritic(env.state_size, env.action_count, np.random.default_rng(2), hidden=8)
    pairs, failures = distill_dataset(teacher, env, 5, tiny_config(), seed=3)
    assert len(pairs) == 5
    assert failures == 0
    assert all(1 <= len(p.grasp) <= GRASP_SLOTS for p in pairs)


def test_failing_teacher_is_an_input_error() -> None:
    clear_warnings()
    mesh = strip()
    far = mesh.with_vertices(mesh.vertices + [0.0, 0.3, 0.0])
    env = GraspEnv(mesh, [far], RewardConfig(thresholds=(1e-9,)), candidates=3)
    teacher = ActorCritic(env.state_size, env.action_count, np.random.default_rng(4), hidden=8)
    with pytest.raises(InputError, match="teacher failed"):
        distill_dataset(teacher, env, 1, tiny_config(), seed=5)
    with pytest.raises(InputError):
        distill_dataset(teacher, env, 0, tiny_config(), seed=5)


def test_dataset_is_deterministic() -> None:
    env = easy_env()
    teacher = ActorCritic(env.state_size, env.action_count, np.random.default_rng(6), hidden=8)
    first, _ = distill_dataset(teacher, env, 3, tiny_config(), seed=7)
    second, _ = distill_dataset(teacher, env, 3, tiny_config(threads=2), seed=7)
    for a, b in zip(first, second, strict=True):
        assert a.grasp == b.grasp
        assert np.array_equal(a.cloud.points, b.cloud.points)


def test_train_holds_out_pairs(tmp_path) -> None:
    env = easy_env()
    teacher = ActorCritic(env.state_size, env.action_count, np.random.default_rng(8), hidden=8)
    pairs, _ = distill_dataset(teacher, env, 5, tiny_config(), seed=9)
    student, report = distill_train(pairs, tiny_config(holdout=0.2), seed=10)
    assert report.holdout_pairs == 1
    assert len(report.grasp_curve) == len(report.place_curve) == TINY_TRAIN.epochs
    assert np.isfinite(report.train_grasp_error)
    student.save(tmp_path / "student")
    loaded = Student.load(tmp_path / "student")
    assert loaded.place.triples == student.place.triples
    with pytest.raises(InputError):
        distill_train([], tiny_config(), seed=0)


def test_student_prediction_shapes() -> None:
    mesh = strip()
    student = Student.init(np.random.default_rng(11), TINY_TRAIN)
    pair = make_pair(mesh, mesh, [0], tiny_config(), np.random.default_rng(12))
    grasp, poses = student.predict(pair.cloud, mesh, CodecConfig())
    assert 1 <= len(grasp) <= GRASP_SLOTS
    assert len(poses) == len(grasp)
    assert all(0 <= g < mesh.vertex_count for g in grasp)
    for pose in poses:
        assert np.isclose(np.linalg.det(pose.rotation.as_matrix()), 1.0)


def test_rollout_summaries() -> None:
    env = easy_env()
    teacher = ActorCritic(env.state_size, env.action_count, np.random.default_rng(13), hidden=8)
    cfg = tiny_config()
    summary = teacher_rollouts(teacher, env, 2, cfg, seed=14)
    assert summary.episodes == 2
    assert summary.success_rate == 1.0
    assert summary.average_subgoals == 2.0
    student = Student.init(np.random.default_rng(15), TINY_TRAIN)
    result = student_rollouts(student, env, 2, cfg, seed=16)
    assert result.episodes == 2
    assert 0.0 <= result.success_rate <= 1.0


def test_config_validation() -> None:
    with pytest.raises(InputError):
        DistillConfig(pairs=0)
    with pytest.raises(InputError):
        DistillConfig(holdout=1.0)


def test_aborted_student_episode_is_logged() -> None:
    clear_warnings()
    mesh = strip()
    env = GraspEnv(mesh, [mesh], RewardConfig(thresholds=(1e6,)), candidates=3)
    cfg = tiny_config(camera=Camera(position=(0.25, 0.0, 1.0), target=(0.25, 0.0, 2.0)))
    summary = student_rollouts(Student.init(np.random.default_rng(17), TINY_TRAIN), env, 1, cfg, seed=18)
    assert summary.success_rate == 0.0
    assert any(w.warning_type is WarningTypes.EPISODE_ABORTED for w in get_warnings())
