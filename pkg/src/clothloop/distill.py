"""Student distillation: imitate the teacher's grasps and places from rendered point clouds."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from clothloop.errors import ClothLoopError, InputError
from clothloop.heatmap import CodecConfig, Heatmap, KeypointAnnotation, decode_positions, encode
from clothloop.mesh import DeformableMesh, FloatArray, PointCloud, nearest_vertices, orthonormal_frames, vertex_frames
from clothloop.policy import ActorCritic, EvalSummary, GraspEnv, GraspEnvState, decode_action, env_step, summarize_episodes
from clothloop.regressor import RegressorParams, Sample, TrainConfig, forward, train
from clothloop.render import Camera, render
from clothloop.sim import RigidPose, SimState
from clothloop.util.enum.head_kind import HeadKind
from clothloop.util.enum.warning_types import WarningTypes

logger = logging.getLogger("clothloop")

GRASP_SLOTS = 2
PLACE_LAYOUT = "pdd" * GRASP_SLOTS
PLACE_OUTPUTS = 3 * len(PLACE_LAYOUT)
PAIR_PROBABILITY = 0.5
_MAX_ATTEMPTS_PER_PAIR = 20


@dataclass(frozen=True)
class DistillConfig:
    """Dataset perturbations, rendering and student training settings."""

    pairs: int = 300
    size_perturbation: float = 0.1
    position_perturbation: float = 0.05
    holdout: float = 0.2
    cloud_points: int = 400
    depth_noise: float = 0.0
    threads: int = 1
    camera: Camera = field(default_factory=Camera)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        """Check ranges."""
        if self.pairs < 1:
            msg = f"need at least one distillation pair (got {self.pairs})"
            raise InputError(msg)
        if not 0 <= self.holdout < 1 or not 0 <= self.size_perturbation < 1:
            msg = "holdout and size perturbation must lie in [0, 1)"
            raise InputError(msg)

    @classmethod
    def from_settings(cls, settings: dict[str, Any], camera: Camera | None = None) -> DistillConfig:
        """Build from a converted settings dictionary."""
        return cls(
            pairs=int(settings["DISTILL_PAIRS"]),
            size_perturbation=float(settings["DISTILL_SIZE_PERTURBATION"]),
            position_perturbation=float(settings["DISTILL_POSITION_PERTURBATION"]),
            holdout=float(settings["DISTILL_HOLDOUT"]),
            cloud_points=int(settings["CLOUD_POINTS"]),
            depth_noise=float(settings["DEPTH_NOISE"]),
            threads=max(1, int(settings["THREADS"])),
            camera=camera or Camera(),
            codec=CodecConfig.from_settings(settings),
            train=TrainConfig.from_settings(settings),
        )


@dataclass(eq=False)
class DistillPair:
    """A rendered cloud with the teacher's grasp vertices and place targets."""

    cloud: PointCloud
    mesh: DeformableMesh
    grasp: tuple[int, ...]
    heatmap: FloatArray
    place: FloatArray
    place_mask: FloatArray

    @property
    def grasp_positions(self) -> FloatArray:
        """(1 or 2, 3) grasped vertex positions at decision time."""
        return self.mesh.vertices[list(self.grasp)]


def place_targets(subgoal: DeformableMesh, grasp: Sequence[int]) -> tuple[FloatArray, FloatArray]:
    """Pooled place target and mask: per slot the subgoal position, x axis and z axis."""
    frames = vertex_frames(subgoal)
    target = np.zeros((GRASP_SLOTS, 3, 3))
    mask = np.zeros((GRASP_SLOTS, 3, 3))
    for slot, vertex in enumerate(grasp):
        target[slot] = [subgoal.vertices[vertex], frames[vertex][:, 0], frames[vertex][:, 2]]
        mask[slot] = 1.0
    return target.ravel(), mask.ravel()


def make_pair(
    mesh: DeformableMesh,
    subgoal: DeformableMesh,
    grasp: Sequence[int],
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> DistillPair:
    """Render ``mesh`` and label the cloud with the grasp heatmap and place targets.

    Single grasps leave the second heatmap column at zero and mask the second place slot.
    """
    grasp = tuple(int(g) for g in grasp)
    rendered = render(mesh, cfg.camera, cfg.cloud_points, rng, cfg.depth_noise)
    heat = np.zeros((len(rendered.cloud), GRASP_SLOTS))
    probs = encode(mesh, rendered.cloud, KeypointAnnotation(grasp, cfg.codec.sigma)).probs
    heat[:, : len(grasp)] = probs
    place, mask = place_targets(subgoal, grasp)
    return DistillPair(rendered.cloud, mesh, grasp, heat, place, mask)


def _teacher_episode(
    teacher: ActorCritic, env: GraspEnv, cfg: DistillConfig, seed: np.random.SeedSequence
) -> list[DistillPair] | None:
    """Pairs from one perturbed teacher episode, or None if the teacher failed."""
    rng = np.random.default_rng(seed)
    episode_env = _perturbed_env(env, cfg, rng)
    state = episode_env.reset()
    pairs = []
    try:
        while not state.done:
            mesh = episode_env.simulator.mesh_at(state.sim)
            action, _ = teacher.act(episode_env.observe(state).ravel(), rng, greedy=True)
            grasp = [int(episode_env.candidates[s]) for s in decode_action(action, episode_env.candidate_count)]
            pairs.append(make_pair(mesh, episode_env.subgoals[state.subgoal], grasp, cfg, rng))
            state, _, _, _ = env_step(episode_env, state, action)
    except InputError as err:
        logger.debug("teacher episode skipped: %s", err)
        return None
    return pairs if state.success else None


def distill_dataset(
    teacher: ActorCritic,
    env: GraspEnv,
    n_pairs: int,
    cfg: DistillConfig,
    seed: int,
) -> tuple[list[DistillPair], int]:
    """Collect exactly ``n_pairs`` pairs from successful teacher episodes.

    Each episode perturbs the cloth size and position. Failed episodes are
    dropped and replaced by further episodes.

    Returns:
        tuple: The pairs and the number of failed teacher episodes.

    Raises:
        InputError: If the teacher almost never succeeds.
    """
    if n_pairs < 1:
        msg = f"need at least one pair (got {n_pairs})"
        raise InputError(msg)
    root = np.random.SeedSequence(seed)
    wave = max(1, cfg.threads)
    pairs: list[DistillPair] = []
    failures = 0
    attempts = 0
    with ThreadPoolExecutor(max_workers=wave) as pool:
        while len(pairs) < n_pairs:
            if attempts >= _MAX_ATTEMPTS_PER_PAIR * n_pairs:
                msg = f"teacher failed {failures} of {attempts} episodes; not enough pairs for the student"
                raise InputError(msg)
            seeds = root.spawn(wave)
            attempts += wave
            for result in pool.map(lambda s: _teacher_episode(teacher, env, cfg, s), seeds):
                if result is None:
                    failures += 1
                    continue
                pairs.extend(result)
    if failures:
        logger.warning(
            "%s: %d teacher episodes failed and were replaced", WarningTypes.TEACHER_FAILURE.name, failures
        )
    return pairs[:n_pairs], failures


@dataclass(eq=False)
class Student:
    """Grasp heatmap head (two slots) plus pooled place regression head."""

    grasp: RegressorParams
    place: RegressorParams

    @classmethod
    def init(cls, rng: np.random.Generator, train_config: TrainConfig | None = None) -> Student:
        """Fresh heads."""
        cfg = train_config or TrainConfig()
        return cls(
            RegressorParams.init(HeadKind.HEATMAP, GRASP_SLOTS, rng, cfg.encoder, cfg.decoder),
            RegressorParams.init(HeadKind.POOLED, PLACE_OUTPUTS, rng, cfg.encoder, cfg.decoder, triples=PLACE_LAYOUT),
        )

    def predict(
        self, cloud: PointCloud, mesh: DeformableMesh, codec: CodecConfig
    ) -> tuple[list[int], list[RigidPose]]:
        """Grasp vertices on ``mesh`` and their place poses for one observation.

        A second grasp is used when its heatmap peaks above one half and it
        snaps to a different vertex than the first.
        """
        probs = forward(self.grasp, cloud)
        positions = decode_positions(Heatmap(probs), cloud, codec.top_fraction)
        slots = GRASP_SLOTS if probs[:, 1].max() >= PAIR_PROBABILITY else 1
        grasp = [int(v) for v in nearest_vertices(mesh, positions[:slots])]
        if len(grasp) == GRASP_SLOTS and grasp[0] == grasp[1]:
            grasp = grasp[:1]
        place = forward(self.place, cloud).reshape(GRASP_SLOTS, 3, 3)
        frames = orthonormal_frames(place[:, 1], place[:, 2])
        poses = [RigidPose.from_frame(frames[s], place[s, 0]) for s in range(len(grasp))]
        return grasp, poses

    def save(self, directory: Path) -> None:
        """One parameter file per head."""
        directory.mkdir(parents=True, exist_ok=True)
        self.grasp.save(directory / "grasp.params")
        self.place.save(directory / "place.params")

    @classmethod
    def load(cls, directory: Path) -> Student:
        """Read a student written by :meth:`save`."""
        return cls(RegressorParams.load(directory / "grasp.params"), RegressorParams.load(directory / "place.params"))


@dataclass(frozen=True)
class DistillReport:
    """Student errors on the training split and the held-out split."""

    train_grasp_error: float
    holdout_grasp_error: float
    train_place_error: float
    holdout_place_error: float
    grasp_curve: list[float]
    place_curve: list[float]
    holdout_pairs: int


def grasp_errors(student: Student, pairs: Sequence[DistillPair], codec: CodecConfig) -> tuple[float, float]:
    """Mean distance of decoded grasp and predicted place positions to the teacher's, per used slot."""
    if not pairs:
        return float("nan"), float("nan")
    grasp_err, place_err = [], []
    for pair in pairs:
        positions = decode_positions(Heatmap(forward(student.grasp, pair.cloud)), pair.cloud, codec.top_fraction)
        used = len(pair.grasp)
        grasp_err.append(np.linalg.norm(positions[:used] - pair.grasp_positions, axis=1).mean())
        place = forward(student.place, pair.cloud).reshape(GRASP_SLOTS, 3, 3)[:used, 0]
        truth = pair.place.reshape(GRASP_SLOTS, 3, 3)[:used, 0]
        place_err.append(np.linalg.norm(place - truth, axis=1).mean())
    return float(np.mean(grasp_err)), float(np.mean(place_err))


def distill_train(pairs: Sequence[DistillPair], cfg: DistillConfig, seed: int) -> tuple[Student, DistillReport]:
    """Train the student's grasp and place heads, holding out a share of pairs.

    Raises:
        InputError: If ``pairs`` is empty.
    """
    if not pairs:
        msg = "distillation dataset is empty"
        raise InputError(msg)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_holdout = int(round(cfg.holdout * len(pairs))) if len(pairs) > 1 else 0
    holdout = [pairs[i] for i in order[:n_holdout]]
    training = [pairs[i] for i in order[n_holdout:]]

    student = Student.init(rng, cfg.train)
    student.grasp, grasp_curve = train(
        student.grasp, [Sample(p.cloud.points, p.heatmap) for p in training], cfg.train, rng
    )
    student.place, place_curve = train(
        student.place, [Sample(p.cloud.points, p.place, p.place_mask) for p in training], cfg.train, rng
    )
    train_grasp, train_place = grasp_errors(student, training, cfg.codec)
    hold_grasp, hold_place = grasp_errors(student, holdout, cfg.codec)
    logger.info(
        "student trained on %d pairs; held-out grasp error %.4f m over %d pairs", len(training), hold_grasp, n_holdout
    )
    return student, DistillReport(
        train_grasp, hold_grasp, train_place, hold_place, grasp_curve, place_curve, n_holdout
    )


def student_step(
    student: Student, env: GraspEnv, state: GraspEnvState, cfg: DistillConfig, rng: np.random.Generator
) -> tuple[GraspEnvState, float, bool]:
    """Render, predict a grasp and place, pull, and score like the teacher's environment."""
    mesh = env.simulator.mesh_at(state.sim)
    next_sim: SimState | None
    try:
        cloud = render(mesh, cfg.camera, cfg.cloud_points, rng, cfg.depth_noise).cloud
        grasp, poses = student.predict(cloud, mesh, cfg.codec)
        pulled = env.pull(state, grasp, poses)
        next_sim = SimState(pulled.positions, np.zeros_like(pulled.positions))
    except ClothLoopError as err:
        logger.warning("%s: student action aborted the episode: %s", WarningTypes.EPISODE_ABORTED.name, err)
        next_sim = None
    next_state, reward, _ = env.advance(state, next_sim, (*state.history, -1))
    return next_state, reward, next_state.done


def _perturbed_env(env: GraspEnv, cfg: DistillConfig, rng: np.random.Generator) -> GraspEnv:
    scale = 1.0 + rng.uniform(-cfg.size_perturbation, cfg.size_perturbation)
    offset = rng.uniform(-cfg.position_perturbation, cfg.position_perturbation, 2)
    return env.transformed(scale, offset)


StepFn = Callable[[GraspEnv, GraspEnvState, np.random.Generator], tuple[GraspEnvState, float, bool]]


def _run_episodes(env: GraspEnv, episodes: int, cfg: DistillConfig, seed: int, step: StepFn) -> EvalSummary:
    successes, achieved, returns = [], [], []
    for child in np.random.SeedSequence(seed).spawn(episodes):
        rng = np.random.default_rng(child)
        episode_env = _perturbed_env(env, cfg, rng)
        state = episode_env.reset()
        total = 0.0
        reached = 0
        while not state.done:
            state, reward, done = step(episode_env, state, rng)
            total += reward
            if state.success or not done:
                reached += 1
        successes.append(state.success)
        achieved.append(reached)
        returns.append(total)
    return summarize_episodes(successes, achieved, returns)


def student_rollouts(student: Student, env: GraspEnv, episodes: int, cfg: DistillConfig, seed: int) -> EvalSummary:
    """Success rate and average achieved subgoals of the student on perturbed episodes."""
    return _run_episodes(env, episodes, cfg, seed, lambda e, s, rng: student_step(student, e, s, cfg, rng))


def teacher_rollouts(teacher: ActorCritic, env: GraspEnv, episodes: int, cfg: DistillConfig, seed: int) -> EvalSummary:
    """Greedy teacher on the same perturbed episodes as :func:`student_rollouts`."""

    def step(e: GraspEnv, s: GraspEnvState, rng: np.random.Generator) -> tuple[GraspEnvState, float, bool]:
        action, _ = teacher.act(e.observe(s).ravel(), rng, greedy=True)
        state, reward, done, _ = env_step(e, s, action)
        return state, reward, done

    return _run_episodes(env, episodes, cfg, seed, step)
