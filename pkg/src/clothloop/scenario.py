"""Scenario files, scripted demonstrations and the demo directory layout."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial.transform import Rotation

from clothloop.config import apply_options, get_settings, option_keys, reset_options
from clothloop.errors import InputError
from clothloop.estimator import OcclusionSpec
from clothloop.mesh import DeformableMesh, PointCloud, fold_line_success, make_strip
from clothloop.policy import ActorCritic, GraspEnv, RewardConfig, env_step
from clothloop.render import Camera, render
from clothloop.sim import ClothSimulator, ControlRegion, SimConfig, SimState
from clothloop.util.artifact_tracker import ArtifactTracker, config_hash, read_manifest
from clothloop.util.serialize import read_cloud, read_mesh, write_cloud, write_mesh

logger = logging.getLogger("clothloop")

scenario_dir = Path(__file__).parent / "scenarios"

# Settings that change speed or location but never results.
UNHASHED_SETTINGS = frozenset({"THREADS", "DATA"})


def bundled_scenarios() -> list[str]:
    """Names of the scenarios shipped with the package."""
    return sorted(p.stem for p in scenario_dir.glob("*.json"))


def _vector(data: dict[str, Any], key: str, default: tuple[float, ...]) -> tuple[float, ...]:
    value = data.get(key, default)
    if len(value) != len(default):
        msg = f"'{key}' needs {len(default)} numbers (got {value!r})"
        raise InputError(msg)
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class Move:
    """One scripted drag of one or more control regions.

    The regions are rotated about their own axes by ``rotate_deg`` (xyz Euler
    angles) and translated by ``translate`` in world coordinates.
    """

    time: float
    grasp_fractions: tuple[float, ...] = ()
    grasp_vertices: tuple[int, ...] = ()
    translate: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotate_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lift: float = 0.0
    steps: int | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Move:
        """Build from a scenario ``moves`` entry."""
        fractions = tuple(float(f) for f in data.get("grasp_fractions", ()))
        vertices = tuple(int(v) for v in data.get("grasp_vertices", ()))
        if bool(fractions) == bool(vertices):
            msg = "a move names exactly one of grasp_fractions or grasp_vertices"
            raise InputError(msg)
        if any(not 0 <= f <= 1 for f in fractions):
            msg = f"grasp fractions must lie in [0, 1] (got {list(fractions)})"
            raise InputError(msg)
        if "time" not in data:
            msg = "every move needs a time"
            raise InputError(msg)
        steps = data.get("steps")
        if steps is not None and int(steps) < 1:
            msg = f"a move needs at least one drag step (got {steps})"
            raise InputError(msg)
        return cls(
            time=float(data["time"]),
            grasp_fractions=fractions,
            grasp_vertices=vertices,
            translate=_vector(data, "translate", (0.0, 0.0, 0.0)),  # type: ignore[arg-type]
            rotate_deg=_vector(data, "rotate_deg", (0.0, 0.0, 0.0)),  # type: ignore[arg-type]
            lift=float(data.get("lift", 0.0)),
            steps=None if steps is None else int(steps),
        )

    def grasp(self, mesh: DeformableMesh) -> list[int]:
        """Grasped vertex indices on ``mesh``; fractions are measured along the midline."""
        if self.grasp_vertices:
            return list(self.grasp_vertices)
        last = len(mesh.midline) - 1
        return [int(mesh.midline[round(f * last)]) for f in self.grasp_fractions]


@dataclass(frozen=True)
class Experiment:
    """A keyframe script and the occlusion applied while it is estimated."""

    moves: tuple[Move, ...]
    occlusion: OcclusionSpec

    @classmethod
    def from_dict(cls, name: str, data: dict[str, Any], default_occlusion: OcclusionSpec) -> Experiment:
        """Build and check temporal order."""
        moves = tuple(Move.from_dict(m) for m in data.get("moves", ()))
        if not moves:
            msg = f"experiment {name!r} has no moves"
            raise InputError(msg)
        times = [m.time for m in moves]
        if any(b <= a for a, b in zip(times[:-1], times[1:], strict=True)):
            msg = f"experiment {name!r}: move times must be strictly increasing (got {times})"
            raise InputError(msg)
        occlusion = OcclusionSpec.from_dict(data["occlusion"]) if "occlusion" in data else default_occlusion
        return cls(moves, occlusion)


@dataclass(frozen=True)
class PolicyTask:
    """Grasp-policy parameters of a scenario."""

    candidates: int | None = None
    thresholds: tuple[float, ...] = ()
    reward_scale: float = 1.0


@dataclass(eq=False)
class Scenario:
    """A validated scenario file."""

    name: str
    raw: dict[str, Any]
    seed: int
    mesh_spec: dict[str, Any]
    camera: Camera
    frames_per_move: int
    subgoal_stride: int
    experiments: dict[str, Experiment]
    default_experiment: str
    policy: PolicyTask
    fold_line: tuple[tuple[float, float, float], tuple[float, float, float], float] | None = None
    options: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = Path()

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path = Path(), check_files: bool = True) -> Scenario:  # noqa: FBT001, FBT002
        """Validate a parsed scenario file.

        Args:
            data: The parsed JSON.
            base_dir: Directory relative mesh paths are resolved against.
            check_files: Require referenced files to exist.

        Returns:
            Scenario: The validated scenario.

        Raises:
            InputError: On any invalid field, unknown option or missing file.
        """
        try:
            name = str(data["name"])
            mesh_spec = dict(data["mesh"])
            raw_experiments = dict(data["experiments"])
        except (KeyError, TypeError, ValueError) as err:
            msg = f"scenario is missing or has an invalid required field: {err}"
            raise InputError(msg) from err
        if "path" in mesh_spec:
            if check_files and not (base_dir / mesh_spec["path"]).is_file():
                msg = f"scenario {name!r} references a missing mesh file {mesh_spec['path']!r}"
                raise InputError(msg)
        elif not {"length", "width", "nx", "ny"} <= mesh_spec.keys():
            msg = f"scenario {name!r}: mesh needs a path or length, width, nx and ny"
            raise InputError(msg)

        default_occlusion = OcclusionSpec.from_dict(data.get("occlusion"))
        experiments = {k: Experiment.from_dict(k, v, default_occlusion) for k, v in raw_experiments.items()}
        if not experiments:
            msg = f"scenario {name!r} has no experiments"
            raise InputError(msg)
        default_experiment = str(data.get("default_experiment", next(iter(experiments))))
        if default_experiment not in experiments:
            msg = f"default experiment {default_experiment!r} is not defined"
            raise InputError(msg)

        frames_per_move = int(data.get("frames_per_move", 4))
        stride = int(data.get("subgoal_stride", 1))
        if frames_per_move < 1 or stride < 1:
            msg = "frames_per_move and subgoal_stride must be at least 1"
            raise InputError(msg)

        options = {str(k).upper(): v for k, v in dict(data.get("options", {})).items()}
        unknown = sorted(set(options) - set(option_keys()))
        if unknown:
            msg = f"scenario {name!r} overrides unknown options: {', '.join(unknown)}"
            raise InputError(msg)

        policy_data = dict(data.get("policy", {}))
        policy = PolicyTask(
            candidates=None if policy_data.get("candidates") is None else int(policy_data["candidates"]),
            thresholds=tuple(float(t) for t in policy_data.get("thresholds", ())),
            reward_scale=float(policy_data.get("reward_scale", 1.0)),
        )

        fold_line = None
        if "fold_line" in data:
            line = data["fold_line"]
            fold_line = (
                _vector(line, "point", (0.0, 0.0, 0.0)),
                _vector(line, "normal", (1.0, 0.0, 0.0)),
                float(line.get("tolerance", 0.0)),
            )

        return cls(
            name=name,
            raw=data,
            seed=int(data.get("seed", 0)),
            mesh_spec=mesh_spec,
            camera=Camera.from_dict(data.get("camera", {})),
            frames_per_move=frames_per_move,
            subgoal_stride=stride,
            experiments=experiments,
            default_experiment=default_experiment,
            policy=policy,
            fold_line=fold_line,  # type: ignore[arg-type]
            options=options,
            base_dir=base_dir,
        )

    def build_mesh(self) -> DeformableMesh:
        """The initial cloth at rest."""
        spec = self.mesh_spec
        if "path" in spec:
            return read_mesh(self.base_dir / spec["path"])
        return make_strip(
            float(spec["length"]),
            float(spec["width"]),
            int(spec["nx"]),
            int(spec["ny"]),
            spec.get("origin", (0.0, 0.0, 0.0)),
        )

    def experiment(self, name: str | None = None) -> Experiment:
        """An experiment by name, the default one when ``name`` is None."""
        key = name or self.default_experiment
        if key not in self.experiments:
            msg = f"scenario {self.name!r} has no experiment {key!r}; choose from {', '.join(self.experiments)}"
            raise InputError(msg)
        return self.experiments[key]

    def settings(self, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
        """Reset to configured defaults, apply the scenario's options, then ``overrides``, and convert."""
        reset_options()
        apply_options(self.options)
        apply_options(overrides or {})
        return get_settings()

    def config_hash(self, settings: dict[str, Any]) -> str:
        """Hash of the scenario file and every result-relevant setting."""
        relevant = {k: v for k, v in settings.items() if k in option_keys() and k not in UNHASHED_SETTINGS}
        return config_hash({"scenario": self.raw, "settings": relevant})


def load_scenario(name_or_path: str | Path) -> Scenario:
    """Load a bundled scenario by name or a scenario JSON file by path.

    Raises:
        InputError: If neither exists or the file is invalid.
    """
    path = Path(name_or_path)
    if not path.is_file():
        path = scenario_dir / f"{name_or_path}.json"
    if not path.is_file():
        msg = f"no scenario file {name_or_path!r}; bundled scenarios: {', '.join(bundled_scenarios())}"
        raise InputError(msg)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        msg = f"{path} is not valid JSON: {err}"
        raise InputError(msg) from err
    return Scenario.from_dict(data, path.parent)


@dataclass(eq=False)
class Demo:
    """A scripted demonstration: ground truth per frame, observations and subgoals."""

    scenario: Scenario
    experiment: str
    seed: int
    truths: list[DeformableMesh]
    observations: list[PointCloud]
    keyframes: list[DeformableMesh]
    subgoals: list[DeformableMesh]
    config_digest: str = ""
    simulator: ClothSimulator | None = None

    @property
    def initial(self) -> DeformableMesh:
        """Mesh of frame 0."""
        return self.truths[0]

    @property
    def occlusion(self) -> OcclusionSpec:
        """Occlusion of the demo's experiment."""
        return self.scenario.experiment(self.experiment).occlusion

    def fold_line_success(self) -> bool | None:
        """Whether the final keyframe stays on one side of the scenario's folding line."""
        if self.scenario.fold_line is None or not self.keyframes:
            return None
        point, normal, tolerance = self.scenario.fold_line
        return fold_line_success(self.keyframes[-1], point, normal, tolerance)


def observe(mesh: DeformableMesh, camera: Camera, settings: dict[str, Any], seed: int, frame: int) -> PointCloud:
    """Render frame ``frame`` with a generator derived from ``(seed, frame)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, frame]))
    return render(mesh, camera, int(settings["CLOUD_POINTS"]), rng, float(settings["DEPTH_NOISE"])).cloud


def run_demo(
    scenario: Scenario,
    settings: dict[str, Any],
    experiment: str | None = None,
    seed: int | None = None,
) -> Demo:
    """Play an experiment's moves in the simulator and render every frame.

    Each move is dragged while ``frames_per_move`` snapshots are taken at
    evenly spaced substeps, then the cloth is released and relaxed. The
    relaxed mesh is the move's keyframe and is recorded as a frame too.
    Subgoals are every ``subgoal_stride``-th keyframe.

    Raises:
        InputError: If a move has fewer drag steps than snapshots, or drags
            a region below the ground.
    """
    name = experiment or scenario.default_experiment
    script = scenario.experiment(name)
    seed = scenario.seed if seed is None else seed
    sim_config = SimConfig.from_settings(settings)
    initial = scenario.build_mesh()
    simulator = ClothSimulator(initial, sim_config, record=True)
    frames = scenario.frames_per_move

    state = SimState.at_rest(initial)
    truths = [initial.copy()]
    keyframes = []
    for number, move in enumerate(script.moves):
        current = simulator.mesh_at(state)
        steps = move.steps or sim_config.drag_steps
        if steps < frames:
            msg = f"move {number} has {steps} drag steps but {frames} snapshots per move"
            raise InputError(msg)
        regions = [ControlRegion.around(current, g) for g in move.grasp(current)]
        rotation = Rotation.from_euler("xyz", move.rotate_deg, degrees=True)
        poses = [r.pose.rotated_local(rotation).translated(move.translate) for r in regions]
        start = len(simulator.trajectory)
        dragged = simulator.drag_regions(state, regions, poses, steps, lift=move.lift)
        held = simulator.trajectory[start:]
        truths += [initial.with_vertices(held[(k * steps) // frames - 1]) for k in range(1, frames + 1)]
        relaxed = simulator.relax(dragged)
        state = SimState(relaxed.positions, np.zeros_like(relaxed.positions))
        keyframes.append(simulator.mesh_at(state))
        truths.append(keyframes[-1].copy())
        logger.debug("move %d: %d frames so far", number, len(truths))

    observations = [observe(mesh, scenario.camera, settings, seed, t) for t, mesh in enumerate(truths)]
    subgoals = keyframes[scenario.subgoal_stride - 1 :: scenario.subgoal_stride]
    return Demo(
        scenario,
        name,
        seed,
        truths,
        observations,
        keyframes,
        subgoals,
        scenario.config_hash(settings),
        simulator,
    )


def _frame_name(prefix: str, index: int, suffix: str) -> str:
    return f"{prefix}_{index:03d}{suffix}"


def write_demo(demo: Demo, out: Path) -> Path:
    """Write meshes, clouds, subgoals, the trajectory and a manifest under ``out``.

    Returns:
        Path: The manifest file.
    """
    out.mkdir(parents=True, exist_ok=True)
    tracker = ArtifactTracker(out, demo.config_digest)
    scenario_file = out / "scenario.json"
    scenario_file.write_text(json.dumps(demo.scenario.raw, indent=2, sort_keys=True) + "\n")
    tracker.track_file(scenario_file, "scenario")

    initial_path = out / "initial.obj"
    write_mesh(initial_path, demo.initial)
    tracker.track_file(initial_path, "mesh")
    tracker.track_file(initial_path.with_suffix(".json"), "mesh-sidecar")
    groups = (
        ("truth", "frame", demo.truths),
        ("keyframes", "key", demo.keyframes),
        ("subgoals", "subgoal", demo.subgoals),
    )
    for folder, prefix, meshes in groups:
        for i, mesh in enumerate(meshes):
            path = out / folder / _frame_name(prefix, i, ".obj")
            write_mesh(path, mesh, write_sidecar=False)
            tracker.track_file(path, "mesh")
    for t, cloud in enumerate(demo.observations):
        path = out / "clouds" / _frame_name("frame", t, ".csv")
        write_cloud(path, cloud)
        tracker.track_file(path, "cloud")
    if demo.simulator is not None:
        trajectory = out / "trajectory.csv"
        demo.simulator.dump_trajectory(
            trajectory, {"seed": demo.seed, "scenario": demo.scenario.name, "experiment": demo.experiment}
        )
        tracker.track_file(trajectory, "trajectory")
        tracker.track_file(trajectory.with_suffix(".json"), "trajectory-meta")

    extra: dict[str, Any] = {
        "command": "demo generate",
        "scenario": demo.scenario.name,
        "experiment": demo.experiment,
        "seed": demo.seed,
        "frames": len(demo.truths),
        "keyframes": len(demo.keyframes),
        "subgoals": len(demo.subgoals),
    }
    success = demo.fold_line_success()
    if success is not None:
        extra["fold_line_success"] = success
    return tracker.write_manifest(extra)


def read_demo(directory: Path) -> Demo:
    """Load a demo written by :func:`write_demo`.

    Raises:
        InputError: If the directory, its manifest or any listed file is missing.
    """
    if not directory.is_dir():
        msg = f"demo directory {directory} does not exist"
        raise InputError(msg)
    manifest = read_manifest(directory)
    for entry in manifest.get("files", []):
        if not (directory / entry["path"]).is_file():
            msg = f"demo file {entry['path']} listed in the manifest is missing"
            raise InputError(msg)
    scenario = Scenario.from_dict(json.loads((directory / "scenario.json").read_text()), directory, check_files=False)
    initial = read_mesh(directory / "initial.obj")

    def meshes(folder: str, prefix: str, count: int) -> list[DeformableMesh]:
        return [read_mesh(directory / folder / _frame_name(prefix, i, ".obj"), like=initial) for i in range(count)]

    truths = meshes("truth", "frame", int(manifest["frames"]))
    observations = [read_cloud(directory / "clouds" / _frame_name("frame", t, ".csv")) for t in range(len(truths))]
    return Demo(
        scenario,
        str(manifest["experiment"]),
        int(manifest["seed"]),
        truths,
        observations,
        meshes("keyframes", "key", int(manifest["keyframes"])),
        meshes("subgoals", "subgoal", int(manifest["subgoals"])),
        str(manifest.get("config_hash", "")),
    )


def build_env(demo: Demo, settings: dict[str, Any], scale: float = 1.0) -> GraspEnv:
    """Grasp environment over the demo's subgoals, optionally on a resized cloth.

    Raises:
        InputError: If the scenario's thresholds do not match its subgoals.
    """
    task = demo.scenario.policy
    thresholds = task.thresholds
    if len(thresholds) == 1 and len(demo.subgoals) > 1:
        thresholds = thresholds * len(demo.subgoals)
    if len(thresholds) != len(demo.subgoals):
        msg = f"scenario {demo.scenario.name!r} gives {len(thresholds)} thresholds for {len(demo.subgoals)} subgoals"
        raise InputError(msg)
    candidates = task.candidates if task.candidates is not None else int(settings["CANDIDATES"])
    reward = RewardConfig.from_settings(settings, thresholds, task.reward_scale)
    env = GraspEnv(demo.initial, demo.subgoals, reward, SimConfig.from_settings(settings), candidates)
    return env if scale == 1.0 else env.transformed(scale)


def teacher_fold_success(env: GraspEnv, teacher: ActorCritic, scenario: Scenario, scale: float = 1.0) -> bool | None:
    """Greedy teacher episode judged by the scenario's folding line (scaled with the cloth)."""
    if scenario.fold_line is None:
        return None
    point, normal, tolerance = scenario.fold_line
    state = env.reset()
    rng = np.random.default_rng(scenario.seed)
    while not state.done:
        action, _ = teacher.act(env.observe(state).ravel(), rng, greedy=True)
        state, _, _, _ = env_step(env, state, action)
    final = env.simulator.mesh_at(state.sim)
    return fold_line_success(final, np.asarray(point) * scale, normal, tolerance * scale)
