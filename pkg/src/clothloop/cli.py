"""Main CLI for clothloop."""

from __future__ import annotations

import functools
import logging
import pathlib
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
import rich_click as click

from clothloop.config import (
    data_root,
    format_option_value,
    get_default_settings,
    get_options,
    get_settings,
    option_groups,
    user_config_file,
)
from clothloop.distill import DistillConfig, Student, distill_dataset, distill_train, student_rollouts, teacher_rollouts
from clothloop.errors import ClothLoopError, InputError, NumericalError
from clothloop.estimator import EstimationConfig, FrameEvent, KeypointDetector, detector_errors, estimate_sequence
from clothloop.heatmap import midline_key_vertices
from clothloop.logs import RunWarning, clear_warnings, get_warnings
from clothloop.policy import ActorCritic, EvalSummary, PPOConfig, ppo_train
from clothloop.report import DETECTOR_COLUMNS, collect, write_report
from clothloop.scenario import Demo, bundled_scenarios, build_env, load_scenario, read_demo, run_demo, teacher_fold_success, write_demo
from clothloop.util.artifact_tracker import ArtifactTracker, read_manifest
from clothloop.util.enum.variant import KeypointSource, Variant
from clothloop.util.enum.warning_types import WarningTypes
from clothloop.util.serialize import write_rows

logger = logging.getLogger("clothloop")
logger.setLevel(logging.INFO)

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EVAL_COLUMNS = ("agent", "scale", "episodes", "success_rate", "average_subgoals", "mean_return", "fold_line_success")


def run_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Attach ``--seed``, ``--threads``, ``--out`` and ``-o/--opt`` to a command."""
    decorators = [
        click.option("--seed", type=int, default=None, help="Seed for every random draw; the scenario's seed when omitted."),
        click.option("--threads", type=int, default=None, help="Worker threads (overrides THREADS)."),
        click.option(
            "--out",
            type=click.Path(file_okay=False, writable=True, path_type=pathlib.Path),
            default=None,
            help="Output directory; defaults under CLOTHLOOP_DATA or the platform data directory.",
        ),
        click.option(
            "-o",
            "--opt",
            "options",
            nargs=2,
            type=click.Tuple([str, str]),
            multiple=True,
            help="Set config options as key value pairs. Use 'clothloop listopts' to see available options.",
        ),
    ]
    return functools.reduce(lambda f, d: d(f), reversed(decorators), func)


def _overrides(options: tuple[tuple[str, str], ...], threads: int | None) -> dict[str, Any]:
    overrides: dict[str, Any] = {key.upper(): value for key, value in options}
    if threads is not None:
        overrides["THREADS"] = threads
    return overrides


@contextmanager
def exit_codes() -> Iterator[None]:
    """Map package errors to exit codes and print the warning summary."""
    clear_warnings()
    code = 0
    try:
        yield
    except NumericalError as err:
        logger.error("Numerical failure: %s", err)  # noqa: TRY400
        code = EXIT_NUMERICAL
    except ClothLoopError as err:
        logger.error("Error: %s", err)  # noqa: TRY400
        code = EXIT_INPUT
    print_warnings(get_warnings())
    if code:
        click.get_current_context().exit(code)


@click.group(
    context_settings={"help_option_names": ["-h", "--help"], "show_default": True}
)
@click.rich_config(
    help_config=click.RichHelpConfiguration(
        width=88,
        show_arguments=True,
        text_markup=True,
    ),
)
@click.version_option(metadata.version("clothloop"), "-v", "--version")
def cli() -> None:
    """Clothloop estimates cloth states in simulation and learns where to grasp them."""


@cli.group()
def demo() -> None:
    """Scripted demonstrations."""


@demo.command("generate")
@click.argument("scenario_name", metavar="SCENARIO")
@click.option("-x", "--experiment", default=None, help="Keyframe script to run; the scenario's default when omitted.")
@run_options
def generate(
    scenario_name: str,
    experiment: str | None,
    seed: int | None,
    threads: int | None,
    out: pathlib.Path | None,
    options: tuple[tuple[str, str], ...],
) -> None:
    """Run a scenario's demonstration and write ground truth, clouds and subgoals."""
    with exit_codes():
        scenario = load_scenario(scenario_name)
        settings = scenario.settings(_overrides(options, threads))
        result = run_demo(scenario, settings, experiment, seed)
        out = out or data_root() / scenario.name / result.experiment
        manifest = write_demo(result, out)
        logger.info(
            "Wrote %d frames and %d subgoals of %s/%s to %s",
            len(result.truths),
            len(result.subgoals),
            scenario.name,
            result.experiment,
            out,
        )
        print_manifest(manifest)


@cli.command()
@click.argument("demo_dir", type=click.Path(file_okay=False, path_type=pathlib.Path))
@click.option(
    "--variant",
    type=click.Choice([v.value for v in Variant]),
    default=Variant.FULL.value,
    help="HFM variant, ablation or baseline.",
)
@click.option(
    "--keypoints",
    type=click.Choice([k.value for k in KeypointSource]),
    default=KeypointSource.DETECTOR.value,
    help="Take oriented keypoints from the learned detector or from ground truth.",
)
@run_options
def estimate(
    demo_dir: pathlib.Path,
    variant: str,
    keypoints: str,
    seed: int | None,
    threads: int | None,
    out: pathlib.Path | None,
    options: tuple[tuple[str, str], ...],
) -> None:
    """Track a generated demo and write per-frame metrics and the event log."""
    with exit_codes():
        loaded = read_demo(demo_dir)
        settings = loaded.scenario.settings(_overrides(options, threads))
        digest = loaded.scenario.config_hash(settings)
        if loaded.config_digest and digest != loaded.config_digest:
            logger.warning(
                "%s: settings differ from those that generated %s", WarningTypes.HASH_MISMATCH.name, demo_dir
            )
        cfg = EstimationConfig.from_settings(
            settings, Variant.from_name(variant), KeypointSource(keypoints), loaded.scenario.camera
        )
        seed = loaded.seed if seed is None else seed
        run_dir = (out or demo_dir) / "estimate" / loaded.experiment / cfg.variant.value

        started = time.perf_counter()
        result = estimate_sequence(loaded.initial, loaded.observations, loaded.truths, cfg, loaded.occlusion, seed)
        tracker = ArtifactTracker(run_dir, digest)
        result.write_metrics(run_dir / "metrics.csv")
        result.write_events(run_dir / "events.jsonl")
        tracker.track_file(run_dir / "metrics.csv", "metrics")
        tracker.track_file(run_dir / "events.jsonl", "events")
        if result.detector_curves:
            result.write_detector_curve(run_dir / "detector_curve.csv")
            tracker.track_file(run_dir / "detector_curve.csv", "curve")
        for path in result.write_detections(run_dir):
            tracker.track_file(path, "keypoints" if path.suffix == ".json" else "heatmap")
        if result.detector is not None:
            _write_detector_errors(loaded, result.events, result.detector, cfg, seed, run_dir, tracker)
        final = result.final_vertex_l2
        tracker.write_manifest(
            {
                "command": "estimate",
                "variant": cfg.variant.value,
                "keypoints": keypoints,
                "experiment": loaded.experiment,
                "seed": seed,
                "backtracks": result.backtracks,
                "final_vertex_l2": final,
                "runtime_s": round(time.perf_counter() - started, 3),
            }
        )
        logger.info(
            "%s on %s: final vertex L2 %.4f m after %d backtracks",
            cfg.variant.value,
            loaded.experiment,
            final if final is not None else float("nan"),
            result.backtracks,
        )


def _write_detector_errors(
    loaded: Demo,
    events: list[FrameEvent],
    detector: KeypointDetector,
    cfg: EstimationConfig,
    seed: int,
    run_dir: Path,
    tracker: ArtifactTracker,
) -> None:
    # ground truth of the backtracked frames; every later frame when none backtracked
    frames = [e.frame for e in events if e.backtracked] or list(range(1, len(loaded.truths)))
    detector.save(run_dir / "detector")
    errors = detector_errors(
        detector,
        [loaded.truths[t] for t in frames],
        midline_key_vertices(loaded.initial),
        cfg,
        np.random.default_rng(np.random.SeedSequence([seed, len(loaded.truths)])),
    )
    path = run_dir / "detector.csv"
    write_rows(path, DETECTOR_COLUMNS, [[f"{v:.9f}" for v in errors]])
    tracker.track_file(path, "metrics")


@cli.group()
def policy() -> None:
    """Teacher training, student distillation and evaluation."""


def _policy_setup(
    scenario_name: str,
    experiment: str | None,
    options: tuple[tuple[str, str], ...],
    threads: int | None,
    out: pathlib.Path | None,
) -> tuple[Demo, dict[str, Any], str, Path]:
    scenario = load_scenario(scenario_name)
    settings = scenario.settings(_overrides(options, threads))
    # subgoals always come from the scenario's own seed
    loaded = run_demo(scenario, settings, experiment)
    policy_dir = (out or data_root() / scenario.name) / "policy"
    return loaded, settings, scenario.config_hash(settings), policy_dir


def _load_teacher(policy_dir: Path) -> ActorCritic:
    path = policy_dir / "teacher.params"
    if not path.is_file():
        msg = f"no teacher at {path}; run 'clothloop policy train' first"
        raise InputError(msg)
    net, _ = ActorCritic.load(path)
    return net


@policy.command()
@click.argument("scenario_name", metavar="SCENARIO")
@click.option("-x", "--experiment", default=None, help="Keyframe script the subgoals come from.")
@run_options
def train(
    scenario_name: str,
    experiment: str | None,
    seed: int | None,
    threads: int | None,
    out: pathlib.Path | None,
    options: tuple[tuple[str, str], ...],
) -> None:
    """Train the PPO teacher on the scenario's subgoals."""
    with exit_codes():
        loaded, settings, digest, policy_dir = _policy_setup(scenario_name, experiment, options, threads, out)
        seed = loaded.scenario.seed if seed is None else seed
        env = build_env(loaded, settings)
        cfg = PPOConfig.from_settings(settings)
        started = time.perf_counter()
        net, curve = ppo_train(env, cfg, seed, int(settings["THREADS"]))
        tracker = ArtifactTracker(policy_dir, digest)
        net.save(policy_dir / "teacher.params", {"scenario": loaded.scenario.name, "candidates": env.candidate_count})
        write_rows(
            policy_dir / "curve.csv",
            ("iteration", "mean_return", "success_rate"),
            [[p.iteration, f"{p.mean_return:.6f}", f"{p.success_rate:.6f}"] for p in curve],
        )
        tracker.track_file(policy_dir / "teacher.params", "params")
        tracker.track_file(policy_dir / "curve.csv", "curve")
        tracker.write_manifest(
            {
                "command": "policy train",
                "seed": seed,
                "iterations": cfg.iterations,
                "final_success_rate": curve[-1].success_rate if curve else None,
                "runtime_s": round(time.perf_counter() - started, 3),
            },
            name="train-manifest.json",
        )
        logger.info("Teacher trained for %d iterations; written to %s", cfg.iterations, policy_dir)


@policy.command()
@click.argument("scenario_name", metavar="SCENARIO")
@click.option("-x", "--experiment", default=None, help="Keyframe script the subgoals come from.")
@run_options
def distill(
    scenario_name: str,
    experiment: str | None,
    seed: int | None,
    threads: int | None,
    out: pathlib.Path | None,
    options: tuple[tuple[str, str], ...],
) -> None:
    """Collect teacher demonstrations on perturbed cloths and train the point-cloud student."""
    with exit_codes():
        loaded, settings, digest, policy_dir = _policy_setup(scenario_name, experiment, options, threads, out)
        seed = loaded.scenario.seed if seed is None else seed
        teacher = _load_teacher(policy_dir)
        env = build_env(loaded, settings)
        cfg = DistillConfig.from_settings(settings, loaded.scenario.camera)
        started = time.perf_counter()
        pairs, failures = distill_dataset(teacher, env, cfg.pairs, cfg, seed)
        student, report = distill_train(pairs, cfg, seed)
        tracker = ArtifactTracker(policy_dir, digest)
        student.save(policy_dir / "student")
        write_rows(
            policy_dir / "student_curve.csv",
            ("epoch", "grasp_loss", "place_loss"),
            [
                [epoch, f"{g:.6f}", f"{p:.6f}"]
                for epoch, (g, p) in enumerate(zip(report.grasp_curve, report.place_curve, strict=True), start=1)
            ],
        )
        for name in ("student/grasp.params", "student/place.params"):
            tracker.track_file(policy_dir / name, "params")
        tracker.track_file(policy_dir / "student_curve.csv", "curve")
        tracker.write_manifest(
            {
                "command": "policy distill",
                "seed": seed,
                "pairs": len(pairs),
                "teacher_failures": failures,
                "holdout_pairs": report.holdout_pairs,
                "holdout_grasp_error": report.holdout_grasp_error,
                "holdout_place_error": report.holdout_place_error,
                "runtime_s": round(time.perf_counter() - started, 3),
            },
            name="distill-manifest.json",
        )


@policy.command("eval")
@click.argument("scenario_name", metavar="SCENARIO")
@click.option("-x", "--experiment", default=None, help="Keyframe script the subgoals come from.")
@click.option("--episodes", type=int, default=20, help="Evaluation episodes per agent.")
@click.option("--scale", type=float, default=1.0, help="Resize the cloth (unseen-size generalization).")
@click.option(
    "--agent",
    "agents",
    type=click.Choice(["teacher", "student"]),
    multiple=True,
    default=("teacher", "student"),
    help="Agents to evaluate.",
)
@run_options
def evaluate_command(
    scenario_name: str,
    experiment: str | None,
    episodes: int,
    scale: float,
    agents: tuple[str, ...],
    seed: int | None,
    threads: int | None,
    out: pathlib.Path | None,
    options: tuple[tuple[str, str], ...],
) -> None:
    """Success rate and average achieved subgoals of the teacher and the student."""
    with exit_codes():
        if episodes < 1 or scale <= 0:
            msg = "episodes and scale must be positive"
            raise InputError(msg)
        loaded, settings, digest, policy_dir = _policy_setup(scenario_name, experiment, options, threads, out)
        seed = loaded.scenario.seed if seed is None else seed
        env = build_env(loaded, settings, scale)
        cfg = DistillConfig.from_settings(settings, loaded.scenario.camera)
        started = time.perf_counter()
        rows = []
        for agent in agents:
            fold = "-"
            if agent == "teacher":
                teacher = _load_teacher(policy_dir)
                summary = teacher_rollouts(teacher, env, episodes, cfg, seed)
                success = teacher_fold_success(env, teacher, loaded.scenario, scale)
                fold = "-" if success is None else str(success).lower()
            else:
                if not (policy_dir / "student").is_dir():
                    msg = f"no student at {policy_dir / 'student'}; run 'clothloop policy distill' first"
                    raise InputError(msg)
                summary = student_rollouts(Student.load(policy_dir / "student"), env, episodes, cfg, seed)
            rows.append(_eval_row(agent, scale, summary, fold))
            logger.info(
                "%s at scale %g: success %.0f%%, average subgoals %.2f",
                agent,
                scale,
                100 * summary.success_rate,
                summary.average_subgoals,
            )
        name = "eval.csv" if scale == 1.0 else f"eval-scale{scale:g}.csv"
        write_rows(policy_dir / name, EVAL_COLUMNS, rows)
        tracker = ArtifactTracker(policy_dir, digest)
        tracker.track_file(policy_dir / name, "metrics")
        tracker.write_manifest(
            {
                "command": "policy eval",
                "seed": seed,
                "scale": scale,
                "episodes": episodes,
                "runtime_s": round(time.perf_counter() - started, 3),
            },
            name=f"{Path(name).stem}-manifest.json",
        )


def _eval_row(agent: str, scale: float, summary: EvalSummary, fold: str) -> list[Any]:
    return [
        agent,
        f"{scale:g}",
        summary.episodes,
        f"{summary.success_rate:.4f}",
        f"{summary.average_subgoals:.4f}",
        f"{summary.mean_return:.4f}",
        fold,
    ]


@cli.command()
@click.argument("run_dir", type=click.Path(file_okay=False, path_type=pathlib.Path))
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["csv", "svg"]),
    default="csv",
    help="Write the tables as CSV, or tables and training curves as SVG.",
)
@run_options
def report(
    run_dir: pathlib.Path,
    fmt: str,
    seed: int | None,  # noqa: ARG001
    threads: int | None,  # noqa: ARG001
    out: pathlib.Path | None,
    options: tuple[tuple[str, str], ...],  # noqa: ARG001
) -> None:
    """Tabulate every run below a directory; missing runs are marked absent."""
    with exit_codes():
        collected = collect(run_dir)
        written = write_report(collected, out or run_dir / "report", fmt)
        for table in collected.tables:
            logger.info("%s: %d rows, %d absent cells", table.name, len(table.rows), table.absent_cells())
        logger.info("Wrote %d report files to %s", len(written), written[0].parent if written else out)


@cli.command()
def listopts() -> None:
    """List configuration options by group with their defaults."""
    options = get_options()
    defaults = get_default_settings()
    for group, keys in option_groups().items():
        logger.info("------------------------------------------------")
        logger.info("%s:", group.capitalize())
        for key in keys:
            option = options[key]
            logger.info("  %s (%s) = %s", key, option["type"], format_option_value(key, defaults.get(key)))
            logger.info("    %s", option["help"])


@cli.command()
def status() -> None:
    """Show status, data locations, changed settings and scenarios."""
    logger.info("Clothloop status:")
    logger.info("Version: %s", metadata.version("clothloop"))
    logger.info("User config: %s", user_config_file)
    logger.info("Data root: %s", data_root())
    logger.info("------------------------------------------------")
    defaults = get_default_settings()
    changed = {k: v for k, v in get_settings().items() if k in defaults and v != defaults[k]}
    logger.info("Settings changed from their defaults (%d):", len(changed))
    for key, value in sorted(changed.items()):
        logger.info(
            "  %s = %s (default %s)", key, format_option_value(key, value), format_option_value(key, defaults[key])
        )
    logger.info("------------------------------------------------")
    scenarios = bundled_scenarios()
    logger.info("Bundled scenarios (%d):", len(scenarios))
    for name in scenarios:
        scenario = load_scenario(name)
        logger.info("  %s: experiments %s", name, ", ".join(scenario.experiments))


def print_manifest(manifest_path: Path) -> None:
    """Print the files listed in a manifest."""
    logger.info("------------------------------------------------")
    manifest = read_manifest(manifest_path.parent, manifest_path.name)
    tracker_files = manifest.get("files", [])
    logger.info("Config hash: %s", manifest.get("config_hash"))
    for entry in tracker_files:
        logger.debug("  %s  %s (%s bytes)", entry["sha256"][:12], entry["path"], entry["size"])
    logger.info("%d files listed in %s", len(tracker_files), manifest_path)


def print_warnings(warnings: list[RunWarning]) -> None:
    """Print accumulated warnings."""
    logger.info("------------------------------------------------")
    if len(warnings) == 0:
        logger.info("No warnings.")
        return
    logger.info("Accumulated Warnings:")
    for warning in warnings:
        logger.info(warning.message)
