import json
from importlib import import_module, metadata
from pathlib import Path

import pytest
from click.testing import CliRunner

from clothloop.cli import cli
from clothloop.config import apply_options, reset_options
from clothloop.report import count_svg_points
from clothloop.util.serialize import read_rows

from .utils import run_command_in_shell

QUICK_SCENARIO = {
    "name": "quick",
    "seed": 5,
    "mesh": {"length": 0.5, "width": 0.1, "nx": 11, "ny": 5},
    "camera": {"position": [0.25, 0.0, 1.2], "target": [0.25, 0.0, 0.0]},
    "frames_per_move": 2,
    "experiments": {
        "exp1": {"moves": [{"time": 1.0, "grasp_fractions": [1.0], "translate": [0.0, 0.0, 0.06], "steps": 6}]}
    },
    "policy": {"candidates": 3, "thresholds": [5.0]},
    "options": {"CLOUD_POINTS": 80, "RELAX_STEPS": 10, "CORRESPONDENCES": 20},
}


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture(autouse=True)
def _fresh_options():
    yield
    reset_options()


@pytest.fixture
def scenario_file(tmp_path) -> Path:
    path = tmp_path / "quick.json"
    path.write_text(json.dumps(QUICK_SCENARIO))
    return path


def test_main_module() -> None:
    """Exercise (most of) the code in the `__main__` module."""
    import_module("clothloop.__main__")


def test_run_as_module() -> None:
    """Is the script runnable as a Python module?"""
    result = run_command_in_shell("python -m clothloop --help")
    assert result.exit_code == 0


def test_run_as_executable() -> None:
    """Is the script installed (as a `console_script`) and runnable as an executable?"""
    result = run_command_in_shell("clothloop --help")
    assert result.exit_code == 0


def test_status() -> None:
    """Does the `status` command run successfully?"""
    result = run_command_in_shell("clothloop status")
    assert result.exit_code == 0
    assert "fold-occluded" in result.stdout


def test_status_shows_changed_lengths(runner: CliRunner) -> None:
    apply_options({"PERTURBATION": "2cm"})
    result = runner.invoke(cli, ["status"])
    assert result.exit_code == 0, result.output
    assert "PERTURBATION = 2cm (default 5cm)" in result.output


def test_listopts() -> None:
    """Does the `listopts` command run successfully?"""
    result = run_command_in_shell("clothloop listopts")
    assert result.exit_code == 0
    assert "CHAMFER_THRESHOLD" in result.stdout
    assert "State estimation:" in result.stdout
    assert "SIGMA (float) = 15cm" in result.stdout
    assert "CHAMFER_THRESHOLD (float) = inf" in result.stdout


def test_version_runner(runner: CliRunner) -> None:
    """Does `--version` display the correct version?"""
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert result.output == f"cli, version {metadata.version('clothloop')}\n"


def test_demo_generate_is_reproducible(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    for name in ("a", "b"):
        result = runner.invoke(cli, ["demo", "generate", str(scenario_file), "--out", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
    first = (tmp_path / "a" / "manifest.json").read_bytes()
    assert first == (tmp_path / "b" / "manifest.json").read_bytes()
    assert json.loads(first)["frames"] == 1 + 1 * (2 + 1)


def test_unknown_scenario_exits_2(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["demo", "generate", "no-such-scenario", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_unknown_option_exits_2(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["demo", "generate", str(scenario_file), "--out", str(tmp_path), "-o", "BOGUS", "1"])
    assert result.exit_code == 2


def test_estimate_missing_dir_exits_2(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["estimate", str(tmp_path / "missing")])
    assert result.exit_code == 2


def test_report_on_empty_dir(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["report", str(tmp_path)])
    assert result.exit_code == 0, result.output
    rows = read_rows(tmp_path / "report" / "ablation.csv")
    assert all(row["full"] == "absent" for row in rows)


def test_estimate_then_report(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    demo = tmp_path / "demo"
    assert runner.invoke(cli, ["demo", "generate", str(scenario_file), "--out", str(demo)]).exit_code == 0
    result = runner.invoke(cli, ["estimate", str(demo), "--variant", "no-kp"])
    assert result.exit_code == 0, result.output
    run = demo / "estimate" / "exp1" / "no-kp"
    assert len(read_rows(run / "metrics.csv")) == 4
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "estimate"
    assert manifest["backtracks"] == 0

    result = runner.invoke(cli, ["report", str(demo), "--out", str(tmp_path / "report")])
    assert result.exit_code == 0, result.output
    ablation = read_rows(tmp_path / "report" / "ablation.csv")
    assert ablation[0]["experiment"] == "exp1"
    assert ablation[0]["no-kp"] != "absent"
    assert ablation[0]["full"] == "absent"


def test_full_variant_writes_detector_curve(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    demo = tmp_path / "demo"
    tiny = {"SHAPES_PER_RETRAIN": "2", "EPOCHS": "2", "ENCODER_WIDTH_1": "8", "ENCODER_WIDTH_2": "8", "DECODER_WIDTH": "8"}
    overrides = ["-o", "CHAMFER_THRESHOLD", "10m"]
    for key, value in tiny.items():
        overrides += ["-o", key, value]
    assert runner.invoke(cli, ["demo", "generate", str(scenario_file), "--out", str(demo), *overrides]).exit_code == 0
    result = runner.invoke(cli, ["estimate", str(demo), *overrides])
    assert "HASH_MISMATCH" not in result.output
    assert result.exit_code == 0, result.output
    run = demo / "estimate" / "exp1" / "full"
    curve = read_rows(run / "detector_curve.csv")
    assert list(curve[0]) == ["step", "round", "epoch", "heatmap_loss", "normal_loss", "midline_loss"]
    assert [r["epoch"] for r in curve] == ["0", "1"]
    assert len(list((run / "heatmaps").glob("frame_*.csv"))) == 3
    kinds = {entry["kind"] for entry in json.loads((run / "manifest.json").read_text())["files"]}
    assert {"curve", "heatmap", "metrics", "events"} <= kinds

    out = tmp_path / "report"
    result = runner.invoke(cli, ["report", str(demo), "--out", str(out), "--format", "svg"])
    assert result.exit_code == 0, result.output
    assert count_svg_points(out / "detector_curve.svg", "heatmap_loss") == len(curve)
    assert count_svg_points(out / "detector_curve.svg", "midline_loss") == len(curve)


def test_repeated_backtrack_exits_3(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    demo = tmp_path / "demo"
    assert runner.invoke(cli, ["demo", "generate", str(scenario_file), "--out", str(demo)]).exit_code == 0
    tiny = ["SHAPES_PER_RETRAIN", "2", "EPOCHS", "1", "ENCODER_WIDTH_1", "8", "ENCODER_WIDTH_2", "8", "DECODER_WIDTH", "8"]
    args = ["estimate", str(demo), "-o", "CHAMFER_THRESHOLD", "1e-9"]
    for key, value in zip(tiny[::2], tiny[1::2], strict=True):
        args += ["-o", key, value]
    result = runner.invoke(cli, args)
    assert result.exit_code == 3
    assert "HASH_MISMATCH" in result.output


def test_policy_eval_without_teacher_exits_2(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["policy", "eval", str(scenario_file), "--out", str(tmp_path), "--agent", "teacher"])
    assert result.exit_code == 2


def test_policy_train_distill_eval(runner: CliRunner, scenario_file: Path, tmp_path: Path) -> None:
    quick = [
        *("-o", "PPO_ITERATIONS", "1"),
        *("-o", "PPO_EPISODES", "2"),
        *("-o", "PPO_HIDDEN", "8"),
        *("-o", "DISTILL_PAIRS", "3"),
        *("-o", "EPOCHS", "1"),
        *("-o", "ENCODER_WIDTH_1", "8"),
        *("-o", "ENCODER_WIDTH_2", "8"),
        *("-o", "DECODER_WIDTH", "8"),
    ]
    out = ["--out", str(tmp_path)]
    assert runner.invoke(cli, ["policy", "train", str(scenario_file), *out, *quick]).exit_code == 0
    assert (tmp_path / "policy" / "teacher.params").is_file()
    assert runner.invoke(cli, ["policy", "distill", str(scenario_file), *out, *quick]).exit_code == 0
    assert (tmp_path / "policy" / "student" / "grasp.params").is_file()
    result = runner.invoke(cli, ["policy", "eval", str(scenario_file), *out, *quick, "--episodes", "1"])
    assert result.exit_code == 0, result.output
    rows = read_rows(tmp_path / "policy" / "eval.csv")
    assert [r["agent"] for r in rows] == ["teacher", "student"]
