"""Collect run outputs into ablation, detector and policy tables plus curve plots."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from xml.etree import ElementTree as ET

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from clothloop.errors import InputError  # noqa: E402
from clothloop.util.artifact_tracker import MANIFEST_NAME, ArtifactTracker, read_manifest  # noqa: E402
from clothloop.util.enum.variant import Variant  # noqa: E402
from clothloop.util.enum.warning_types import WarningTypes  # noqa: E402
from clothloop.util.serialize import read_rows, write_rows  # noqa: E402

logger = logging.getLogger("clothloop")

ABSENT = "absent"
DEFAULT_EXPERIMENTS = ("exp1", "exp2", "exp3")
DETECTOR_ROWS = (("iterative", Variant.FULL), ("rs", Variant.RS))
DETECTOR_COLUMNS = ("position_m", "z_deg", "x_deg")
POLICY_COLUMNS = ("agent", "scale", "success_rate", "average_subgoals", "fold_line_success")
SVG_NS = "{http://www.w3.org/2000/svg}"

# Curve files: (path under the run directory, x column, plotted columns).
CURVES = {
    "ppo": ("policy/curve.csv", "iteration", ("mean_return", "success_rate")),
    "student": ("policy/student_curve.csv", "epoch", ("grasp_loss", "place_loss")),
    "detector": ("full/detector_curve.csv", "step", ("heatmap_loss", "normal_loss", "midline_loss")),
}

mpl.rcParams["svg.hashsalt"] = "clothloop"
mpl.rcParams["svg.fonttype"] = "none"
mpl.rcParams["path.simplify"] = False


@dataclass
class Table:
    """A report table with string cells."""

    name: str
    header: tuple[str, ...]
    rows: list[list[str]] = field(default_factory=list)

    def absent_cells(self) -> int:
        """Number of cells without a run behind them."""
        return sum(cell == ABSENT for row in self.rows for cell in row)


@dataclass
class RunReport:
    """Everything ``report`` renders for one directory."""

    tables: list[Table]
    curves: dict[str, list[dict[str, str]]]
    config_hash: str | None


def _number(value: float | str | None, digits: int = 4) -> str:
    if value in {None, ""}:
        return ABSENT
    number = float(value)  # type: ignore[arg-type]
    return ABSENT if not math.isfinite(number) else f"{number:.{digits}f}"


def run_manifests(directory: Path) -> list[tuple[Path, dict[str, Any]]]:
    """Every run manifest (``manifest.json`` or ``<command>-manifest.json``) below ``directory``, reports excluded."""
    found = []
    for path in sorted(directory.rglob(f"*{MANIFEST_NAME}")):
        manifest = read_manifest(path.parent, path.name)
        if manifest.get("command") != "report":
            found.append((path, manifest))
    return found


def check_hashes(manifests: list[tuple[Path, dict[str, Any]]]) -> str | None:
    """The single config hash shared by all runs, or None when there are no runs.

    Raises:
        InputError: If runs were produced from different scenarios or settings.
    """
    hashes = {m["config_hash"] for _, m in manifests if m.get("config_hash")}
    if len(hashes) > 1:
        logger.warning(
            "%s: runs with %d different config hashes cannot share a report",
            WarningTypes.HASH_MISMATCH.name,
            len(hashes),
        )
        msg = f"refusing to merge runs with mismatched config hashes: {', '.join(sorted(hashes))}"
        raise InputError(msg)
    return next(iter(hashes), None)


def _estimate_runs(directory: Path, filename: str) -> dict[tuple[str, str], Path]:
    # <...>/estimate/<experiment>/<variant>/<filename>
    return {
        (p.parent.parent.name, p.parent.name): p
        for p in sorted(directory.rglob(filename))
        if p.parent.parent.parent.name == "estimate"
    }


def ablation_table(directory: Path) -> Table:
    """Final-frame vertex L2 per experiment and variant."""
    runs = _estimate_runs(directory, "metrics.csv")
    experiments = sorted({exp for exp, _ in runs}) or list(DEFAULT_EXPERIMENTS)
    variants = [v.value for v in Variant]
    table = Table("ablation", ("experiment", *variants))
    for exp in experiments:
        row = [exp]
        for variant in variants:
            path = runs.get((exp, variant))
            rows = read_rows(path) if path else []
            row.append(_number(rows[-1]["vertex_l2"]) if rows else ABSENT)
        table.rows.append(row)
    return table


def detector_table(directory: Path) -> Table:
    """Mean held-out detector errors of the iterative and the RS detector."""
    runs = _estimate_runs(directory, "detector.csv")
    table = Table("detector", ("detector", *DETECTOR_COLUMNS))
    for label, variant in DETECTOR_ROWS:
        rows = [r for (_, v), path in runs.items() if v == variant.value for r in read_rows(path)]
        if not rows:
            table.rows.append([label, *(ABSENT for _ in DETECTOR_COLUMNS)])
            continue
        means = [sum(float(r[c]) for r in rows) / len(rows) for c in DETECTOR_COLUMNS]
        table.rows.append([label, _number(means[0]), _number(means[1], 2), _number(means[2], 2)])
    return table


def policy_table(directory: Path) -> Table:
    """Success rate and average achieved subgoals per agent and cloth scale."""
    table = Table("policy", POLICY_COLUMNS)
    rows = [r for path in sorted(directory.rglob("eval*.csv")) if path.parent.name == "policy" for r in read_rows(path)]
    if not rows:
        rows = [{"agent": agent, "scale": "1.0"} for agent in ("teacher", "student")]
    for r in rows:
        table.rows.append(
            [
                r["agent"],
                r["scale"],
                _number(r.get("success_rate")),
                _number(r.get("average_subgoals"), 2),
                r.get("fold_line_success") or "-",
            ]
        )
    return table


def runtime_table(manifests: list[tuple[Path, dict[str, Any]]], directory: Path) -> Table:
    """Wall-clock seconds per run."""
    table = Table("runtimes", ("run", "command", "runtime_s"))
    for path, manifest in manifests:
        if "runtime_s" in manifest:
            run = path.relative_to(directory).as_posix()
            table.rows.append([run, str(manifest.get("command", "")), _number(manifest["runtime_s"], 2)])
    return table


def collect(directory: Path) -> RunReport:
    """Read every run below ``directory``.

    Missing runs become ``absent`` cells and are logged, never fatal.

    Raises:
        InputError: If ``directory`` does not exist or runs disagree on their config hash.
    """
    if not directory.is_dir():
        msg = f"report directory {directory} does not exist"
        raise InputError(msg)
    manifests = run_manifests(directory)
    digest = check_hashes(manifests)
    tables = [ablation_table(directory), detector_table(directory), policy_table(directory)]
    for table in tables:
        if absent := table.absent_cells():
            logger.warning("%s: %s table has %d absent cells", WarningTypes.ABSENT_CELL.name, table.name, absent)
    tables.append(runtime_table(manifests, directory))
    curves = {}
    for name, (relative, _, _) in CURVES.items():
        found = sorted(directory.rglob(Path(relative).name))
        found = [p for p in found if p.parent.name == Path(relative).parent.name]
        if found:
            curves[name] = read_rows(found[0])
    return RunReport(tables, curves, digest)


def render_table_svg(table: Table, path: Path) -> None:
    """Draw a table as an SVG figure."""
    fig, ax = plt.subplots(figsize=(1.4 * len(table.header), 0.4 * (len(table.rows) + 2)))
    ax.axis("off")
    cells = table.rows or [["" for _ in table.header]]
    ax.table(cellText=cells, colLabels=list(table.header), loc="center")
    ax.set_title(table.name)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curve(rows: list[dict[str, str]], x: str, ys: tuple[str, ...], path: Path, title: str) -> None:
    """Line plot with one marker per CSV row; every series gets the SVG id ``series-<column>``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [float(r[x]) for r in rows]
    for column in ys:
        ax.plot(xs, [float(r[column]) for r in rows], marker="o", markersize=3, label=column, gid=f"series-{column}")
    ax.set_xlabel(x)
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def count_svg_points(path: Path, series: str) -> int:
    """Number of markers drawn for one series of a plot written by :func:`plot_curve`."""
    root = ET.parse(path).getroot()  # noqa: S314
    for group in root.iter(f"{SVG_NS}g"):
        if group.get("id") == f"series-{series}":
            return sum(1 for _ in group.iter(f"{SVG_NS}use"))
    msg = f"{path} has no series {series!r}"
    raise InputError(msg)


def write_report(report: RunReport, out: Path, fmt: str = "csv") -> list[Path]:
    """Write the tables (and, for SVG, the curve plots) and a report manifest.

    Returns:
        list[Path]: The written table and plot files.

    Raises:
        InputError: For an unknown format.
    """
    if fmt not in {"csv", "svg"}:
        msg = f"unknown report format {fmt!r}; choose csv or svg"
        raise InputError(msg)
    out.mkdir(parents=True, exist_ok=True)
    tracker = ArtifactTracker(out, report.config_hash or "")
    written = []
    for table in report.tables:
        path = out / f"{table.name}.{fmt}"
        if fmt == "csv":
            write_rows(path, table.header, table.rows)
        else:
            render_table_svg(table, path)
        written.append(path)
    for name, rows in report.curves.items():
        _, x, ys = CURVES[name]
        path = out / f"{name}_curve.{fmt}"
        if fmt == "csv":
            write_rows(path, (x, *ys), [[r[x], *(r[y] for y in ys)] for r in rows])
        else:
            plot_curve(rows, x, ys, path, f"{name} training curve")
        written.append(path)
    for path in written:
        tracker.track_file(path, "report")
    tracker.write_manifest({"command": "report", "format": fmt})
    return written
