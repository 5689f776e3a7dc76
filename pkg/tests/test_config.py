from pathlib import Path

import pytest

from clothloop.config import (
    apply_options,
    convert_settings,
    data_root,
    get_default_settings,
    get_options,
    get_settings,
    format_option_value,
    option_groups,
    option_keys,
    reset_options,
)
from clothloop.errors import InputError
from clothloop.util.converter.length import compact_value, convert, expand_value
from clothloop.util.enum.length_unit import LengthUnit


@pytest.fixture(autouse=True)
def _fresh_options():
    yield
    reset_options()


@pytest.mark.parametrize(
    ("text", "meters"),
    [("0.15m", 0.15), ("15cm", 0.15), ("2mm", 0.002), ("0m", 0.0), (0.3, 0.3), ("inf", float("inf")), ("1e-3m", 0.001)],
)
def test_length_expansion(text: str | float, meters: float) -> None:
    assert expand_value(text) == pytest.approx(meters)


@pytest.mark.parametrize("bad", ["15 furlongs", "cm", "-", True])
def test_bad_lengths(bad: object) -> None:
    with pytest.raises(ValueError):  # noqa: PT011
        convert(bad)  # type: ignore[arg-type]


def test_compact_value() -> None:
    assert compact_value(0.15) == "15cm"
    assert compact_value(0.002) == "2mm"
    assert compact_value(2.0) == "2m"
    assert compact_value(0.0) == "0m"
    assert compact_value(float("inf")) == "inf"


def test_length_units() -> None:
    assert LengthUnit.from_suffix("CM") is LengthUnit.CENTIMETER
    assert LengthUnit.MILLIMETER.meters == pytest.approx(0.001)
    with pytest.raises(ValueError, match="valid length unit"):
        LengthUnit.from_suffix("km")


def test_defaults_are_converted() -> None:
    defaults = get_default_settings()
    assert defaults["SIGMA"] == pytest.approx(0.15)
    assert defaults["FRAME_RADIUS"] == pytest.approx(0.06)
    assert defaults["CHAMFER_THRESHOLD"] == float("inf")
    assert defaults["CANDIDATES"] == 40
    assert defaults["ON_REPEATED_BACKTRACK"] == "abort"


def test_every_option_has_help_and_default() -> None:
    options = get_options()
    defaults = get_default_settings()
    for key in option_keys():
        assert options[key]["help"]
        assert options[key]["examples"]
        assert key in defaults


def test_option_groups_cover_every_option() -> None:
    groups = option_groups()
    assert list(groups)[:3] == ["heatmap codec", "cloth simulator", "state estimation"]
    assert groups["heatmap codec"] == ["SIGMA", "TOP_FRACTION", "FRAME_RADIUS"]
    assert sorted(k for keys in groups.values() for k in keys) == sorted(option_keys())


def test_format_option_value() -> None:
    defaults = get_default_settings()
    assert format_option_value("SIGMA", defaults["SIGMA"]) == "15cm"
    assert format_option_value("AUG_NOISE", defaults["AUG_NOISE"]) == "2mm"
    assert format_option_value("CHAMFER_THRESHOLD", defaults["CHAMFER_THRESHOLD"]) == "inf"
    assert format_option_value("TOP_FRACTION", 0.05) == "0.05"
    assert format_option_value("DATA", "") == "(unset)"


def test_apply_and_reset() -> None:
    apply_options({"sigma": "3cm", "EPOCHS": 5})
    settings = get_settings()
    assert settings["SIGMA"] == pytest.approx(0.03)
    assert settings["EPOCHS"] == 5
    reset_options()
    assert get_settings()["EPOCHS"] == get_default_settings()["EPOCHS"]


def test_unknown_option() -> None:
    with pytest.raises(InputError, match="listopts"):
        apply_options({"NOT_AN_OPTION": 1})


def test_unconvertible_value() -> None:
    with pytest.raises(InputError, match="SIGMA"):
        convert_settings({"SIGMA": "a lot"})


def test_data_root_follows_setting(tmp_path) -> None:
    apply_options({"DATA": str(tmp_path)})
    assert data_root() == Path(tmp_path)
    apply_options({"DATA": ""})
    assert data_root().name == "clothloop"
