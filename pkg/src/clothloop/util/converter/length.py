"""Length conversion utilities."""

import math
import re

from clothloop.util.enum.length_unit import LengthUnit


def compact_value(value: float) -> str:
    """Convert a length in meters to the shortest exact unit string.

    Args:
        value (float): The length in meters.

    Returns:
        str: e.g. ``"15cm"`` for 0.15 or ``"2mm"`` for 0.002.

    """
    if math.isinf(value):
        return "inf"
    for unit in (LengthUnit.METER, LengthUnit.CENTIMETER, LengthUnit.MILLIMETER):
        scaled = round(value / unit.meters, 9)
        if scaled == int(scaled) and (scaled != 0 or unit is LengthUnit.METER):
            return f"{int(scaled)}{unit.suffix}"
    return f"{value}{LengthUnit.METER.suffix}"


def expand_value(value: str | float) -> float:
    """Convert a length string or number to meters.

    Args:
        value (str | float): The value to convert as necessary.

    Returns:
        float: Length in meters.

    """
    if isinstance(value, bool):
        msg = f"{value} is not a valid length"
        raise ValueError(msg)
    try:
        return float(value)
    except ValueError:
        pass
    except TypeError:
        pass

    # Regex to split number and unit
    match = re.match(r"^(\d+(?:\.\d+)?(?:e-?\d+)?)\s*(mm|cm|m)$", str(value).strip(), re.IGNORECASE)
    if not match:
        msg = f"{value} is not a valid length (e.g., 0.3m, 15cm, 2mm, inf)"
        raise ValueError(msg)

    number, unit = match.groups()
    return float(number) * LengthUnit.from_suffix(unit).meters


def convert(value: str | float) -> float:
    """Convert a length option to meters.

    Args:
        value (str | float): The configured value.

    Returns:
        float: Length in meters.

    """
    try:
        return expand_value(value)
    except ValueError as err:
        msg = f"Could not convert {value} to a length: {err}"
        raise ValueError(msg) from err
