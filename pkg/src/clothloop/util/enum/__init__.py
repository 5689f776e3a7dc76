"""Enum utilities for clothloop."""

from clothloop.util.enum.head_kind import HeadKind
from clothloop.util.enum.length_unit import LengthUnit
from clothloop.util.enum.variant import KeypointSource, Variant
from clothloop.util.enum.warning_types import WarningTypes

__all__ = ["HeadKind", "KeypointSource", "LengthUnit", "Variant", "WarningTypes"]
