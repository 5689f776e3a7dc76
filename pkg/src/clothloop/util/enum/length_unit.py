"""Length unit enum for metric conversions."""

from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from typing import Self


class LengthUnit(Enum):
    """Length unit suffix converter."""

    METER = (0, "m")
    CENTIMETER = (-2, "cm")
    MILLIMETER = (-3, "mm")

    def __new__(cls, exponent: int, suffix: str) -> Self:
        """Apply values to the new Enum.

        Args:
            exponent (int): the base-10 exponent of the unit in meters
            suffix (str): the unit suffix

        Returns:
            LengthUnit: A new LengthUnit enum.

        """
        obj = object.__new__(cls)
        obj._value_ = exponent
        obj.suffix = suffix
        return obj

    @property
    def suffix(self) -> str:
        """Return the suffix for this unit."""
        return self._suffix

    @suffix.setter
    def suffix(self, value: str) -> None:
        """Setter for suffix."""
        self._suffix = value

    @property
    def meters(self) -> float:
        """Size of one unit in meters."""
        return 10.0 ** self.value

    @staticmethod
    def from_suffix(suffix: str) -> Self:  # type: ignore[misc]
        """Static method to look up from a suffix."""
        for member in LengthUnit:
            if member.suffix == suffix.lower():
                return member
        msg = f"'{suffix}' is not a valid length unit suffix."
        raise ValueError(msg)
