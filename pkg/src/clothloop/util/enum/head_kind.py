"""Output heads of the point regressor."""

from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from typing import Self


class HeadKind(Enum):
    """Output head of a point regressor, with its default training loss."""

    HEATMAP = ("sigmoid-k", "l2")
    VECTOR = ("vector-3", "l1")
    POOLED = ("pooled-regression", "l2")

    def __new__(cls, label: str, loss: str) -> Self:
        """Apply values to the new Enum.

        Args:
            label (str): serialized name of the head
            loss (str): default loss, ``l1`` or ``l2``

        Returns:
            HeadKind: A new HeadKind enum.
        """
        obj = object.__new__(cls)
        obj._value_ = label
        obj.loss = loss
        return obj

    @property
    def loss(self) -> str:
        """Default loss for this head."""
        return self._loss

    @loss.setter
    def loss(self, value: str) -> None:
        """Setter for loss."""
        self._loss = value

    @property
    def per_point(self) -> bool:
        """Whether the head emits one output row per input point."""
        return self is not HeadKind.POOLED
