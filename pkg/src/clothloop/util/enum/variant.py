"""State-estimation variants and keypoint sources."""

from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from typing import Self


class Variant(Enum):
    """HFM variant, ablation or baseline used by the state estimator."""

    FULL = "full"
    NO_KP = "no-kp"
    NO_LF = "no-lf"
    NO_FM = "no-fm"
    CPD = "cpd"
    RS = "rs"

    @property
    def uses_correspondences(self) -> bool:
        """Whether local feature matching pins correspondence vertices."""
        return self in {Variant.FULL, Variant.NO_KP, Variant.NO_LF, Variant.RS}

    @property
    def uses_keypoints(self) -> bool:
        """Whether keypoint regions are pinned."""
        return self in {Variant.FULL, Variant.NO_LF, Variant.NO_FM, Variant.RS}

    @property
    def uses_frames(self) -> bool:
        """Whether keypoint regions follow the decoded local frames."""
        return self in {Variant.FULL, Variant.NO_FM, Variant.RS}

    @property
    def retrains(self) -> bool:
        """Whether a chamfer violation triggers backtracking and retraining."""
        return self in {Variant.FULL, Variant.NO_LF, Variant.NO_FM}

    @staticmethod
    def from_name(name: str) -> Self:  # type: ignore[misc]
        """Look up a variant from its CLI name (``no-kp``) or enum name (``NO_KP``)."""
        for member in Variant:
            if name.lower() in {member.value, member.name.lower()}:
                return member
        msg = f"'{name}' is not a valid variant; choose from {', '.join(v.value for v in Variant)}."
        raise ValueError(msg)


class KeypointSource(Enum):
    """Where HFM takes its oriented keypoints from."""

    DETECTOR = "detector"
    ORACLE = "oracle"
