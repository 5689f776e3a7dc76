"""Enumeration of warning types."""

from enum import Enum


class WarningTypes(Enum):
    """Enumeration of warning types."""

    DEGENERATE_FACE = "DEGENERATE_FACE"
    PIN_CONFLICT = "PIN_CONFLICT"
    REGION_OVERLAP = "REGION_OVERLAP"
    BACKTRACK = "BACKTRACK"
    BACKTRACK_EXHAUSTED = "BACKTRACK_EXHAUSTED"
    EMPTY_CORRESPONDENCES = "EMPTY_CORRESPONDENCES"
    CPD_DIAGONAL_LOADING = "CPD_DIAGONAL_LOADING"
    TEACHER_FAILURE = "TEACHER_FAILURE"
    EPISODE_ABORTED = "EPISODE_ABORTED"
    ABSENT_CELL = "ABSENT_CELL"
    HASH_MISMATCH = "HASH_MISMATCH"
