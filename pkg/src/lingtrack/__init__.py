"""Tracking with lingual object constraints.

Library + CLI covering constraint-satisfaction geometry, constrained
dataset synthesis, two constraint-prediction heads with ablations, their
training schedules, and the full evaluation/statistics/reporting protocol.
"""

from .geometry import (
    BoundingBox,
    ObjectDescription,
    compute_overlap,
    constraint_satisfied,
    description_subset,
)

__all__ = [
    "BoundingBox",
    "ObjectDescription",
    "compute_overlap",
    "constraint_satisfied",
    "description_subset",
]

__version__ = "0.1.0"
