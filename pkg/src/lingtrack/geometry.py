"""Geometry of lingual-constraint satisfaction.

Pure functions deciding whether a described object is close enough to the
tracked target for a frame to count as positive.  All boxes are axis-aligned
and live in pixel coordinates.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

DEFAULT_THRESHOLD = 0.5

_PUNCT_RE = re.compile(r"[^\w\s]|_")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, (left, top) corner plus positive width/height."""

    left: float
    top: float
    width: float
    height: float

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"box must have positive width and height, got "
                f"{self.width}x{self.height}"
            )

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + self.width / 2, self.top + self.height / 2)

    def to_list(self) -> list[float]:
        return [self.left, self.top, self.width, self.height]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        left, top, width, height = values
        return cls(float(left), float(top), float(width), float(height))


def normalize_tokens(sentence: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace.  Idempotent."""
    return _PUNCT_RE.sub(" ", sentence.lower()).split()


@dataclass(frozen=True)
class ObjectDescription:
    """A natural-language description of an object, with normalized tokens."""

    raw_sentence: str
    tokens: tuple[str, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.tokens is None:
            object.__setattr__(
                self, "tokens", tuple(normalize_tokens(self.raw_sentence))
            )
        else:
            object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def token_counts(self) -> Counter:
        return Counter(self.tokens)


def compute_overlap(a: BoundingBox, b: BoundingBox) -> float:
    """Overlap of target box ``a`` with constraint box ``b``.

    Asymmetric: the intersection area is normalized by the area of ``b``
    (the constraining object), so the result is 1 exactly when ``b`` lies
    entirely inside ``a``.
    """
    ix = min(a.right, b.right) - max(a.left, b.left)
    iy = min(a.bottom, b.bottom) - max(a.top, b.top)
    if ix <= 0 or iy <= 0:
        return 0.0
    return (ix * iy) / b.area


def description_subset(b: ObjectDescription, c: ObjectDescription) -> bool:
    """True iff every token of ``b`` occurs in ``c`` at least as often.

    An empty description is never a subset: it carries no identifying
    characteristics, so vacuous matches are rejected.
    """
    if not b.tokens:
        return False
    counts_c = c.token_counts
    return all(counts_c[tok] >= n for tok, n in b.token_counts.items())


def constraint_satisfied(
    target: BoundingBox,
    constraint_obj: tuple[BoundingBox, ObjectDescription],
    others: list[tuple[BoundingBox, ObjectDescription]] = (),
    t: float = DEFAULT_THRESHOLD,
) -> int:
    """Binary label for one frame.

    1 iff the constraint box overlaps the target past ``t`` (inclusive), or
    any other object whose description contains the constraint description
    does.  Depth is never considered.
    """
    if not 0 < t <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {t}")
    box_b, desc_b = constraint_obj
    if compute_overlap(target, box_b) >= t:
        return 1
    for box_c, desc_c in others:
        if description_subset(desc_b, desc_c) and compute_overlap(target, box_c) >= t:
            return 1
    return 0
