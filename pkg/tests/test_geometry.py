import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lingtrack.geometry import (
    BoundingBox,
    ObjectDescription,
    compute_overlap,
    constraint_satisfied,
    description_subset,
    normalize_tokens,
)

from conftest import random_box


def rasterized_overlap(a: BoundingBox, b: BoundingBox) -> float:
    """Integer-grid oracle: count unit cells covered by both boxes."""
    cells = 0
    for y in range(int(b.top), int(b.bottom)):
        for x in range(int(b.left), int(b.right)):
            if a.left <= x and x + 1 <= a.right and a.top <= y and y + 1 <= a.bottom:
                cells += 1
    return cells / b.area


class TestBoundingBox:
    def test_rejects_nonpositive_sides(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 0, 5)
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 5, -1)

    def test_derived_properties(self):
        box = BoundingBox(2, 3, 4, 6)
        assert box.right == 6
        assert box.bottom == 9
        assert box.area == 24
        assert box.center == (4, 6)


class TestComputeOverlap:
    def test_identical_boxes(self):
        box = BoundingBox(0, 0, 10, 10)
        assert compute_overlap(box, box) == 1.0

    def test_disjoint_boxes(self):
        assert compute_overlap(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 5, 5)) == 0.0

    def test_half_overlap(self):
        # oracle: 50 of the 100 unit cells of b are covered
        a = BoundingBox(0, 0, 10, 10)
        b = BoundingBox(5, 0, 10, 10)
        assert rasterized_overlap(a, b) == 0.5
        assert compute_overlap(a, b) == 0.5

    def test_contained_constraint(self):
        a = BoundingBox(0, 0, 100, 100)
        b = BoundingBox(10, 10, 5, 5)
        assert compute_overlap(a, b) == 1.0

    def test_asymmetry(self):
        a = BoundingBox(0, 0, 20, 20)
        b = BoundingBox(0, 0, 10, 10)
        assert compute_overlap(a, b) == 1.0
        assert compute_overlap(b, a) == 0.25

    def test_matches_rasterization_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            assert compute_overlap(a, b) == pytest.approx(
                rasterized_overlap(a, b), abs=1e-9
            )

    def test_range_and_monotonicity(self, rng):
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            o = compute_overlap(a, b)
            assert 0.0 <= o <= 1.0
            bigger = BoundingBox(a.left - 3, a.top - 3, a.width + 6, a.height + 6)
            assert compute_overlap(bigger, b) >= o


class TestNormalization:
    def test_lowercase_and_punctuation(self):
        assert normalize_tokens("A Person, with DARK shorts!") == [
            "a", "person", "with", "dark", "shorts",
        ]

    @given(st.text(max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, text):
        once = normalize_tokens(text)
        assert normalize_tokens(" ".join(once)) == once


class TestDescriptionSubset:
    def test_richer_description_subsumes(self):
        b = ObjectDescription("a person with dark shorts")
        c = ObjectDescription(
            "a person with dark shorts a green backpack and a white shirt"
        )
        assert description_subset(b, c)
        assert not description_subset(c, b)

    def test_reflexive(self):
        d = ObjectDescription("near a chardonnay wine bottle")
        assert description_subset(d, d)

    def test_token_absent(self):
        assert not description_subset(
            ObjectDescription("a green backpack"),
            ObjectDescription("a person with dark shorts"),
        )

    def test_multiset_counts(self):
        # duplicates must be matched in count
        assert not description_subset(
            ObjectDescription("a a person"), ObjectDescription("a person")
        )
        assert description_subset(
            ObjectDescription("a a person"), ObjectDescription("a tall a person")
        )

    def test_empty_is_never_subset(self):
        assert not description_subset(
            ObjectDescription(""), ObjectDescription("a person")
        )

    @given(
        st.lists(st.sampled_from("abcde"), max_size=5),
        st.lists(st.sampled_from("abcde"), max_size=5),
        st.lists(st.sampled_from("abcde"), max_size=5),
    )
    @settings(max_examples=200, deadline=None)
    def test_transitive(self, x, y, z):
        dx, dy, dz = (ObjectDescription(" ".join(t)) for t in (x, y, z))
        if description_subset(dx, dy) and description_subset(dy, dz):
            assert description_subset(dx, dz)


class TestConstraintSatisfied:
    target = BoundingBox(0, 0, 10, 10)

    def test_boundary_inclusive(self):
        # O(B, A) exactly 0.5 at t=0.5 counts as satisfied
        b = (BoundingBox(5, 0, 10, 10), ObjectDescription("a car"))
        assert constraint_satisfied(self.target, b, [], t=0.5) == 1

    def test_below_threshold(self):
        b = (BoundingBox(5.1, 0, 10, 10), ObjectDescription("a car"))
        assert constraint_satisfied(self.target, b, [], t=0.5) == 0

    def test_superset_rescues(self):
        b = (BoundingBox(9, 0, 10, 10), ObjectDescription("a person with dark shorts"))
        c = (
            BoundingBox(2, 0, 10, 10),
            ObjectDescription("a person with dark shorts and a green backpack"),
        )
        assert constraint_satisfied(self.target, b, [c], t=0.5) == 1

    def test_non_superset_does_not_rescue(self):
        b = (BoundingBox(9, 0, 10, 10), ObjectDescription("a person with dark shorts"))
        c = (BoundingBox(2, 0, 10, 10), ObjectDescription("a red bicycle"))
        assert constraint_satisfied(self.target, b, [c], t=0.5) == 0

    def test_invalid_threshold(self):
        b = (BoundingBox(0, 0, 10, 10), ObjectDescription("a car"))
        for t in (0, -0.5, 1.5):
            with pytest.raises(ValueError):
                constraint_satisfied(self.target, b, [], t=t)

    def test_monotone_in_candidate_set(self, rng):
        desc = ObjectDescription("a car")
        for _ in range(100):
            b = (random_box(rng), desc)
            others = [(random_box(rng), desc) for _ in range(3)]
            base = constraint_satisfied(self.target, b, others)
            more = others + [(random_box(rng), desc)]
            assert constraint_satisfied(self.target, b, more) >= base
