"""Exact binary-rational coordinates for mesh topology.

All mesh predicates (containment, adjacency, equality) are routed through
this module so that no floating-point tolerance enters mesh topology.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import total_ordering


class BoxRelation(Enum):
    DISJOINT = "disjoint"
    TOUCHING = "touching"
    OVERLAPPING = "overlapping-interiors"
    A_CONTAINS_B = "a-contains-b"
    B_CONTAINS_A = "b-contains-a"
    EQUAL = "equal"


@total_ordering
@dataclass(frozen=True)
class DyadicValue:
    """A rational number numerator / 2**scale, kept in canonical form.

    Canonical form: numerator odd, or scale == 0.
    """

    numerator: int
    scale: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"scale must be nonnegative, got {self.scale}")
        num, sc = self.numerator, self.scale
        while sc > 0 and num % 2 == 0:
            num //= 2
            sc -= 1
        object.__setattr__(self, "numerator", num)
        object.__setattr__(self, "scale", sc)

    @staticmethod
    def from_float(x: float, max_scale: int = 60) -> "DyadicValue":
        """Exact conversion of a float that is a binary rational."""
        scaled = x * (1 << max_scale)
        if scaled != int(scaled):
            raise ValueError(f"{x} is not dyadic at scale {max_scale}")
        return DyadicValue(int(scaled), max_scale)

    def __float__(self) -> float:
        return self.numerator / (1 << self.scale)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DyadicValue):
            return NotImplemented
        return cmp(self, other) == 0

    def __lt__(self, other: "DyadicValue") -> bool:
        return cmp(self, other) < 0

    def __hash__(self):
        return hash((self.numerator, self.scale))

    def __add__(self, other: "DyadicValue") -> "DyadicValue":
        s = max(self.scale, other.scale)
        a = self.numerator << (s - self.scale)
        b = other.numerator << (s - other.scale)
        return DyadicValue(a + b, s)

    def __sub__(self, other: "DyadicValue") -> "DyadicValue":
        return self + DyadicValue(-other.numerator, other.scale)

    def __neg__(self) -> "DyadicValue":
        return DyadicValue(-self.numerator, self.scale)

    def __mul__(self, other: "DyadicValue") -> "DyadicValue":
        return DyadicValue(self.numerator * other.numerator,
                           self.scale + other.scale)

    def __abs__(self) -> "DyadicValue":
        return DyadicValue(abs(self.numerator), self.scale)

    def halve(self) -> "DyadicValue":
        return DyadicValue(self.numerator, self.scale + 1)

    def __repr__(self):
        if self.scale == 0:
            return f"Dy({self.numerator})"
        return f"Dy({self.numerator}/2^{self.scale})"


DY_ZERO = DyadicValue(0)
DY_ONE = DyadicValue(1)


def dy(value: int | float | DyadicValue) -> DyadicValue:
    """Coerce an int, dyadic float, or DyadicValue to DyadicValue."""
    if isinstance(value, DyadicValue):
        return value
    if isinstance(value, int):
        return DyadicValue(value)
    return DyadicValue.from_float(value)


def cmp(a: DyadicValue, b: DyadicValue) -> int:
    """Exact three-way comparison: -1, 0 or +1."""
    s = max(a.scale, b.scale)
    lhs = a.numerator << (s - a.scale)
    rhs = b.numerator << (s - b.scale)
    return (lhs > rhs) - (lhs < rhs)


def dy_min(a: DyadicValue, b: DyadicValue) -> DyadicValue:
    return a if cmp(a, b) <= 0 else b


def dy_max(a: DyadicValue, b: DyadicValue) -> DyadicValue:
    return a if cmp(a, b) >= 0 else b


@dataclass(frozen=True)
class DyadicBox:
    """Closed axis-aligned rectangle with nonempty interior."""

    x_lo: DyadicValue
    x_hi: DyadicValue
    y_lo: DyadicValue
    y_hi: DyadicValue

    def __post_init__(self):
        if cmp(self.x_lo, self.x_hi) >= 0 or cmp(self.y_lo, self.y_hi) >= 0:
            raise ValueError(f"box has empty interior: {self}")

    @staticmethod
    def of(x_lo, x_hi, y_lo, y_hi) -> "DyadicBox":
        return DyadicBox(dy(x_lo), dy(x_hi), dy(y_lo), dy(y_hi))

    @property
    def width(self) -> DyadicValue:
        return self.x_hi - self.x_lo

    @property
    def height(self) -> DyadicValue:
        return self.y_hi - self.y_lo

    def midpoint(self) -> tuple[DyadicValue, DyadicValue]:
        return ((self.x_lo + self.x_hi).halve(),
                (self.y_lo + self.y_hi).halve())

    def contains_point(self, x: DyadicValue, y: DyadicValue) -> bool:
        """Closed containment."""
        return (cmp(self.x_lo, x) <= 0 and cmp(x, self.x_hi) <= 0
                and cmp(self.y_lo, y) <= 0 and cmp(y, self.y_hi) <= 0)

    def interior_contains_point(self, x: DyadicValue, y: DyadicValue) -> bool:
        return (cmp(self.x_lo, x) < 0 and cmp(x, self.x_hi) < 0
                and cmp(self.y_lo, y) < 0 and cmp(y, self.y_hi) < 0)

    def contains_box(self, other: "DyadicBox") -> bool:
        return (cmp(self.x_lo, other.x_lo) <= 0
                and cmp(other.x_hi, self.x_hi) <= 0
                and cmp(self.y_lo, other.y_lo) <= 0
                and cmp(other.y_hi, self.y_hi) <= 0)

    def touches(self, other: "DyadicBox") -> bool:
        """Closed intersection nonempty."""
        return (cmp(self.x_lo, other.x_hi) <= 0
                and cmp(other.x_lo, self.x_hi) <= 0
                and cmp(self.y_lo, other.y_hi) <= 0
                and cmp(other.y_lo, self.y_hi) <= 0)

    def interiors_overlap(self, other: "DyadicBox") -> bool:
        return (cmp(self.x_lo, other.x_hi) < 0
                and cmp(other.x_lo, self.x_hi) < 0
                and cmp(self.y_lo, other.y_hi) < 0
                and cmp(other.y_lo, self.y_hi) < 0)

    def float_bounds(self) -> tuple[float, float, float, float]:
        return (float(self.x_lo), float(self.x_hi),
                float(self.y_lo), float(self.y_hi))


def overlay(boxes_a, boxes_b) -> list[DyadicBox]:
    """Common refinement of two box partitions of the same domain.

    Returns the nonempty pairwise interior intersections.  When both inputs
    partition the same domain the result is again a partition, and every
    overlay cell is contained in exactly one cell of each input.
    """
    out = []
    for a in boxes_a:
        for b in boxes_b:
            if a.interiors_overlap(b):
                out.append(DyadicBox(
                    dy_max(a.x_lo, b.x_lo), dy_min(a.x_hi, b.x_hi),
                    dy_max(a.y_lo, b.y_lo), dy_min(a.y_hi, b.y_hi)))
    return out


def box_relation(a: DyadicBox, b: DyadicBox) -> BoxRelation:
    """Classify the set relation of two closed boxes."""
    if a == b:
        return BoxRelation.EQUAL
    if a.contains_box(b):
        return BoxRelation.A_CONTAINS_B
    if b.contains_box(a):
        return BoxRelation.B_CONTAINS_A
    if a.interiors_overlap(b):
        return BoxRelation.OVERLAPPING
    if a.touches(b):
        return BoxRelation.TOUCHING
    return BoxRelation.DISJOINT
