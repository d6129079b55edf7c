"""Box and torus geometry: addressing layer for every other module.

Boxes are axis-aligned cubes on Z^d addressed by an integer center and a
side length, with the half-open membership rule

    y in B(c, n)  <=>  -n/2 <= c_i - y_i < n/2   for every coordinate i,

so |B(c, n)| = n^d for every parity of n.  Per coordinate this is the
integer range [c - (n-1)//2, c + n//2].

Side-length schedules map a box side n to the side of its sub-box grid.
The default schedule is ceil(ln n)^4 (natural log throughout this
package); it only bites at astronomically large n, so toy schedules are
first-class citizens and the hierarchy experiments use them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Callable, Sequence

__all__ = [
    "TorusSpec",
    "LatticeBox",
    "SubBoxGrid",
    "ScheduleParams",
    "paper_schedule",
    "named_schedule",
    "schedule_side",
    "iterated_schedule",
    "scale_box",
    "subbox_grid",
    "top_level_boxes",
]


@dataclass(frozen=True)
class TorusSpec:
    """Discrete d-dimensional torus of side N (d >= 3)."""

    d: int
    N: int

    def __post_init__(self):
        if self.d < 3:
            raise ValueError(f"dimension must be >= 3, got {self.d}")
        if self.N < 1:
            raise ValueError(f"side length must be >= 1, got {self.N}")

    @property
    def volume(self) -> int:
        return self.N**self.d

    def wrap(self, x: Sequence[int]) -> tuple[int, ...]:
        """Coordinatewise mod-N map from Z^d onto the torus vertex set."""
        return tuple(int(c) % self.N for c in x)

    def distance(self, x: Sequence[int], y: Sequence[int]) -> int:
        """Graph distance on the torus (wrapped l1)."""
        total = 0
        for a, b in zip(x, y):
            delta = abs(int(a) - int(b)) % self.N
            total += min(delta, self.N - delta)
        return total


@dataclass(frozen=True)
class LatticeBox:
    """Axis-aligned box B(center, side) on Z^d."""

    center: tuple[int, ...]
    side: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        if self.side < 1:
            raise ValueError(f"box side must be >= 1, got {self.side}")

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def volume(self) -> int:
        return self.side**self.d

    @property
    def lo(self) -> tuple[int, ...]:
        s = self.side
        return tuple(c - (s - 1) // 2 for c in self.center)

    @property
    def hi(self) -> tuple[int, ...]:
        """Inclusive upper corner."""
        s = self.side
        return tuple(c + s // 2 for c in self.center)

    def contains(self, y: Sequence[int]) -> bool:
        return all(l <= int(v) <= h for l, v, h in zip(self.lo, y, self.hi))

    __contains__ = contains

    def sites(self):
        """Iterate all lattice points of the box (lexicographic)."""
        ranges = [range(l, h + 1) for l, h in zip(self.lo, self.hi)]
        return product(*ranges)

    def translate(self, z: Sequence[int]) -> "LatticeBox":
        return LatticeBox(tuple(c + int(v) for c, v in zip(self.center, z)), self.side)

    def scaled(self, alpha) -> "LatticeBox":
        return scale_box(self, alpha)


def scale_box(b: LatticeBox, alpha) -> LatticeBox:
    """B^alpha = B(center, alpha * side), rounded to nearest (ties up)."""
    frac = Fraction(alpha) * b.side
    side = int(math.floor(frac + Fraction(1, 2)))
    if side <= 0:
        raise ValueError(f"scaled side {frac} rounds to a nonpositive integer")
    return LatticeBox(b.center, side)


def paper_schedule(n: int) -> int:
    """Default sub-box side: ceil(ln n)^4 (natural log)."""
    return math.ceil(math.log(n)) ** 4


def cbrt_schedule(n: int) -> int:
    return math.ceil(n ** (1.0 / 3.0))


def minus1_schedule(n: int) -> int:
    """s(n) = n - 1: the steepest valid descent, used by hierarchy tests
    at small sides where nothing shallower admits two levels."""
    return n - 1


def const_schedule(m: int) -> Callable[[int], int]:
    def schedule(_n: int) -> int:
        return m

    schedule.__name__ = f"const{m}_schedule"
    return schedule


def named_schedule(name: str) -> Callable[[int], int]:
    """Resolve a schedule name from a config file ("paper", "cbrt",
    "minus1", "const:<m>")."""
    if name == "paper":
        return paper_schedule
    if name == "cbrt":
        return cbrt_schedule
    if name == "minus1":
        return minus1_schedule
    if name.startswith("const:"):
        return const_schedule(int(name.split(":", 1)[1]))
    raise ValueError(f"unknown schedule {name!r}")


@dataclass(frozen=True)
class ScheduleParams:
    """Knobs shared by the hierarchy checkers.

    rho is the traversal-density parameter, lambda_dilution the per-level
    density dilution factor, and c_a / c_b / c_h the checker constants
    (chemical-distance, boundary-density, cell-density).  Defaults are
    permissive so that full boxes and dense configurations pass.
    """

    schedule: Callable[[int], int] = paper_schedule
    rho: float = 1.0
    lambda_dilution: float = 0.5
    c_a: float = 6.0
    c_b: float = 0.1
    c_h: float = 0.01
    k: int = 0
    c_a_zone: float | None = None  # restriction-zone constant; defaults to c_a

    def __post_init__(self):
        if self.rho <= 0 or self.c_a <= 0 or self.c_b <= 0 or self.c_h <= 0:
            raise ValueError("rho and checker constants must be strictly positive")
        if not (0 < self.lambda_dilution <= 1):
            raise ValueError("lambda_dilution must lie in (0, 1]")
        if self.k < 0:
            raise ValueError("hierarchy depth k must be >= 0")

    @property
    def zone_constant(self) -> float:
        return self.c_a if self.c_a_zone is None else self.c_a_zone

    def diluted(self) -> "ScheduleParams":
        """Parameters one hierarchy level down (rho -> rho * lambda)."""
        return ScheduleParams(
            schedule=self.schedule,
            rho=self.rho * self.lambda_dilution,
            lambda_dilution=self.lambda_dilution,
            c_a=self.c_a,
            c_b=self.c_b,
            c_h=self.c_h,
            k=max(self.k - 1, 0),
            c_a_zone=self.c_a_zone,
        )


def schedule_side(params: ScheduleParams, n: int) -> int:
    """Sub-box side for a box of side n under params.schedule."""
    if n < 2:
        raise ValueError(f"schedule domain starts at n=2, got {n}")
    m = int(params.schedule(n))
    if m < 1:
        raise ValueError(f"schedule returned {m} < 1 at n={n}")
    return m


def iterated_schedule(params: ScheduleParams, n: int, i: int) -> int:
    """Apply the schedule i times; i = 0 is the identity."""
    if i < 0:
        raise ValueError(f"iteration count must be >= 0, got {i}")
    value = n
    for level in range(i):
        if value < 2:
            raise ValueError(
                f"schedule collapsed below 2 at iteration {level} (value {value})"
            )
        value = schedule_side(params, value)
    return value


@dataclass(frozen=True)
class SubBoxGrid:
    """The sub-boxes of a parent box: a cubic grid of side-m cells whose
    centers lie on the parent-anchored m-spaced lattice inside the
    enlarged region, together with the isomorphism onto a centered box
    of Z^d (delta coordinates)."""

    parent: LatticeBox
    cell_side: int
    cells: tuple[LatticeBox, ...]
    sigma_side: int
    _offset: int = field(repr=False, default=0)

    @property
    def d(self) -> int:
        return self.parent.d

    def delta_index(self, cell: LatticeBox) -> tuple[int, ...]:
        """Delta coordinates of a cell; the image of the full grid is
        exactly B(0, sigma_side) in Z^d."""
        m = self.cell_side
        out = []
        for c, p in zip(cell.center, self.parent.center):
            q, r = divmod(c - p, m)
            if r != 0:
                raise ValueError(f"{cell} is not on the grid of {self.parent}")
            out.append(q - self._offset)
        return tuple(out)

    def cell_at_delta(self, delta: Sequence[int]) -> LatticeBox:
        m = self.cell_side
        center = tuple(
            p + (int(k) + self._offset) * m
            for p, k in zip(self.parent.center, delta)
        )
        return LatticeBox(center, m)


def subbox_grid(b: LatticeBox, params: ScheduleParams) -> SubBoxGrid:
    """Grid of side-s(n) cells covering b^5.

    The enlarged region has side 5n + 3*ceil(ln n)^6 under the default
    schedule.  Toy schedules drop the margin term (region side exactly
    5n): the margin is a vanishing fraction of a cell there and keeping
    it would explode toy grids; the cell counts of the 5n region are the
    documented contract for custom schedules.
    """
    n = b.side
    m = schedule_side(params, n)
    if m >= n:
        raise ValueError(
            f"cell side {m} must be < parent side {n}; "
            "use a toy schedule at small n"
        )
    region = 5 * n
    if params.schedule is paper_schedule:
        region += 3 * math.ceil(math.log(n)) ** 6
    # Cell centers: parent.center + m*k with m*k in (-region/2, region/2].
    k_hi = region // (2 * m)
    if (region % 2) == 0 and (region // 2) % m == 0:
        k_lo = -(region // (2 * m)) + 1
    else:
        k_lo = -k_hi
    ks = range(k_lo, k_hi + 1)
    t = len(ks)
    offset = k_hi - t // 2  # shift so delta image is exactly B(0, t)
    cells = tuple(
        LatticeBox(tuple(c + m * k for c, k in zip(b.center, kv)), m)
        for kv in product(ks, repeat=b.d)
    )
    return SubBoxGrid(parent=b, cell_side=m, cells=cells, sigma_side=t, _offset=offset)


def top_level_boxes(t: TorusSpec) -> tuple[LatticeBox, ...]:
    """Translates of B(ceil(N/10)) with centers in B(N); for 10 | N there
    are exactly 10^d of them."""
    if t.N < 10:
        raise ValueError(f"torus side must be >= 10, got {t.N}")
    n = math.ceil(t.N / 10)
    big = LatticeBox((0,) * t.d, t.N)
    lo, hi = big.lo[0], big.hi[0]
    ks = [k for k in range(lo // n - 1, hi // n + 2) if lo <= k * n <= hi]
    return tuple(
        LatticeBox(tuple(n * k for k in kv), n) for kv in product(ks, repeat=t.d)
    )
