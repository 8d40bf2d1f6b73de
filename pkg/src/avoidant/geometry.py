"""Exact rational cubes, strided cube runs, and stage sets.

All endpoints are `fractions.Fraction`; equality, disjointness and set
algebra are exact. Function evaluation converts to float at the boundary,
never the other way around.

Stage sets are stored as sorted runs (anchor, stride, count, side) so that
deep construction stages, whose cube counts outgrow any explicit list, stay
representable; counts are arbitrary-precision integers.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

from .errors import (
    InvalidStageSet,
    NonDivisibleScale,
    ScaleMismatch,
    ScaleTooLarge,
)

RationalLike = Fraction | int | str | float

#: refuse to materialize explicit cube lists beyond this
MATERIALIZE_CAP = 2_000_000


def as_fraction(x: RationalLike) -> Fraction:
    """Coerce to an exact Fraction. Strings use the serialized "p/q" form."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(x)  # exact binary value
    return Fraction(x)


def fraction_str(x: Fraction) -> str:
    return f"{x.numerator}/{x.denominator}" if x.denominator != 1 else str(x.numerator)


def pow2_floor(x: float | Fraction) -> Fraction:
    """Largest power of 1/2 that is <= x. Requires 0 < x <= 1."""
    if isinstance(x, float):
        x = Fraction(x)
    if not 0 < x <= 1:
        raise ValueError(f"pow2_floor needs 0 < x <= 1, got {x}")
    # comparisons stay exact however small x gets
    k = max(0, x.denominator.bit_length() - x.numerator.bit_length() - 1)
    val = Fraction(1, 1 << k) if k else Fraction(1)
    while val > x:
        val /= 2
    while val * 2 <= x and val < 1:
        val *= 2
    return val


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with rational corners; sides may differ per axis."""

    lower: tuple[Fraction, ...]
    upper: tuple[Fraction, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("box corner dimension mismatch")
        if any(u < l for l, u in zip(self.lower, self.upper)):
            raise ValueError("box upper corner below lower corner")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains_point(self, p: Sequence[RationalLike]) -> bool:
        pts = [as_fraction(c) for c in p]
        return all(l <= c <= u for l, c, u in zip(self.lower, pts, self.upper))

    def contains_box(self, other: "Box") -> bool:
        return all(sl <= ol and ou <= su for sl, su, ol, ou in
                   zip(self.lower, self.upper, other.lower, other.upper))

    @staticmethod
    def product(boxes: Sequence["Box"]) -> "Box":
        lo: list[Fraction] = []
        hi: list[Fraction] = []
        for b in boxes:
            lo.extend(b.lower)
            hi.extend(b.upper)
        return Box(tuple(lo), tuple(hi))


@dataclass(frozen=True)
class Cube:
    """Closed axis-parallel cube with exact rational anchor and side."""

    lower: tuple[Fraction, ...]
    side: Fraction

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(as_fraction(c) for c in self.lower))
        object.__setattr__(self, "side", as_fraction(self.side))
        if self.side <= 0:
            raise ValueError("cube side must be positive")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def upper(self) -> tuple[Fraction, ...]:
        return tuple(c + self.side for c in self.lower)

    def as_box(self) -> Box:
        return Box(self.lower, self.upper)

    def contains_point(self, p: Sequence[RationalLike]) -> bool:
        return self.as_box().contains_point(p)

    def contains_cube(self, other: "Cube") -> bool:
        return self.as_box().contains_box(other.as_box())

    def volume(self) -> Fraction:
        return self.side ** self.dim

    def center(self) -> tuple[float, ...]:
        return tuple(float(c + self.side / 2) for c in self.lower)


def make_cube(lower: Sequence[RationalLike], side: RationalLike) -> Cube:
    return Cube(tuple(as_fraction(c) for c in lower), as_fraction(side))


def subdivide(parent: Cube, child_side: RationalLike) -> list[Cube]:
    """Tile `parent` by cubes of side `child_side`, lex-ordered by lower corner."""
    s = as_fraction(child_side)
    ratio = parent.side / s
    if ratio.denominator != 1 or ratio < 1:
        raise NonDivisibleScale(
            f"child side {s} does not divide parent side {parent.side}")
    k = int(ratio)
    n = parent.dim
    if k ** n > MATERIALIZE_CAP:
        raise InvalidStageSet(f"subdivision would create {k}^{n} cubes")
    out: list[Cube] = []
    idx = [0] * n
    while True:
        out.append(Cube(tuple(parent.lower[i] + idx[i] * s for i in range(n)), s))
        j = n - 1
        while j >= 0:
            idx[j] += 1
            if idx[j] < k:
                break
            idx[j] = 0
            j -= 1
        if j < 0:
            break
    return out


def leftmost_subcube(parent: Cube, side: RationalLike) -> Cube:
    s = as_fraction(side)
    if s > parent.side:
        raise ScaleTooLarge(f"side {s} exceeds parent side {parent.side}")
    return Cube(parent.lower, s)


@dataclass(frozen=True)
class CubeRun:
    """`count` equal cubes anchored at lower + k*stride*e_axis, k = 0..count-1.

    stride >= side keeps interiors disjoint inside the run; stride == side is
    a solid block. Counts are plain ints and may be astronomically large.
    """

    lower: tuple[Fraction, ...]
    side: Fraction
    count: int
    stride: Fraction
    axis: int = None  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(as_fraction(c) for c in self.lower))
        object.__setattr__(self, "side", as_fraction(self.side))
        object.__setattr__(self, "stride", as_fraction(self.stride))
        if self.axis is None:
            object.__setattr__(self, "axis", len(self.lower) - 1)
        if self.side <= 0 or self.count < 1:
            raise ValueError("run needs positive side and count")
        if self.count > 1 and self.stride < self.side:
            raise InvalidStageSet("run stride below side: overlapping interiors")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def anchor_coord(self) -> Fraction:
        return self.lower[self.axis]

    @property
    def last_coord(self) -> Fraction:
        return self.lower[self.axis] + (self.count - 1) * self.stride

    @property
    def span_end(self) -> Fraction:
        """Upper end of the run along its axis."""
        return self.last_coord + self.side

    def cube_at(self, k: int) -> Cube:
        if not 0 <= k < self.count:
            raise IndexError(k)
        lo = list(self.lower)
        lo[self.axis] = lo[self.axis] + k * self.stride
        return Cube(tuple(lo), self.side)

    def iter_cubes(self) -> Iterator[Cube]:
        if self.count > MATERIALIZE_CAP:
            raise InvalidStageSet(f"run too large to materialize ({self.count} cubes)")
        for k in range(self.count):
            yield self.cube_at(k)

    def contains_point(self, p: Sequence[Fraction]) -> bool:
        for i, (l, c) in enumerate(zip(self.lower, p)):
            if i == self.axis:
                continue
            if not l <= c <= l + self.side:
                return False
        c = p[self.axis]
        off = c - self.anchor_coord
        if off < 0 or c > self.span_end:
            return False
        k = off // self.stride
        k = int(k)
        for kk in (k, k - 1):  # closed cubes: boundary point may belong to previous
            if 0 <= kk < self.count:
                start = self.anchor_coord + kk * self.stride
                if start <= c <= start + self.side:
                    return True
        return False

    def clip_axis(self, lo: Fraction, hi: Fraction) -> "CubeRun | None":
        """Sub-run of cubes entirely inside [lo, hi] along the run axis."""
        if hi - lo < self.side:
            return None
        # smallest k with anchor >= lo, largest k with anchor + side <= hi
        k0 = -((lo - self.anchor_coord) // -self.stride)  # ceil
        k1 = (hi - self.side - self.anchor_coord) // self.stride  # floor
        k0 = max(int(k0), 0)
        k1 = min(int(k1), self.count - 1)
        if k0 > k1:
            return None
        lo_new = list(self.lower)
        lo_new[self.axis] = self.anchor_coord + k0 * self.stride
        return CubeRun(tuple(lo_new), self.side, k1 - k0 + 1, self.stride, self.axis)

    def without_axis_window(self, lo: Fraction, hi: Fraction) -> list["CubeRun"]:
        """Remove cubes whose closed extent intersects (lo, hi) interior-wise.

        A cube [a, a+s] is dropped when a < hi and a+s > lo.
        """
        out: list[CubeRun] = []
        first_bad = -((lo - self.side - self.anchor_coord) // -self.stride)  # ceil((lo-s-a0)/st)
        last_bad = (hi - self.anchor_coord) // self.stride  # floor
        first_bad = int(first_bad)
        last_bad = int(last_bad)
        # keep strict survivors: anchor + side <= lo  or  anchor >= hi
        while first_bad <= last_bad:
            a = self.anchor_coord + first_bad * self.stride
            if a + self.side <= lo:
                first_bad += 1
                continue
            break
        while last_bad >= first_bad:
            a = self.anchor_coord + last_bad * self.stride
            if a >= hi:
                last_bad -= 1
                continue
            break
        first_bad = max(first_bad, 0)
        last_bad = min(last_bad, self.count - 1)
        if first_bad > last_bad or last_bad < 0 or first_bad > self.count - 1:
            return [self]
        if first_bad > 0:
            out.append(CubeRun(self.lower, self.side, first_bad, self.stride, self.axis))
        if last_bad < self.count - 1:
            lo_new = list(self.lower)
            lo_new[self.axis] = self.anchor_coord + (last_bad + 1) * self.stride
            out.append(CubeRun(tuple(lo_new), self.side,
                               self.count - 1 - last_bad, self.stride, self.axis))
        return out


def _run_sort_key(r: CubeRun):
    return tuple(r.lower)


def _merge_runs(runs: list[CubeRun]) -> list[CubeRun]:
    """Merge runs that continue each other with identical geometry."""
    runs = sorted(runs, key=_run_sort_key)
    out: list[CubeRun] = []
    for r in runs:
        if out:
            p = out[-1]
            same_cross = (p.axis == r.axis and p.side == r.side and
                          all(a == b for i, (a, b) in enumerate(zip(p.lower, r.lower))
                              if i != p.axis))
            if same_cross and p.stride == r.stride and \
                    r.anchor_coord == p.anchor_coord + p.count * p.stride:
                out[-1] = CubeRun(p.lower, p.side, p.count + r.count, p.stride, p.axis)
                continue
            if same_cross and p.count == 1 and r.anchor_coord > p.anchor_coord and \
                    (r.count == 1 or r.stride == r.anchor_coord - p.anchor_coord):
                step = r.anchor_coord - p.anchor_coord
                if step >= p.side:
                    out[-1] = CubeRun(p.lower, p.side, r.count + 1, step, p.axis)
                    continue
        out.append(r)
    return out


@dataclass(frozen=True)
class StageSet:
    """Finite union of equal-side cubes with pairwise disjoint interiors."""

    dim: int
    side: Fraction
    runs: tuple[CubeRun, ...]
    stage_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "side", as_fraction(self.side))
        object.__setattr__(self, "runs",
                           tuple(_merge_runs(list(self.runs))))
        self._validate()

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_cubes(cubes: Iterable[Cube], stage_index: int = 0) -> "StageSet":
        cubes = list(cubes)
        if not cubes:
            raise InvalidStageSet("empty cube list; use StageSet.empty")
        side = cubes[0].side
        dim = cubes[0].dim
        runs = [CubeRun(c.lower, c.side, 1, c.side) for c in cubes]
        return StageSet(dim, side, tuple(runs), stage_index)

    @staticmethod
    def empty(dim: int, side: RationalLike, stage_index: int = 0) -> "StageSet":
        return StageSet(dim, as_fraction(side), (), stage_index)

    @staticmethod
    def interval(lo: RationalLike, hi: RationalLike, side: RationalLike,
                 stage_index: int = 0) -> "StageSet":
        """1D helper: tile [lo, hi] by `side` intervals (must divide exactly)."""
        lo, hi, s = as_fraction(lo), as_fraction(hi), as_fraction(side)
        ratio = (hi - lo) / s
        if ratio.denominator != 1:
            raise NonDivisibleScale(f"{s} does not divide [{lo},{hi}]")
        run = CubeRun((lo,), s, int(ratio), s)
        return StageSet(1, s, (run,), stage_index)

    # -- invariants --------------------------------------------------------

    def _validate(self):
        for r in self.runs:
            if r.dim != self.dim:
                raise InvalidStageSet("run dimension mismatch")
            if r.side != self.side:
                raise InvalidStageSet("unequal cube sides in stage set")
        if self.dim == 1:
            prev_end: Fraction | None = None
            for r in self.runs:  # sorted by anchor after merge
                if prev_end is not None and r.anchor_coord < prev_end:
                    raise InvalidStageSet("overlapping runs in stage set")
                prev_end = r.last_coord + self.side
        else:
            total = self.n_cubes
            if total <= 200_000:
                seen: dict[tuple, Cube] = {}
                for c in self.iter_cubes():
                    key = tuple(x / self.side for x in c.lower)
                    if key in seen:
                        raise InvalidStageSet("duplicate cube")
                    seen[key] = c
                # interiors disjoint: equal-side cubes overlap iff every
                # coordinate gap is < side, i.e. grid keys collide in a 3^n
                # neighbourhood with fractional offsets; exact pairwise check
                # within hashed neighbourhoods.
                buckets: dict[tuple, list[tuple]] = {}
                for key in seen:
                    cell = tuple(int(x // 1) for x in key)
                    buckets.setdefault(cell, []).append(key)
                for key in seen:
                    cell = tuple(int(x // 1) for x in key)
                    for nb in _neighbour_cells(cell):
                        for other in buckets.get(nb, ()):  # exact overlap test
                            if other is key or other == key:
                                continue
                            if all(abs(a - b) < 1 for a, b in zip(key, other)):
                                raise InvalidStageSet("overlapping cube interiors")

    # -- queries -----------------------------------------------------------

    @property
    def n_cubes(self) -> int:
        return sum(r.count for r in self.runs)

    @property
    def scale(self) -> Fraction:
        return self.side

    def is_empty(self) -> bool:
        return not self.runs

    def measure(self) -> Fraction:
        return self.side ** self.dim * self.n_cubes

    def iter_cubes(self) -> Iterator[Cube]:
        if self.n_cubes > MATERIALIZE_CAP:
            raise InvalidStageSet("stage set too large to materialize")
        for r in self.runs:
            yield from r.iter_cubes()

    def cubes(self) -> list[Cube]:
        return list(self.iter_cubes())

    def cube_at_index(self, i: int) -> Cube:
        """i-th cube in canonical (lexicographic) order; i may be a bignum."""
        if i < 0:
            raise IndexError(i)
        for r in self.runs:
            if i < r.count:
                return r.cube_at(int(i))
            i -= r.count
        raise IndexError("cube index out of range")

    def contains(self, p: Sequence[RationalLike]) -> bool:
        pf = tuple(as_fraction(c) for c in p)
        return any(r.contains_point(pf) for r in self.runs)

    def hull(self) -> Box:
        if not self.runs:
            raise InvalidStageSet("empty stage set has no hull")
        lo = [min(r.lower[i] for r in self.runs) for i in range(self.dim)]
        hi = []
        for i in range(self.dim):
            best = None
            for r in self.runs:
                top = r.span_end if i == r.axis else r.lower[i] + r.side
                best = top if best is None or top > best else best
            hi.append(best)
        return Box(tuple(lo), tuple(hi))

    # -- algebra -----------------------------------------------------------

    def restrict_to_cube(self, region: Cube) -> "StageSet":
        """Cubes of self wholly contained in `region` (any coarser scale)."""
        picked: list[CubeRun] = []
        for r in self.runs:
            ok = True
            for i in range(self.dim):
                if i == r.axis:
                    continue
                if not (region.lower[i] <= r.lower[i] and
                        r.lower[i] + r.side <= region.lower[i] + region.side):
                    ok = False
                    break
            if not ok:
                continue
            sub = r.clip_axis(region.lower[r.axis], region.lower[r.axis] + region.side)
            if sub is not None:
                picked.append(sub)
        return StageSet(self.dim, self.side, tuple(picked), self.stage_index)

    def subtract(self, other: "StageSet") -> "StageSet":
        """Remove every cube of self that lies inside some cube of `other`.

        Cube-level subtraction: `other` must be at the same or coarser scale.
        """
        if other.side < self.side:
            raise ScaleMismatch("subtrahend finer than set")
        if self.dim != 1:
            cubes = [c for c in self.iter_cubes()
                     if not any(o.contains_cube(c) for o in other.iter_cubes())]
            if not cubes:
                return StageSet.empty(self.dim, self.side, self.stage_index)
            return StageSet.from_cubes(cubes, self.stage_index)
        windows = sorted((r.anchor_coord, r.span_end)
                         for r in other.runs)
        runs = list(self.runs)
        for lo, hi in windows:
            nxt: list[CubeRun] = []
            for r in runs:
                nxt.extend(r.without_axis_window(lo, hi))
            runs = nxt
        return StageSet(self.dim, self.side, tuple(runs), self.stage_index)


def _neighbour_cells(cell: tuple) -> Iterator[tuple]:
    n = len(cell)
    deltas = [(-1, 0, 1)] * n
    idx = [0] * n
    while True:
        yield tuple(cell[i] + deltas[i][idx[i]] for i in range(n))
        j = n - 1
        while j >= 0:
            idx[j] += 1
            if idx[j] < 3:
                break
            idx[j] = 0
            j -= 1
        if j < 0:
            break


def stage_union(a: StageSet, b: StageSet) -> StageSet:
    if a.dim != b.dim:
        raise ScaleMismatch("dimension mismatch")
    if a.is_empty():
        return b
    if b.is_empty():
        return a
    if a.side != b.side:
        raise ScaleMismatch(f"union needs equal scales, got {a.side} vs {b.side}")
    return StageSet(a.dim, a.side, a.runs + b.runs, max(a.stage_index, b.stage_index))


def stage_intersect(a: StageSet, b: StageSet) -> StageSet:
    """Exact intersection; one operand may refine the other."""
    if a.dim != b.dim:
        raise ScaleMismatch("dimension mismatch")
    if a.side == b.side:
        if a.is_empty() or b.is_empty():
            return StageSet.empty(a.dim, a.side, max(a.stage_index, b.stage_index))
        if a.n_cubes > b.n_cubes:
            a, b = b, a
        keys = {tuple(c.lower) for c in b.iter_cubes()}
        cubes = [c for c in a.iter_cubes() if tuple(c.lower) in keys]
        if not cubes:
            return StageSet.empty(a.dim, a.side, max(a.stage_index, b.stage_index))
        return StageSet.from_cubes(cubes, max(a.stage_index, b.stage_index))
    fine, coarse = (a, b) if a.side < b.side else (b, a)
    ratio = coarse.side / fine.side
    if ratio.denominator != 1:
        raise ScaleMismatch("scales are not nested")
    parts: list[StageSet] = [fine.restrict_to_cube(c) for c in coarse.iter_cubes()]
    runs: tuple[CubeRun, ...] = ()
    for p in parts:
        runs = runs + p.runs
    return StageSet(fine.dim, fine.side, runs, max(a.stage_index, b.stage_index))


def contains(s: StageSet, p: Sequence[RationalLike]) -> bool:
    return s.contains(p)


# -- scale ladder -----------------------------------------------------------

@dataclass
class LadderRung:
    N: int
    d: Fraction  # constant feeding the next scale (c1 of the producing step)
    ell: Fraction  # basic cube side at this stage


@dataclass
class ScaleLadder:
    """Per-stage (N_j, d_j, ell_j) records with monotonicity checks."""

    v: int
    n: int = 1
    m: int = 1
    rungs: list[LadderRung] = field(default_factory=list)

    def push(self, N: int, d: Fraction, ell: Fraction):
        ell = as_fraction(ell)
        d = as_fraction(d)
        if self.rungs:
            prev = self.rungs[-1]
            if N <= prev.N:
                raise InvalidStageSet(f"ladder N must increase: {prev.N} -> {N}")
            if not (ell < Fraction(1, N) <= prev.ell):
                raise InvalidStageSet(
                    f"ladder scale law violated: ell={ell}, 1/N={Fraction(1, N)}, "
                    f"prev ell={prev.ell}")
        self.rungs.append(LadderRung(N, d, ell))

    def ell(self, j: int) -> Fraction:
        return self.rungs[j].ell

    def __len__(self) -> int:
        return len(self.rungs)


# -- serialization -----------------------------------------------------------

#: per-cube JSON above this count switches to run records
JSON_CUBE_CAP = 100_000


def stageset_to_records(s: StageSet) -> list[dict]:
    """Spec JSON schema: one record per cube, exact "p/q" strings.

    Sets larger than JSON_CUBE_CAP are written as run records instead
    (extra keys stride/count/axis) and carry "encoding": "runs".
    """
    if s.n_cubes <= JSON_CUBE_CAP:
        return [{"lower": [fraction_str(c) for c in cube.lower],
                 "side": fraction_str(cube.side),
                 "stage": s.stage_index}
                for cube in s.iter_cubes()]
    return [{"lower": [fraction_str(c) for c in r.lower],
             "side": fraction_str(r.side),
             "stride": fraction_str(r.stride),
             "count": str(r.count),
             "axis": r.axis,
             "stage": s.stage_index,
             "encoding": "runs"}
            for r in s.runs]


def stageset_to_json(s: StageSet) -> str:
    return json.dumps(stageset_to_records(s), sort_keys=True)


def stageset_from_records(records: list[dict]) -> StageSet:
    if not records:
        raise InvalidStageSet("no records")
    stage = records[0].get("stage", 0)
    runs = []
    for rec in records:
        lower = tuple(as_fraction(x) for x in rec["lower"])
        side = as_fraction(rec["side"])
        if rec.get("encoding") == "runs" or "count" in rec:
            runs.append(CubeRun(lower, side, int(rec["count"]),
                                as_fraction(rec["stride"]), int(rec["axis"])))
        else:
            runs.append(CubeRun(lower, side, 1, side))
    return StageSet(len(records[0]["lower"]), runs[0].side, tuple(runs), stage)


def stageset_from_json(text: str) -> StageSet:
    return stageset_from_records(json.loads(text))


def stageset_to_csv(s: StageSet) -> str:
    """CSV with one cube per row: stage, side, lower_0.. (exact strings)."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["stage", "side"] + [f"lower_{i}" for i in range(s.dim)])
    if s.n_cubes > JSON_CUBE_CAP:
        raise InvalidStageSet("set too large for per-cube CSV; use JSON run records")
    for cube in s.iter_cubes():
        w.writerow([s.stage_index, fraction_str(cube.side)]
                   + [fraction_str(c) for c in cube.lower])
    return buf.getvalue()


def lsq_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ys against xs."""
    k = len(xs)
    if k < 2:
        raise ValueError("need at least two points")
    mx = sum(xs) / k
    my = sum(ys) / k
    num = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    den = sum((x - mx) ** 2 for x in xs)
    return num / den


def dyadic_floor_to_divisor(target: float, unit: Fraction) -> Fraction:
    """Largest unit/2^t that is <= target; exact divisor of `unit`."""
    if target <= 0:
        raise ValueError("target must be positive")
    val = unit
    while val > target:
        val /= 2
    return val
