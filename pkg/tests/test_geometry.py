from fractions import Fraction as F

import pytest

from avoidant.errors import (
    InvalidStageSet,
    NonDivisibleScale,
    ScaleMismatch,
    ScaleTooLarge,
)
from avoidant.geometry import (
    Cube,
    CubeRun,
    StageSet,
    ScaleLadder,
    as_fraction,
    contains,
    leftmost_subcube,
    make_cube,
    pow2_floor,
    stage_intersect,
    stage_union,
    stageset_from_json,
    stageset_to_csv,
    stageset_to_json,
    stageset_to_records,
    subdivide,
)


def unit_interval():
    return make_cube([0], 1)


def test_subdivide_unit_interval_quarters():
    kids = subdivide(unit_interval(), F(1, 4))
    assert [k.lower[0] for k in kids] == [F(0), F(1, 4), F(1, 2), F(3, 4)]
    assert all(k.side == F(1, 4) for k in kids)


def test_subdivide_square():
    kids = subdivide(make_cube([0, 0], 1), F(1, 2))
    assert len(kids) == 4
    assert kids[0].lower == (F(0), F(0))
    assert kids[-1].lower == (F(1, 2), F(1, 2))


def test_subdivide_non_divisible():
    with pytest.raises(NonDivisibleScale):
        subdivide(make_cube([0], F(1, 3)), F(1, 5))


def test_subdivide_reunion_reproduces_parent():
    parent = make_cube([F(1, 3)], F(1, 3))
    kids = subdivide(parent, F(1, 21))
    assert sum(k.volume() for k in kids) == parent.volume()
    s = StageSet.from_cubes(kids)
    assert s.measure() == parent.volume()
    assert s.hull().lower == parent.lower
    assert s.hull().upper == parent.upper


def test_leftmost_subcube():
    c = leftmost_subcube(make_cube([F(1, 4)], F(1, 4)), F(1, 100))
    assert c.lower == (F(1, 4),)
    assert c.side == F(1, 100)
    sq = leftmost_subcube(make_cube([0, 0], 1), F(1, 2))
    assert sq.lower == (F(0), F(0)) and sq.side == F(1, 2)
    with pytest.raises(ScaleTooLarge):
        leftmost_subcube(unit_interval(), 2)


def test_leftmost_contained_in_parent():
    parent = make_cube([F(2, 7)], F(3, 7))
    for s in (F(1, 7), F(1, 13), F(3, 7)):
        sub = leftmost_subcube(parent, s)
        assert parent.contains_cube(sub)


def test_stage_union_and_intersect():
    a = StageSet.from_cubes([make_cube([0], F(1, 4))])
    b = StageSet.from_cubes([make_cube([F(1, 2)], F(1, 4))])
    u = stage_union(a, b)
    assert u.n_cubes == 2
    inter = stage_intersect(a, b)
    assert inter.is_empty()
    assert contains(a, [0.25])  # closed cubes keep the right endpoint


def test_union_rejects_scale_mismatch():
    a = StageSet.from_cubes([make_cube([0], F(1, 4))])
    b = StageSet.from_cubes([make_cube([F(1, 2)], F(1, 8))])
    with pytest.raises(ScaleMismatch):
        stage_union(a, b)


def test_intersect_across_refinement():
    coarse = StageSet.from_cubes([make_cube([0], F(1, 2))])
    fine = StageSet.interval(0, 1, F(1, 8))
    inter = stage_intersect(fine, coarse)
    assert inter.n_cubes == 4
    assert inter.measure() == F(1, 2)


def test_overlap_detection():
    with pytest.raises(InvalidStageSet):
        StageSet.from_cubes([make_cube([0], F(1, 2)), make_cube([F(1, 4)], F(1, 2))])
    with pytest.raises(InvalidStageSet):
        StageSet.from_cubes([make_cube([0, 0], 1), make_cube([F(1, 2), F(1, 2)], 1)])


def test_touching_cubes_allowed():
    s = StageSet.from_cubes([make_cube([0], F(1, 2)), make_cube([F(1, 2)], F(1, 2))])
    assert s.n_cubes == 2
    assert s.measure() == 1


def test_run_merging_and_indexing():
    s = StageSet.interval(0, 1, F(1, 16))
    assert len(s.runs) == 1
    assert s.n_cubes == 16
    assert s.cube_at_index(5).lower == (F(5, 16),)
    with pytest.raises(IndexError):
        s.cube_at_index(16)


def test_strided_run_contains():
    run = CubeRun((F(0),), F(1, 100), 5, F(1, 10))
    s = StageSet(1, F(1, 100), (run,))
    assert s.contains([F(2, 10)])
    assert s.contains([F(2, 10) + F(1, 100)])
    assert not s.contains([F(2, 10) + F(2, 100)])
    assert s.n_cubes == 5


def test_bignum_counts():
    run = CubeRun((F(0),), F(1, 10 ** 30), 10 ** 25, F(1, 10 ** 25))
    s = StageSet(1, F(1, 10 ** 30), (run,))
    assert s.n_cubes == 10 ** 25
    assert s.measure() == F(1, 10 ** 30) * 10 ** 25
    c = s.cube_at_index(10 ** 24)
    assert c.lower[0] == F(10 ** 24, 10 ** 25)


def test_subtract_windows():
    s = StageSet.interval(0, 1, F(1, 8))
    hole = StageSet.from_cubes([make_cube([F(1, 4)], F(1, 4))])
    left = s.subtract(hole)
    assert left.n_cubes == 6
    assert not left.contains([F(3, 8)])
    assert left.contains([F(1, 8)])


def test_restrict_to_cube():
    s = StageSet.interval(0, 1, F(1, 8))
    part = s.restrict_to_cube(make_cube([F(1, 2)], F(1, 2)))
    assert part.n_cubes == 4
    assert part.hull().lower == (F(1, 2),)


def test_serialization_roundtrip_cubes():
    s = StageSet.interval(0, 1, F(1, 4), stage_index=3)
    recs = stageset_to_records(s)
    assert recs[0] == {"lower": ["0"], "side": "1/4", "stage": 3}
    back = stageset_from_json(stageset_to_json(s))
    assert back.n_cubes == 4
    assert back.stage_index == 3
    assert back.side == F(1, 4)
    csv_text = stageset_to_csv(s)
    assert "1/4" in csv_text and csv_text.startswith("stage,side,lower_0")


def test_serialization_runs_for_large_sets():
    run = CubeRun((F(0),), F(1, 2 ** 40), 2 ** 30, F(1, 2 ** 30))
    s = StageSet(1, F(1, 2 ** 40), (run,))
    recs = stageset_to_records(s)
    assert recs[0]["encoding"] == "runs"
    back = stageset_from_json(stageset_to_json(s))
    assert back.n_cubes == 2 ** 30


def test_scale_ladder_laws():
    lad = ScaleLadder(v=3)
    lad.push(3, F(1), F(1, 3))
    lad.push(21, F(1, 256), F(1, 256 * 441))
    assert lad.ell(1) == F(1, 256 * 441)
    with pytest.raises(InvalidStageSet):
        lad.push(20, F(1, 2), F(1, 10 ** 9))


def test_pow2_floor():
    assert pow2_floor(F(1, 3)) == F(1, 4)
    assert pow2_floor(0.011885) == F(1, 128)
    assert pow2_floor(F(1, 128)) == F(1, 128)
    assert pow2_floor(F(1, 2 ** 300) * 3) == F(1, 2 ** 299)


def test_as_fraction_forms():
    assert as_fraction("3/7") == F(3, 7)
    assert as_fraction(5) == F(5)
    assert as_fraction(0.5) == F(1, 2)
