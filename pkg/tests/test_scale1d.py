import itertools
import math
from fractions import Fraction as F

import numpy as np
import pytest

from avoidant.errors import CertificateViolation, InfeasibleScale
from avoidant.functions import declared_certificate, unit_box
from avoidant.gallery import get_family
from avoidant.geometry import StageSet
from avoidant.exprfn import parse_function
from avoidant.scale1d import (
    AvoidStepInput1D,
    avoid_step_1d,
    choose_constants,
    zero_slice_roots,
)


def ap3_cert():
    # d/dx3 = 1, |grad| = sqrt(6), globally valid
    return declared_certificate(1.0, math.sqrt(6.0), 1.0, unit_box(3))


def ap3():
    f = get_family("ap3")[0]
    f.c0_cert = ap3_cert()
    return f


def full_T(v, M):
    return tuple(StageSet.interval(0, 1, F(1, M)) for _ in range(v))


def test_choose_constants_formula():
    cert = declared_certificate(2.0, 4.0, 1.0, unit_box(3))
    C0, c1 = choose_constants(cert, M=2, v=3)
    assert C0 == pytest.approx(math.sqrt(3) * 2.0)
    assert c1 == F(1, 128)


def test_choose_constants_linear_example():
    cert = declared_certificate(2.0, math.sqrt(6.0), 1.0, unit_box(3))
    C0, c1 = choose_constants(cert, M=2, v=3)
    assert C0 == pytest.approx(math.sqrt(3) * math.sqrt(6) / 2)
    assert c1 == F(1, 64)


def test_choose_constants_degenerate_m1():
    cert = declared_certificate(1.0, 2.0, 1.0, unit_box(3))
    C0, c1 = choose_constants(cert, M=1, v=3)
    assert c1 <= F(1, int(3 * C0) + 1)
    assert c1 > 0


def test_zero_slice_roots_linear():
    f = ap3()
    roots = zero_slice_roots(f, [0.1, 0.2], StageSet.interval(0, 1, 1),
                             ap3_cert(), i0=3)
    assert len(roots) == 1
    assert roots[0] == pytest.approx(0.3, abs=1e-9)


def test_zero_slice_roots_quadratic():
    f = get_family("quad-example")[0]
    cert = declared_certificate(1.0, 3.0, 3.0, unit_box(3))
    roots = zero_slice_roots(f, [0.1, 0.3], StageSet.interval(0, 1, 1),
                             cert, i0=3)
    assert len(roots) == 1
    assert roots[0] == pytest.approx(0.14, abs=1e-9)


def test_zero_slice_roots_none():
    f = parse_function("x[1] + x[2] + x[3] + 1", v=3, name="pos")
    cert = declared_certificate(1.0, math.sqrt(3.0), 1.0, unit_box(3))
    roots = zero_slice_roots(f, [0.1, 0.2], StageSet.interval(0, 1, F(1, 2)),
                             cert, i0=3)
    assert roots == []


def test_zero_slice_roots_certificate_violation():
    # oscillating slice: two crossings inside one window
    f = parse_function("x[3]^2 - x[3] + 6/100 + 0*x[1] + 0*x[2]",
                       v=3, name="osc")
    cert = declared_certificate(0.5, 2.0, 2.0, unit_box(3))
    with pytest.raises(CertificateViolation):
        zero_slice_roots(f, [0.0, 0.0], StageSet.interval(0, 1, 1), cert, i0=3)


def grid_points(s, grid):
    pts = []
    for cube in s.iter_cubes():
        lo, side = float(cube.lower[0]), float(cube.side)
        pts.extend(lo + side * k / (grid - 1) for k in range(grid))
    return np.array(sorted(set(pts)))


def brute_force_min_ap3(sets, grid=3):
    """Independent oracle for |x1 - 2x2 + x3|: the minimum over all grid
    tuples equals, for each (x1, x2), the distance from 2x2 - x1 to the
    x3 sample set (monotone unit-slope dependence on x3)."""
    a, b, c = (grid_points(s, grid) for s in sets)
    A, B = np.meshgrid(a, b, indexing="ij")
    targets = (2 * B - A).ravel()
    pos = np.searchsorted(c, targets)
    best = np.inf
    arg = None
    for off in (-1, 0):
        idx = np.clip(pos + off, 0, len(c) - 1)
        d = np.abs(c[idx] - targets)
        i = int(d.argmin())
        if d[i] < best:
            best = float(d[i])
            arg = (float(A.ravel()[i]), float(B.ravel()[i]), float(c[idx[i]]))
    return best, arg


@pytest.fixture(scope="module")
def ap3_step():
    f = ap3()
    inp = AvoidStepInput1D(f=f, i0=3, M=2, c0_cert=f.c0_cert,
                           T=full_T(3, 2), N=32)
    return f, avoid_step_1d(inp)


def test_avoid_step_ap3_no_zeros(ap3_step):
    f, out = ap3_step
    assert out.audit["card_B_ok"]
    assert out.audit["kept_fraction_ok"]
    assert out.audit["volume_ok"]
    assert out.audit["per_j_discard_bound_ok"]
    best, arg = brute_force_min_ap3(out.S, grid=3)
    spacing = float(out.piece_side) / 2
    assert best > math.sqrt(6) * math.sqrt(3) * spacing, (best, arg)


def test_avoid_step_structure(ap3_step):
    f, out = ap3_step
    v, N, M = 3, 32, 2
    # non-privileged axes: one piece per 1/N interval, anchored left
    assert out.S[0].n_cubes == N
    assert out.S[1].n_cubes == N
    assert out.S[0].side == out.c1 / N ** (v - 1)
    assert out.S[0].cube_at_index(0).lower[0] == 0
    assert out.S[0].cube_at_index(1).lower[0] == F(1, N)
    # privileged axis is nonempty and inside [0,1]
    assert out.S[2].n_cubes > 0
    hull = out.S[2].hull()
    assert hull.lower[0] >= 0 and hull.upper[0] <= 1
    # per-interval volume: every kept 1/N interval retains >= c1/N
    for grp in out.kept[3]:
        if hasattr(grp, "entries"):
            for ii, kept, children in grp.entries:
                if kept:
                    assert children * out.piece_side >= out.c1 / N


def test_avoid_step_empty_root_set():
    f = parse_function("x[1] + x[2] + x[3] + 1", v=3, name="pos")
    f.c0_cert = declared_certificate(1.0, math.sqrt(3.0), 1.0, unit_box(3))
    inp = AvoidStepInput1D(f=f, i0=3, M=2, c0_cert=f.c0_cert,
                           T=full_T(3, 2), N=8)
    out = avoid_step_1d(inp)
    assert out.roots == []
    # privileged axis keeps every tile: full measure of T_3
    assert out.S[2].measure() == 1
    assert out.audit["exceptional_intervals"] == 0


def test_avoid_step_rejects_bad_N():
    f = ap3()
    with pytest.raises(InfeasibleScale):
        AvoidStepInput1D(f=f, i0=3, M=2, c0_cert=f.c0_cert,
                         T=full_T(3, 2), N=7)  # not a multiple of M


def test_kept_fraction_at_least_half(ap3_step):
    _, out = ap3_step
    M, N = 2, 32
    for grp in out.kept[3]:
        if hasattr(grp, "entries"):
            kept = sum(1 for _, k, _ in grp.entries if k)
            assert kept >= (1 - 1 / M) * (N // M)
        else:
            assert grp.kept_per_j >= (1 - 1 / M) * grp.total_per_j


def test_roots_near_lattice(ap3_step):
    _, out = ap3_step
    # roots of x1 - 2x2 + x3 over 1/32-anchors sit on the 1/32 lattice,
    # located to the bisection tolerance
    tol = float(out.piece_side) / 1000
    for b in out.roots:
        nearest = round(b * 32) / F(32)
        assert abs(float(b - nearest)) <= tol


def test_outputs_subsets_of_inputs(ap3_step):
    _, out = ap3_step
    for s in out.S:
        for cube in itertools.islice(s.iter_cubes(), 200):
            assert 0 <= cube.lower[0] and cube.lower[0] + cube.side <= 1
