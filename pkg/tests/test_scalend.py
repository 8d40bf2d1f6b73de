import itertools
import math
from fractions import Fraction as F

import numpy as np
import pytest

from avoidant.errors import PreconditionViolation
from avoidant.exprfn import parse_function
from avoidant.functions import declared_certificate, unit_box
from avoidant.gallery import get_curve, trapezoid_f
from avoidant.geometry import StageSet, make_cube
from avoidant.scalend import (
    BadBoxFamily,
    avoid_step_nd,
    cover_zero_set,
    final_step,
    project_step,
)


def plane():
    f = parse_function("x[1] - 2*x[2] + x[3]", v=3, name="plane")
    f.c0_cert = declared_certificate(1.0, math.sqrt(6.0), 1.0, unit_box(3))
    return f


def full_T(v, M, n=1):
    if n == 1:
        return tuple(StageSet.interval(0, 1, F(1, M)) for _ in range(v))
    cubes = []
    from avoidant.geometry import subdivide
    base = subdivide(make_cube([0] * n, 1), F(1, M))
    return tuple(StageSet.from_cubes(base) for _ in range(v))


def brute_force_plane_cover(ell):
    """Exact cover of {x1 - 2x2 + x3 = 0}: a cube holds a zero iff the
    corner min and max straddle zero (linear form)."""
    k = int(1 / ell)
    out = set()
    for i, j, l in itertools.product(range(k), repeat=3):
        lo = F(i, k) - 2 * F(j + 1, k) + F(l, k)
        hi = F(i + 1, k) - 2 * F(j, k) + F(l + 1, k)
        if lo <= 0 <= hi:
            out.add((i, j, l))
    return out


def test_cover_matches_brute_force_exactly():
    f = plane()
    ell = F(1, 16)
    fam = cover_zero_set(f, full_T(3, 2), ell, f.c0_cert)
    got = {tuple(int(c) for c in row) for row in fam.idx}
    assert got == brute_force_plane_cover(ell)


def test_cover_trivial_function():
    f = parse_function("x[1] + x[2] + x[3] + 1", v=3, name="pos")
    cert = declared_certificate(1.0, math.sqrt(3.0), 1.0, unit_box(3))
    fam = cover_zero_set(f, full_T(3, 2), F(1, 8), cert)
    assert fam.count == 0


def test_cover_constant_stays_bounded():
    f = plane()
    counts = {}
    for k in (4, 8, 16):
        fam = cover_zero_set(f, full_T(3, 2), F(1, k), f.c0_cert)
        counts[k] = fam.count
    r1 = counts[8] / counts[4]
    r2 = counts[16] / counts[8]
    # one lost dimension: counts scale like ell^-(nv - m) = ell^-2
    assert 2.5 <= r1 <= 6.0
    assert 2.5 <= r2 <= 6.0


def test_cover_soundness_random_zeros():
    f = plane()
    ell = F(1, 32)
    fam = cover_zero_set(f, full_T(3, 2), ell, f.c0_cert)
    boxes = {tuple(int(c) for c in row) for row in fam.idx}
    rng = np.random.default_rng(0)
    x1 = rng.uniform(0, 1, 1000)
    x2 = rng.uniform(0, 1, 1000)
    x3 = 2 * x2 - x1
    ok = (x3 >= 0) & (x3 <= 1)
    for a, b, c in zip(x1[ok], x2[ok], x3[ok]):
        cell = (min(int(a * 32), 31), min(int(b * 32), 31), min(int(c * 32), 31))
        assert cell in boxes


def random_family(rng, n_boxes, ell, r, n=1):
    k = int(1 / ell)
    rows = rng.integers(0, k, size=(n_boxes, n * r))
    rows = np.unique(rows, axis=0)
    return BadBoxFamily(r=r, n=n, ell=ell, idx=rows.astype(np.int64))


def test_project_step_empty():
    fam = BadBoxFamily(r=3, n=1, ell=F(1, 64),
                       idx=np.empty((0, 3), dtype=np.int64))
    res = project_step(StageSet.interval(0, 1, F(1, 2)), fam, M=2, N=8,
                       ell=F(1, 64))
    assert res.B_next.count == 0
    # one anchor per slab, every slab good
    assert res.S.n_cubes == 8
    assert res.audit["kept_fraction_ok"]


def test_project_step_cardinality_and_containment():
    rng = np.random.default_rng(7)
    fam = random_family(rng, 50, F(1, 64), r=3)
    T = StageSet.interval(0, 1, F(1, 2))
    res = project_step(T, fam, M=2, N=8, ell=F(1, 64))
    assert res.audit["projection_bound_ok"]
    # containment: (S x T') cap B  subset of  S x B'
    s_cells = {int(c.lower[0] * 64) for c in res.S.cubes()}
    proj = {tuple(int(x) for x in row) for row in res.B_next.idx}
    for row in fam.idx:
        if int(row[0]) in s_cells:
            assert tuple(int(x) for x in row[1:]) in proj


def test_final_step_empty_bad_set():
    fam = BadBoxFamily(r=1, n=1, ell=F(1, 64),
                       idx=np.empty((0, 1), dtype=np.int64))
    T = StageSet.interval(0, 1, F(1, 2))
    res = final_step(T, fam, M=2, N=16, ell=F(1, 64), C_measured=1.0,
                     v=3, m=1)
    assert res.S.measure() == 1
    assert res.audit["kept_fraction_ok"]
    assert res.audit["volume_ok"]


def test_final_step_volume_bound_random():
    rng = np.random.default_rng(3)
    # stay under the count precondition: C*M^4*N^2*ell^0 is huge for m=1
    fam = random_family(rng, 40, F(1, 256), r=1)
    T = StageSet.interval(0, 1, F(1, 2))
    res = final_step(T, fam, M=2, N=16, ell=F(1, 256), C_measured=5.0,
                     v=3, m=1)
    assert res.audit["volume_ok"]
    for j_lo, detail in res.kept.items():
        for i_lower, kept, n_sub in detail:
            if kept:
                assert F(n_sub) * F(1, 256) >= (1 - F(1, 2)) * F(1, 16)


def test_final_step_oversize_bad_set():
    rng = np.random.default_rng(4)
    fam = random_family(rng, 5000, F(1, 64), r=1)
    T = StageSet.interval(0, 1, F(1, 2))
    with pytest.raises(PreconditionViolation):
        final_step(T, fam, M=2, N=16, ell=F(1, 64), C_measured=1e-6,
                   v=3, m=1)


def test_avoid_step_nd_plane():
    f = plane()
    out = avoid_step_nd(f, full_T(3, 2), M=2, N=16, cert=f.c0_cert)
    assert out.audit["scale_sane"]
    assert out.audit["final"]["kept_fraction_ok"]
    # no zeros on the product: exhaustive over box centers
    centers = []
    for s in out.S:
        centers.append(np.array([float(c.lower[0] + c.side / 2)
                                 for c in s.cubes()]))
    A, B, C = np.meshgrid(*centers, indexing="ij")
    vals = np.abs(A - 2 * B + C)
    assert vals.min() > 0


def test_avoid_step_nd_trivial():
    f = parse_function(["x[1] + 1", "x[2] + 1"], v=3, name="pos2")
    cert = declared_certificate(1.0, 1.5, 1.0, unit_box(3))
    out = avoid_step_nd(f, full_T(3, 2), M=2, N=8, cert=cert)
    # S_i for i < v: one ell-cube per 1/N interval
    assert out.S[0].n_cubes == 8
    assert out.S[1].n_cubes == 8
    # final block keeps everything
    assert out.S[2].measure() == 1


@pytest.fixture(scope="module")
def trapezoid_step():
    curve = get_curve("parabola")
    f = trapezoid_f(curve, eta=1.0)
    # declared pair certificate: divided-difference chord keeps the angle
    # gradient below ~4 and the product form below ~29 on the unit box
    cert = declared_certificate(0.05, 32.0, 200.0, unit_box(4))
    f.c0_cert = cert
    out = avoid_step_nd(f, full_T(4, 2), M=2, N=8, cert=cert)
    return f, out


def test_avoid_step_nd_trapezoid(trapezoid_step):
    f, out = trapezoid_step
    assert out.audit["scale_sane"]
    for step_audit in out.audit["steps"]:
        assert step_audit["projection_bound_ok"]
        assert step_audit["kept_fraction_ok"]
    assert out.audit["final"]["kept_fraction_ok"]
    assert out.audit["final"]["volume_ok"]


def test_avoid_step_nd_trapezoid_no_zeros(trapezoid_step):
    f, out = trapezoid_step
    sizes = [s.n_cubes for s in out.S]
    grids = []
    for s in out.S:
        pts = []
        for c in s.cubes():
            lo, side = float(c.lower[0]), float(c.side)
            pts.extend((lo, lo + side))
        grids.append(np.array(pts))
    total = math.prod(len(g) for g in grids)
    assert total < 10 ** 8
    best = np.inf
    chunk = 200_000
    mesh = np.meshgrid(*grids, indexing="ij")
    flat = np.stack([g.ravel() for g in mesh], axis=1)
    for lo in range(0, flat.shape[0], chunk):
        vals = f.eval_batch(flat[lo:lo + chunk])
        best = min(best, float(np.abs(vals).max(axis=1).min()))
    assert best > 0
