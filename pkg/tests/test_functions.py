import math
import random

import numpy as np
import pytest

from avoidant.errors import CertificateFailure, ConfigError, DerivativeUnavailable
from avoidant.exprfn import parse_function
from avoidant.functions import (
    DerivOpSchedule,
    apply_deriv_op,
    build_schedule,
    sample_certificate,
    unit_box,
)


def ap3():
    return parse_function("x[1] - 2*x[2] + x[3]", v=3, name="ap3",
                          r_q=1, alpha_q=(0, 0, 1), i0=3)


def quad():
    return parse_function("(x[3] - x[1]) - (x[2] - x[1])^2", v=3, name="quad",
                          r_q=2, alpha_q=(0, 2, 0))


def test_build_schedule_chain_with_tie_break():
    sched = build_schedule((2, 1, 0))
    assert sched.alphas == ((0, 0, 0), (0, 1, 0), (1, 1, 0), (2, 1, 0))
    # descending view matches (2,1,0),(1,1,0),(0,1,0),(0,0,0)
    assert tuple(reversed(sched.alphas)) == ((2, 1, 0), (1, 1, 0), (0, 1, 0), (0, 0, 0))


def test_build_schedule_single_step():
    sched = build_schedule((1, 0, 0))
    assert sched.alphas == ((0, 0, 0), (1, 0, 0))
    assert sched.i0_at(0) == 1


def test_build_schedule_rejects_zero_index():
    with pytest.raises(ValueError):
        build_schedule((0, 0, 0))


def test_schedule_invariant_random():
    rng = random.Random(7)
    for _ in range(200):
        v = rng.randint(2, 6)
        alpha = tuple(rng.randint(0, 4) for _ in range(v))
        if sum(alpha) < 1:
            continue
        sched = build_schedule(alpha)  # validates adjacency in __post_init__
        assert sched.order == sum(alpha)
        for k in range(sched.order):
            i0 = sched.i0_at(k)
            assert 1 <= i0 <= v


def test_apply_deriv_op_linear_constant():
    f = ap3()
    d = apply_deriv_op(f, (0, 1, 0))
    vals = d.eval_batch(np.random.default_rng(0).random((5, 3)))
    assert np.allclose(vals, -2.0)


def test_apply_deriv_op_quad_second_order():
    f = quad()
    d = apply_deriv_op(f, (0, 2, 0))
    vals = d.eval_batch(np.random.default_rng(1).random((5, 3)))
    assert np.allclose(vals, -2.0)


def test_fd_oracle_order_cap():
    def ev(x):
        return np.sin(x[:, 0:1] * x[:, 1:2]) + x[:, 2:3] ** 5

    from avoidant.functions import FunctionSpec
    f = FunctionSpec(name="fd", n=1, v=3, m=1, eval_fn=ev)
    with pytest.raises(DerivativeUnavailable):
        apply_deriv_op(f, (0, 0, 4))


def test_symbolic_matches_finite_differences():
    f = quad()
    rng = np.random.default_rng(2)
    pts = 0.1 + 0.8 * rng.random((100, 3))
    h = 1e-5
    for alpha in [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 2, 0), (1, 1, 0)]:
        sym = apply_deriv_op(f, alpha).eval_batch(pts)[:, 0]
        fd = _central_fd(f.eval_batch, pts, alpha, h)
        denom = np.maximum(np.abs(sym), 1.0)
        assert np.max(np.abs(sym - fd) / denom) < 1e-5


def _central_fd(ev, pts, alpha, h):
    alpha = list(alpha)
    if sum(alpha) == 0:
        return ev(pts)[:, 0]
    j = next(i for i, a in enumerate(alpha) if a > 0)
    alpha[j] -= 1
    xp = pts.copy()
    xm = pts.copy()
    xp[:, j] += h
    xm[:, j] -= h
    return (_central_fd(ev, xp, alpha, h) - _central_fd(ev, xm, alpha, h)) / (2 * h)


def test_sample_certificate_linear():
    f = ap3()
    cert = sample_certificate(f, unit_box(3), grid_per_axis=4, i0=2)
    assert cert.c0 == pytest.approx(0.9 * 2.0)
    assert cert.grad_upper == pytest.approx(1.1 * math.sqrt(6))
    assert cert.provenance == "sampled"


def test_sample_certificate_failure():
    f = parse_function("x[1] - 2*x[2] + x[3]", v=3, name="ap3f")
    # d/dx1 = 1 never vanishes, but the quad's d/dx2 does on the diagonal
    g = quad()
    with pytest.raises(CertificateFailure):
        sample_certificate(g, unit_box(3), grid_per_axis=5, i0=2)
    cert = sample_certificate(f, unit_box(3), grid_per_axis=3, i0=1)
    assert cert.c0 == pytest.approx(0.9)


def test_certificate_brackets_finer_grid():
    f = parse_function("sqrt(x[1] + 1) - 2*x[2] + x[3]^2", v=3, name="mixed")
    coarse = sample_certificate(f, unit_box(3), grid_per_axis=4, i0=2)
    fine = sample_certificate(f, unit_box(3), grid_per_axis=9, i0=2)
    assert coarse.c0 <= fine.c0 / 0.9  # coarse lower bound below fine minimum
    assert coarse.grad_upper >= fine.grad_upper / 1.1


def test_expression_parser_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_function("x[1] + sin(x[2])", v=2)
    with pytest.raises(ConfigError):
        parse_function("x[5]", v=3)
    with pytest.raises(ConfigError):
        parse_function("x[1] +", v=2)


def test_expression_powers_and_functions():
    f = parse_function("atan(x[1]) + sqrt(x[2]) * x[2]^2", v=2, name="t")
    val = f([1.0, 4.0])
    assert val[0] == pytest.approx(math.atan(1.0) + 2.0 * 16.0)


def test_mp_eval_matches_float():
    import mpmath

    f = quad()
    with mpmath.workdps(50):
        got = f.mp_eval_fn([mpmath.mpf("0.1"), mpmath.mpf("0.3"), mpmath.mpf("0.7")])
    want = f([0.1, 0.3, 0.7])[0]
    assert abs(float(got[0]) - want) < 1e-12


def test_m_constraint_enforced():
    with pytest.raises(ValueError):
        parse_function(["x[1]", "x[2]", "x[3]"], v=3, n=1)  # m=3 > n(v-1)=2
