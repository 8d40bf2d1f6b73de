"""Built-in curves, the isosceles/trapezoid detector functions, and the
numeric appendix checks, packaged as ready-made FunctionSpecs.

Signed distance along a curve is computed through the divided-difference
chord Phi(t1,t2) = (gamma(t1)-gamma(t2))/(t1-t2), via the exact identity
d(gamma(t1),gamma(t2)) = (t1-t2)*|Phi(t1,t2)|, which is smooth through the
diagonal. The trapezoid angle component likewise uses arg(Phi), keeping the
pair C^1 on the whole box; on ordered tuples it agrees with the raw chord
angle. The raw helpers keep the excluded-ray error contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainViolation
from .exprfn import parse_function
from .functions import (
    BoundCertificate,
    FunctionSpec,
    declared_certificate,
    unit_box,
)

_DIAG_EPS = 1e-7  # switch Phi to its tangent limit below this separation


@dataclass(frozen=True)
class CurveSpec:
    """Parametric C^2 curve on [0, eta] with closed-form derivatives."""

    name: str
    dim: int
    gamma: Callable[[np.ndarray], np.ndarray]      # (k,) -> (k, dim)
    dgamma: Callable[[np.ndarray], np.ndarray]
    d2gamma: Callable[[np.ndarray], np.ndarray]
    curvature_bound: float
    arclength_flag: bool

    def validate(self, eta: float, samples: int = 1000) -> None:
        t = np.linspace(0.0, eta, samples)
        speed = np.linalg.norm(self.dgamma(t), axis=1)
        if speed.min() <= 0:
            raise ConfigError(f"curve {self.name}: velocity vanishes on [0,{eta}]")
        if self.arclength_flag and np.abs(speed - 1).max() > 1e-9:
            raise ConfigError(f"curve {self.name}: not arclength to 1e-9")


def _vec(fn):
    def wrapped(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack(fn(t), axis=1)
    return wrapped


def line_curve() -> CurveSpec:
    return CurveSpec(
        "line", 2,
        _vec(lambda t: (t, np.zeros_like(t))),
        _vec(lambda t: (np.ones_like(t), np.zeros_like(t))),
        _vec(lambda t: (np.zeros_like(t), np.zeros_like(t))),
        curvature_bound=0.0, arclength_flag=True)


def circle_curve() -> CurveSpec:
    return CurveSpec(
        "circle", 2,
        _vec(lambda t: (np.cos(t), np.sin(t))),
        _vec(lambda t: (-np.sin(t), np.cos(t))),
        _vec(lambda t: (-np.cos(t), -np.sin(t))),
        curvature_bound=1.0, arclength_flag=True)


def parabola_curve() -> CurveSpec:
    # vertex-shifted so both velocity components stay positive near t = 0
    return CurveSpec(
        "parabola", 2,
        _vec(lambda t: (t + 0.5, (t + 0.5) ** 2)),
        _vec(lambda t: (np.ones_like(t), 2 * t + 1)),
        _vec(lambda t: (np.zeros_like(t), np.full_like(t, 2.0))),
        curvature_bound=1.0, arclength_flag=False)


def cubic_curve() -> CurveSpec:
    return CurveSpec(
        "cubic", 2,
        _vec(lambda t: (t, t ** 3 + t)),
        _vec(lambda t: (np.ones_like(t), 3 * t ** 2 + 1)),
        _vec(lambda t: (np.zeros_like(t), 6 * t)),
        curvature_bound=6.0, arclength_flag=False)


def helix_proj_curve() -> CurveSpec:
    s = 1 / math.sqrt(2)
    return CurveSpec(
        "helix-proj", 2,
        _vec(lambda t: (np.cos(s * t), np.sin(s * t))),
        _vec(lambda t: (-s * np.sin(s * t), s * np.cos(s * t))),
        _vec(lambda t: (-s * s * np.cos(s * t), -s * s * np.sin(s * t))),
        curvature_bound=1.0, arclength_flag=False)


CURVES: dict[str, Callable[[], CurveSpec]] = {
    "line": line_curve,
    "circle": circle_curve,
    "parabola": parabola_curve,
    "cubic": cubic_curve,
    "helix-proj": helix_proj_curve,
}


def get_curve(name: str) -> CurveSpec:
    try:
        return CURVES[name]()
    except KeyError:
        raise ConfigError(f"unknown curve {name!r}; have {sorted(CURVES)}") from None


# -- divided-difference chord -------------------------------------------------


def chord_ratio(curve: CurveSpec, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Phi(t1,t2) = (gamma(t1)-gamma(t2))/(t1-t2), tangent on the diagonal."""
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    dt = t1 - t2
    near = np.abs(dt) < _DIAG_EPS
    safe = np.where(near, 1.0, dt)
    phi = (curve.gamma(t1) - curve.gamma(t2)) / safe[:, None]
    if near.any():
        mid = 0.5 * (t1 + t2)
        phi[near] = curve.dgamma(mid[near])
    return phi


def signed_distance(curve: CurveSpec, t1: float, t2: float) -> float:
    """Chord length signed by parameter order: positive iff t1 > t2."""
    return float(signed_distance_batch(curve, np.array([t1]), np.array([t2]))[0])


def signed_distance_batch(curve: CurveSpec, t1, t2) -> np.ndarray:
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    phi = chord_ratio(curve, t1, t2)
    return (t1 - t2) * np.linalg.norm(phi, axis=1)


def _d_signed_partials(curve, ta, tb):
    """(d/dta, d/dtb) of d(gamma(ta), gamma(tb)), smooth through ta = tb.

    Off the diagonal: sign(ta-tb) * dgamma(t.) . chord / |chord|; the limit
    at ta = tb is (+|gamma'|, -|gamma'|) from either side.
    """
    ta = np.atleast_1d(np.asarray(ta, dtype=float))
    tb = np.atleast_1d(np.asarray(tb, dtype=float))
    near = np.abs(ta - tb) < _DIAG_EPS
    da = np.empty_like(ta)
    db = np.empty_like(ta)
    if near.any():
        spd = np.linalg.norm(curve.dgamma(0.5 * (ta + tb)), axis=1)
        da[near] = spd[near]
        db[near] = -spd[near]
    far = ~near
    if far.any():
        chord = curve.gamma(ta[far]) - curve.gamma(tb[far])
        cn = np.linalg.norm(chord, axis=1)
        s = np.sign(ta[far] - tb[far])
        da[far] = s * np.einsum("kd,kd->k", curve.dgamma(ta[far]), chord) / cn
        db[far] = -s * np.einsum("kd,kd->k", curve.dgamma(tb[far]), chord) / cn
    return da, db


def isosceles_f1(curve: CurveSpec, eta: float = 1.0) -> FunctionSpec:
    """Squared-chord detector |g(t1)-g(t2)|^2 - |g(t2)-g(t3)|^2 (v=3, m=1)."""

    def ev(x: np.ndarray) -> np.ndarray:
        t1, t2, t3 = x[:, 0], x[:, 1], x[:, 2]
        a = curve.gamma(t1) - curve.gamma(t2)
        b = curve.gamma(t2) - curve.gamma(t3)
        return (np.sum(a * a, axis=1) - np.sum(b * b, axis=1))[:, None]

    def grad(x: np.ndarray) -> np.ndarray:
        t1, t2, t3 = x[:, 0], x[:, 1], x[:, 2]
        g1, g2, g3 = curve.gamma(t1), curve.gamma(t2), curve.gamma(t3)
        d1, d2, d3 = curve.dgamma(t1), curve.dgamma(t2), curve.dgamma(t3)
        out = np.empty((x.shape[0], 1, 3))
        out[:, 0, 0] = 2 * np.einsum("kd,kd->k", d1, g1 - g2)
        out[:, 0, 1] = -2 * np.einsum("kd,kd->k", d2, g1 - g3)
        out[:, 0, 2] = 2 * np.einsum("kd,kd->k", d3, g2 - g3)
        return out

    return FunctionSpec(name=f"iso-f1[{curve.name}]", n=1, v=3, m=1,
                        eval_fn=ev, grad_fn=grad, r_q=2, alpha_q=(2, 0, 0),
                        i0=1, eta=eta)


def isosceles_f2(curve: CurveSpec, eta: float = 1.0) -> FunctionSpec:
    """Signed-distance detector d(g(t1),g(t2)) - d(g(t2),g(t3)) (v=3, m=1).

    For arclength curves the diagonal partials are (1, -2, 1); the declared
    certificate uses them with a curvature slack.
    """

    def ev(x: np.ndarray) -> np.ndarray:
        t1, t2, t3 = x[:, 0], x[:, 1], x[:, 2]
        return (signed_distance_batch(curve, t1, t2)
                - signed_distance_batch(curve, t2, t3))[:, None]

    def grad(x: np.ndarray) -> np.ndarray:
        t1, t2, t3 = x[:, 0], x[:, 1], x[:, 2]
        d12_1, d12_2 = _d_signed_partials(curve, t1, t2)
        d23_2, d23_3 = _d_signed_partials(curve, t2, t3)
        out = np.empty((x.shape[0], 1, 3))
        out[:, 0, 0] = d12_1
        out[:, 0, 1] = d12_2 - d23_2
        out[:, 0, 2] = -d23_3
        return out

    cert = None
    if curve.arclength_flag:
        slack = 1 + curve.curvature_bound * eta
        cert = declared_certificate(
            c0=2.0 / slack, grad_upper=math.sqrt(6.0) * slack,
            hess_upper=max(1.0, 6 * curve.curvature_bound * slack),
            domain=unit_box(3, eta))
    return FunctionSpec(name=f"iso-f2[{curve.name}]", n=1, v=3, m=1,
                        eval_fn=ev, grad_fn=grad, r_q=1, alpha_q=(0, 1, 0),
                        i0=2, c0_cert=cert, eta=eta)


# -- trapezoid pair -----------------------------------------------------------


def chord_argument(curve: CurveSpec, t1: float, t4: float) -> float:
    """Principal angle of the raw chord gamma(t4) - gamma(t1).

    Raises DomainViolation for a zero chord or one on the excluded ray
    {(x, 0): x <= 0}.
    """
    p = curve.gamma(np.array([t4]))[0] - curve.gamma(np.array([t1]))[0]
    if p[1] == 0 and p[0] <= 0:
        raise DomainViolation(
            f"chord from t1={t1} to t4={t4} lies on the excluded ray")
    return math.atan2(p[1], p[0])


def trapezoid_f(curve: CurveSpec, eta: float = 1.0,
                validate: bool = True) -> FunctionSpec:
    """Parallel-sides + sidelength-relation detector (v=4, m=2, n=1).

    Component 1 is arg(Phi(t1,t4)) - arg(Phi(t2,t3)) with Phi the
    divided-difference chord, smooth on the whole box for curves whose
    velocity components are strictly positive. Component 2 is
    d(g4,g3)d(g2,g1) - d(g3,g2)^2.
    """
    if curve.dim != 2:
        raise ConfigError("trapezoid detector needs a plane curve")
    if validate:
        t = np.linspace(0.0, eta, 512)
        d = curve.dgamma(t)
        if d.min() <= 0:
            raise ConfigError(
                f"curve {curve.name}: velocity components must stay positive")
        cross = d[:, 0] * curve.d2gamma(t)[:, 1] - d[:, 1] * curve.d2gamma(t)[:, 0]
        if cross.min() <= 0 and cross.max() >= 0:
            raise ConfigError(f"curve {curve.name}: curvature changes sign")

    def ev(x: np.ndarray) -> np.ndarray:
        t1, t2, t3, t4 = (x[:, i] for i in range(4))
        p14 = chord_ratio(curve, t4, t1)
        p23 = chord_ratio(curve, t3, t2)
        f1 = np.arctan2(p14[:, 1], p14[:, 0]) - np.arctan2(p23[:, 1], p23[:, 0])
        f2 = (signed_distance_batch(curve, t4, t3)
              * signed_distance_batch(curve, t2, t1)
              - signed_distance_batch(curve, t3, t2) ** 2)
        return np.stack([f1, f2], axis=1)

    return FunctionSpec(name=f"trapezoid[{curve.name}]", n=1, v=4, m=2,
                        eval_fn=ev, grad_fn=None, eta=eta)


def trapezoid_jacobian_14(curve: CurveSpec, x: np.ndarray) -> np.ndarray:
    """Closed-form 2x2 submatrix (df_i/dt_j, j in {1,4}) on ordered tuples."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t1, t2, t3, t4 = (x[:, i] for i in range(4))
    g1, g3, g4 = curve.gamma(t1), curve.gamma(t3), curve.gamma(t4)
    dg1, dg4 = curve.dgamma(t1), curve.dgamma(t4)
    chord14 = g4 - g1
    nsq = np.sum(chord14 ** 2, axis=1)
    out = np.empty((x.shape[0], 2, 2))
    # d arg / dt1 and dt4
    out[:, 0, 0] = (chord14[:, 1] * dg1[:, 0] - chord14[:, 0] * dg1[:, 1]) / nsq
    out[:, 0, 1] = (chord14[:, 0] * dg4[:, 1] - chord14[:, 1] * dg4[:, 0]) / nsq
    d43 = signed_distance_batch(curve, t4, t3)
    d21 = signed_distance_batch(curve, t2, t1)
    chord43 = g4 - g3
    n43 = np.linalg.norm(chord43, axis=1)
    chord21 = curve.gamma(t2) - g1
    n21 = np.linalg.norm(chord21, axis=1)
    out[:, 1, 0] = -np.einsum("kd,kd->k", dg1, chord21) / n21 * d43
    out[:, 1, 1] = np.einsum("kd,kd->k", dg4, chord43) / n43 * d21
    return out


# -- appendix checks ----------------------------------------------------------


def appendix_checks(curve: CurveSpec, eta: float, tol: float = 1e-6,
                    grid: int = 200, seed: int = 0) -> dict:
    """Report-only numeric checks of the foundational curve identities.

    (i) finite-difference diagonal partials of F(t1,t2)=d(g(t1),g(t2))
    against +-|gamma'(t)|; (ii) grid scan for equal-side triangles whose
    apex sits at an endpoint index; (iii) for plane convex curves, minimum
    singular value of the trapezoid 2x2 Jacobian at sampled near-zeros.
    """
    report: dict = {"curve": curve.name, "eta": eta, "tol": tol}

    ts = np.linspace(0.05 * eta, 0.95 * eta, 100)
    h = 1e-3 * eta
    fwd = signed_distance_batch(curve, ts + h, ts)
    bwd = signed_distance_batch(curve, ts - h, ts)
    d1 = (fwd - bwd) / (2 * h)
    fwd2 = signed_distance_batch(curve, ts, ts + h)
    bwd2 = signed_distance_batch(curve, ts, ts - h)
    d2 = (fwd2 - bwd2) / (2 * h)
    speed = np.linalg.norm(curve.dgamma(ts), axis=1)
    report["diag_dt1_max_err"] = float(np.abs(d1 - speed).max())
    report["diag_dt2_max_err"] = float(np.abs(d2 + speed).max())
    report["diag_ok"] = bool(report["diag_dt1_max_err"] <= tol
                             and report["diag_dt2_max_err"] <= tol)

    # equal-side apex scan at t1 and t3 over a grid of ordered triples
    t = np.linspace(0.0, eta, grid)
    found = 0
    g = curve.gamma(t)
    for pts in (g, g[::-1]):  # apex at the low endpoint, then the high one
        for i in range(grid - 2):
            d_from_i = np.linalg.norm(pts[i + 1:] - pts[i], axis=1)
            # apex at index i: |p_i - p_j| == |p_i - p_k| for distinct j < k
            diffs = np.abs(d_from_i[:-1, None] - d_from_i[None, 1:])
            iu = np.triu_indices_from(diffs, k=0)
            found += int(np.count_nonzero(diffs[iu] <= 1e-9))
    report["endpoint_apex_hits"] = found
    report["endpoint_apex_ok"] = found == 0

    if curve.dim == 2 and curve.name != "line":
        try:
            zeros = sample_trapezoid_zeros(curve, eta, count=10_000, seed=seed)
            j = trapezoid_jacobian_14(curve, zeros)
            sv = np.linalg.svd(j, compute_uv=False)[:, -1]
            report["jacobian_min_sv"] = float(sv.min())
            report["jacobian_ok"] = bool(sv.min() > 0)
            report["jacobian_samples"] = int(len(zeros))
        except ConfigError:
            report["jacobian_min_sv"] = None
    return report


#: closed-form t4 making chord(t1,t4) parallel to chord(t2,t3)
_PARALLEL_SOLVERS = {
    "parabola": lambda t1, t2, t3: t2 + t3 - t1,  # slope = t_a + t_b + 1
}


def sample_trapezoid_zeros(curve: CurveSpec, eta: float, count: int,
                           seed: int = 0) -> np.ndarray:
    """Joint near-zeros of the trapezoid pair, located by bisection.

    Draws (t1, t2), enforces the parallel condition for t4 as a function of
    t3, then bisects the sidelength relation in t3.
    """
    f = trapezoid_f(curve, eta, validate=False)
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    batch = max(256, count // 4)
    rounds = 0
    while len(out) < count:
        rounds += 1
        if rounds > 200:
            raise ConfigError(
                f"could not locate {count} trapezoid zeros on {curve.name}")
        t1 = rng.uniform(0.0, 0.40 * eta, batch)
        t2 = t1 + rng.uniform(0.05, 0.20, batch) * eta
        lo = t2 + 0.05 * eta
        hi = np.full(batch, eta) - (t2 - t1) - 1e-6  # keeps t4 <= eta

        def g(t3, t1=t1, t2=t2):
            t4 = _solve_parallel_t4(curve, t1, t2, t3, eta)
            x = np.stack([t1, t2, t3, t4], axis=1)
            return f.eval_batch(x)[:, 1], t4

        glo, _ = g(lo)
        ghi, _ = g(hi)
        ok = ((np.sign(glo) != np.sign(ghi)) & (hi > lo)
              & np.isfinite(glo) & np.isfinite(ghi))
        if not ok.any():
            continue
        a, b = lo[ok].copy(), hi[ok].copy()
        t1o, t2o = t1[ok], t2[ok]
        ga, _ = g(a, t1o, t2o)
        for _ in range(60):
            mid = 0.5 * (a + b)
            gm, _ = g(mid, t1o, t2o)
            left = np.sign(gm) == np.sign(ga)
            a = np.where(left, mid, a)
            ga = np.where(left, gm, ga)
            b = np.where(left, b, mid)
        t3 = 0.5 * (a + b)
        _, t4 = g(t3, t1o, t2o)
        good = np.isfinite(t4) & (t4 > t3 + 1e-9) & (t4 <= eta)
        rows = np.stack([t1o[good], t2o[good], t3[good], t4[good]], axis=1)
        out.extend(rows)
    return np.asarray(out[:count])


def _solve_parallel_t4(curve: CurveSpec, t1, t2, t3, eta: float) -> np.ndarray:
    """t4 with chord(t1,t4) parallel to chord(t2,t3)."""
    t1 = np.asarray(t1, dtype=float)
    closed = _PARALLEL_SOLVERS.get(curve.name)
    if closed is not None:
        t4 = closed(t1, np.asarray(t2, float), np.asarray(t3, float))
        return np.where((t4 > t3) & (t4 <= eta), t4, np.nan)
    lo = np.maximum(t3 + 1e-9, t1 + 1e-9)
    hi = np.full_like(t1, eta)

    def ang(t4):
        p14 = chord_ratio(curve, t4, t1)
        p23 = chord_ratio(curve, t3, t2)
        return (np.arctan2(p14[:, 1], p14[:, 0])
                - np.arctan2(p23[:, 1], p23[:, 0]))

    alo = ang(lo)
    ahi = ang(hi)
    bad = np.sign(alo) == np.sign(ahi)
    a, b = lo.copy(), hi.copy()
    for _ in range(60):
        mid = 0.5 * (a + b)
        am = ang(mid)
        left = np.sign(am) == np.sign(alo)
        a = np.where(left, mid, a)
        alo = np.where(left, am, alo)
        b = np.where(left, b, mid)
    t4 = 0.5 * (a + b)
    return np.where(bad, np.nan, t4)


# -- registry -----------------------------------------------------------------


@dataclass(frozen=True)
class GalleryEntry:
    ident: str
    v: int
    n: int
    m: int
    default_eta: float
    default_i0: Optional[int]
    needs_curve: bool
    description: str


GALLERY: dict[str, GalleryEntry] = {
    "iso-f1": GalleryEntry("iso-f1", 3, 1, 1, 0.1, 1, True,
                           "squared-chord isosceles detector"),
    "iso-f2": GalleryEntry("iso-f2", 3, 1, 1, 0.1, 2, True,
                           "signed-distance isosceles detector"),
    "trapezoid": GalleryEntry("trapezoid", 4, 1, 2, 1.0, None, True,
                              "parallel-sides + sidelength-ratio pair"),
    "ap3": GalleryEntry("ap3", 3, 1, 1, 1.0, 3, False,
                        "three-term progression form x1 - 2x2 + x3"),
    "keleti-rect": GalleryEntry("keleti-rect", 4, 1, 1, 1.0, 2, False,
                                "rectangle form with coincidence companion"),
    "quad-example": GalleryEntry("quad-example", 3, 1, 1, 1.0, 3, False,
                                 "(x3-x1) - (x2-x1)^2"),
    "cubic-example": GalleryEntry("cubic-example", 3, 1, 1, 1.0, 2, False,
                                  "(x3-x1) - (x2-x1)^3"),
}


def get_family(ident: str, curve: Optional[str | CurveSpec] = None,
               eta: Optional[float] = None) -> list[FunctionSpec]:
    """Instantiate a gallery identifier as a (possibly multi-) function family."""
    if ident not in GALLERY:
        raise ConfigError(f"unknown gallery id {ident!r}; have {sorted(GALLERY)}")
    entry = GALLERY[ident]
    eta = entry.default_eta if eta is None else float(eta)
    cs: Optional[CurveSpec] = None
    if entry.needs_curve:
        if curve is None:
            raise ConfigError(f"gallery id {ident!r} needs a curve")
        cs = get_curve(curve) if isinstance(curve, str) else curve
        cs.validate(eta)

    if ident == "iso-f1":
        return [isosceles_f1(cs, eta)]
    if ident == "iso-f2":
        return [isosceles_f2(cs, eta)]
    if ident == "trapezoid":
        return [trapezoid_f(cs, eta)]
    if ident == "ap3":
        f = parse_function("x[1] - 2*x[2] + x[3]", v=3, name="ap3", eta=eta,
                           r_q=1, alpha_q=(0, 0, 1), i0=3)
        f.c0_cert = declared_certificate(1.0, math.sqrt(6.0), 1.0, unit_box(3, eta))
        return [f]
    if ident == "keleti-rect":
        f = parse_function("0 - x[1] + x[2] + x[3] - x[4]", v=4,
                           name="keleti-rect", eta=eta,
                           r_q=1, alpha_q=(0, 1, 0, 0), i0=2)
        f.c0_cert = declared_certificate(1.0, 2.0, 1.0, unit_box(4, eta))
        g = parse_function("0 - x[1] + 2*x[2] - x[4]", v=4,
                           name="keleti-rect-coincident", eta=eta,
                           r_q=1, alpha_q=(0, 1, 0, 0), i0=2)
        g.c0_cert = declared_certificate(2.0, math.sqrt(6.0), 1.0, unit_box(4, eta))
        return [f, g]
    if ident == "quad-example":
        return [parse_function("(x[3] - x[1]) - (x[2] - x[1])^2", v=3,
                               name="quad-example", eta=eta,
                               r_q=2, alpha_q=(0, 2, 0))]
    if ident == "cubic-example":
        return [parse_function("(x[3] - x[1]) - (x[2] - x[1])^3", v=3,
                               name="cubic-example", eta=eta,
                               r_q=3, alpha_q=(0, 3, 0))]
    raise AssertionError(ident)
