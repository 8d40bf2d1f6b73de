"""Single-scale zero avoidance on the line.

Given v stage sets at scale 1/M and a function whose privileged partial is
certified nonvanishing, produce smaller stage sets whose product carries no
zeros. Non-privileged axes keep the leftmost piece of every 1/N-interval;
the privileged axis discards tiles near the root set swept out by the
anchor tuples.

Scales shrink doubly exponentially across construction stages, so all
bookkeeping is exact rational with big-integer tile indices, and roots are
refined with mpmath once they fall below float resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Optional, Sequence

import mpmath
import numpy as np

from .errors import CertificateViolation, InfeasibleScale, InvalidStageSet
from .functions import BoundCertificate, FunctionSpec
from .geometry import Box, CubeRun, StageSet, fraction_str, pow2_floor

#: anchors per axis above this cannot be materialized
AXIS_ANCHOR_CAP = 2_000_000
#: anchor tuples above this are refused
TUPLE_BUDGET = 10_000_000
#: (tuple, interval) bisection pairs above this are refused
PAIR_BUDGET = 100_000_000
#: tuples above this are refused when roots need mpmath
MP_TUPLE_BUDGET = 50_000
#: float roots are trusted down to this scale
FLOAT_SCALE_FLOOR = 1e-12


@dataclass
class AvoidStepInput1D:
    f: FunctionSpec
    i0: int  # 1-based privileged coordinate
    M: int
    c0_cert: BoundCertificate
    T: tuple[StageSet, ...]
    N: int

    def __post_init__(self):
        v = self.f.v
        if len(self.T) != v:
            raise InvalidStageSet(f"need {v} stage sets, got {len(self.T)}")
        if not 1 <= self.i0 <= v:
            raise ValueError(f"i0={self.i0} outside 1..{v}")
        if self.N % self.M != 0 or self.N < self.M:
            raise InfeasibleScale(f"N={self.N} is not a multiple of M={self.M}")
        scale = Fraction(1, self.M)
        for i, t in enumerate(self.T):
            if t.dim != 1:
                raise InvalidStageSet("1d step needs 1d stage sets")
            if t.side != scale:
                raise InvalidStageSet(
                    f"T[{i}] scale {t.side} != 1/M = {scale}")
            if t.is_empty():
                raise InvalidStageSet(f"T[{i}] is empty")


@dataclass
class KeptGroup:
    """Uniform bookkeeping for a run of 1/M-intervals of one axis."""

    axis: int  # 1-based original coordinate
    j_run: CubeRun
    total_per_j: int
    kept_per_j: int
    children_per_i: int


@dataclass
class KeptDetail:
    """Per-interval bookkeeping for a 1/M-interval near the root set."""

    axis: int
    j_lower: Fraction
    entries: list[tuple[int, bool, int]]  # (interval index, kept, children)


@dataclass
class AvoidStepOutput1D:
    S: tuple[StageSet, ...]
    kept: dict[int, list]  # axis (1-based) -> [KeptGroup | KeptDetail]
    c1: Fraction
    C0: float
    piece_side: Fraction
    tile_side: Fraction
    roots: list[Fraction]
    audit: dict


def choose_constants(cert: BoundCertificate, M: int, v: int
                     ) -> tuple[float, Fraction]:
    """Implicit-function slope bound C0 and the dyadic shrink factor c1.

    C0 = sqrt(v) * grad_upper / c0; c1 is the largest power of 1/2 with
    3 M^3 C0 c1 < 1 - c1.
    """
    C0 = math.sqrt(v) * cert.grad_upper / cert.c0
    c0f = Fraction(C0)
    c1 = pow2_floor(Fraction(1) / (3 * M ** 3 * c0f + 1))
    while 3 * M ** 3 * c0f * c1 >= 1 - c1:
        c1 /= 2
    return C0, c1


# -- anchors ------------------------------------------------------------------


def _axis_anchor_runs(t: StageSet, N: int, M: int) -> list[tuple[Fraction, Fraction, int]]:
    """Left endpoints of the 1/N-subintervals of t as (start, step, count)."""
    inner = N // M
    step = Fraction(1, N)
    out = []
    for r in t.runs:
        if inner == 1:
            out.append((r.anchor_coord, r.stride, r.count))
        elif r.stride == r.side:
            out.append((r.anchor_coord, step, r.count * inner))
        else:
            if r.count > AXIS_ANCHOR_CAP:
                raise InfeasibleScale(
                    "strided stage-set run too large to enumerate anchors")
            for k in range(r.count):
                out.append((r.anchor_coord + k * r.stride, step, inner))
    return out


def _flatten_anchors(progs: list[tuple[Fraction, Fraction, int]]
                     ) -> list[Fraction]:
    total = sum(c for _, _, c in progs)
    if total > AXIS_ANCHOR_CAP:
        raise InfeasibleScale(
            f"axis anchor count {total} exceeds cap {AXIS_ANCHOR_CAP}")
    out: list[Fraction] = []
    for start, step, count in progs:
        out.extend(start + k * step for k in range(count))
    return out


def _anchor_chunks(anchor_floats: list[np.ndarray], chunk: int
                   ) -> Iterator[np.ndarray]:
    """Cartesian product of per-axis anchor arrays, yielded in chunks."""
    sizes = [len(a) for a in anchor_floats]
    total = math.prod(sizes)
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(lo + chunk, total))
        coords = np.unravel_index(idx, sizes)
        yield np.stack([anchor_floats[j][coords[j]]
                        for j in range(len(sizes))], axis=1)


# -- root isolation -----------------------------------------------------------


def _perm_eval(f: FunctionSpec, perm: list[int]):
    """Batch evaluator taking permuted columns (privileged axis last)."""

    def ev(xp: np.ndarray) -> np.ndarray:
        xo = np.empty_like(xp)
        xo[:, perm] = xp
        return f.eval_batch(xo)[:, 0]

    return ev


def _bisect_float(ev, aprime: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                  flo: np.ndarray, iters: int) -> np.ndarray:
    a, b, fa = lo.copy(), hi.copy(), flo.copy()
    cols = np.empty((len(a), aprime.shape[1] + 1))
    cols[:, :-1] = aprime
    for _ in range(iters):
        mid = 0.5 * (a + b)
        cols[:, -1] = mid
        fm = ev(cols)
        left = np.sign(fm) == np.sign(fa)
        a = np.where(left, mid, a)
        fa = np.where(left, fm, fa)
        b = np.where(left, b, mid)
    return 0.5 * (a + b)


class _MpEval:
    def __init__(self, f: FunctionSpec, perm: list[int], dps: int):
        if not f.has_mp():
            raise InfeasibleScale(
                f"{f.name}: scale below float resolution and no "
                "high-precision oracle is available")
        self.fn = f.mp_eval_fn
        self.perm = perm
        self.dps = dps

    def sign(self, aprime: Sequence[Fraction], x: Fraction) -> int:
        with mpmath.workdps(self.dps):
            vals = list(aprime) + [x]
            args = [None] * len(vals)
            for k, val in enumerate(vals):
                args[self.perm[k]] = (mpmath.mpf(val.numerator)
                                      / mpmath.mpf(val.denominator))
            out = self.fn(args)
            y = out[0] if isinstance(out, (list, tuple)) else out
            if y > 0:
                return 1
            if y < 0:
                return -1
            return 0


def _bisect_mp(mp_ev: _MpEval, aprime, lo: Fraction, hi: Fraction,
               slo: int, tol: Fraction) -> Fraction:
    a, b = lo, hi
    while b - a > tol:
        mid = (a + b) / 2
        sm = mp_ev.sign(aprime, mid)
        if sm == 0:
            return mid
        if sm == slo:
            a = mid
        else:
            b = mid
    return (a + b) / 2


def zero_slice_roots(f: FunctionSpec, a_prime: Sequence[float],
                     T_v: StageSet, c0_cert: BoundCertificate,
                     i0: Optional[int] = None,
                     tol: float = 1e-12) -> list[float]:
    """Roots of x -> f(a', x) on T_v, one bisection per 1/M-interval.

    The certificate makes the slice strictly monotone on each interval, so
    a sign change at the endpoints isolates the unique root. More than one
    sign change at probe resolution contradicts the certificate.
    """
    v = f.v
    i0 = v if i0 is None else i0
    perm = [i for i in range(v) if i != i0 - 1] + [i0 - 1]
    ev = _perm_eval(f, perm)
    ap = np.asarray(a_prime, dtype=float)[None, :]
    roots: list[float] = []
    for cube in T_v.iter_cubes():
        lo, hi = float(cube.lower[0]), float(cube.lower[0] + cube.side)
        probes = np.linspace(lo, hi, 9)
        cols = np.repeat(ap, len(probes), axis=0)
        cols = np.concatenate([cols, probes[:, None]], axis=1)
        vals = ev(cols)
        signs = np.sign(vals)
        nz = signs[signs != 0]
        changes = int(np.count_nonzero(np.diff(nz) != 0))
        if changes > 1:
            raise CertificateViolation(
                f"{f.name}: {changes} sign changes inside one 1/M-interval")
        if signs[0] == 0:
            roots.append(lo)
            continue
        if signs[-1] == 0:
            roots.append(hi)
            continue
        if signs[0] == signs[-1]:
            continue
        iters = max(10, int(math.ceil(math.log2(max((hi - lo) / tol, 2)))))
        root = _bisect_float(ev, ap, np.array([lo]), np.array([hi]),
                             np.array([vals[0]]), iters)
        roots.append(float(root[0]))
    return roots


# -- the step -----------------------------------------------------------------


def avoid_step_1d(inp: AvoidStepInput1D) -> AvoidStepOutput1D:
    f, M, N, v = inp.f, inp.M, inp.N, inp.f.v
    i0m1 = inp.i0 - 1
    perm = [i for i in range(v) if i != i0m1] + [i0m1]
    T_perm = [inp.T[p] for p in perm]
    T_last = T_perm[-1]

    C0, c1 = choose_constants(inp.c0_cert, M, v)
    piece = c1 / Fraction(N) ** (v - 1)
    t_len = pow2_floor(Fraction(C0) * c1)
    tile = t_len / Fraction(N) ** (v - 1)
    ppt = int(t_len / c1)  # pieces per tile
    root_tol = piece / 1000
    r_pad = Fraction(C0) * c1 / Fraction(N) ** (v - 1) + root_tol

    # anchors of the non-privileged axes
    anchor_progs = [_axis_anchor_runs(t, N, M) for t in T_perm[:-1]]
    anchor_fracs = [_flatten_anchors(p) for p in anchor_progs]
    n_tuples = math.prod(len(a) for a in anchor_fracs)
    if n_tuples > TUPLE_BUDGET:
        raise InfeasibleScale(
            f"anchor tuple count {n_tuples} exceeds budget {TUPLE_BUDGET}")

    hull = T_last.hull()
    hull_lo, hull_hi = hull.lower[0], hull.upper[0]
    fast = inp.c0_cert.covers(Box.product(
        [t.hull() for t in inp.T]))

    need_mp = float(root_tol) < FLOAT_SCALE_FLOOR * max(1.0, float(hull_hi))
    if need_mp and n_tuples > MP_TUPLE_BUDGET:
        raise InfeasibleScale(
            f"{n_tuples} anchor tuples need high-precision roots "
            f"(> {MP_TUPLE_BUDGET})")
    if not fast:
        n_j = T_last.n_cubes
        if n_j > AXIS_ANCHOR_CAP:
            raise InfeasibleScale(
                "per-interval root isolation over a giant privileged set; "
                "certificate does not cover the hull product")
        if n_tuples * int(n_j) > PAIR_BUDGET:
            raise InfeasibleScale(
                f"{n_tuples} tuples x {n_j} intervals exceeds pair budget")

    roots = _collect_roots(f, perm, anchor_fracs, T_last, fast, need_mp,
                           hull_lo, hull_hi, root_tol)
    roots = _dedupe_sorted(sorted(roots), root_tol)

    # non-privileged outputs: leftmost piece of every 1/N-interval
    S_out: list[StageSet | None] = [None] * v
    kept: dict[int, list] = {}
    for k in range(v - 1):
        axis = perm[k] + 1
        runs = []
        for start, step, count in anchor_progs[k]:
            runs.append(CubeRun((start,), piece, count, step))
        S_out[perm[k]] = StageSet(1, piece, tuple(runs),
                                  T_perm[k].stage_index + 1)
        inner = N // M
        kept[axis] = [KeptGroup(axis, r, inner, inner, 1)
                      for r in T_perm[k].runs]

    s_last, kept_last, audit_i0 = _privileged_axis(
        T_last, roots, M, N, v, c1, piece, t_len, tile, ppt, r_pad,
        axis=inp.i0)
    S_out[i0m1] = s_last
    kept[inp.i0] = kept_last

    n_roots = len(roots)
    audit = {
        "M": M, "N": N, "v": v,
        "C0": C0,
        "c1": fraction_str(c1),
        "t_len": fraction_str(t_len),
        "piece_side": fraction_str(piece),
        "tile_side": fraction_str(tile),
        "n_anchor_tuples": n_tuples,
        "n_roots": n_roots,
        "card_B_bound": M * N ** (v - 1),
        "card_B_ok": n_roots <= M * N ** (v - 1),
        "root_path": "hull" if fast else "per-interval",
        "precision": "mp" if need_mp else "float",
    }
    audit.update(audit_i0)
    return AvoidStepOutput1D(
        S=tuple(S_out), kept=kept, c1=c1, C0=C0, piece_side=piece,
        tile_side=tile, roots=roots, audit=audit)


def _collect_roots(f, perm, anchor_fracs, T_last, fast, need_mp,
                   hull_lo, hull_hi, root_tol) -> list[Fraction]:
    roots: list[Fraction] = []
    if need_mp:
        digits = (root_tol.denominator.bit_length()
                  - root_tol.numerator.bit_length() + 1) * 0.30103
        dps = max(30, int(1.2 * digits) + 20)
        mp_ev = _MpEval(f, perm, dps)
        if fast:
            spans = [(hull_lo, hull_hi)]
        else:
            spans = [(c.lower[0], c.lower[0] + c.side)
                     for c in T_last.iter_cubes()]
        for aprime in _frac_tuples(anchor_fracs):
            for lo, hi in spans:
                slo = mp_ev.sign(aprime, lo)
                shi = mp_ev.sign(aprime, hi)
                if slo == 0:
                    roots.append(lo)
                elif shi == 0:
                    roots.append(hi)
                elif slo != shi:
                    roots.append(_bisect_mp(mp_ev, aprime, lo, hi, slo,
                                            root_tol))
        return roots

    ev = _perm_eval(f, perm)
    anchor_floats = [np.array([float(a) for a in ax]) for ax in anchor_fracs]
    tol_f = float(root_tol)
    if fast:
        lo_f, hi_f = float(hull_lo), float(hull_hi)
        iters = max(10, int(math.ceil(math.log2(max((hi_f - lo_f) / tol_f, 2)))))
        for chunk in _anchor_chunks(anchor_floats, 200_000):
            roots.extend(_roots_on_span(ev, chunk, lo_f, hi_f, iters))
    else:
        spans = [(float(c.lower[0]), float(c.lower[0] + c.side))
                 for c in T_last.iter_cubes()]
        for chunk in _anchor_chunks(anchor_floats, 200_000):
            for lo_f, hi_f in spans:
                iters = max(10, int(math.ceil(
                    math.log2(max((hi_f - lo_f) / tol_f, 2)))))
                roots.extend(_roots_on_span(ev, chunk, lo_f, hi_f, iters,
                                            probe=True))
    return roots


def _roots_on_span(ev, aprime: np.ndarray, lo: float, hi: float,
                   iters: int, probe: bool = False) -> list[Fraction]:
    k = len(aprime)
    cols = np.empty((k, aprime.shape[1] + 1))
    cols[:, :-1] = aprime
    cols[:, -1] = lo
    flo = ev(cols)
    cols[:, -1] = hi
    fhi = ev(cols)
    out: list[Fraction] = []
    zlo = flo == 0
    zhi = fhi == 0
    if zlo.any():
        out.append(Fraction(lo))
    if zhi.any():
        out.append(Fraction(hi))
    change = (np.sign(flo) != np.sign(fhi)) & ~zlo & ~zhi
    if not change.any():
        return out
    if probe:
        sel = aprime[change]
        probes = np.linspace(lo, hi, 9)
        pc = np.empty((len(sel), 9))
        for j, p in enumerate(probes):
            c = np.empty((len(sel), aprime.shape[1] + 1))
            c[:, :-1] = sel
            c[:, -1] = p
            pc[:, j] = ev(c)
        sgn = np.sign(pc)
        flips = np.count_nonzero(np.diff(np.where(sgn == 0, 1, sgn),
                                         axis=1) != 0, axis=1)
        if (flips > 1).any():
            raise CertificateViolation(
                "multiple sign changes inside one 1/M-interval")
    sub = aprime[change]
    found = _bisect_float(ev, sub,
                          np.full(len(sub), lo), np.full(len(sub), hi),
                          flo[change], iters)
    out.extend(Fraction(float(r)) for r in np.unique(found))
    return out


def _frac_tuples(anchor_fracs: list[list[Fraction]]):
    if not anchor_fracs:
        yield ()
        return
    import itertools
    yield from itertools.product(*anchor_fracs)


def _dedupe_sorted(roots: list[Fraction], tol: Fraction) -> list[Fraction]:
    out: list[Fraction] = []
    for r in roots:
        if out and r - out[-1] <= tol:
            continue
        out.append(r)
    return out


def _privileged_axis(T_last: StageSet, roots: list[Fraction], M, N, v,
                     c1, piece, t_len, tile, ppt, r_pad, axis: int):
    """Keep/discard bookkeeping along the privileged coordinate."""
    inner = N // M
    step = Fraction(1, N)
    tiles_per_i = int(Fraction(1, N) / tile)
    pieces_per_i = tiles_per_i * ppt
    pieces_per_j = inner * pieces_per_i
    keep_threshold = M ** 3 * N ** (v - 2)
    discard_bound = Fraction(N, M * M)  # discarded intervals per J

    out_runs: list[CubeRun] = []
    groups: list = []
    volume_ok = True
    kept_fraction_ok = True
    discard_count_ok = True
    exceptional = 0
    min_kept_fraction = 1.0

    for run in T_last.runs:
        if run.stride != run.side and run.count > AXIS_ANCHOR_CAP:
            raise InfeasibleScale("strided privileged run too large")
        # partition run indices into clean stretches and exceptional J's
        bad_j: set[int] = set()
        for b in roots:
            lo_idx = (b - r_pad - run.anchor_coord) // run.stride
            hi_idx = (b + r_pad - run.anchor_coord) // run.stride
            for jj in range(int(lo_idx), int(hi_idx) + 1):
                if 0 <= jj < run.count:
                    # only exceptional when the pad window meets the cube
                    a = run.anchor_coord + jj * run.stride
                    if b + r_pad >= a and b - r_pad <= a + run.side:
                        bad_j.add(jj)
        if not bad_j:
            groups.append(KeptGroup(axis, run, inner, inner, pieces_per_i))
            out_runs.extend(_whole_run_pieces(run, piece, pieces_per_j))
            continue
        exceptional += len(bad_j)
        # clean sub-runs between exceptional indices
        idxs = sorted(bad_j)
        prev = 0
        for jj in idxs + [run.count]:
            if jj > prev:
                sub = CubeRun(
                    (run.anchor_coord + prev * run.stride,),
                    run.side, jj - prev, run.stride)
                groups.append(KeptGroup(axis, sub, inner, inner, pieces_per_i))
                out_runs.extend(_whole_run_pieces(sub, piece, pieces_per_j))
            if jj == run.count:
                break
            j_lo = run.anchor_coord + jj * run.stride
            detail, runs_j, stats = _exceptional_interval(
                j_lo, run.side, roots, inner, step, tile, tiles_per_i,
                ppt, piece, keep_threshold, r_pad, axis,
                volume_bound=c1 * step)
            groups.append(detail)
            out_runs.extend(runs_j)
            if not stats["volume_ok"]:
                volume_ok = False
            if stats["discarded"] > discard_bound:
                discard_count_ok = False
            frac = stats["kept"] / inner
            min_kept_fraction = min(min_kept_fraction, frac)
            if Fraction(stats["kept"]) < (1 - Fraction(1, M)) * inner:
                kept_fraction_ok = False
            prev = jj + 1

    s = StageSet(1, piece, tuple(out_runs), T_last.stage_index + 1)
    audit = {
        "exceptional_intervals": exceptional,
        "kept_fraction_ok": kept_fraction_ok,
        "min_kept_fraction": float(min_kept_fraction),
        "volume_ok": volume_ok,
        "per_j_discard_bound_ok": discard_count_ok,
    }
    return s, groups, audit


def _whole_run_pieces(run: CubeRun, piece: Fraction, pieces_per_j: int
                      ) -> list[CubeRun]:
    if run.stride == run.side:
        return [CubeRun((run.anchor_coord,), piece,
                        run.count * pieces_per_j, piece)]
    if run.count > AXIS_ANCHOR_CAP:
        raise InfeasibleScale("strided privileged run too large")
    return [CubeRun((run.anchor_coord + k * run.stride,), piece,
                    pieces_per_j, piece) for k in range(run.count)]


def _exceptional_interval(j_lo: Fraction, j_side: Fraction,
                          roots: list[Fraction], inner: int, step: Fraction,
                          tile: Fraction, tiles_per_i: int, ppt: int,
                          piece: Fraction, keep_threshold: int,
                          r_pad: Fraction, axis: int,
                          volume_bound: Fraction):
    """Tile-level survival inside one 1/M-interval near the root set.

    A kept 1/N-interval must retain total length >= volume_bound (= c1/N).
    """
    import bisect as _bisect

    entries: list[tuple[int, bool, int]] = []
    runs: list[CubeRun] = []
    kept = 0
    discarded = 0
    volume_ok = True
    for ii in range(inner):
        i_lo = j_lo + ii * step
        i_hi = i_lo + step
        count_in_i = (_bisect.bisect_right(roots, i_hi)
                      - _bisect.bisect_left(roots, i_lo))
        if count_in_i > keep_threshold:
            discarded += 1
            entries.append((ii, False, 0))
            continue
        # kill tile index ranges near any root within reach of this interval
        lo_r = _bisect.bisect_left(roots, i_lo - r_pad)
        hi_r = _bisect.bisect_right(roots, i_hi + r_pad)
        kill: list[tuple[int, int]] = []
        for b in roots[lo_r:hi_r]:
            # tile k = [i_lo + k*tile, i_lo + (k+1)*tile] dies when it
            # meets [b - r_pad, b + r_pad]
            k_lo = int(-((-(b - r_pad - i_lo)) // tile)) - 1
            k_hi = int((b + r_pad - i_lo) // tile)
            k_lo = max(k_lo, 0)
            k_hi = min(k_hi, tiles_per_i - 1)
            if k_lo <= k_hi:
                kill.append((k_lo, k_hi))
        kill.sort()
        merged: list[list[int]] = []
        for a, b2 in kill:
            if merged and a <= merged[-1][1] + 1:
                merged[-1][1] = max(merged[-1][1], b2)
            else:
                merged.append([a, b2])
        survive = 0
        prev = 0
        for a, b2 in merged + [[tiles_per_i, tiles_per_i]]:
            if a > prev:
                n_t = a - prev
                survive += n_t
                runs.append(CubeRun((i_lo + prev * tile,), piece,
                                    n_t * ppt, piece))
            prev = max(prev, b2 + 1)
        children = survive * ppt
        ok = children > 0
        if ok:
            kept += 1
            if survive * tile < volume_bound:
                volume_ok = False
        else:
            discarded += 1
        entries.append((ii, ok, children))
    detail = KeptDetail(axis, j_lo, entries)
    return detail, runs, {"kept": kept, "discarded": discarded,
                          "volume_ok": volume_ok}
