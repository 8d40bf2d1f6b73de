"""Uniform model of target functions with derivative oracles and bound
certificates.

Evaluation contract: `eval_fn` takes a float array of shape (k, n*v) and
returns shape (k, m). Coordinates are flattened point-major: point i's
coordinate j sits at index (i-1)*n + (j-1) (1-based math indices).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CertificateFailure, DerivativeUnavailable
from .geometry import Box, Cube, as_fraction

MultiIndex = tuple[int, ...]

#: finite-difference oracles refuse orders above this
FD_ORDER_CAP = 3

#: relative finite-difference step per derivative order
FD_STEP_SCALE = 1e-4


@dataclass(frozen=True)
class BoundCertificate:
    """Certified bounds for one function on one product domain.

    c0 bounds the privileged partial (m = 1) or the smallest singular value
    of Df (m > 1) from below; grad_upper bounds the gradient / largest
    singular value from above; hess_upper bounds the Hessian norm.
    """

    c0: float
    grad_upper: float
    hess_upper: float
    domain: Box
    provenance: str  # "declared-by-user" | "sampled"

    def __post_init__(self):
        if not (0 < self.c0 <= self.grad_upper):
            raise CertificateFailure(
                f"need 0 < c0 <= grad_upper, got c0={self.c0}, "
                f"grad_upper={self.grad_upper}")
        if self.hess_upper <= 0:
            raise CertificateFailure("hess_upper must be positive")
        if isinstance(self.domain, Cube):
            object.__setattr__(self, "domain", self.domain.as_box())

    def covers(self, box: Box) -> bool:
        return self.domain.contains_box(box)


@dataclass(frozen=True)
class DerivOpSchedule:
    """Chain of multi-indices alpha_0 .. alpha_r with |alpha_k| = k.

    Adjacent entries differ in exactly one slot, a largest entry of the
    higher one reduced by 1 (ties broken at the lowest coordinate index).
    """

    alphas: tuple[MultiIndex, ...]

    def __post_init__(self):
        for k, a in enumerate(self.alphas):
            if sum(a) != k:
                raise ValueError(f"|alpha_{k}| = {sum(a)} != {k}")
        for k in range(1, len(self.alphas)):
            hi, lo = self.alphas[k], self.alphas[k - 1]
            diffs = [i for i in range(len(hi)) if hi[i] != lo[i]]
            if len(diffs) != 1 or hi[diffs[0]] - lo[diffs[0]] != 1:
                raise ValueError("adjacent multi-indices differ badly")
            if hi[diffs[0]] != max(hi):
                raise ValueError("reduced entry is not a largest entry")

    @property
    def order(self) -> int:
        return len(self.alphas) - 1

    def alpha(self, k: int) -> MultiIndex:
        return self.alphas[k]

    def i0_at(self, k: int) -> int:
        """1-based coordinate whose partial lifts level k to level k+1."""
        hi, lo = self.alphas[k + 1], self.alphas[k]
        for i in range(len(hi)):
            if hi[i] != lo[i]:
                return i + 1
        raise ValueError("degenerate schedule")


def build_schedule(alpha_q: Sequence[int]) -> DerivOpSchedule:
    """Full reduction chain from alpha_q down to the zero multi-index."""
    cur = tuple(int(a) for a in alpha_q)
    if any(a < 0 for a in cur) or sum(cur) < 1:
        raise ValueError(f"need a multi-index of order >= 1, got {alpha_q}")
    chain = [cur]
    while sum(cur) > 0:
        m = max(cur)
        i = cur.index(m)  # lowest coordinate index among the largest entries
        cur = cur[:i] + (cur[i] - 1,) + cur[i + 1:]
        chain.append(cur)
    chain.reverse()
    return DerivOpSchedule(tuple(chain))


@dataclass
class FunctionSpec:
    """Evaluable v-point map ((R^n)^v -> R^m) with derivative oracles."""

    name: str
    n: int
    v: int
    m: int
    eval_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None  # (k,nv)->(k,m,nv)
    deriv_fn: Optional[Callable[[MultiIndex], Callable]] = None
    mp_eval_fn: Optional[Callable] = None  # tuple of mpf -> list of mpf
    r_q: Optional[int] = None
    alpha_q: Optional[MultiIndex] = None
    i0: Optional[int] = None  # 1-based privileged coordinate (m = 1)
    c0_cert: Optional[BoundCertificate] = None
    eta: float = 1.0

    def __post_init__(self):
        if self.m > self.n * (self.v - 1):
            raise ValueError(
                f"m={self.m} exceeds n(v-1)={self.n * (self.v - 1)}")
        if self.alpha_q is not None and self.r_q is not None:
            if sum(self.alpha_q) != self.r_q:
                raise ValueError("|alpha_q| != r_q")

    @property
    def nv(self) -> int:
        return self.n * self.v

    def eval_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.eval_fn(x)
        return np.asarray(out, dtype=float).reshape(x.shape[0], self.m)

    def __call__(self, x: Sequence[float]) -> np.ndarray:
        return self.eval_batch(np.asarray(x, dtype=float)[None, :])[0]

    def grad_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(x), dtype=float).reshape(
                x.shape[0], self.m, self.nv)
        return fd_gradient(self.eval_batch, x, self.m, self.fd_step())

    def fd_step(self) -> float:
        return FD_STEP_SCALE * self.eta

    @property
    def schedule(self) -> DerivOpSchedule:
        if self.alpha_q is None:
            raise DerivativeUnavailable(f"{self.name} carries no alpha_q")
        return build_schedule(self.alpha_q)

    def has_mp(self) -> bool:
        return self.mp_eval_fn is not None


def fd_gradient(eval_batch, x: np.ndarray, m: int, h: float) -> np.ndarray:
    k, nv = x.shape
    out = np.empty((k, m, nv))
    for j in range(nv):
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        out[:, :, j] = (eval_batch(xp) - eval_batch(xm)) / (2 * h)
    return out


def _fd_derivative(eval_fn, alpha: MultiIndex, n: int, h: float):
    """Nested central differences for the mixed partial d^alpha."""
    order = sum(alpha)
    if order == 0:
        return eval_fn

    # peel one derivative at a time, highest index first for determinism
    j = max(i for i, a in enumerate(alpha) if a > 0)
    inner_alpha = tuple(a - 1 if i == j else a for i, a in enumerate(alpha))
    inner = _fd_derivative(eval_fn, inner_alpha, n, h)

    def diff(x: np.ndarray) -> np.ndarray:
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        return (np.asarray(inner(xp)) - np.asarray(inner(xm))) / (2 * h)

    return diff


def apply_deriv_op(f: FunctionSpec, alpha: Sequence[int]) -> FunctionSpec:
    """FunctionSpec evaluating the mixed partial d^alpha f.

    Uses the closed-form derivative oracle when present; falls back to nested
    central differences (orders above FD_ORDER_CAP are refused there).
    """
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != f.nv:
        raise ValueError(f"alpha length {len(alpha)} != nv={f.nv}")
    order = sum(alpha)
    if order == 0:
        return f
    name = f"{f.name}.d{''.join(map(str, alpha))}"
    if f.deriv_fn is not None:
        new_eval = f.deriv_fn(alpha)
        mp_fn = getattr(new_eval, "mp_eval_fn", None)
        grad_fn = getattr(new_eval, "grad_fn", None)
        dfn = f.deriv_fn

        def shifted_deriv(beta: MultiIndex, _base=alpha):
            total = tuple(a + b for a, b in zip(_base, beta))
            return dfn(total)

        return replace(f, name=name, eval_fn=new_eval, grad_fn=grad_fn,
                       deriv_fn=shifted_deriv, mp_eval_fn=mp_fn,
                       i0=None, c0_cert=None)
    if order > FD_ORDER_CAP:
        raise DerivativeUnavailable(
            f"finite differences support order <= {FD_ORDER_CAP}, "
            f"requested {order}")
    new_eval = _fd_derivative(f.eval_batch, alpha, f.n, f.fd_step())
    return replace(f, name=name, eval_fn=new_eval, grad_fn=None,
                   deriv_fn=None, mp_eval_fn=None, i0=None, c0_cert=None)


# -- certificate sampling -----------------------------------------------------


def _grid_points(domain: Box, grid_per_axis: int, cap: int = 400_000) -> np.ndarray:
    d = domain.dim
    g = grid_per_axis
    while g > 2 and g ** d > cap:
        g -= 1
    axes = [np.linspace(float(lo), float(hi), g) if hi > lo
            else np.array([float(lo)])
            for lo, hi in zip(domain.lower, domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def sample_certificate(f: FunctionSpec, domain: Box | Cube,
                       grid_per_axis: int, i0: Optional[int] = None,
                       margin: float = 0.1) -> BoundCertificate:
    """Grid-sampled certificate with a symmetric safety margin.

    Advisory rather than rigorous: c0 = (1-margin)*min of the relevant
    quantity, uppers = (1+margin)*max. Raises CertificateFailure when the
    sampled minimum is not positive.
    """
    if grid_per_axis < 2:
        raise ValueError("grid_per_axis must be >= 2")
    if isinstance(domain, Cube):
        domain = domain.as_box()
    if i0 is None:
        i0 = f.i0
    pts = _grid_points(domain, grid_per_axis)
    grads = f.grad_batch(pts)  # (k, m, nv)

    if f.m == 1:
        if i0 is None:
            raise ValueError("m = 1 certificate needs a privileged index i0")
        cols = slice((i0 - 1) * f.n, i0 * f.n)
        low_qty = np.abs(grads[:, 0, cols])
        if f.n == 1:
            low_qty = low_qty[:, 0]
        else:
            low_qty = np.linalg.norm(low_qty, axis=1)
        grad_mag = np.linalg.norm(grads[:, 0, :], axis=1)
    else:
        svals = np.linalg.svd(grads, compute_uv=False)  # (k, min(m,nv))
        low_qty = svals[:, -1]
        grad_mag = svals[:, 0]

    min_low = float(low_qty.min())
    if min_low <= 0:
        raise CertificateFailure(
            f"{f.name}: sampled lower quantity is {min_low} on the grid")
    c0 = (1 - margin) * min_low
    grad_upper = (1 + margin) * float(grad_mag.max())

    # Hessian norm via finite differences of the gradient; Frobenius over all
    # second partials upper-bounds the operator norm.
    h = f.fd_step()
    sub = pts[:: max(1, len(pts) // 512)]
    acc = np.zeros(len(sub))
    for j in range(f.nv):
        xp = sub.copy()
        xm = sub.copy()
        xp[:, j] += h
        xm[:, j] -= h
        d2 = (f.grad_batch(xp) - f.grad_batch(xm)) / (2 * h)  # (k, m, nv)
        acc += np.sum(d2 ** 2, axis=(1, 2))
    hess_upper = (1 + margin) * float(np.sqrt(acc.max()))
    hess_upper = max(hess_upper, 1e-9)

    return BoundCertificate(c0=c0, grad_upper=max(grad_upper, c0),
                            hess_upper=hess_upper, domain=domain,
                            provenance="sampled")


def declared_certificate(c0: float, grad_upper: float, hess_upper: float,
                         domain: Box | Cube) -> BoundCertificate:
    if isinstance(domain, Cube):
        domain = domain.as_box()
    return BoundCertificate(c0=c0, grad_upper=grad_upper,
                            hess_upper=hess_upper, domain=domain,
                            provenance="declared-by-user")


def unit_box(nv: int, eta: float | Fraction = 1) -> Box:
    e = as_fraction(eta)
    return Box(tuple(Fraction(0) for _ in range(nv)), tuple(e for _ in range(nv)))
