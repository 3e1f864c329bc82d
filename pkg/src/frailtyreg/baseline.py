"""Profiled baseline cumulative hazard and the nonparametric log-likelihood.

For fixed ``theta = (gamma, beta)`` the baseline hazard that maximises the
likelihood puts mass only at observed failure times and solves the
self-consistency equation

    dA(t_k) = P_n[w dN(t_k)] / (J(t_k) + rho),
    J(t)    = P_n[w Y(t) exp(beta'Z(t)) (Gdot(H) - delta Gddot(H) / Gdot(H))],

with ``H = H_i(V_i)`` the subject's integrated hazard.  ``rho`` is zero unless
``gamma < 0`` forces the bound ``A(tau) <= eps0^{-1}(|gamma|) / K0``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from .data import Dataset, failure_grid
from .transforms import (GAMMA, INVERSE_GAUSSIAN, LOGNORMAL, FrailtyFamily, _closed_g012, _closed_g_loggdot,
                         _eps0_inverse, _g_loggdot, _in_domain, _ln_g012,
                         transform_bundle)

OK, DOMAIN, NOT_CONVERGED, NONFINITE = 0, 1, 2, 3


class SolverError(RuntimeError):
    """The fixed-point iteration did not converge; ``last`` holds the final iterate."""

    def __init__(self, msg, last=None, residual=np.nan):
        super().__init__(msg)
        self.last = last
        self.residual = residual


class InvalidTheta(ValueError):
    """theta (or the hazard it implies) leaves the frailty transform's domain."""


@dataclass(frozen=True)
class Theta:
    gamma: float
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    @classmethod
    def from_vector(cls, x) -> "Theta":
        return cls(x[0], x[1:])

    def vector(self) -> np.ndarray:
        return np.r_[self.gamma, self.beta]


@dataclass(frozen=True)
class StepHazard:
    """Nonnegative jumps at the distinct failure times."""

    times: np.ndarray
    increments: np.ndarray
    iterations: int = field(default=0, compare=False)
    residual: float = field(default=0.0, compare=False)
    rho: float = field(default=0.0, compare=False)

    @cached_property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def __call__(self, t):
        """A(t) as a right-continuous step function."""
        k = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.r_[0.0, self.cumulative][k]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "increment", "cumulative"])
            for t, a, c in zip(self.times, self.increments, self.cumulative):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(c))])

    @classmethod
    def from_csv(cls, path) -> "StepHazard":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, 0].copy(), arr[:, 1].copy())


def standardize_weights(w, n: int | None = None) -> np.ndarray:
    """Return weights rescaled to mean one; ``None`` means unit weights."""
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float).ravel()
    if n is not None and len(w) != n:
        raise ValueError(f"expected {n} weights, got {len(w)}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    m = w.mean()
    if m <= 0:
        raise ValueError("all weights are zero")
    return w / m


class Layout:
    """Index arrays tying subjects' covariate segments to the failure grid."""

    def __init__(self, data: Dataset):
        grid = failure_grid(data)
        self.data = data
        self.times = grid.times
        self.counts = grid.counts
        self.K = len(grid.times)
        self.lo = np.searchsorted(self.times, data.seg_start, side="right").astype(np.int64)
        self.hi = np.searchsorted(self.times, data.seg_stop, side="right").astype(np.int64)
        self.sub = data.seg_subject.astype(np.int64)
        self.delta = data.status.astype(np.int64)
        self.event_index = np.where(data.status == 1, np.searchsorted(self.times, data.time), -1).astype(np.int64)
        self.last_segment = data.last_segment

    def linear_predictors(self, beta) -> tuple[np.ndarray, np.ndarray]:
        """(exp(beta'z) per segment, beta'Z_i(V_i) per subject)."""
        lp = self.data.seg_z @ np.asarray(beta, dtype=float)
        with np.errstate(over="ignore"):
            r = np.exp(lp)
        return r, lp[self.last_segment]

    def event_mass(self, w) -> np.ndarray:
        """P_n[w dN(t_k)] at each failure time."""
        ev = self.delta == 1
        return np.bincount(self.event_index[ev], weights=w[ev], minlength=self.K) / self.data.n


def layout(data: Dataset) -> Layout:
    lay = data.__dict__.get("_layout")
    if lay is None:
        lay = Layout(data)
        data.__dict__["_layout"] = lay
    return lay


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _cum_H(dA, lo, hi, sub, r, n):
    K = dA.shape[0]
    cum = np.empty(K + 1)
    cum[0] = 0.0
    for k in range(K):
        cum[k + 1] = cum[k] + dA[k]
    H = np.zeros(n)
    for s in range(sub.shape[0]):
        H[sub[s]] += r[s] * (cum[hi[s]] - cum[lo[s]])
    return H


@njit(cache=True)
def _closed_factor(code, alpha, gamma, h, d):
    if code == GAMMA:
        return (1.0 + gamma * d) / (1.0 + gamma * h)
    if code == INVERSE_GAUSSIAN:
        s = 1.0 + 2.0 * gamma * h
        return (math.sqrt(s) + gamma * d) / s
    _, Gd, Gdd = _closed_g012(code, alpha, gamma, h)
    return Gd - d * Gdd / Gd


@njit(cache=True)
def _factor(code, alpha, gamma, h, d, x, logw):
    """Gdot(h) - d Gddot(h) / Gdot(h), with the closed forms for gamma and IG."""
    if code == LOGNORMAL:
        _, Gd, Gdd = _ln_g012(gamma, h, x, logw)
        return Gd - d * Gdd / Gd
    return _closed_factor(code, alpha, gamma, h, d)


@njit(cache=True)
def _J(code, alpha, gamma, x, logw, H, lo, hi, sub, r, delta, w, K):
    """J at the failure times; returns (J, ok)."""
    n = H.shape[0]
    phi = np.empty(n)
    for i in range(n):
        if not _in_domain(code, alpha, gamma, H[i]):
            return np.zeros(K), False
        if code == LOGNORMAL:
            phi[i] = w[i] * _factor(code, alpha, gamma, H[i], delta[i], x, logw)
        else:
            phi[i] = w[i] * _closed_factor(code, alpha, gamma, H[i], delta[i])
    diff = np.zeros(K + 1)
    for s in range(sub.shape[0]):
        v = r[s] * phi[sub[s]]
        diff[lo[s]] += v
        diff[hi[s]] -= v
    J = np.empty(K)
    acc = 0.0
    for k in range(K):
        acc += diff[k]
        J[k] = acc / n
    return J, True


@njit(cache=True)
def _step(code, alpha, gamma, x, logw, lo, hi, sub, r, delta, w, dN, lpV, event_index, dA, rho, want_ll):
    """One self-consistency sweep.

    Returns (F(dA), stationarity residual at dA, log-likelihood at dA, status);
    the log-likelihood is only evaluated when ``want_ll`` is set.
    """
    n = delta.shape[0]
    K = dN.shape[0]
    H = _cum_H(dA, lo, hi, sub, r, n)
    J, ok = _J(code, alpha, gamma, x, logw, H, lo, hi, sub, r, delta, w, K)
    out = np.zeros(K)
    if not ok:
        return out, np.inf, -np.inf, DOMAIN
    resid = 0.0
    for k in range(K):
        den = J[k] + rho
        e = abs(dN[k] - dA[k] * den)
        if e > resid:
            resid = e
        if dN[k] > 0.0:
            if not den > 0.0:
                return out, np.inf, -np.inf, NONFINITE
            out[k] = dN[k] / den
    ll = _loglik(code, alpha, gamma, x, logw, H, delta, lpV, dA, event_index, w) if want_ll else 0.0
    if not np.isfinite(resid):
        return out, resid, ll, NONFINITE
    return out, resid, ll, OK


@njit(cache=True)
def _fixed_point(code, alpha, gamma, x, logw, lo, hi, sub, r, delta, w, dN, lpV, event_index,
                 dA0, rho, tol, max_iter, accelerate):
    """Iterate to a point where max_k |dN_k - dA_k (J_k + rho)| < tol.

    With ``accelerate`` the sweeps are combined by squared extrapolation in
    log(dA), guarded so that an extrapolated point is only kept if it does not
    lower the likelihood.  Returns (dA, sweeps, status, residual).
    """
    K = dN.shape[0]
    args = (code, alpha, gamma, x, logw, lo, hi, sub, r, delta, w, dN, lpV, event_index)
    cur = dA0.copy()
    for k in range(K):
        if dN[k] <= 0.0:
            cur[k] = 0.0
    sweeps = 0
    resid = np.inf
    while sweeps < max_iter:
        f1, resid, _, status = _step(*args, cur, rho, False)
        sweeps += 1
        if status != OK:
            return cur, sweeps, status, resid
        if resid < tol:
            return cur, sweeps, OK, resid
        if not accelerate:
            cur = f1
            continue
        f2, res1, ll1, status = _step(*args, f1, rho, accelerate)
        sweeps += 1
        if status != OK:
            return f1, sweeps, status, res1
        if res1 < tol:
            return f1, sweeps, OK, res1
        # squared extrapolation on the active (positive) coordinates
        rr = 0.0
        vv = 0.0
        for k in range(K):
            if dN[k] > 0.0:
                a = math.log(f1[k]) - math.log(cur[k])
                b = math.log(f2[k]) - 2.0 * math.log(f1[k]) + math.log(cur[k])
                rr += a * a
                vv += b * b
        step = -math.sqrt(rr / vv) if vv > 0.0 else -1.0
        if step > -1.0:
            step = -1.0
        xn = np.zeros(K)
        for k in range(K):
            if dN[k] > 0.0:
                lc = math.log(cur[k])
                a = math.log(f1[k]) - lc
                b = math.log(f2[k]) - 2.0 * math.log(f1[k]) + lc
                xn[k] = math.exp(lc - 2.0 * step * a + step * step * b)
        f3, res2, ll2, status = _step(*args, xn, rho, True)
        sweeps += 1
        if status == OK and res2 < tol:
            return xn, sweeps, OK, res2
        if status == OK and ll2 >= ll1 - 1e-13 and np.all(np.isfinite(f3)):
            cur = f3
        else:
            cur = f2
    return cur, sweeps, NOT_CONVERGED, resid


@njit(cache=True)
def _loglik(code, alpha, gamma, x, logw, H, delta, lpV, dA, event_index, w):
    n = H.shape[0]
    total = 0.0
    for i in range(n):
        if w[i] == 0.0:
            continue
        if not _in_domain(code, alpha, gamma, H[i]):
            return -np.inf
        if code == LOGNORMAL:
            G, logGd = _g_loggdot(code, alpha, gamma, H[i], x, logw)
        else:
            G, logGd = _closed_g_loggdot(code, alpha, gamma, H[i])
        term = -G
        if delta[i] == 1:
            a = dA[event_index[i]]
            if a <= 0.0 or not np.isfinite(logGd):
                return -np.inf
            term += logGd + lpV[i] + math.log(a)
        if not np.isfinite(term):
            return -np.inf
        total += w[i] * term
    return total / n


# ---------------------------------------------------------------------------
# public API


def cumulative_hazard(beta, A: StepHazard, data: Dataset, t=None) -> np.ndarray:
    """H_i(t) = int_0^t exp(beta'Z_i(s)) dA(s) for every subject.

    With ``t=None`` each subject is evaluated at its own V_i.
    """
    lay = layout(data)
    r, _ = lay.linear_predictors(beta)
    inc = _increments_on_grid(A, lay)
    if t is None:
        return _cum_H(inc, lay.lo, lay.hi, lay.sub, r, data.n)
    hi = np.minimum(lay.hi, np.searchsorted(lay.times, float(t), side="right"))
    lo = np.minimum(lay.lo, hi)
    return _cum_H(inc, lo, hi, lay.sub, r, data.n)


def _increments_on_grid(A: StepHazard, lay: Layout) -> np.ndarray:
    if len(A.times) == lay.K and np.array_equal(A.times, lay.times):
        return np.ascontiguousarray(A.increments, dtype=float)
    inc = np.zeros(lay.K)
    k = np.searchsorted(lay.times, A.times)
    on = (k < lay.K) & (lay.times[np.minimum(k, lay.K - 1)] == A.times)
    if not np.all(on):
        raise ValueError("hazard jumps outside the observed failure times")
    inc[k] = A.increments
    return inc


def jump_factor(family: FrailtyFamily, gamma: float, H, delta, closed_form: bool = True) -> np.ndarray:
    """Per-subject factor ``Gdot(H) - delta Gddot(H)/Gdot(H)`` entering J.

    ``closed_form=False`` always goes through the generic transform
    derivatives, which is how the gamma and inverse Gaussian shortcuts are
    checked.
    """
    H = np.asarray(H, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if closed_form:
        code, alpha, x, logw = family.kernel_args
        return np.array([_factor(code, alpha, float(gamma), h, d, x, logw)
                         for h, d in zip(H.ravel(), np.broadcast_to(delta, H.shape).ravel())]).reshape(H.shape)
    b = transform_bundle(family, gamma, H)
    return b.Gdot - delta * b.Gddot / b.Gdot


def weighted_J(theta: Theta, A: StepHazard, family: FrailtyFamily, data: Dataset, w=None, s=None):
    """J(s) at the failure times (``s=None``) or at arbitrary times ``s``."""
    lay = layout(data)
    w = standardize_weights(w, data.n)
    r, _ = lay.linear_predictors(theta.beta)
    H = _cum_H(_increments_on_grid(A, lay), lay.lo, lay.hi, lay.sub, r, data.n)
    code, alpha, x, logw = family.kernel_args
    if s is None:
        J, ok = _J(code, alpha, theta.gamma, x, logw, H, lay.lo, lay.hi, lay.sub, r, lay.delta, w, lay.K)
        if not ok:
            raise InvalidTheta("H leaves the transform domain")
        return J
    if not np.all(domain_check_many(family, theta.gamma, H)):
        raise InvalidTheta("H leaves the transform domain")
    phi = w * jump_factor(family, theta.gamma, H, lay.delta)
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    out = np.empty(len(s_arr))
    for j, sj in enumerate(s_arr):
        inside = (data.seg_start < sj) & (sj <= data.seg_stop)
        out[j] = np.sum(r[inside] * phi[data.seg_subject[inside]]) / data.n
    return out if np.ndim(s) else float(out[0])


def domain_check_many(family: FrailtyFamily, gamma: float, H) -> np.ndarray:
    code, alpha, _, _ = family.kernel_args
    return np.array([_in_domain(code, alpha, float(gamma), h) for h in np.ravel(H)], dtype=bool)


def hazard_bound(family: FrailtyFamily, gamma: float, beta, data: Dataset) -> float:
    """Upper bound on A(tau) for negative gamma (inf when gamma >= 0)."""
    if gamma >= 0:
        return np.inf
    t = _eps0_inverse(family.code, -gamma)
    if t < 0:
        return 0.0
    lp = data.seg_z @ np.asarray(beta, dtype=float)
    K0 = max(1.0, float(np.exp(np.abs(lp)).max()))
    return t / K0


class ProfileSolver:
    """Solves for the profiled hazard at many ``theta`` on fixed data and weights.

    Everything that does not depend on ``theta`` (the layout, standardized
    weights and event masses) is computed once.
    """

    def __init__(self, family: FrailtyFamily, data: Dataset, w=None, tol: float = 1e-10, max_iter: int = 5000,
                 accelerate: bool = True):
        self.family = family
        self.data = data
        self.lay = layout(data)
        self.w = standardize_weights(w, data.n)
        self.dN = self.lay.event_mass(self.w)
        self.tol = tol
        self.max_iter = max_iter
        self.accelerate = accelerate

    def _prepare(self, theta: Theta):
        if not np.all(np.isfinite(theta.beta)) or not np.isfinite(theta.gamma):
            raise InvalidTheta("theta must be finite")
        if len(theta.beta) != self.data.d:
            raise ValueError(f"beta has length {len(theta.beta)}, data has d={self.data.d}")
        r, lpV = self.lay.linear_predictors(theta.beta)
        if not np.all(np.isfinite(r)) or not np.all(r > 0):
            raise InvalidTheta("exp(beta'z) overflows")
        return r, lpV

    def solve(self, theta: Theta, start: StepHazard | None = None, with_loglik: bool = False):
        """The profiled hazard (and optionally the log-likelihood there)."""
        lay, dN = self.lay, self.dN
        r, lpV = self._prepare(theta)
        code, alpha, x, logw = self.family.kernel_args
        args = (code, alpha, theta.gamma, x, logw, lay.lo, lay.hi, lay.sub, r, lay.delta, self.w, dN, lpV,
                lay.event_index)
        dA0 = dN if start is None else _increments_on_grid(start, lay)
        if start is not None and np.any(dA0[dN > 0] <= 0):
            dA0 = dN

        def run(rho):
            return _fixed_point(*args, dA0, rho, self.tol, self.max_iter, self.accelerate)

        dA, it, status, resid = run(0.0)
        rho = 0.0
        if theta.gamma < 0:
            bound = hazard_bound(self.family, theta.gamma, theta.beta, self.data)
            if status == DOMAIN or (status == OK and dA.sum() > bound):
                dA, it, status, resid, rho = _solve_with_multiplier(run, dN, bound)
        if status == DOMAIN:
            raise InvalidTheta(f"gamma={theta.gamma:g}: hazard leaves the {self.family.kind} domain")
        if status == NONFINITE:
            raise InvalidTheta("non-finite hazard increment")
        if status == NOT_CONVERGED:
            raise SolverError(f"fixed point not reached in {self.max_iter} sweeps (residual {resid:.3g})",
                              last=StepHazard(lay.times, dA, it, resid, rho), residual=resid)
        A = StepHazard(lay.times, dA, it, resid, rho)
        if not with_loglik:
            return A
        H = _cum_H(dA, lay.lo, lay.hi, lay.sub, r, self.data.n)
        ll = float(_loglik(code, alpha, theta.gamma, x, logw, H, lay.delta, lpV, dA, lay.event_index, self.w))
        return A, ll


def solve_baseline(theta: Theta, family: FrailtyFamily, data: Dataset, w=None, tol: float = 1e-10,
                   max_iter: int = 5000, accelerate: bool = True, start: StepHazard | None = None) -> StepHazard:
    """Profile out the baseline hazard at ``theta``.

    The iteration starts from the weighted empirical event measure (or from
    ``start``) and stops once ``max_k |dN_k - dA_k (J_k + rho)| < tol``.
    Raises :class:`InvalidTheta` when the iterates leave the transform domain
    (the likelihood is then treated as zero) and :class:`SolverError` when
    ``max_iter`` sweeps are exhausted.
    """
    return ProfileSolver(family, data, w, tol, max_iter, accelerate).solve(theta, start)


def _solve_with_multiplier(run, dN, bound, gap_tol=1e-12):
    """Bisect on rho >= 0 until the constrained fixed point has A(tau) = bound."""
    if not bound > 0:
        return dN, 0, DOMAIN, np.inf, 0.0

    def total(rho):
        dA, it, status, resid = run(rho)
        return (dA.sum() if status == OK else np.inf), (dA, it, status, resid)

    lo, hi = 0.0, 1.0
    tot, res = total(hi)
    while tot > bound:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            return dN, 0, DOMAIN, np.inf, 0.0
        tot, res = total(hi)
    best = (res, hi)
    while hi - lo > gap_tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        tot, r = total(mid)
        if tot > bound:
            lo = mid
        else:
            hi, best = mid, (r, mid)
            if bound - tot < gap_tol * max(1.0, bound):
                break
    (dA, it, status, resid), rho = best
    return dA, it, status, resid, rho


def log_likelihood(theta: Theta, A: StepHazard, family: FrailtyFamily, data: Dataset, w=None) -> float:
    """Nonparametric log-likelihood with jumps dA; ``-inf`` for invalid psi."""
    lay = layout(data)
    w = standardize_weights(w, data.n)
    r, lpV = lay.linear_predictors(theta.beta)
    try:
        inc = _increments_on_grid(A, lay)
    except ValueError:
        return -np.inf
    if np.any(inc < 0):
        return -np.inf
    H = _cum_H(inc, lay.lo, lay.hi, lay.sub, r, data.n)
    code, alpha, x, logw = family.kernel_args
    return float(_loglik(code, alpha, theta.gamma, x, logw, H, lay.delta, lpV, inc, lay.event_index, w))
