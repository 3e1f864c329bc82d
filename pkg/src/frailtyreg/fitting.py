"""Maximisation of the profile likelihood over ``theta = (gamma, beta)``.

The baseline hazard is profiled out by :func:`solve_baseline`; the remaining
low-dimensional search uses an annealed random-walk Metropolis chain that
keeps track of the best point, followed by a Nelder-Mead polish.

With ``gamma`` frozen at zero the profile is the Cox partial likelihood
(Breslow handling of ties), which is concave; that case is solved by Newton's
method instead of the random search.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .baseline import (InvalidTheta, ProfileSolver, SolverError, StepHazard, Theta, layout, log_likelihood,
                       solve_baseline, standardize_weights)
from .data import Dataset
from .transforms import FrailtyFamily

CONSTRAINT_MODES = ("free", "nonneg_gamma_with_cox_fallback")


class UnfittableError(RuntimeError):
    """Every evaluation of the profile likelihood was invalid."""


@dataclass(frozen=True)
class FitOptions:
    gamma_bounds: tuple[float, float] = (0.0, 10.0)
    beta_box: tuple[float, float] = (-20.0, 20.0)
    mh_steps: int = 2000
    mh_initial_scale: tuple[float, ...] | None = None
    polish: bool = True
    polish_xatol: float = 1e-6
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 5000
    constraint_mode: str = "free"
    allow_negative_gamma: bool = False
    # gamma-hat at or below this is treated as pinned to zero by the fallback
    zero_gamma_tol: float = 1e-3
    start: tuple[float, ...] | None = None

    def __post_init__(self):
        lo, hi = map(float, self.gamma_bounds)
        blo, bhi = map(float, self.beta_box)
        if not all(map(math.isfinite, (lo, hi, blo, bhi))) or lo > hi or blo >= bhi:
            raise ValueError("bounds must be finite and nonempty")
        if lo < 0 and not self.allow_negative_gamma:
            raise ValueError("negative gamma bounds need allow_negative_gamma")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        if self.mh_steps < 1:
            raise ValueError("mh_steps must be at least 1")
        if self.mh_initial_scale is not None and any(s <= 0 for s in self.mh_initial_scale):
            raise ValueError("mh_initial_scale must be positive")
        object.__setattr__(self, "gamma_bounds", (lo, hi))
        object.__setattr__(self, "beta_box", (blo, bhi))
        if self.mh_initial_scale is not None:
            object.__setattr__(self, "mh_initial_scale", tuple(map(float, self.mh_initial_scale)))
        if self.start is not None:
            object.__setattr__(self, "start", tuple(map(float, self.start)))

    @property
    def gamma_frozen(self) -> bool:
        return self.gamma_bounds[0] == self.gamma_bounds[1]

    def replace(self, **kw) -> "FitOptions":
        d = asdict(self)
        d.update(kw)
        return FitOptions(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitOptions":
        return cls(**d)


@dataclass
class FitResult:
    theta_hat: Theta
    A_hat: StepHazard
    loglik: float
    n_evaluations: int
    best_trace: list = field(default_factory=list)
    converged: bool = True
    fixed_point_residual: float = 0.0
    family: FrailtyFamily = field(default_factory=FrailtyFamily.gamma)
    covariate_names: list = field(default_factory=list)
    cox_fallback: bool = False
    gamma_frozen: bool = False

    @property
    def gamma(self) -> float:
        return self.theta_hat.gamma

    @property
    def beta(self) -> np.ndarray:
        return self.theta_hat.beta

    def to_dict(self) -> dict:
        return {
            "family": self.family.to_dict(),
            "theta": {"gamma": self.gamma, "beta": dict(zip(self.covariate_names, map(float, self.beta)))},
            "loglik": self.loglik,
            "diagnostics": {
                "n_evaluations": self.n_evaluations,
                "converged": self.converged,
                "fixed_point_residual": self.fixed_point_residual,
                "fixed_point_sweeps": self.A_hat.iterations,
                "cox_fallback": self.cox_fallback,
                "gamma_frozen": self.gamma_frozen,
                "best_trace": [[list(map(float, v)), float(f)] for v, f in self.best_trace],
            },
            "baseline": {"time": self.A_hat.times.tolist(), "increment": self.A_hat.increments.tolist()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        names = list(d["theta"]["beta"])
        theta = Theta(d["theta"]["gamma"], [d["theta"]["beta"][k] for k in names])
        diag = d["diagnostics"]
        A = StepHazard(np.array(d["baseline"]["time"], dtype=float), np.array(d["baseline"]["increment"], dtype=float),
                       diag.get("fixed_point_sweeps", 0), diag.get("fixed_point_residual", 0.0))
        return cls(theta, A, d["loglik"], diag["n_evaluations"],
                   [(np.array(v), f) for v, f in diag.get("best_trace", [])], diag["converged"],
                   diag["fixed_point_residual"], FrailtyFamily.from_dict(d["family"]), names,
                   diag.get("cox_fallback", False), diag.get("gamma_frozen", False))

    @classmethod
    def from_json(cls, path) -> "FitResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def profile_loglik(theta: Theta, family: FrailtyFamily, data: Dataset, w=None, tol: float = 1e-10,
                   max_iter: int = 5000) -> float:
    """pL(theta): the log-likelihood with the baseline hazard maximised out.

    Invalid parameters and solver failures give ``-inf``.
    """
    try:
        A = solve_baseline(theta, family, data, w, tol=tol, max_iter=max_iter)
    except (InvalidTheta, SolverError):
        return -np.inf
    return log_likelihood(theta, A, family, data, w)


class _Objective:
    """pL over the search vector, warm-starting each solve from the last good hazard."""

    def __init__(self, family, data, w, options: FitOptions, start_hazard=None):
        self.family = family
        self.data = data
        self.w = w
        self.opt = options
        self.frozen = options.gamma_frozen
        self.n_eval = 0
        self.n_finite = 0
        self.warm = start_hazard
        self.solver = ProfileSolver(family, data, w, options.tol, options.max_iter)
        self.best = (None, -np.inf)
        self.trace = []

    def theta(self, v) -> Theta:
        v = np.asarray(v, dtype=float)
        if self.frozen:
            return Theta(self.opt.gamma_bounds[0], v)
        return Theta(v[0], v[1:])

    def in_box(self, v) -> bool:
        th = self.theta(v)
        lo, hi = self.opt.gamma_bounds
        blo, bhi = self.opt.beta_box
        return lo <= th.gamma <= hi and bool(np.all((th.beta >= blo) & (th.beta <= bhi)))

    def __call__(self, v) -> float:
        self.n_eval += 1
        if not self.in_box(v):
            return -np.inf
        th = self.theta(v)
        try:
            A, f = self.solver.solve(th, self.warm, with_loglik=True)
        except (InvalidTheta, SolverError):
            return -np.inf
        if np.isfinite(f):
            self.n_finite += 1
            self.warm = A
            if f > self.best[1]:
                self.best = (np.array(v, dtype=float), f)
                self.trace.append((np.r_[th.gamma, th.beta], f))
        return f


def _clip_start(v, obj: _Objective):
    opt = obj.opt
    v = np.array(v, dtype=float)
    if obj.frozen:
        return np.clip(v, *opt.beta_box)
    v[0] = np.clip(v[0], *opt.gamma_bounds)
    v[1:] = np.clip(v[1:], *opt.beta_box)
    return v


def _metropolis(obj: _Objective, x0, steps, scale, n, rng):
    """Annealed random-walk Metropolis; returns the final proposal scale."""
    x = np.array(x0, dtype=float)
    f = obj(x)
    scale = np.array(scale, dtype=float)
    p = len(x)
    batch = 25
    accepted = 0
    for k in range(steps):
        T = 0.1 ** (k / (steps - 1)) if steps > 1 else 1.0
        prop = x + scale * rng.standard_normal(p)
        fp = obj(prop)
        u = rng.uniform()
        if np.isfinite(fp) and (not np.isfinite(f) or math.log(u) < n * (fp - f) / T):
            x, f = prop, fp
            accepted += 1
        if (k + 1) % batch == 0:
            # push the batch acceptance rate toward 30%
            scale *= math.exp((accepted / batch - 0.3) * 2.0)
            accepted = 0
    return scale


def _nelder_mead(obj: _Objective, x0, step, xatol):
    p = len(x0)
    simplex = np.tile(x0, (p + 1, 1))
    for j in range(p):
        simplex[j + 1, j] += step[j]

    def neg(v):
        f = obj(v)
        return -f if np.isfinite(f) else np.inf

    res = minimize(neg, x0, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": xatol, "fatol": np.inf,
                            "maxfev": 400 * p, "maxiter": 400 * p})
    return res


def _cox_newton(data: Dataset, w, beta0, box, max_iter=100, gtol=1e-11):
    """Newton's method on the Breslow profile log-likelihood at gamma = 0.

    Returns (beta, converged).  Works with time-varying covariates through the
    segment layout: segment s is at risk at failure index k iff lo_s <= k < hi_s.
    """
    lay = layout(data)
    n, K = data.n, lay.K
    Zs = data.seg_z
    ws = w[lay.sub]
    ev = lay.delta == 1
    ek = lay.event_index[ev]
    wev = w[ev]
    zev = Zs[lay.last_segment[ev]]
    dN = np.bincount(ek, weights=wev, minlength=K)

    def pieces(beta):
        lp = Zs @ beta
        r = ws * np.exp(lp)
        if not np.all(np.isfinite(r)):
            return None

        def risk_sum(vals):
            diff = np.zeros((K + 1,) + vals.shape[1:])
            np.add.at(diff, lay.lo, vals)
            np.subtract.at(diff, lay.hi, vals)
            return np.cumsum(diff, axis=0)[:K]

        S0 = risk_sum(r)
        S1 = risk_sum(r[:, None] * Zs)
        S2 = risk_sum(r[:, None, None] * Zs[:, :, None] * Zs[:, None, :])
        has = dN > 0
        if np.any(S0[has] <= 0):
            return None
        ll = (np.sum(wev * (zev @ beta)) - np.sum(dN[has] * np.log(S0[has]))) / n
        m1 = S1[has] / S0[has, None]
        grad = (wev @ zev - dN[has] @ m1) / n
        cov = S2[has] / S0[has, None, None] - m1[:, :, None] * m1[:, None, :]
        info = np.einsum("k,kij->ij", dN[has], cov) / n
        return ll, grad, info

    beta = np.clip(np.asarray(beta0, dtype=float), *box)
    cur = pieces(beta)
    if cur is None:
        return beta, False
    for _ in range(max_iter):
        ll, grad, info = cur
        if np.max(np.abs(grad)) < gtol:
            return beta, True
        step = np.linalg.lstsq(info, grad, rcond=1e-12)[0]
        if np.max(np.abs(step)) == 0:
            return beta, np.max(np.abs(grad)) < 1e-8
        t = 1.0
        while t > 1e-10:
            cand = np.clip(beta + t * step, *box)
            nxt = pieces(cand)
            if nxt is not None and nxt[0] >= ll - 1e-15:
                break
            t *= 0.5
        else:
            return beta, False
        if np.array_equal(cand, beta):
            return beta, np.max(np.abs(grad)) < 1e-8
        beta, cur = cand, nxt
    return beta, np.max(np.abs(cur[1])) < 1e-8


def _finish(obj: _Objective, theta: Theta, converged: bool, cox_fallback=False) -> FitResult:
    opt = obj.opt
    try:
        A = solve_baseline(theta, obj.family, obj.data, obj.w, tol=opt.tol, max_iter=opt.max_iter)
    except (InvalidTheta, SolverError) as exc:
        raise UnfittableError(f"profile likelihood invalid at the optimum: {exc}") from exc
    ll = log_likelihood(theta, A, obj.family, obj.data, obj.w)
    return FitResult(theta, A, float(ll), obj.n_eval, list(obj.trace), converged, float(A.residual),
                     obj.family, list(obj.data.covariate_names), cox_fallback, obj.frozen)


def _fit_frozen_zero(data, family, opt: FitOptions, w) -> FitResult:
    obj = _Objective(family, data, w, opt)
    beta0 = np.zeros(data.d) if opt.start is None else np.asarray(opt.start[-data.d:], dtype=float)
    beta, ok = _cox_newton(data, w, beta0, opt.beta_box)
    f = obj(beta)
    if not ok and opt.polish:
        res = _nelder_mead(obj, obj.best[0] if obj.best[0] is not None else beta,
                           np.full(data.d, 0.05), opt.polish_xatol)
        if obj.best[0] is not None:
            beta, f = obj.best
        ok = bool(res.success)
    if not np.isfinite(f) and obj.n_finite == 0:
        raise UnfittableError("every profile likelihood evaluation was invalid")
    return _finish(obj, Theta(0.0, beta), ok)


def fit(data: Dataset, family: FrailtyFamily | None = None, options: FitOptions | None = None, w=None,
        start_hazard: StepHazard | None = None) -> FitResult:
    """Maximise the profile likelihood.

    ``start_hazard`` only warm-starts the baseline solver; it does not change
    which point is found beyond solver tolerance.
    """
    family = FrailtyFamily.gamma() if family is None else family
    opt = FitOptions() if options is None else options
    w = standardize_weights(w, data.n)
    if opt.constraint_mode == "nonneg_gamma_with_cox_fallback" and opt.gamma_bounds[0] < 0:
        opt = opt.replace(gamma_bounds=(0.0, max(0.0, opt.gamma_bounds[1])))
    if opt.gamma_frozen and opt.gamma_bounds[0] == 0.0:
        return _fit_frozen_zero(data, family, opt, w)

    obj = _Objective(family, data, w, opt, start_hazard)
    rng = np.random.default_rng(opt.seed)
    p = data.d if obj.frozen else data.d + 1
    if opt.start is not None:
        x0 = np.asarray(opt.start, dtype=float)[-p:]
    else:
        beta_cox, _ = _cox_newton(data, w, np.zeros(data.d), opt.beta_box)
        x0 = beta_cox if obj.frozen else np.r_[0.5, beta_cox]
    x0 = _clip_start(x0, obj)
    if opt.mh_initial_scale is not None:
        scale = np.resize(np.asarray(opt.mh_initial_scale, dtype=float), p)
    else:
        scale = np.full(p, 0.05)
        if not obj.frozen:
            scale[0] = 0.1

    if not np.isfinite(obj(x0)) and not obj.frozen:
        # a start that leaves the domain: retry from the Cox end of the box
        x0 = _clip_start(np.r_[0.0, x0[1:]], obj)
        obj(x0)
    scale = _metropolis(obj, x0, opt.mh_steps, scale, data.n, rng)
    if obj.n_finite == 0:
        raise UnfittableError("every profile likelihood evaluation was invalid")

    converged = True
    if opt.polish:
        step = np.maximum(np.minimum(scale, 0.5), 1e-3)
        res = _nelder_mead(obj, obj.best[0], step, opt.polish_xatol)
        converged = bool(res.success)
    v = obj.best[0]
    theta = obj.theta(v)

    if opt.constraint_mode == "nonneg_gamma_with_cox_fallback" and theta.gamma <= opt.zero_gamma_tol:
        cox = _fit_frozen_zero(data, family, opt.replace(gamma_bounds=(0.0, 0.0), start=None), w)
        cox.n_evaluations += obj.n_eval
        cox.best_trace = list(obj.trace) + cox.best_trace
        cox.cox_fallback = True
        return cox

    lo, hi = opt.gamma_bounds
    if not obj.frozen and hi > lo and theta.gamma >= hi - 1e-3 * (hi - lo):
        converged = False
        warnings.warn(f"gamma-hat {theta.gamma:.4g} is pinned at the upper bound {hi:g}", RuntimeWarning,
                      stacklevel=2)
    return _finish(obj, theta, converged)


def fit_cox(data: Dataset, options: FitOptions | None = None, w=None) -> FitResult:
    """Proportional hazards fit: gamma frozen at zero, baseline = Breslow."""
    opt = FitOptions() if options is None else options
    opt = opt.replace(gamma_bounds=(0.0, 0.0), constraint_mode="free")
    return fit(data, FrailtyFamily.gamma(), opt, w)
