"""Bootstrap inference and survival prediction for fitted frailty models."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baseline import StepHazard, Theta, cumulative_hazard, layout, standardize_weights
from .data import CovariatePath, Dataset
from .fitting import FitOptions, FitResult, fit, fit_cox, profile_loglik
from .transforms import FrailtyFamily, transform_bundle

WEIGHT_KINDS = ("dirichlet_exponential", "multinomial", "unit")
_WEIGHT_ALIASES = {"dirichlet": "dirichlet_exponential", "exponential": "dirichlet_exponential"}


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed, or too few are available."""


def make_weights(n: int, kind: str, rng) -> np.ndarray:
    """Standardized (mean one) bootstrap weights.

    ``dirichlet_exponential`` divides unit exponentials by their mean,
    ``multinomial`` returns resampling counts; ``unit`` returns all ones and
    exists for testing.  All-zero draws are redrawn.
    """
    kind = _WEIGHT_ALIASES.get(kind, kind)
    if n < 1:
        raise ValueError("n must be positive")
    if kind == "unit":
        return np.ones(n)
    while True:
        if kind == "dirichlet_exponential":
            e = rng.exponential(size=n)
        elif kind == "multinomial":
            e = rng.multinomial(n, np.full(n, 1.0 / n)).astype(float)
        else:
            raise ValueError(f"unknown weight kind {kind!r}")
        if e.sum() > 0:
            return e / e.mean()


@dataclass
class BootstrapRun:
    replicates: list
    weight_kind: str
    seed: int
    base_fit: FitResult
    time_grid: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return len(self.replicates) + len(self.failures)

    def theta_draws(self) -> np.ndarray:
        return np.array([r.theta_hat.vector() for r in self.replicates]).reshape(len(self.replicates), -1)

    def beta_draws(self) -> np.ndarray:
        return self.theta_draws()[:, 1:]

    def hazard_draws(self) -> np.ndarray:
        """Replicate cumulative hazards on ``time_grid``."""
        return np.array([r.A_hat(self.time_grid) for r in self.replicates])

    def to_dict(self) -> dict:
        return {
            "weight_kind": self.weight_kind,
            "seed": self.seed,
            "B": self.B,
            "n_failed": len(self.failures),
            "failures": self.failures,
            "base_fit": self.base_fit.to_dict(),
            "time_grid": self.time_grid.tolist(),
            "theta_draws": self.theta_draws().tolist(),
            "hazard_draws": self.hazard_draws().tolist(),
            "replicates": [r.to_dict() for r in self.replicates],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapRun":
        return cls([FitResult.from_dict(r) for r in d["replicates"]], d["weight_kind"], d["seed"],
                   FitResult.from_dict(d["base_fit"]), np.array(d["time_grid"], dtype=float), d.get("failures", []))

    @classmethod
    def from_json(cls, path) -> "BootstrapRun":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _replicate(args):
    data, family, options, kind, child, base_theta, base_A = args
    rng = np.random.default_rng(child)
    w = make_weights(data.n, kind, rng)
    opt = options.replace(seed=int(rng.integers(2**63)), start=tuple(base_theta))
    try:
        return fit(data, family, opt, w, start_hazard=base_A), None
    except Exception as exc:  # recorded, not raised
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap(data: Dataset, family: FrailtyFamily | None, options: FitOptions | None, B: int,
              kind: str = "dirichlet_exponential", seed: int = 0, base_fit: FitResult | None = None,
              time_grid=None, jobs: int = 1, max_failure_rate: float = 0.2) -> BootstrapRun:
    """Weighted bootstrap of the full fit.

    Replicates reuse ``options`` with half the Metropolis budget, start from
    the base estimate, and get independent seeds spawned from ``seed``.
    """
    family = FrailtyFamily.gamma() if family is None else family
    options = FitOptions() if options is None else options
    kind = _WEIGHT_ALIASES.get(kind, kind)
    if kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {kind!r}")
    if B < 1:
        raise ValueError("B must be positive")
    if base_fit is None:
        base_fit = fit(data, family, options)
    grid = layout(data).times if time_grid is None else np.asarray(time_grid, dtype=float)
    rep_opt = options.replace(mh_steps=max(1, options.mh_steps // 2), polish=True)
    children = np.random.SeedSequence(seed).spawn(B)
    tasks = [(data, family, rep_opt, kind, c, base_fit.theta_hat.vector(), base_fit.A_hat) for c in children]
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, B // (4 * jobs))))
    else:
        results = [_replicate(t) for t in tasks]
    reps = [r for r, _ in results if r is not None]
    failures = [{"replicate": b, "reason": e} for b, (_, e) in enumerate(results) if e is not None]
    if len(failures) > max_failure_rate * B:
        raise BootstrapError(f"{len(failures)} of {B} bootstrap replicates failed")
    return BootstrapRun(reps, kind, seed, base_fit, grid, failures)


# ---------------------------------------------------------------------------
# Wald table


@dataclass(frozen=True)
class WaldRow:
    covariate: str
    parameter: str
    model: str
    estimate: float
    se: float
    z: float


def wald_z(estimate, se):
    """Z = estimate / SE."""
    return np.asarray(estimate, dtype=float) / np.asarray(se, dtype=float)


def model_label(fit: FitResult) -> str:
    if fit.gamma_frozen and fit.gamma == 0.0:
        return "PH"
    return {"gamma": "GF", "inverse_gaussian": "IGF", "lognormal": "LNF"}.get(
        fit.family.kind, f"IGG({fit.family.alpha:g})")


def wald_table(run: BootstrapRun, min_replicates: int = 30, degenerate_tol: float = 1e-6) -> list[WaldRow]:
    """Estimates with bootstrap standard errors (replicate SD) and Z = est/SE."""
    if len(run.replicates) < min_replicates:
        raise BootstrapError(f"too few replicates ({len(run.replicates)} < {min_replicates})")
    draws = run.theta_draws()
    base = run.base_fit
    model = model_label(base)
    est = base.theta_hat.vector()
    se = draws.std(axis=0, ddof=1)
    names = ["frailty"] + list(base.covariate_names)
    params = ["gamma"] + ["beta"] * len(base.beta)
    rows = []
    for j in range(len(est)):
        if j == 0 and model == "PH":
            continue
        # spread below the optimizer's resolution carries no sampling information
        if not se[j] > degenerate_tol * max(1.0, abs(est[j])):
            raise BootstrapError(f"degenerate bootstrap distribution for {names[j]} (zero spread)")
        rows.append(WaldRow(names[j], params[j], model, float(est[j]), float(se[j]), float(est[j] / se[j])))
    return rows


def write_wald_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "parameter", "model", "estimate", "se", "z"])
        for r in rows:
            w.writerow([r.covariate, r.parameter, r.model, repr(r.estimate), repr(r.se), repr(r.z)])


# ---------------------------------------------------------------------------
# score test for gamma = 0


@dataclass(frozen=True)
class ScoreTestResult:
    statistic: float
    p_value: float
    B_used: int
    fd_check: float = float("nan")


def score_statistic(data: Dataset, cox: FitResult, w=None) -> float:
    """(1/n) sum_i w_i [H_i^2 / 2 - delta_i H_i] at a Cox fit."""
    w = standardize_weights(w, data.n)
    H = cumulative_hazard(cox.beta, cox.A_hat, data)
    return float(np.mean(w * (0.5 * H * H - data.status * H)))


def score_fd(data: Dataset, cox: FitResult, family: FrailtyFamily | None = None, h: float = 1e-4, w=None) -> float:
    """Central difference of the profile likelihood in gamma at zero, beta fixed at the Cox estimate."""
    family = FrailtyFamily.gamma() if family is None else family
    up = profile_loglik(Theta(h, cox.beta), family, data, w, tol=1e-13)
    dn = profile_loglik(Theta(-h, cox.beta), family, data, w, tol=1e-13)
    return (up - dn) / (2 * h)


def score_test_gamma(data: Dataset, options: FitOptions | None = None, B: int = 200, seed: int = 0,
                     weight_kind: str = "dirichlet_exponential", check: bool = False) -> ScoreTestResult:
    """One-sided bootstrap score test of gamma = 0 against gamma > 0.

    The null reference is the bootstrap distribution of the statistic
    recentred at its observed value; the p-value is the fraction of
    ``S* - S`` at least as large as ``S``.
    """
    cox = fit_cox(data, options)
    stat = score_statistic(data, cox)
    fd = score_fd(data, cox) if check else float("nan")
    if check and not abs(fd - stat) <= 1e-3 * max(abs(stat), 1e-12):
        raise ArithmeticError(f"score {stat} disagrees with the profile finite difference {fd}")
    draws = []
    for child in np.random.SeedSequence(seed).spawn(B):
        rng = np.random.default_rng(child)
        w = make_weights(data.n, weight_kind, rng)
        try:
            rep = fit_cox(data, options, w)
        except Exception:
            continue
        draws.append(score_statistic(data, rep, w))
    if not draws:
        raise BootstrapError("every score-test replicate failed")
    draws = np.array(draws)
    p = float(np.mean(draws - stat >= stat))
    return ScoreTestResult(stat, p, len(draws), fd)


# ---------------------------------------------------------------------------
# survival curves


@dataclass(frozen=True)
class Curve:
    time: np.ndarray
    survival: np.ndarray
    variance: np.ndarray | None = None

    def __call__(self, t):
        k = np.searchsorted(self.time, np.asarray(t, dtype=float), side="right")
        return np.r_[1.0, self.survival][k]


@dataclass(frozen=True)
class BandResult:
    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    critical_value: float

    def to_csv(self, path) -> None:
        write_curve_csv(path, self.grid, self.center, self.lower, self.upper)


def write_curve_csv(path, time, center, lower=None, upper=None) -> None:
    lower = center if lower is None else lower
    upper = center if upper is None else upper
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "center", "lower", "upper"])
        for row in zip(time, center, lower, upper):
            w.writerow([repr(float(v)) for v in row])


def _hazard_at(beta, A: StepHazard, z, grid) -> np.ndarray:
    """int_0^t exp(beta'z(s)) dA(s) on ``grid`` for a fixed vector or a covariate path."""
    if isinstance(z, CovariatePath):
        r = np.exp(z(A.times) @ np.asarray(beta))
    else:
        r = np.full(len(A.times), math.exp(float(np.dot(np.asarray(z, dtype=float), beta))))
    cum = np.r_[0.0, np.cumsum(r * A.increments)]
    return cum[np.searchsorted(A.times, np.asarray(grid, dtype=float), side="right")]


def predict_survival(fit: FitResult, family: FrailtyFamily | None, z, grid) -> np.ndarray:
    """S(t | z) = Laplace_gamma(H(t; z)) on ``grid``."""
    family = fit.family if family is None else family
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0):
        raise ValueError("grid must be nonnegative")
    H = _hazard_at(fit.beta, fit.A_hat, z, grid)
    return np.exp(-transform_bundle(family, fit.gamma, H).G)


def simultaneous_band(run: BootstrapRun, z, grid, level: float = 0.95, min_replicates: int = 100,
                      floor: float = 1e-4) -> BandResult:
    """Studentized sup-deviation band for S(t | z)."""
    if len(run.replicates) < min_replicates:
        raise BootstrapError(f"too few replicates ({len(run.replicates)} < {min_replicates})")
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    grid = np.asarray(grid, dtype=float)
    family = run.base_fit.family
    center = predict_survival(run.base_fit, family, z, grid)
    draws = np.array([predict_survival(r, family, z, grid) for r in run.replicates])
    sigma = np.maximum(draws.std(axis=0, ddof=1), floor)
    sup = np.max(np.abs(draws - center) / sigma, axis=1)
    c = float(np.quantile(sup, level)) if level > 0 else 0.0
    lower = np.clip(center - c * sigma, 0.0, 1.0)
    upper = np.clip(center + c * sigma, 0.0, 1.0)
    return BandResult(grid, center, np.minimum(lower, center), np.maximum(upper, center), level, c)


def _subset_mask(data: Dataset, subset) -> np.ndarray:
    if subset is None:
        mask = np.ones(data.n, dtype=bool)
    elif callable(subset):
        mask = np.asarray(subset(data), dtype=bool)
    else:
        mask = np.asarray(subset, dtype=bool)
    if mask.shape != (data.n,):
        raise ValueError("subset must select among the n subjects")
    if not mask.any():
        raise ValueError("empty subset")
    return mask


def marginal_survival(fit: FitResult, family: FrailtyFamily | None, data: Dataset, subset=None,
                      grid=None) -> Curve:
    """Model-based marginal survival of a group, averaging over its covariates.

    dHbar(s) = [sum_i Y_i(s) exp(beta'Z_i(s)) Gdot(H_i(s))] / [sum_i Y_i(s)] dA(s),
    summing over the group, and the curve is the product limit of Hbar.
    """
    family = fit.family if family is None else family
    mask = _subset_mask(data, subset)
    A = fit.A_hat
    keep = A.increments > 0
    times, inc = A.times[keep], A.increments[keep]
    sub_rows = np.flatnonzero(mask[data.seg_subject])
    seg_sub = data.seg_subject[sub_rows]
    start, stop = data.seg_start[sub_rows], data.seg_stop[sub_rows]
    r = np.exp(data.seg_z[sub_rows] @ fit.beta)
    # H_i(s) at each jump time, including the jump at s
    K = len(times)
    lo = np.searchsorted(times, start, side="right")
    hi = np.searchsorted(times, stop, side="right")
    dH = np.zeros((K + 1, data.n))
    for s in range(len(sub_rows)):
        dH[lo[s]:hi[s], seg_sub[s]] += r[s] * inc[lo[s]:hi[s]]
    Hpath = np.cumsum(dH[:K], axis=0)
    num = np.zeros(K)
    for s in range(len(sub_rows)):
        if hi[s] > lo[s]:
            Gd = transform_bundle(family, fit.gamma, Hpath[lo[s]:hi[s], seg_sub[s]]).Gdot
            num[lo[s]:hi[s]] += r[s] * Gd
    at_risk = np.array([(data.time[mask] >= t).sum() for t in times], dtype=float)
    ratio = np.divide(num, at_risk, out=np.zeros(K), where=at_risk > 0)
    dHbar = ratio * inc
    surv = np.cumprod(np.clip(1.0 - dHbar, 0.0, 1.0))
    curve = Curve(times, surv)
    if grid is None:
        return curve
    grid = np.asarray(grid, dtype=float)
    return Curve(grid, curve(grid))


def kaplan_meier(data: Dataset, subset=None) -> Curve:
    """Product-limit estimator at the subset's event times with Greenwood variance."""
    mask = _subset_mask(data, subset)
    V, d = data.time[mask], data.status[mask]
    times = np.unique(V[d == 1])
    if len(times) == 0:
        return Curve(np.zeros(0), np.zeros(0), np.zeros(0))
    deaths = np.array([np.sum((V == t) & (d == 1)) for t in times], dtype=float)
    risk = np.array([np.sum(V >= t) for t in times], dtype=float)
    surv = np.cumprod(1.0 - deaths / risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(risk > deaths, deaths / (risk * (risk - deaths)), np.inf)
        green = np.where(surv == 0, 0.0, surv ** 2 * np.cumsum(terms))
    return Curve(times, surv, green)
