"""Data generation from frailty models and the misspecification studies.

Survival times follow ``S(t | Z, W) = exp{-W A0(t) exp(beta0'Z)}`` with a
mean-one frailty ``W`` drawn from the true family; censoring is uniform with
an atom at the end of follow-up.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import Dataset
from .fitting import FitOptions, fit, fit_cox
from .transforms import FrailtyFamily, laplace


@dataclass(frozen=True)
class Baseline:
    """A0 as ``rate * t`` (linear) or ``(t / scale) ** shape`` (weibull)."""

    kind: str = "linear"
    rate: float = 1.0
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "weibull"):
            raise ValueError("baseline kind must be linear or weibull")
        if min(self.rate, self.shape, self.scale) <= 0:
            raise ValueError("baseline parameters must be positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return self.rate * t
        return (t / self.scale) ** self.shape

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return x / self.rate
        return self.scale * x ** (1.0 / self.shape)


@dataclass(frozen=True)
class CovariateLaw:
    """Multivariate normal, optionally with a Bernoulli first component.

    ``kind="bernoulli_mix"`` draws Z1 ~ Bernoulli(p) independently of the
    remaining components, which are normal with the trailing block of
    ``mean``/``cov``.
    """

    kind: str = "normal"
    mean: tuple = (0.0, 0.0)
    cov: tuple | None = None
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in ("normal", "bernoulli_mix"):
            raise ValueError("covariate law must be normal or bernoulli_mix")
        d = len(self.mean)
        cov = np.eye(d) if self.cov is None else np.asarray(self.cov, dtype=float)
        if cov.shape != (d, d) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric d x d matrix")
        block = cov if self.kind == "normal" else cov[1:, 1:]
        if block.size and np.linalg.eigvalsh(block).min() <= 0:
            raise ValueError("covariance must be positive definite")
        if not 0 < self.p < 1:
            raise ValueError("bernoulli probability must lie in (0, 1)")
        object.__setattr__(self, "mean", tuple(map(float, self.mean)))
        object.__setattr__(self, "cov", tuple(map(tuple, cov.tolist())))

    @property
    def d(self) -> int:
        return len(self.mean)

    def draw(self, n: int, rng) -> np.ndarray:
        mean = np.array(self.mean)
        cov = np.array(self.cov)
        if self.kind == "normal":
            return rng.multivariate_normal(mean, cov, size=n, method="cholesky")
        z1 = rng.binomial(1, self.p, size=n).astype(float)
        if self.d == 1:
            return z1[:, None]
        rest = rng.multivariate_normal(mean[1:], cov[1:, 1:], size=n, method="cholesky")
        return np.column_stack([z1, rest])


@dataclass(frozen=True)
class TruthSpec:
    family: FrailtyFamily = field(default_factory=FrailtyFamily.gamma)
    gamma0: float = 1.0
    beta0: tuple = (1.0, -0.5)
    baseline: Baseline = field(default_factory=Baseline)
    covariates: CovariateLaw = field(default_factory=CovariateLaw)
    censor_max: float = 5.0
    tau: float | None = None
    atom_weight: float = 0.1

    def __post_init__(self):
        if not self.gamma0 >= 0:
            raise ValueError("gamma0 must be nonnegative")
        object.__setattr__(self, "beta0", tuple(map(float, self.beta0)))
        if len(self.beta0) != self.covariates.d:
            raise ValueError("beta0 and the covariate law have different dimensions")
        if self.censor_max <= 0:
            raise ValueError("censor_max must be positive")
        if self.tau is None:
            object.__setattr__(self, "tau", float(self.censor_max))
        if not 0 <= self.atom_weight < 1:
            raise ValueError("atom_weight must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TruthSpec":
        d = dict(d)
        if "family" in d:
            d["family"] = FrailtyFamily.from_dict(d["family"]) if isinstance(d["family"], dict) \
                else FrailtyFamily(d["family"])
        if "baseline" in d:
            d["baseline"] = Baseline(**d["baseline"])
        if "covariates" in d:
            d["covariates"] = CovariateLaw(**d["covariates"])
        return cls(**d)

    def replace(self, **kw) -> "TruthSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return TruthSpec(**d)


# ---------------------------------------------------------------------------
# frailty samplers


def _positive_stable(alpha, size, rng):
    """Kanter's representation: Laplace transform exp(-s**alpha)."""
    u = rng.uniform(0.0, math.pi, size)
    e = rng.exponential(size=size)
    a = (np.sin(alpha * u) / np.sin(u)) ** (1.0 / (1.0 - alpha)) * np.sin((1.0 - alpha) * u) / np.sin(alpha * u)
    return (a / e) ** ((1.0 - alpha) / alpha)


def _tempered_stable(alpha, gamma, n, rng):
    """Mean-one IGG(alpha) frailty by exponential tilting of a stable law.

    Laplace transform exp{-c[(theta + s)^alpha - theta^alpha]} with
    theta = (1 - alpha)/gamma.  The variable is split into m iid pieces so
    that each rejection step accepts with probability at least exp(-1).
    """
    theta = (1.0 - alpha) / gamma
    c = (1.0 - alpha) / (alpha * gamma) * theta ** (-alpha)
    m = max(1, math.ceil(c * theta ** alpha))
    cm = c / m
    pieces = np.empty(n * m)
    pending = np.arange(n * m)
    while len(pending):
        s = cm ** (1.0 / alpha) * _positive_stable(alpha, len(pending), rng)
        ok = rng.uniform(size=len(pending)) <= np.exp(-theta * s)
        pieces[pending[ok]] = s[ok]
        pending = pending[~ok]
    return pieces.reshape(n, m).sum(axis=1)


def sample_frailty(family: FrailtyFamily, gamma: float, n: int, rng) -> np.ndarray:
    """Mean-one frailties whose Laplace transform is the family's at ``gamma``."""
    if gamma < 0:
        raise ValueError("frailties exist only for gamma >= 0")
    if gamma == 0:
        return np.ones(n)
    if family.kind == "gamma":
        return rng.gamma(1.0 / gamma, gamma, size=n)
    if family.kind == "inverse_gaussian":
        return rng.wald(1.0, 1.0 / gamma, size=n)
    if family.kind == "lognormal":
        return np.exp(math.sqrt(gamma) * rng.standard_normal(n) - 0.5 * gamma)
    if family.alpha == 0.0:
        return rng.gamma(1.0 / gamma, gamma, size=n)
    return _tempered_stable(family.alpha, gamma, n, rng)


# ---------------------------------------------------------------------------
# generation


def survival_times(truth: TruthSpec, Z, W, U) -> np.ndarray:
    """Invert S(t | Z, W) at uniform draws ``U``."""
    lp = np.asarray(Z, dtype=float) @ np.asarray(truth.beta0)
    return truth.baseline.inverse(-np.log(U) / (W * np.exp(lp)))


def generate(truth: TruthSpec, n: int, seed=None) -> Dataset:
    rng = np.random.default_rng(seed)
    Z = truth.covariates.draw(n, rng)
    W = sample_frailty(truth.family, truth.gamma0, n, rng)
    U = 1.0 - rng.uniform(size=n)
    T = survival_times(truth, Z, W, U)
    C = np.where(rng.uniform(size=n) < truth.atom_weight, truth.tau, rng.uniform(0.0, truth.censor_max, size=n))
    C = np.minimum(C, truth.tau)
    V = np.minimum(T, C)
    status = (T <= C).astype(int)
    if status.sum() == 0:
        raise ValueError("simulated sample has no events")
    V = np.maximum(V, np.finfo(float).tiny)
    return Dataset.from_arrays(V, status, Z, tau=truth.tau)


def censoring_fraction(truth: TruthSpec, n_mc: int = 200_000, seed: int = 12345, nodes: int = 64) -> float:
    """P(delta = 0) under the truth.

    The integral over the censoring law is done by Gauss-Legendre quadrature;
    the covariate expectation uses a large fixed Monte Carlo sample.
    """
    rng = np.random.default_rng(seed)
    Z = truth.covariates.draw(n_mc, rng)
    r = np.exp(Z @ np.asarray(truth.beta0))
    cmax = min(truth.censor_max, truth.tau)
    x, wq = np.polynomial.legendre.leggauss(nodes)
    c = 0.5 * cmax * (x + 1.0)
    wq = 0.5 * cmax * wq / truth.censor_max

    def mean_surv(t):
        return float(np.mean(laplace(truth.family, truth.gamma0, r * float(truth.baseline(t)))))

    # uniform part on [0, min(censor_max, tau)]; uniform mass beyond tau joins the atom
    uni = sum(wj * mean_surv(cj) for cj, wj in zip(c, wq))
    atom = truth.atom_weight + (1 - truth.atom_weight) * max(0.0, 1.0 - truth.tau / truth.censor_max)
    return float((1 - truth.atom_weight) * uni + atom * mean_surv(truth.tau))


def calibrate_censoring(truth: TruthSpec, target: float, n_mc: int = 50_000) -> TruthSpec:
    """Return ``truth`` with ``censor_max = tau`` chosen to give censoring ``target``."""
    def gap(c):
        return censoring_fraction(truth.replace(censor_max=c, tau=c), n_mc=n_mc) - target
    lo, hi = 1e-3, 1.0
    while gap(hi) > 0:
        hi *= 2
        if hi > 1e6:
            raise ValueError("censoring target is not attainable")
    c = brentq(gap, lo, hi, xtol=1e-6)
    return truth.replace(censor_max=c, tau=c)


def true_survival(truth: TruthSpec, z, t) -> np.ndarray:
    """S(t | z) = Laplace_{gamma0}(A0(t) exp(beta0'z))."""
    H = truth.baseline(np.asarray(t, dtype=float)) * math.exp(float(np.dot(z, truth.beta0)))
    return np.asarray(laplace(truth.family, truth.gamma0, H))


# ---------------------------------------------------------------------------
# studies


@dataclass
class ScenarioResult:
    name: str
    truth: dict
    n: int
    reps: int
    seed: int
    estimates: dict
    summary: dict
    failures: int = 0
    seconds: float = 0.0

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, default=_jsonable)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["statistic", "value"])
            for k, v in _flatten(self.summary):
                w.writerow([k, v])


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple, np.ndarray)):
            for j, x in enumerate(v):
                yield f"{key}[{j}]", x
        else:
            yield key, v


def _rep_seeds(seed, reps):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(reps)]


def attenuation_study(truth: TruthSpec, n: int, reps: int, seed: int = 0,
                      working: FrailtyFamily | None = None, options: FitOptions | None = None,
                      name: str = "attenuation") -> ScenarioResult:
    """Fit the Cox model (and optionally a frailty working family) to each replicate.

    Reports componentwise ratios beta-hat / beta0 for each working model.
    """
    t0 = time.perf_counter()
    options = options or FitOptions()
    beta0 = np.asarray(truth.beta0)
    models = {"cox": None} if working is None else {"cox": None, working.kind: working}
    est = {m: [] for m in models}
    failures = 0
    for s in _rep_seeds(seed, reps):
        data = generate(truth, n, s)
        try:
            row = {}
            for m, fam in models.items():
                f = fit_cox(data, options) if fam is None else fit(data, fam, options.replace(seed=s))
                row[m] = f.theta_hat.vector()
        except Exception:
            failures += 1
            continue
        for m in models:
            est[m].append(row[m])
    summary = {}
    nz = beta0 != 0
    for m in models:
        arr = np.array(est[m])
        ratios = arr[:, 1:][:, nz] / beta0[nz]
        mean_ratio = ratios.mean(axis=0)
        summary[m] = {"mean_beta": arr[:, 1:].mean(axis=0).tolist(), "sd_beta": arr[:, 1:].std(axis=0, ddof=1).tolist(),
                      "mean_gamma": float(arr[:, 0].mean()), "mean_ratio": mean_ratio.tolist(),
                      "ratio_spread": float(mean_ratio.max() - mean_ratio.min())}
    return ScenarioResult(name, truth.to_dict(), n, reps, seed, {m: np.array(v).tolist() for m, v in est.items()},
                          summary, failures, time.perf_counter() - t0)


def sign_consistency_study(truth: TruthSpec, n: int, reps: int, seed: int = 0, keep=(0,),
                           working: FrailtyFamily | None = None, options: FitOptions | None = None,
                           B: int = 0, weight_kind: str = "dirichlet_exponential", level: float = 0.05,
                           name: str = "sign_consistency") -> ScenarioResult:
    """Fit a working model that keeps only the covariates in ``keep``.

    ``working=None`` fits the Cox model.  With ``B > 0`` each replicate also
    gets a bootstrap Wald test of ``beta_1 = 0``.
    """
    from .inference import bootstrap

    t0 = time.perf_counter()
    options = options or FitOptions()
    keep = list(keep)
    true_sign = np.sign(truth.beta0[keep[0]])
    est, reject, failures = [], [], 0
    crit = _normal_quantile(1 - level / 2)
    for s in _rep_seeds(seed, reps):
        full = generate(truth, n, s)
        data = Dataset.from_arrays(full.time, full.status, full.Z[:, keep], tau=full.tau)
        fam = FrailtyFamily.gamma() if working is None else working
        opt = options.replace(seed=s)
        if working is None:
            opt = opt.replace(gamma_bounds=(0.0, 0.0), constraint_mode="free")
        try:
            f = fit(data, fam, opt)
            est.append(f.theta_hat.vector())
            if B > 0:
                run = bootstrap(data, fam, opt, B, weight_kind, seed=s, base_fit=f)
                se = run.beta_draws()[:, 0].std(ddof=1)
                reject.append(bool(abs(f.beta[0]) / se > crit))
        except Exception:
            failures += 1
    arr = np.array(est)
    summary = {"mean_beta1": float(arr[:, 1].mean()), "sd_beta1": float(arr[:, 1].std(ddof=1))}
    if true_sign != 0:
        summary["sign_agreement"] = float(np.mean(np.sign(arr[:, 1]) == true_sign))
    if reject:
        summary["wald_rejection_rate"] = float(np.mean(reject))
    estimates = {"theta": arr.tolist(), "reject": reject}
    return ScenarioResult(name, truth.to_dict(), n, reps, seed, estimates, summary, failures,
                          time.perf_counter() - t0)


def score_size_power_study(truth: TruthSpec, n: int, reps: int, B: int, seed: int = 0,
                           options: FitOptions | None = None, level: float = 0.05,
                           weight_kind: str = "dirichlet_exponential",
                           name: str = "score_test") -> ScenarioResult:
    """Rejection rate of the bootstrap score test of gamma = 0."""
    from .inference import score_test_gamma

    t0 = time.perf_counter()
    stats, pvals, failures = [], [], 0
    for s in _rep_seeds(seed, reps):
        data = generate(truth, n, s)
        try:
            res = score_test_gamma(data, options, B, seed=s, weight_kind=weight_kind)
        except Exception:
            failures += 1
            continue
        stats.append(res.statistic)
        pvals.append(res.p_value)
    p = np.array(pvals)
    summary = {"rejection_rate": float(np.mean(p <= level)), "mean_statistic": float(np.mean(stats)),
               "level": level}
    return ScenarioResult(name, truth.to_dict(), n, reps, seed, {"statistic": stats, "p_value": pvals}, summary,
                          failures, time.perf_counter() - t0)


def bootstrap_calibration_study(truth: TruthSpec, n: int, reps: int, B: int, seed: int = 0,
                                family: FrailtyFamily | None = None, options: FitOptions | None = None,
                                z=None, grid=None, level: float = 0.95,
                                weight_kind: str = "dirichlet_exponential",
                                name: str = "bootstrap_calibration") -> ScenarioResult:
    """Bootstrap SEs against the Monte Carlo SD, Wald coverage and band coverage."""
    from .inference import bootstrap, simultaneous_band

    t0 = time.perf_counter()
    family = family or truth.family
    options = options or FitOptions()
    beta0 = np.asarray(truth.beta0)
    z = np.zeros(len(beta0)) if z is None else np.asarray(z, dtype=float)
    grid = np.linspace(0, truth.tau, 21)[1:-1] if grid is None else np.asarray(grid, dtype=float)
    S_true = true_survival(truth, z, grid)
    crit = _normal_quantile(0.5 + level / 2)
    est, se, covered, band_cover, failures = [], [], [], [], 0
    for s in _rep_seeds(seed, reps):
        data = generate(truth, n, s)
        try:
            base = fit(data, family, options.replace(seed=s))
            run = bootstrap(data, family, options.replace(seed=s), B, weight_kind, seed=s, base_fit=base)
            band = simultaneous_band(run, z, grid, level)
        except Exception:
            failures += 1
            continue
        sd = run.beta_draws().std(axis=0, ddof=1)
        est.append(base.beta)
        se.append(sd)
        covered.append(np.abs(base.beta - beta0) <= crit * sd)
        band_cover.append(bool(np.all((band.lower <= S_true) & (S_true <= band.upper))))
    est, se = np.array(est), np.array(se)
    mc_sd = est.std(axis=0, ddof=1)
    summary = {"mc_sd": mc_sd.tolist(), "mean_boot_se": se.mean(axis=0).tolist(),
               "se_ratio": (se.mean(axis=0) / mc_sd).tolist(),
               "wald_coverage": np.mean(covered, axis=0).tolist(), "band_coverage": float(np.mean(band_cover)),
               "level": level}
    estimates = {"beta": est.tolist(), "se": se.tolist(), "band_covered": band_cover}
    return ScenarioResult(name, truth.to_dict(), n, reps, seed, estimates, summary, failures,
                          time.perf_counter() - t0)


def _normal_quantile(p: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(p))


STUDIES = {
    "attenuation": attenuation_study,
    "sign_consistency": sign_consistency_study,
    "score_test": score_size_power_study,
    "bootstrap_calibration": bootstrap_calibration_study,
}


def run_scenario(spec: dict) -> ScenarioResult:
    """Run a study described by a JSON-style dict.

    Keys: ``study`` (one of :data:`STUDIES`), ``truth`` (TruthSpec fields),
    ``n``, ``reps``, ``seed`` and study-specific keys; ``options`` holds
    FitOptions fields and ``working`` / ``family`` a family name or dict.
    """
    spec = dict(spec)
    study = spec.pop("study")
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; expected one of {sorted(STUDIES)}")
    truth = TruthSpec.from_dict(spec.pop("truth", {}))
    if "target_censoring" in spec:
        truth = calibrate_censoring(truth, spec.pop("target_censoring"))
    if "options" in spec:
        o = spec.pop("options")
        for k in ("gamma_bounds", "beta_box"):
            if k in o:
                o[k] = tuple(o[k])
        spec["options"] = FitOptions(**o)
    for k in ("working", "family"):
        if k in spec and spec[k] is not None:
            v = spec[k]
            spec[k] = FrailtyFamily.from_dict(v) if isinstance(v, dict) else FrailtyFamily(v)
    spec.setdefault("name", study)
    return STUDIES[study](truth, **spec)
