"""Frailty Laplace transforms and the derivatives of ``G = -log(Laplace)``.

Four families are supported: gamma, inverse Gaussian, the IGG(alpha) family
that interpolates between them, and the log-normal frailty, whose transform
has no closed form and is evaluated by Gauss-Hermite quadrature.  Every
family is parameterised so that the frailty has mean one and ``gamma = 0``
gives the Cox model, ``Laplace_0(t) = exp(-t)``.

Negative ``gamma`` is handled by analytic continuation, guarded by
:func:`domain_check`.

The scalar kernels are compiled with numba so that the baseline solver can
call them inside its own compiled loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

GAMMA = 0
INVERSE_GAUSSIAN = 1
IGG = 2
LOGNORMAL = 3

_CODES = {"gamma": GAMMA, "inverse_gaussian": INVERSE_GAUSSIAN, "igg": IGG, "lognormal": LOGNORMAL}
_ALIASES = {"ig": "inverse_gaussian", "invgauss": "inverse_gaussian", "log_normal": "lognormal"}

# below this |gamma| the closed forms are replaced by their gamma -> 0 limits
GAMMA_ZERO = 1e-8
# below this |gamma * t| the gamma-derivative uses a Taylor series
_SERIES_X = 1e-3


class DomainError(ValueError):
    """Raised when (gamma, t) lies outside the analytic extension of a transform."""


@dataclass(frozen=True)
class FrailtyFamily:
    """A posited frailty family.

    ``alpha`` is only meaningful for ``kind == "igg"`` (gamma is IGG(0) and
    the inverse Gaussian is IGG(1/2)).  ``quadrature_nodes`` is only used by
    the log-normal family.
    """

    kind: str
    alpha: float = 0.0
    quadrature_nodes: int = 40
    _nodes: np.ndarray = field(init=False, repr=False, compare=False)
    _logw: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in _CODES:
            raise ValueError(f"unknown frailty family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if kind == "gamma":
            object.__setattr__(self, "alpha", 0.0)
        elif kind == "inverse_gaussian":
            object.__setattr__(self, "alpha", 0.5)
        if kind == "lognormal":
            if self.quadrature_nodes < 20:
                raise ValueError("log-normal frailty needs at least 20 quadrature nodes")
            x, w = np.polynomial.hermite_e.hermegauss(self.quadrature_nodes)
            logw = np.log(w / math.sqrt(2.0 * math.pi))
        else:
            x, logw = np.zeros(0), np.zeros(0)
        object.__setattr__(self, "_nodes", x)
        object.__setattr__(self, "_logw", logw)

    @classmethod
    def gamma(cls) -> "FrailtyFamily":
        return cls("gamma")

    @classmethod
    def inverse_gaussian(cls) -> "FrailtyFamily":
        return cls("inverse_gaussian")

    @classmethod
    def igg(cls, alpha: float) -> "FrailtyFamily":
        return cls("igg", alpha=alpha)

    @classmethod
    def lognormal(cls, quadrature_nodes: int = 40) -> "FrailtyFamily":
        return cls("lognormal", quadrature_nodes=quadrature_nodes)

    @classmethod
    def from_name(cls, name: str, alpha: float | None = None, quadrature_nodes: int = 40) -> "FrailtyFamily":
        name = _ALIASES.get(name.lower(), name.lower())
        if name == "igg":
            if alpha is None:
                raise ValueError("the igg family requires alpha")
            return cls.igg(alpha)
        if alpha is not None:
            raise ValueError("alpha is only valid with the igg family")
        if name == "lognormal":
            return cls.lognormal(quadrature_nodes)
        return cls(name)

    @property
    def code(self) -> int:
        return _CODES[self.kind]

    @property
    def kernel_args(self) -> tuple:
        """Arguments consumed by the compiled kernels: (code, alpha, nodes, log-weights)."""
        return self.code, float(self.alpha), self._nodes, self._logw

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "igg":
            d["alpha"] = self.alpha
        if self.kind == "lognormal":
            d["quadrature_nodes"] = self.quadrature_nodes
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrailtyFamily":
        return cls(d["kind"], alpha=d.get("alpha", 0.0), quadrature_nodes=d.get("quadrature_nodes", 40))


@dataclass(frozen=True)
class TransformBundle:
    """``G`` and its derivatives in ``t`` and ``gamma`` at one or many points."""

    G: np.ndarray | float
    Gdot: np.ndarray | float
    Gddot: np.ndarray | float
    Ggamma: np.ndarray | float
    Gdotgamma: np.ndarray | float


# ---------------------------------------------------------------------------
# compiled scalar kernels


@njit(cache=True)
def _eps0(code, t):
    m = t if t > 1.0 else 1.0
    if code == LOGNORMAL:
        return m ** -4 / 64.0
    return (2.0 / 3.0) / m


@njit(cache=True)
def _eps0_inverse(code, eps):
    """Largest t with eps0(t) >= eps; inf if every t qualifies, -1 if none does."""
    if eps <= 0.0:
        return np.inf
    if code == LOGNORMAL:
        if eps > 1.0 / 64.0:
            return -1.0
        return max(1.0, (64.0 * eps) ** -0.25)
    if eps > 2.0 / 3.0:
        return -1.0
    return max(1.0, 2.0 / (3.0 * eps))


@njit(cache=True)
def _in_domain(code, alpha, gamma, t):
    if not (np.isfinite(gamma) and np.isfinite(t)) or t < 0.0:
        return False
    if gamma >= 0.0:
        return True
    if code == LOGNORMAL:
        return -gamma <= _eps0(code, t)
    return 1.0 + gamma * t / (1.0 - alpha) > 0.0


@njit(cache=True)
def _closed_g012(code, alpha, gamma, t):
    if abs(gamma) < GAMMA_ZERO:
        return t - 0.5 * gamma * t * t, 1.0 - gamma * t, -gamma
    if code == GAMMA:
        s = 1.0 + gamma * t
        return math.log1p(gamma * t) / gamma, 1.0 / s, -gamma / (s * s)
    if code == INVERSE_GAUSSIAN:
        q = math.sqrt(1.0 + 2.0 * gamma * t)
        return 2.0 * t / (1.0 + q), 1.0 / q, -gamma / (q * q * q)
    c = 1.0 - alpha
    lg = math.log1p(gamma * t / c)
    if alpha == 0.0:
        G = lg / gamma
    else:
        G = c / (alpha * gamma) * math.expm1(alpha * lg)
    return G, math.exp((alpha - 1.0) * lg), -gamma * math.exp((alpha - 2.0) * lg)


@njit(cache=True)
def _closed_gamma_derivs(code, alpha, gamma, t):
    """(dG/dgamma, d2G/dt dgamma) for the IGG-type families."""
    if code == GAMMA:
        alpha = 0.0
    elif code == INVERSE_GAUSSIAN:
        alpha = 0.5
    c = 1.0 - alpha
    if abs(gamma) < GAMMA_ZERO:
        return -0.5 * t * t, -t
    x = gamma * t / c
    s = 1.0 + x
    gdotgamma = -t * s ** (alpha - 2.0)
    if abs(gamma * t) < _SERIES_X:
        # G(gamma, t) = g(gamma t) / gamma with g(x) = x - x^2/2 + g3 x^3 + g4 x^4 + ...
        g3 = (2.0 - alpha) / (6.0 * c)
        g4 = -(2.0 - alpha) * (3.0 - alpha) / (24.0 * c * c)
        y = gamma * t
        return t * t * (-0.5 + 2.0 * g3 * y + 3.0 * g4 * y * y), gdotgamma
    G, Gd, _ = _closed_g012(code, alpha, gamma, t)
    return (t * Gd - G) / gamma, gdotgamma


@njit(cache=True)
def _ln_g012(gamma, t, x, logw):
    m = x.shape[0]
    if gamma >= 0.0:
        sg = math.sqrt(gamma)
        W = np.empty(m)
        lw = np.empty(m)
        top = -np.inf
        for j in range(m):
            W[j] = math.exp(sg * x[j] - 0.5 * gamma)
            lw[j] = logw[j] - t * W[j]
            if lw[j] > top:
                top = lw[j]
        s0 = 0.0
        s1 = 0.0
        for j in range(m):
            p = math.exp(lw[j] - top)
            s0 += p
            s1 += p * W[j]
        Gd = s1 / s0
        s2 = 0.0
        for j in range(m):
            p = math.exp(lw[j] - top)
            s2 += p * (W[j] - Gd) ** 2
        G = 0.0 if t == 0.0 else -(top + math.log(s0))
        return G, Gd, -s2 / s0
    # gamma < 0: sqrt(gamma) = i xi, real part of the continued integrand
    xi = math.sqrt(-gamma)
    lam0 = 0.0
    lam1 = 0.0
    lam2 = 0.0
    scale = math.exp(0.5 * xi * xi)
    for j in range(m):
        Wj = scale * complex(math.cos(xi * x[j]), math.sin(xi * x[j]))
        e = np.exp(logw[j] - t * Wj)
        lam0 += e.real
        lam1 += (Wj * e).real
        lam2 += (Wj * Wj * e).real
    if lam0 <= 0.0:
        return np.nan, np.nan, np.nan
    Gd = lam1 / lam0
    G = 0.0 if t == 0.0 else -math.log(lam0)
    return G, Gd, -lam2 / lam0 + Gd * Gd


@njit(cache=True)
def _g012(code, alpha, gamma, t, x, logw):
    if code == LOGNORMAL:
        return _ln_g012(gamma, t, x, logw)
    return _closed_g012(code, alpha, gamma, t)


@njit(cache=True)
def _closed_g_loggdot(code, alpha, gamma, t):
    """(G, log Gdot) for the IGG-type families, sharing one logarithm."""
    if abs(gamma) < GAMMA_ZERO:
        Gd = 1.0 - gamma * t
        return t - 0.5 * gamma * t * t, (math.log(Gd) if Gd > 0.0 else -np.inf)
    if code == INVERSE_GAUSSIAN:
        q = math.sqrt(1.0 + 2.0 * gamma * t)
        return 2.0 * t / (1.0 + q), -math.log(q)
    if code == GAMMA:
        alpha = 0.0
    c = 1.0 - alpha
    lg = math.log1p(gamma * t / c)
    if alpha == 0.0:
        return lg / gamma, -lg
    return c / (alpha * gamma) * math.expm1(alpha * lg), (alpha - 1.0) * lg


@njit(cache=True)
def _g_loggdot(code, alpha, gamma, t, x, logw):
    """(G, log Gdot)."""
    if code == LOGNORMAL:
        G, Gd, _ = _ln_g012(gamma, t, x, logw)
        return G, (math.log(Gd) if Gd > 0.0 else -np.inf)
    return _closed_g_loggdot(code, alpha, gamma, t)


@njit(cache=True)
def _gamma_derivs(code, alpha, gamma, t, x, logw):
    if code != LOGNORMAL:
        return _closed_gamma_derivs(code, alpha, gamma, t)
    h = max(1e-5, 1e-5 * abs(gamma))
    Gp, Gdp, _ = _ln_g012(gamma + h, t, x, logw)
    Gm, Gdm, _ = _ln_g012(gamma - h, t, x, logw)
    return (Gp - Gm) / (2.0 * h), (Gdp - Gdm) / (2.0 * h)


@njit(cache=True)
def _bundle_array(code, alpha, gamma, t, x, logw, out):
    ok = True
    for i in range(t.shape[0]):
        if not _in_domain(code, alpha, gamma, t[i]):
            ok = False
            for k in range(5):
                out[k, i] = np.nan
            continue
        G, Gd, Gdd = _g012(code, alpha, gamma, t[i], x, logw)
        Gg, Gdg = _gamma_derivs(code, alpha, gamma, t[i], x, logw)
        out[0, i] = G
        out[1, i] = Gd
        out[2, i] = Gdd
        out[3, i] = Gg
        out[4, i] = Gdg
    return ok


# ---------------------------------------------------------------------------
# public vectorised API


def _as_array(t):
    arr = np.asarray(t, dtype=float)
    return np.atleast_1d(arr).ravel(), arr.ndim == 0, arr.shape


def eps0(family: FrailtyFamily, t):
    """Width of the admissible negative-gamma interval at horizon ``t``."""
    tt, scalar, shape = _as_array(t)
    out = np.array([_eps0(family.code, v) for v in tt])
    return float(out[0]) if scalar else out.reshape(shape)


def eps0_inverse(family: FrailtyFamily, eps: float) -> float:
    """Largest horizon ``t`` at which ``-eps`` is still an admissible gamma."""
    return float(_eps0_inverse(family.code, float(eps)))


def domain_check(family: FrailtyFamily, gamma: float, t):
    """True where ``Laplace_gamma(t)`` is defined under the family's extension."""
    code, alpha, _, _ = family.kernel_args
    tt, scalar, shape = _as_array(t)
    out = np.array([_in_domain(code, alpha, float(gamma), v) for v in tt], dtype=bool)
    return bool(out[0]) if scalar else out.reshape(shape)


def transform_bundle(family: FrailtyFamily, gamma: float, t) -> TransformBundle:
    """Evaluate ``G``, ``dG/dt``, ``d2G/dt2``, ``dG/dgamma`` and ``d2G/dt dgamma``.

    Raises :class:`DomainError` if any ``t`` falls outside the domain and
    ``FloatingPointError`` if the log-normal quadrature is not finite.
    """
    tt, scalar, shape = _as_array(t)
    out = np.empty((5, tt.size))
    if not _bundle_array(*family.kernel_args[:2], float(gamma), tt, *family.kernel_args[2:], out):
        raise DomainError(f"gamma={gamma} outside the {family.kind} domain for some t")
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite transform value (quadrature breakdown)")
    if scalar:
        return TransformBundle(*(float(v[0]) for v in out))
    return TransformBundle(*(v.reshape(shape) for v in out))


def laplace(family: FrailtyFamily, gamma: float, t):
    """``Laplace_gamma(t) = E exp(-W t)`` for the frailty W."""
    b = transform_bundle(family, gamma, t)
    return np.exp(-b.G) if not np.isscalar(b.G) else math.exp(-b.G)


def frailty_variance(family: FrailtyFamily, gamma: float) -> float:
    """Variance of W, i.e. ``-d2G/dt2`` at ``t = 0``."""
    if gamma < 0:
        raise ValueError("frailty variance is only defined for gamma >= 0")
    if family.kind == "lognormal":
        return math.expm1(gamma)
    return float(gamma)
