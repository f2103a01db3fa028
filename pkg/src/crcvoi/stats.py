"""Distributions, fitting, multivariate normals and importance-sampling helpers."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats

from crcvoi.nathist import NaturalHistoryParams

Z95 = 1.96
FAMILIES = ("beta", "lognormal", "normal", "uniform", "fixed")
_PARAM_NAMES = {
    "beta": ("alpha", "beta"),
    "lognormal": ("meanlog", "sdlog"),
    "normal": ("mean", "sd"),
    "uniform": ("low", "high"),
    "fixed": ("value",),
}


class FitError(ValueError):
    """A distribution cannot be fitted to the requested interval or moments."""


@dataclass(frozen=True)
class DistributionSpec:
    """A parametric distribution, optionally truncated above at ``upper``.

    Truncation is implemented by inverse-CDF sampling on [0, F(upper)], which
    is equivalent to redrawing values above ``upper``.
    """

    family: str
    params: tuple[float, ...]
    upper: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown distribution family {self.family!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        expected = len(_PARAM_NAMES[self.family])
        if len(self.params) != expected:
            raise ValueError(f"{self.family} takes {expected} parameters, got {len(self.params)}")
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError(f"{self.family} parameters must be finite: {self.params}")
        a = self.params
        if self.family == "beta" and (a[0] <= 0 or a[1] <= 0):
            raise ValueError(f"beta needs alpha, beta > 0, got {a}")
        if self.family in ("lognormal", "normal") and a[1] <= 0:
            raise ValueError(f"{self.family} needs a positive scale, got {a}")
        if self.family == "uniform" and not a[0] < a[1]:
            raise ValueError(f"uniform needs low < high, got {a}")
        if self.upper is not None and self.family not in ("lognormal", "normal"):
            raise ValueError("upper truncation is only supported for lognormal and normal")

    @classmethod
    def beta(cls, alpha: float, beta: float) -> "DistributionSpec":
        return cls("beta", (alpha, beta))

    @classmethod
    def lognormal(cls, meanlog: float, sdlog: float, upper: float | None = None) -> "DistributionSpec":
        return cls("lognormal", (meanlog, sdlog), upper)

    @classmethod
    def normal(cls, mean: float, sd: float) -> "DistributionSpec":
        return cls("normal", (mean, sd))

    @classmethod
    def uniform(cls, low: float, high: float) -> "DistributionSpec":
        return cls("uniform", (low, high))

    @classmethod
    def fixed(cls, value: float) -> "DistributionSpec":
        return cls("fixed", (value,))

    @property
    def param_dict(self) -> dict:
        return dict(zip(_PARAM_NAMES[self.family], self.params))

    @functools.cached_property
    def _frozen(self):
        return self._make_base()

    def _base(self):
        return self._frozen

    def _make_base(self):
        a = self.params
        if self.family == "beta":
            return stats.beta(a[0], a[1])
        if self.family == "lognormal":
            return stats.lognorm(s=a[1], scale=math.exp(a[0]))
        if self.family == "normal":
            return stats.norm(a[0], a[1])
        if self.family == "uniform":
            return stats.uniform(a[0], a[1] - a[0])
        raise ValueError("fixed distributions have no density")

    def _upper_mass(self) -> float:
        return 1.0 if self.upper is None else float(self._base().cdf(self.upper))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "fixed":
            out = np.where(x == self.params[0], 0.0, -np.inf)
        else:
            with np.errstate(divide="ignore"):
                out = self._base().logpdf(x)
            if self.upper is not None:
                out = np.where(x <= self.upper, out - math.log(self._upper_mass()), -np.inf)
            out = np.where(np.isnan(out), -np.inf, out)
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "fixed":
            out = (x >= self.params[0]).astype(float)
        else:
            out = self._base().cdf(x)
            if self.upper is not None:
                out = np.minimum(out / self._upper_mass(), 1.0)
        return float(out) if out.ndim == 0 else out

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        if self.family == "fixed":
            out = np.full(q.shape, self.params[0])
        else:
            out = self._base().ppf(q * self._upper_mass())
        return float(out) if out.ndim == 0 else out

    quantile = ppf

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF draws, so one uniform maps to one value."""
        return self.ppf(rng.random(size))

    def mean(self) -> float:
        a = self.params
        if self.family == "fixed":
            return a[0]
        if self.family == "lognormal" and self.upper is not None:
            m, s = a
            c = math.log(self.upper)
            return math.exp(m + s * s / 2) * special.ndtr((c - m - s * s) / s) / special.ndtr((c - m) / s)
        if self.upper is not None:
            return float(self._base().expect(lambda x: x, ub=self.upper, conditional=True))
        return float(self._base().mean())

    def sd(self) -> float:
        if self.family == "fixed":
            return 0.0
        if self.upper is not None:
            mu = self.mean()
            m2 = float(self._base().expect(lambda x: x * x, ub=self.upper, conditional=True))
            return math.sqrt(max(m2 - mu * mu, 0.0))
        return float(self._base().std())

    def support(self) -> tuple[float, float]:
        if self.family == "beta":
            return 0.0, 1.0
        if self.family == "lognormal":
            return 0.0, self.upper if self.upper is not None else math.inf
        if self.family == "uniform":
            return self.params
        if self.family == "fixed":
            return self.params[0], self.params[0]
        return -math.inf, self.upper if self.upper is not None else math.inf

    # unconstrained reparameterisation used for proposals
    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "beta":
                return special.logit(x)
            if self.family == "lognormal":
                return np.log(x)
            if self.family == "uniform":
                lo, hi = self.params
                return special.logit((x - lo) / (hi - lo))
        return x

    def from_unconstrained(self, z):
        z = np.asarray(z, dtype=float)
        if self.family == "beta":
            return special.expit(z)
        if self.family == "lognormal":
            return np.exp(z)
        if self.family == "uniform":
            lo, hi = self.params
            return lo + (hi - lo) * special.expit(z)
        return z

    def log_jacobian(self, z):
        """log |dx/dz| of ``from_unconstrained``."""
        z = np.asarray(z, dtype=float)
        if self.family == "beta":
            return -np.logaddexp(0.0, -z) - np.logaddexp(0.0, z)
        if self.family == "lognormal":
            return z
        if self.family == "uniform":
            lo, hi = self.params
            return math.log(hi - lo) - np.logaddexp(0.0, -z) - np.logaddexp(0.0, z)
        return np.zeros_like(z)

    def to_dict(self) -> dict:
        d = {"family": self.family, **self.param_dict}
        if self.upper is not None:
            d["upper"] = self.upper
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        d = dict(d)
        family = d.pop("family")
        if family not in FAMILIES:
            raise ValueError(f"unknown distribution family {family!r}")
        upper = d.pop("upper", None)
        names = _PARAM_NAMES[family]
        missing = [n for n in names if n not in d]
        extra = [k for k in d if k not in names]
        if missing or extra:
            raise ValueError(f"{family} expects parameters {names}; missing {missing}, unknown {extra}")
        return cls(family, tuple(d[n] for n in names), upper)


def fit_from_interval(family: str, lb: float, ub: float, upper: float | None = None) -> DistributionSpec:
    """Distribution whose 95% equal-tailed interval is (lb, ub)."""
    if not (math.isfinite(lb) and math.isfinite(ub)) or not lb < ub:
        raise FitError(f"need finite lb < ub, got ({lb}, {ub})")
    if family == "normal":
        return DistributionSpec.normal((lb + ub) / 2, (ub - lb) / (2 * Z95))
    if family == "lognormal":
        if lb <= 0:
            raise FitError(f"lognormal interval needs lb > 0, got {lb}")
        m = (math.log(lb) + math.log(ub)) / 2
        s = (math.log(ub) - math.log(lb)) / (2 * Z95)
        return DistributionSpec.lognormal(m, s, upper)
    if family == "beta":
        if lb <= 0 or ub >= 1:
            raise FitError(f"beta interval must lie inside (0, 1), got ({lb}, {ub})")
        return _fit_beta_interval(lb, ub)
    raise FitError(f"cannot fit family {family!r} from an interval")


def _fit_beta_interval(lb: float, ub: float, tail: float = 0.025) -> DistributionSpec:
    # Parameterise by mean mu and concentration k. For fixed k, solve mu so the
    # lower tail mass at lb is exactly `tail`; the upper quantile then falls
    # monotonically in k, which is solved by bracketing.
    def mu_for(k: float) -> float:
        f = lambda mu: special.betainc(mu * k, (1 - mu) * k, lb) - tail
        return optimize.brentq(f, 1e-12, 1 - 1e-12, xtol=1e-15, rtol=1e-15)

    def upper_gap(logk: float) -> float:
        k = math.exp(logk)
        mu = mu_for(k)
        return special.betaincinv(mu * k, (1 - mu) * k, 1 - tail) - ub

    lo, hi = math.log(1e-2), math.log(1e9)
    try:
        if upper_gap(lo) < 0 or upper_gap(hi) > 0:
            raise FitError(f"no beta distribution has 95% interval ({lb}, {ub})")
        logk = optimize.brentq(upper_gap, lo, hi, xtol=1e-14, rtol=1e-15)
    except ValueError as exc:
        raise FitError(f"beta interval fit failed for ({lb}, {ub}): {exc}") from exc
    k = math.exp(logk)
    mu = mu_for(k)
    return DistributionSpec.beta(mu * k, (1 - mu) * k)


def fit_from_moments(family: str, mean: float, sd: float) -> DistributionSpec:
    if not (math.isfinite(mean) and math.isfinite(sd)) or sd <= 0:
        raise FitError(f"sd must be finite and > 0, got {sd}")
    if family == "normal":
        return DistributionSpec.normal(mean, sd)
    if family == "lognormal":
        if mean <= 0:
            raise FitError(f"lognormal needs a positive mean, got {mean}")
        s2 = math.log1p(sd * sd / (mean * mean))
        return DistributionSpec.lognormal(math.log(mean) - s2 / 2, math.sqrt(s2))
    if family == "beta":
        if not 0 < mean < 1 or sd * sd >= mean * (1 - mean):
            raise FitError(f"infeasible beta moments mean={mean}, sd={sd}")
        c = mean * (1 - mean) / (sd * sd) - 1
        return DistributionSpec.beta(mean * c, (1 - mean) * c)
    raise FitError(f"cannot fit family {family!r} from moments")


@dataclass(frozen=True)
class PriorSet:
    """One prior per calibrated parameter, in calibrated-parameter order."""

    specs: tuple[DistributionSpec, ...]
    names: tuple[str, ...] = NaturalHistoryParams.CALIBRATED

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if len(self.specs) != len(self.names):
            raise ValueError(f"expected {len(self.names)} priors, got {len(self.specs)}")
        for name, spec in zip(self.names, self.specs):
            want = "beta" if name in ("p_adeno", "p_small") else "lognormal"
            if spec.family != want:
                raise ValueError(f"prior for {name} must be {want}, got {spec.family}")

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.column_stack([s.sample(rng, size) for s in self.specs])

    def means(self) -> np.ndarray:
        return np.array([s.mean() for s in self.specs])

    def sds(self) -> np.ndarray:
        return np.array([s.sd() for s in self.specs])

    def to_unconstrained(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.column_stack([s.to_unconstrained(theta[:, j]) for j, s in enumerate(self.specs)])

    def from_unconstrained(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.column_stack([s.from_unconstrained(z[:, j]) for j, s in enumerate(self.specs)])

    def log_density_unconstrained(self, z: np.ndarray) -> np.ndarray:
        """Prior log density of the reparameterised vector, Jacobian included."""
        z = np.atleast_2d(z)
        theta = self.from_unconstrained(z)
        out = prior_log_density(theta, self)
        for j, s in enumerate(self.specs):
            out = out + s.log_jacobian(z[:, j])
        return np.where(np.isnan(out), -np.inf, out)


def default_priors() -> PriorSet:
    return PriorSet((
        DistributionSpec.beta(3, 8),
        DistributionSpec.beta(6, 3),
        DistributionSpec.lognormal(-11.97, 0.59),
        DistributionSpec.lognormal(1.04, 0.18),
        DistributionSpec.lognormal(-3.45, 0.59),
        DistributionSpec.lognormal(-3.91, 0.35),
        DistributionSpec.lognormal(-1.15, 0.23),
        DistributionSpec.lognormal(-1.41, 0.10),
        DistributionSpec.lognormal(-0.78, 0.22),
    ))


def prior_log_density(theta_u, priors: PriorSet):
    """Sum of component log densities; -inf outside the support. Rows are points."""
    theta = np.asarray(theta_u, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[1] != len(priors):
        raise ValueError(f"expected {len(priors)} columns, got {theta.shape[1]}")
    out = np.zeros(theta.shape[0])
    for j, s in enumerate(priors.specs):
        out = out + np.atleast_1d(s.logpdf(theta[:, j]))
    out = np.where(np.isnan(out), -np.inf, out)
    return float(out[0]) if single else out


# -- multivariate normal ----------------------------------------------------

def safe_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter (1e-10 .. 1e-4 of mean variance) if needed."""
    cov = np.asarray(cov, dtype=float)
    cov = (cov + cov.T) / 2
    if not np.all(np.isfinite(cov)):
        raise np.linalg.LinAlgError("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    scale = max(np.trace(cov) / d, np.finfo(float).tiny)
    jitter = 1e-10
    while jitter <= 1e-4 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(cov + jitter * scale * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError("covariance is not positive definite even after maximum jitter")


def mvn_log_density(x, mean, cov=None, *, chol=None):
    """Multivariate normal log density; rows of ``x`` are points."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    L = safe_cholesky(cov) if chol is None else chol
    d = L.shape[0]
    sol = np.linalg.solve(L, (x - np.asarray(mean, dtype=float)).T)
    maha = np.sum(sol * sol, axis=0)
    out = -0.5 * (d * math.log(2 * math.pi) + maha) - np.sum(np.log(np.diag(L)))
    return float(out[0]) if single else out


def mvn_sample(mean, cov, rng: np.random.Generator, size: int | None = None, *, chol=None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    L = safe_cholesky(cov) if chol is None else chol
    n = 1 if size is None else size
    z = rng.standard_normal((n, mean.size))
    out = mean + z @ L.T
    return out[0] if size is None else out


# -- importance-sampling helpers --------------------------------------------

@dataclass(frozen=True)
class WeightedSample:
    points: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.full(len(pts), 1.0 / len(pts)) if self.weights is None else normalize(self.weights)
        if len(w) != len(pts):
            raise ValueError("one weight per point required")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)


def normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("all weights are zero")
    return w / total


def normalize_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    if not np.any(np.isfinite(log_w)):
        raise ValueError("all weights are zero")
    w = np.exp(log_w - special.logsumexp(log_w))
    return w / w.sum()


def ess(weights) -> float:
    w = normalize(weights)
    return float(1.0 / np.sum(w * w))


def expected_unique(weights, n_resample: int) -> float:
    """Expected number of distinct points in ``n_resample`` multinomial draws."""
    w = normalize(weights)
    return float(np.sum(-np.expm1(n_resample * np.log1p(-np.minimum(w, 1.0 - 1e-16)))))


def weighted_cov(points, weights=None, center=None) -> np.ndarray:
    """Weighted covariance of the rows of ``points``.

    Around the weighted mean the reliability-weight correction
    ``1 / (1 - sum w^2)`` is applied, so uniform weights reproduce the usual
    unbiased sample covariance. Around a supplied ``center`` no correction is
    made.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.full(len(x), 1.0 / len(x)) if weights is None else normalize(weights)
    if center is None:
        c = w @ x
        denom = 1.0 - np.sum(w * w)
        if denom <= 0:
            raise ValueError("need at least two points with positive weight")
    else:
        c = np.asarray(center, dtype=float)
        denom = 1.0
    dx = x - c
    return (dx * w[:, None]).T @ dx / denom


def nearest_neighbors(points, center, k: int, metric_cov) -> np.ndarray:
    """Indices of the ``k`` rows closest to ``center`` in Mahalanobis distance."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if not 1 <= k <= len(x):
        raise ValueError(f"k must be in [1, {len(x)}], got {k}")
    L = safe_cholesky(metric_cov)
    sol = np.linalg.solve(L, (x - np.asarray(center, dtype=float)).T)
    dist = np.sum(sol * sol, axis=0)
    return np.argsort(dist, kind="stable")[:k]
