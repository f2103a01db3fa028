"""Incremental mixture importance sampling (IMIS) calibration.

The proposal starts as the prior and grows, one multivariate normal at a
time, around the current highest-weight point. Likelihoods are evaluated once
per point, in parallel batches, and frozen.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import differentiate, optimize, special

from crcvoi import parallel
from crcvoi.microsim import epi_outputs, simulate_cohort
from crcvoi.nathist import LifeTable, NaturalHistoryParams
from crcvoi.rng import generator
from crcvoi.stats import (
    PriorSet,
    ess,
    expected_unique,
    mvn_log_density,
    mvn_sample,
    nearest_neighbors,
    normalize_log_weights,
    prior_log_density,
    safe_cholesky,
    weighted_cov,
)
from crcvoi.targets import TARGET_TYPES, CalibrationLikelihood, TargetBinSpec, TargetSet

log = logging.getLogger(__name__)

UNIQUE_FRACTION = 1.0 - math.exp(-1.0)


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImisConfig:
    n0: int = 1000
    b: int = 250
    j: int = 5000
    max_iterations: int = 200
    stop_fraction: float = UNIQUE_FRACTION
    n_lik: int = 10_000
    master_seed: int = 20190102
    likelihood_mode: str = "expected"
    transform: bool = True
    n_optimizations: int = 1
    opt_max_evals: int = 20_000
    opt_hessian_step: float = 0.05

    def validate(self, d: int = 9) -> None:
        if not self.n0 >= self.b >= d + 1:
            raise ValueError(f"need n0 >= b >= d+1 (d={d}); got n0={self.n0}, b={self.b}")
        if self.j < 1:
            raise ValueError(f"j must be >= 1, got {self.j}")
        if not 0 < self.stop_fraction < 1:
            raise ValueError(f"stop_fraction must lie in (0, 1), got {self.stop_fraction}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.likelihood_mode not in ("expected", "microsim"):
            raise ValueError(f"unknown likelihood_mode {self.likelihood_mode!r}")
        if self.n_lik < 1:
            raise ValueError("n_lik must be >= 1")
        if self.n_optimizations < 0 or self.opt_max_evals < 1 or not self.opt_hessian_step > 0:
            raise ValueError("optimisation settings must be non-negative with a positive step and budget")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class MixtureComponent:
    mean: np.ndarray
    cov: np.ndarray
    count: int


@dataclass
class PosteriorSample:
    """Result of a calibration run.

    ``theta`` holds the ``j`` resampled parameter vectors. The remaining
    arrays describe every evaluated point (in the original parameter scale)
    and are absent when a sample is loaded from its CSV.
    """

    names: tuple[str, ...]
    theta: np.ndarray
    map_theta: np.ndarray
    ess: float
    unique_count: int
    iterations_run: int
    converged: bool
    resample_index: np.ndarray | None = None
    points: np.ndarray | None = None
    weights: np.ndarray | None = None
    log_lik: np.ndarray | None = None
    log_prior: np.ndarray | None = None
    log_proposal: np.ndarray | None = None
    working_points: np.ndarray | None = None
    components: list = field(default_factory=list)
    n0: int = 0
    transform: bool = True
    seed: int = 0
    config_hash: str = ""

    @property
    def j(self) -> int:
        return len(self.theta)

    @property
    def map_index(self) -> int | None:
        if self.points is None:
            return None
        return int(np.argmax(self.log_lik + self.log_prior))

    def resampled_weights(self) -> np.ndarray:
        if self.weights is None or self.resample_index is None:
            return np.full(self.j, np.nan)
        return self.weights[self.resample_index]


def _evaluate(z: np.ndarray, loglik: Callable, priors: PriorSet, transform: bool) -> float:
    theta = priors.from_unconstrained(z)[0] if transform else np.asarray(z, dtype=float).reshape(-1)
    for attempt in (1, 2):
        try:
            return float(loglik(theta))
        except Exception as exc:  # one retry, then abort with context
            if attempt == 2:
                raise CalibrationError(f"likelihood failed twice at theta={theta.tolist()}: {exc}") from exc
            log.warning("likelihood failed at %s (%s); retrying", theta.tolist(), exc)
    raise AssertionError("unreachable")


def _working_log_prior(z: np.ndarray, priors: PriorSet, transform: bool) -> np.ndarray:
    if transform:
        return priors.log_density_unconstrained(z)
    return np.atleast_1d(prior_log_density(z, priors))


def _batch_loglik(z: np.ndarray, lp: np.ndarray, loglik, priors, transform, workers) -> np.ndarray:
    ll = np.full(len(z), -np.inf)
    ok = np.flatnonzero(np.isfinite(lp))
    fn = partial(_evaluate, loglik=loglik, priors=priors, transform=transform)
    ll[ok] = parallel.pmap(fn, [z[i : i + 1] for i in ok], workers=workers)
    return ll


def mixture_log_proposal(lp: np.ndarray, comp_logpdf: np.ndarray, n0: int, b: int) -> np.ndarray:
    """log q for the defensive mixture: prior weight n0/N, each normal b/N."""
    k = comp_logpdf.shape[0]
    n = n0 + k * b
    terms = [math.log(n0 / n) + lp]
    if k:
        terms.append(math.log(b / n) + comp_logpdf)
    return special.logsumexp(np.vstack(terms), axis=0)


def _log_posterior(z: np.ndarray, loglik, priors: PriorSet, transform: bool) -> float:
    """Unnormalised working-space log posterior of one point."""
    lp = float(_working_log_prior(z[None, :], priors, transform)[0])
    if not np.isfinite(lp):
        return -math.inf
    return lp + _evaluate(z[None, :], loglik, priors, transform)


def _optimize_component(start: np.ndarray, loglik, priors: PriorSet, cfg: ImisConfig, workers: int):
    """Posterior mode from ``start`` and the inverse Hessian there (None if not positive definite)."""
    target = partial(_log_posterior, loglik=loglik, priors=priors, transform=cfg.transform)

    def neg(x):
        v = target(np.asarray(x, dtype=float))
        return -v if np.isfinite(v) else math.inf

    res = optimize.minimize(neg, start, method="Nelder-Mead",
                            options={"maxfev": cfg.opt_max_evals, "xatol": 1e-6, "fatol": 1e-8, "adaptive": True})
    mode = np.asarray(res.x, dtype=float)

    def batch(x):
        # scipy passes points along axis 0 with arbitrary trailing batch shape
        flat = x.reshape(x.shape[0], -1).T
        vals = parallel.pmap(target, list(flat), workers=workers)
        return np.asarray(vals, dtype=float).reshape(x.shape[1:])

    with np.errstate(invalid="ignore"):  # -inf outside the support is handled below
        h = differentiate.hessian(batch, mode, order=4, initial_step=cfg.opt_hessian_step, maxiter=1).ddf
    h = (h + h.T) / 2
    if not np.all(np.isfinite(h)) or np.linalg.eigvalsh(-h).min() <= 0:
        log.warning("Hessian at the optimum is not negative definite; using neighbour covariance")
        return mode, None
    return mode, np.linalg.inv(-h)


def run_imis(priors: PriorSet, loglik: Callable[[np.ndarray], float], cfg: ImisConfig,
             workers: int = 1) -> PosteriorSample:
    """IMIS with a generic log-likelihood of the calibrated parameter vector."""
    d = len(priors)
    cfg.validate(d)
    seed = cfg.master_seed
    theta0 = priors.sample(generator(seed, "imis-prior"), cfg.n0)
    z = priors.to_unconstrained(theta0) if cfg.transform else theta0
    lp = _working_log_prior(z, priors, cfg.transform)
    ll = _batch_loglik(z, lp, loglik, priors, cfg.transform, workers)
    if not np.any(np.isfinite(ll)):
        raise CalibrationError("priors exclude all target-compatible regions: every initial likelihood is zero")
    metric_cov = np.cov(z, rowvar=False)
    comp_logpdf = np.empty((0, len(z)))
    components: list[MixtureComponent] = []
    chols: list[np.ndarray] = []

    def add_component(center, cov, rng):
        nonlocal z, lp, ll, comp_logpdf, log_q, w
        chol = safe_cholesky(cov)
        new_z = mvn_sample(center, cov, rng, cfg.b, chol=chol)
        new_lp = _working_log_prior(new_z, priors, cfg.transform)
        new_ll = _batch_loglik(new_z, new_lp, loglik, priors, cfg.transform, workers)
        old_on_new = np.empty((len(components), cfg.b))
        for c, (comp, c_chol) in enumerate(zip(components, chols)):
            old_on_new[c] = mvn_log_density(new_z, comp.mean, chol=c_chol)
        z = np.vstack([z, new_z])
        lp = np.concatenate([lp, new_lp])
        ll = np.concatenate([ll, new_ll])
        comp_logpdf = np.vstack([np.hstack([comp_logpdf, old_on_new]),
                                 mvn_log_density(z, center, chol=chol)[None, :]])
        components.append(MixtureComponent(np.array(center, copy=True), cov, cfg.b))
        chols.append(chol)
        log_q = mixture_log_proposal(lp, comp_logpdf, cfg.n0, cfg.b)
        w = normalize_log_weights(ll + lp - log_q)

    def neighbour_cov(center):
        n = len(z)
        near = nearest_neighbors(z, center, cfg.b, metric_cov)
        return weighted_cov(z[near], (w[near] + 1.0 / n) / 2.0, center=center)

    log_q = lp.copy()
    w = normalize_log_weights(ll + lp - log_q)

    # optional optimisation stage: one normal per local mode, shaped by the curvature there
    open_start = np.isfinite(ll)
    for k in range(cfg.n_optimizations):
        if not np.any(open_start):
            break
        start = z[int(np.argmax(np.where(open_start, w[: cfg.n0], -1.0)))]
        mode, cov = _optimize_component(start, loglik, priors, cfg, workers)
        if cov is None:
            cov = neighbour_cov(mode)
        add_component(mode, cov, generator(seed, "imis-opt", k))
        # the next search starts away from the prior points this mode already explains
        dist = np.einsum("ij,jk,ik->i", z[: cfg.n0] - mode, np.linalg.inv(metric_cov), z[: cfg.n0] - mode)
        open_start[np.argsort(dist, kind="stable")[: cfg.n0 // max(cfg.n_optimizations, 1)]] = False
        log.info("IMIS optimisation %d: mode log posterior %.3f", k + 1,
                 _log_posterior(mode, loglik, priors, cfg.transform))

    iterations = 0
    converged = False
    for k in range(1, cfg.max_iterations + 1):
        if expected_unique(w, cfg.j) >= cfg.stop_fraction * cfg.j:
            converged = True
            break
        center = z[int(np.argmax(w))]
        add_component(center, neighbour_cov(center), generator(seed, "imis-mixture", k))
        iterations = k
        log.info("IMIS iteration %d: N=%d ESS=%.1f expected unique=%.1f", k, len(z), ess(w),
                 expected_unique(w, cfg.j))
    else:
        converged = expected_unique(w, cfg.j) >= cfg.stop_fraction * cfg.j

    idx = np.sort(generator(seed, "imis-resample").choice(len(z), size=cfg.j, replace=True, p=w))
    points = priors.from_unconstrained(z) if cfg.transform else z
    lp_theta = np.atleast_1d(prior_log_density(points, priors))
    map_i = int(np.argmax(np.where(np.isfinite(ll), ll + lp_theta, -np.inf)))
    return PosteriorSample(
        names=tuple(priors.names),
        theta=points[idx],
        map_theta=points[map_i].copy(),
        ess=ess(w),
        unique_count=int(len(np.unique(idx))),
        iterations_run=iterations,
        converged=converged,
        resample_index=idx,
        points=points,
        weights=w,
        log_lik=ll,
        log_prior=lp_theta,
        log_proposal=log_q,
        working_points=z,
        components=components,
        n0=cfg.n0,
        transform=cfg.transform,
        seed=seed,
        config_hash=cfg.digest(),
    )


def calibrate(priors: PriorSet, targets: TargetSet, life_table: LifeTable, cfg: ImisConfig,
              base: NaturalHistoryParams = NaturalHistoryParams(), workers: int = 1) -> PosteriorSample:
    """Calibrate the nine unobservable parameters to ``targets``.

    ``base`` supplies the fixed external parameters (stage-specific CRC
    mortality); its calibrated entries are ignored.
    """
    if len(targets) == 0:
        raise ValueError("no calibration targets")
    loglik = CalibrationLikelihood(targets, life_table, base, cfg.likelihood_mode, cfg.n_lik, cfg.master_seed)
    return run_imis(priors, loglik, cfg, workers=workers)


def posterior_summary(ps: PosteriorSample) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-parameter mean, SD, MAP and 95% credible interval, plus the correlation matrix."""
    th = ps.theta
    sd = th.std(axis=0, ddof=1) if len(th) > 1 else np.zeros(th.shape[1])
    summary = pd.DataFrame({
        "mean": th.mean(axis=0),
        "sd": sd,
        "map": ps.map_theta,
        "cri_lb": np.quantile(th, 0.025, axis=0),
        "cri_ub": np.quantile(th, 0.975, axis=0),
    }, index=pd.Index(ps.names, name="parameter"))
    corr = np.eye(th.shape[1])
    live = sd > 0
    if live.sum() > 1:
        corr[np.ix_(live, live)] = np.corrcoef(th[:, live], rowvar=False)
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    return summary, pd.DataFrame(corr, index=list(ps.names), columns=list(ps.names))


def _predict_draw(item, life_table, n_per_draw, bins, master_seed, base):
    draw, theta = item
    params = base.with_calibrated(theta)
    cohort = simulate_cohort(params, life_table, n_per_draw, master_seed, draw,
                             age_max=bins.required_age_max, purpose="posterior-predictive")
    phi = epi_outputs(cohort, bins)
    return np.concatenate([phi.by_type(t) for t in TARGET_TYPES])


def posterior_predictive(ps: PosteriorSample, life_table: LifeTable, n_per_draw: int,
                         bins: TargetBinSpec, master_seed: int,
                         base: NaturalHistoryParams = NaturalHistoryParams(), workers: int = 1,
                         max_draws: int | None = None) -> pd.DataFrame:
    """Posterior-predicted mean and 95% interval of every target quantity."""
    if n_per_draw < 1:
        raise ValueError("n_per_draw must be >= 1")
    th = ps.theta if max_draws is None else ps.theta[:max_draws]
    fn = partial(_predict_draw, life_table=life_table, n_per_draw=n_per_draw, bins=bins,
                 master_seed=master_seed, base=base)
    preds = np.array(parallel.pmap(fn, list(enumerate(th)), workers=workers))
    rows = []
    col = 0
    for ttype in TARGET_TYPES:
        for lo, hi in bins.positions(ttype):
            v = preds[:, col]
            col += 1
            v = v[~np.isnan(v)]
            if len(v):
                rows.append((ttype, lo, hi, float(v.mean()), float(np.quantile(v, 0.025)),
                             float(np.quantile(v, 0.975))))
            else:
                rows.append((ttype, lo, hi, np.nan, np.nan, np.nan))
    return pd.DataFrame(rows, columns=["target_type", "bin_lo", "bin_hi", "pred_mean", "pi_lb", "pi_ub"])


# -- persistence --------------------------------------------------------------

def write_posterior(ps: PosteriorSample, csv_path, json_path, extra: dict | None = None) -> None:
    w = ps.resampled_weights()
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(["draw_index", *ps.names, "weight_preresample"]) + "\n")
        for i, row in enumerate(ps.theta):
            fh.write(",".join([str(i), *(repr(float(x)) for x in row), repr(float(w[i]))]) + "\n")
    diag = {
        "ess": ps.ess,
        "unique_count": ps.unique_count,
        "map": dict(zip(ps.names, map(float, ps.map_theta))),
        "iterations": ps.iterations_run,
        "converged": ps.converged,
        "j": ps.j,
        "n_evaluated": None if ps.points is None else int(len(ps.points)),
        "seed": ps.seed,
        "config_hash": ps.config_hash,
        **(extra or {}),
    }
    Path(json_path).write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")


def read_posterior(csv_path, json_path=None) -> PosteriorSample:
    df = pd.read_csv(csv_path, comment="#", float_precision="round_trip")
    names = tuple(c for c in df.columns if c not in ("draw_index", "weight_preresample"))
    json_path = Path(json_path) if json_path else Path(csv_path).with_suffix(".json")
    diag = json.loads(json_path.read_text())
    return PosteriorSample(
        names=names,
        theta=df[list(names)].to_numpy(dtype=float),
        map_theta=np.array([diag["map"][n] for n in names]),
        ess=float(diag["ess"]),
        unique_count=int(diag["unique_count"]),
        iterations_run=int(diag["iterations"]),
        converged=bool(diag.get("converged", True)),
        seed=int(diag.get("seed", 0)),
        config_hash=str(diag.get("config_hash", "")),
    )
