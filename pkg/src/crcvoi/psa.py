"""Probabilistic sensitivity analysis and expected value of perfect information.

Four ways of characterising parameter uncertainty are compared. Random inputs
are keyed by draw index, so the same draw index sees the same external
parameter uniforms and the same natural-history streams under every approach.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from functools import partial
from typing import Mapping, Sequence

import numpy as np

from crcvoi import parallel
from crcvoi.imis import PosteriorSample
from crcvoi.nathist import LifeTable, NaturalHistoryParams
from crcvoi.rng import stream_keys, uniforms
from crcvoi.screening import CeaParams, ScreeningStrategy, compare
from crcvoi.stats import DistributionSpec, FitError, fit_from_interval, fit_from_moments

DEFAULT_WTP_GRID = np.arange(0.0, 150_001.0, 1000.0)


class UncertaintyApproach(enum.Enum):
    A1_FULL = "A1_full"
    A2_MAP = "A2_map"
    A3_POSTERIOR_ONLY = "A3_posterior_only"
    A4_MOMENTS_INDEPENDENT = "A4_moments_independent"

    @property
    def samples_external(self) -> bool:
        return self is not UncertaintyApproach.A3_POSTERIOR_ONLY

    @classmethod
    def parse(cls, s: str) -> "UncertaintyApproach":
        for a in cls:
            if s in (a.value, a.name, a.value.split("_")[0]):
                return a
        raise ValueError(f"unknown approach {s!r}")


# (family, lower, upper, truncation)
EXTERNAL_INTERVALS: dict[str, tuple[str, float, float, float | None]] = {
    "sens_small": ("beta", 0.734, 0.808, None),
    "sens_large_crc": ("beta", 0.920, 0.990, None),
    "spec": ("beta", 0.855, 0.880, None),
    "hr_low": ("lognormal", 1.0, 3.0, None),
    "hr_high": ("lognormal", 2.0, 4.0, None),
    "cost_colonoscopy": ("lognormal", 9_000.0, 11_000.0, None),
    "cost_early_annual": ("lognormal", 20_000.0, 23_000.0, None),
    "cost_late_annual": ("lognormal", 35_000.0, 39_000.0, None),
    "u_preclinical": ("lognormal", 0.980, 1.000, 1.0),
    "u_clin_early": ("lognormal", 0.700, 0.900, 1.0),
    "u_clin_late": ("lognormal", 0.200, 0.400, 1.0),
}


def default_external_specs() -> dict[str, DistributionSpec]:
    return {name: fit_from_interval(fam, lb, ub, upper=cap)
            for name, (fam, lb, ub, cap) in EXTERNAL_INTERVALS.items()}


def external_means(specs: Mapping[str, DistributionSpec], base: CeaParams = CeaParams()) -> CeaParams:
    return base.replace(**{k: float(s.mean()) for k, s in specs.items()})


@dataclass(frozen=True)
class PsaDraw:
    draw_index: int
    nh: NaturalHistoryParams
    cea: CeaParams


def moment_matched_priors(posterior: PosteriorSample) -> list[DistributionSpec]:
    """Independent marginals matched to posterior means and SDs."""
    th = posterior.theta
    out = []
    for j, name in enumerate(posterior.names):
        family = "beta" if name in ("p_adeno", "p_small") else "lognormal"
        try:
            out.append(fit_from_moments(family, float(th[:, j].mean()), float(th[:, j].std(ddof=1))))
        except (FitError, ValueError) as exc:
            raise FitError(f"cannot moment-match {name}: {exc}") from exc
    return out


def _draw_uniforms(master_seed: int, purpose: str, n_draws: int, n_cols: int) -> np.ndarray:
    """Uniform matrix (draw, column); column c of draw d depends only on (seed, purpose, d, c)."""
    out = np.empty((n_draws, n_cols))
    cols = np.arange(n_cols)
    for d in range(n_draws):
        out[d] = uniforms(stream_keys(master_seed, purpose, d, cols), 0)
    return out


def build_draws(approach: UncertaintyApproach, posterior: PosteriorSample | None,
                external_specs: Mapping[str, DistributionSpec], n_draws: int, master_seed: int,
                base_nh: NaturalHistoryParams = NaturalHistoryParams(),
                base_cea: CeaParams = CeaParams()) -> list[PsaDraw]:
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if posterior is None:
        raise ValueError(f"{approach.value} needs a posterior sample")
    missing = [k for k in CeaParams.SAMPLED if k not in external_specs]
    if missing:
        raise ValueError(f"external specs missing {missing}")
    names = list(external_specs)

    if approach.samples_external:
        u_ext = _draw_uniforms(master_seed, "psa-external", n_draws, len(names))
        values = {k: external_specs[k].ppf(u_ext[:, c]) for c, k in enumerate(names)}
        ext = [base_cea.replace(**{k: float(v[d]) for k, v in values.items()}) for d in range(n_draws)]
    else:
        ext = [external_means(external_specs, base_cea)] * n_draws

    d_cal = len(posterior.names)
    if approach is UncertaintyApproach.A2_MAP:
        theta = np.tile(posterior.map_theta, (n_draws, 1))
    elif approach is UncertaintyApproach.A4_MOMENTS_INDEPENDENT:
        specs = moment_matched_priors(posterior)
        u = _draw_uniforms(master_seed, "psa-moments", n_draws, d_cal)
        theta = np.column_stack([s.ppf(u[:, j]) for j, s in enumerate(specs)])
    else:
        u = _draw_uniforms(master_seed, "psa-posterior", n_draws, 1)[:, 0]
        rows = np.minimum((u * posterior.j).astype(np.int64), posterior.j - 1)
        theta = posterior.theta[rows]

    return [PsaDraw(d, base_nh.with_calibrated(theta[d]), ext[d]) for d in range(n_draws)]


@dataclass(frozen=True)
class PsaResult:
    approach: str
    draw_index: np.ndarray
    theta: np.ndarray
    external: np.ndarray
    cost_none: np.ndarray
    qaly_none: np.ndarray
    cost_screen: np.ndarray
    qaly_screen: np.ndarray
    n_individuals: int
    master_seed: int

    CSV_COLUMNS = ("draw", "approach", "cost_none", "qaly_none", "cost_screen", "qaly_screen", "d_cost", "d_qaly")

    def __post_init__(self):
        if len(self.cost_none) < 2:
            raise ValueError("a PSA needs at least two draws")

    @property
    def n_draws(self) -> int:
        return len(self.cost_none)

    @property
    def d_cost(self) -> np.ndarray:
        return self.cost_screen - self.cost_none

    @property
    def d_qaly(self) -> np.ndarray:
        return self.qaly_screen - self.qaly_none

    def costs(self) -> np.ndarray:
        return np.column_stack([self.cost_none, self.cost_screen])

    def qalys(self) -> np.ndarray:
        return np.column_stack([self.qaly_none, self.qaly_screen])

    def breakeven_wtp(self) -> float:
        """WTP at which mean incremental net monetary benefit is zero."""
        dq = float(self.d_qaly.mean())
        return float(self.d_cost.mean()) / dq if dq != 0 else float("inf")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for i in range(self.n_draws):
                w.writerow([int(self.draw_index[i]), self.approach, *(repr(float(x)) for x in (
                    self.cost_none[i], self.qaly_none[i], self.cost_screen[i], self.qaly_screen[i],
                    self.d_cost[i], self.d_qaly[i]))])

    def write_params_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["draw", "approach", *NaturalHistoryParams.CALIBRATED, *CeaParams.SAMPLED])
            for i in range(self.n_draws):
                w.writerow([int(self.draw_index[i]), self.approach,
                            *(repr(float(x)) for x in (*self.theta[i], *self.external[i]))])


def _run_draw(draw: PsaDraw, strat, life_table, n_individuals, master_seed):
    try:
        none, screen = compare(draw.nh, draw.cea, life_table, n_individuals, master_seed, draw.draw_index, strat)
    except Exception as exc:
        raise RuntimeError(f"PSA draw {draw.draw_index} failed: {exc}") from exc
    return none.cost, none.qaly, screen.cost, screen.qaly


def run_psa(draws: Sequence[PsaDraw], strat: ScreeningStrategy, life_table: LifeTable, n_individuals: int,
            master_seed: int, *, approach: str = "", workers: int = 1) -> PsaResult:
    if not draws:
        raise ValueError("no PSA draws")
    fn = partial(_run_draw, strat=strat, life_table=life_table, n_individuals=n_individuals,
                 master_seed=master_seed)
    out = np.array(parallel.pmap(fn, list(draws), workers=workers))
    return PsaResult(
        approach=approach,
        draw_index=np.array([d.draw_index for d in draws]),
        theta=np.array([d.nh.calibrated_vector() for d in draws]),
        external=np.array([[getattr(d.cea, k) for k in CeaParams.SAMPLED] for d in draws]),
        cost_none=out[:, 0],
        qaly_none=out[:, 1],
        cost_screen=out[:, 2],
        qaly_screen=out[:, 3],
        n_individuals=n_individuals,
        master_seed=master_seed,
    )


@dataclass(frozen=True)
class EvpiCurve:
    wtp: np.ndarray
    evpi: np.ndarray
    approach: str = ""

    @property
    def peak(self) -> tuple[float, float]:
        i = int(np.argmax(self.evpi))
        return float(self.wtp[i]), float(self.evpi[i])


def evpi_from_nmb(nmb: np.ndarray) -> float:
    """EVPI for one (draws x strategies) matrix of net monetary benefits.

    Computed as the mean per-draw regret of the strategy that is best on
    average, which equals mean(max NMB) - max(mean NMB) but is a mean of
    non-negative terms, so it is exactly zero when that strategy wins every draw.
    """
    nmb = np.asarray(nmb, dtype=float)
    best = int(np.argmax(nmb.mean(axis=0)))
    return float((nmb.max(axis=1) - nmb[:, best]).mean())


def evpi_curve(psa: PsaResult, wtp_grid=DEFAULT_WTP_GRID) -> EvpiCurve:
    grid = np.asarray(wtp_grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("WTP grid must be non-empty and strictly ascending")
    costs, qalys = psa.costs(), psa.qalys()
    evpi = np.array([evpi_from_nmb(lam * qalys - costs) for lam in grid])
    return EvpiCurve(grid, evpi, psa.approach)


def write_evpi(curves: Sequence[EvpiCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wtp", "evpi", "approach"])
        for c in curves:
            for lam, v in zip(c.wtp, c.evpi):
                w.writerow([repr(float(lam)), repr(float(v)), c.approach])


def read_psa_csv(path) -> dict[str, PsaResult]:
    """PSA outcomes grouped by approach (parameter columns are not restored)."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(line for line in fh if not line.startswith("#")):
            rows.setdefault(r["approach"], []).append(r)
    out = {}
    for approach, rs in rows.items():
        col = lambda k: np.array([float(r[k]) for r in rs])  # noqa: E731
        n = len(rs)
        out[approach] = PsaResult(approach, np.array([int(r["draw"]) for r in rs]), np.empty((n, 0)),
                                  np.empty((n, 0)), col("cost_none"), col("qaly_none"), col("cost_screen"),
                                  col("qaly_screen"), 0, 0)
    return out
