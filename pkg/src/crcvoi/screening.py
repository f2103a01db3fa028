"""Colonoscopy screening and surveillance layered on the natural-history engine.

Both arms of a comparison draw their natural-history transitions from the same
per-individual stream (purpose ``"nh"``), so any difference between arms comes
from screening events alone. Screening outcomes use a separate ``"screen"``
stream that only the screening arm consumes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from functools import partial

import numpy as np

from crcvoi import parallel
from crcvoi.microsim import cumulative_rows, initial_state_distribution
from crcvoi.nathist import (
    AT_RISK_STATES,
    CLINICAL_STATES,
    N_STATES,
    HealthState,
    LifeTable,
    NaturalHistoryParams,
    transition_table,
)
from crcvoi.rng import stream_keys, uniforms

S = HealthState
_AT_RISK = np.zeros(N_STATES, dtype=bool)
_AT_RISK[list(AT_RISK_STATES)] = True
_CLINICAL = np.zeros(N_STATES, dtype=bool)
_CLINICAL[list(CLINICAL_STATES)] = True
_ALIVE = np.zeros(N_STATES, dtype=bool)
_ALIVE[: S.CRC_DEATH] = True

FP_EFFECTS = ("surveillance", "none")
SURVEILLANCE_MODES = ("replace", "supplement")

# surveillance level: 0 routine, 1 low risk, 2 high risk
_NONE, _LOW, _HIGH = 0, 1, 2


@dataclass(frozen=True)
class CeaParams:
    """External (directly estimable) cost-effectiveness inputs."""

    sens_small: float = 0.773
    sens_large_crc: float = 0.950
    spec: float = 0.868
    hr_low: float = 2.0
    hr_high: float = 3.0
    cost_colonoscopy: float = 10_000.0
    cost_early_annual: float = 21_524.0
    cost_late_annual: float = 37_000.0
    u_preclinical: float = 1.0
    u_clin_early: float = 0.855
    u_clin_late: float = 0.300
    discount_rate: float = 0.03

    PROBABILITIES = ("sens_small", "sens_large_crc", "spec")
    UTILITIES = ("u_preclinical", "u_clin_early", "u_clin_late")
    COSTS = ("cost_colonoscopy", "cost_early_annual", "cost_late_annual")
    HAZARD_RATIOS = ("hr_low", "hr_high")
    SAMPLED = ("sens_small", "sens_large_crc", "spec", "hr_low", "hr_high", *COSTS, *UTILITIES)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v}")
        for name in (*self.PROBABILITIES, *self.UTILITIES):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        for name in (*self.COSTS, *self.HAZARD_RATIOS, "discount_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    def as_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "CeaParams":
        return CeaParams(**{**asdict(self), **changes})

    @classmethod
    def inert(cls, **kw) -> "CeaParams":
        """Screening that never finds anything and never misfires."""
        return cls(**{"sens_small": 0.0, "sens_large_crc": 0.0, "spec": 1.0, **kw})


@dataclass(frozen=True)
class ScreeningStrategy:
    kind: str = "colonoscopy"
    start_age: int = 50
    stop_age: int = 85
    routine_interval: int = 10
    surveillance_low: int = 5
    surveillance_high: int = 3
    fp_effect: str = "surveillance"
    surveillance_mode: str = "replace"

    def __post_init__(self):
        if self.kind not in ("none", "colonoscopy"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if min(self.routine_interval, self.surveillance_low, self.surveillance_high) < 1:
            raise ValueError("intervals must be >= 1")
        if self.start_age >= self.stop_age:
            raise ValueError("start_age must be below stop_age")
        if self.fp_effect not in FP_EFFECTS:
            raise ValueError(f"fp_effect must be one of {FP_EFFECTS}")
        if self.surveillance_mode not in SURVEILLANCE_MODES:
            raise ValueError(f"surveillance_mode must be one of {SURVEILLANCE_MODES}")

    @classmethod
    def none(cls) -> "ScreeningStrategy":
        return cls(kind="none")

    @property
    def name(self) -> str:
        return "no_screening" if self.kind == "none" else "colonoscopy"

    def max_colonoscopies(self) -> int:
        shortest = min(self.routine_interval, self.surveillance_low, self.surveillance_high)
        return math.ceil((self.stop_age - self.start_age) / shortest) + 1


@dataclass(frozen=True)
class StrategyOutcome:
    """Per-person mean discounted cost and QALYs plus cohort event totals."""

    strategy: str
    n: int
    cost: float
    qaly: float
    colonoscopies: int
    polypectomies: int
    screen_detected: int
    symptomatic: int
    crc_deaths: int
    life_years: float

    CSV_COLUMNS = ("strategy", "cost", "qaly", "colonoscopies", "polypectomies", "screen_detected",
                   "symptomatic", "crc_deaths")

    def row(self) -> list:
        return [self.strategy, repr(self.cost), repr(self.qaly), self.colonoscopies, self.polypectomies,
                self.screen_detected, self.symptomatic, self.crc_deaths]


def write_outcomes(outcomes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(StrategyOutcome.CSV_COLUMNS)
        for o in outcomes:
            w.writerow(o.row())


def discount(amount, age, start_age=50, rate=0.03):
    """Present value at ``start_age`` of ``amount`` incurred at ``age``."""
    age = np.asarray(age, dtype=float)
    if np.any(age < start_age):
        raise ValueError("age must be >= start_age")
    out = np.asarray(amount, dtype=float) / (1.0 + rate) ** (age - start_age)
    return float(out) if out.ndim == 0 else out


def incremental(screen: StrategyOutcome, none: StrategyOutcome) -> tuple[float, float]:
    return screen.cost - none.cost, screen.qaly - none.qaly


def _step(cum, i, hr_level, states, u):
    rows = cum[hr_level, i, states]
    return (u[:, None] >= rows).sum(axis=1)


def _run_range(bounds, cum, init_cum, age_min, cea: CeaParams, strat: ScreeningStrategy, master_seed,
               draw_index):
    lo, hi = bounds
    idx = np.arange(lo, hi)
    n = hi - lo
    n_steps = cum.shape[1] - 1
    states = np.searchsorted(init_cum, uniforms(stream_keys(master_seed, "nh:init", draw_index, idx), 0),
                             side="right")
    nh_keys = stream_keys(master_seed, "nh", draw_index, idx)
    screen_keys = stream_keys(master_seed, "screen", draw_index, idx)
    screening = strat.kind == "colonoscopy"

    hr_level = np.zeros(n, dtype=np.int64)      # highest polyp finding, drives lambda1
    surv_level = np.zeros(n, dtype=np.int64)    # drives the exam interval
    next_exam = np.full(n, strat.start_age, dtype=np.int64)
    surv_due = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    interval = np.array([strat.routine_interval, strat.surveillance_low, strat.surveillance_high])

    utility = np.zeros(N_STATES)
    utility[[S.NORMAL, S.SMALL_ADENOMA, S.LARGE_ADENOMA]] = 1.0
    utility[[S.PRECLINICAL_EARLY, S.PRECLINICAL_LATE]] = cea.u_preclinical
    utility[S.CLINICAL_EARLY] = cea.u_clin_early
    utility[S.CLINICAL_LATE] = cea.u_clin_late
    treat = np.zeros(N_STATES)
    treat[S.CLINICAL_EARLY] = cea.cost_early_annual
    treat[S.CLINICAL_LATE] = cea.cost_late_annual

    cost = np.zeros(n)
    qaly = np.zeros(n)
    life_years = np.zeros(n, dtype=np.int64)
    n_col = n_poly = n_screen_dx = n_sympt = 0
    for i in range(n_steps):
        age = age_min + i
        disc = 1.0 / (1.0 + cea.discount_rate) ** (age - age_min)
        alive = _ALIVE[states]
        if screening and age <= strat.stop_age:
            if strat.surveillance_mode == "replace":
                due = next_exam == age
            else:
                routine = age >= strat.start_age and (age - strat.start_age) % strat.routine_interval == 0
                due = (surv_due == age) | routine
            due &= alive & ~_CLINICAL[states]
            if due.any():
                u = uniforms(screen_keys[due], age)
                s = states[due]
                found_small = (s == S.SMALL_ADENOMA) & (u < cea.sens_small)
                found_large = (s == S.LARGE_ADENOMA) & (u < cea.sens_large_crc)
                found_crc = ((s == S.PRECLINICAL_EARLY) | (s == S.PRECLINICAL_LATE)) & (u < cea.sens_large_crc)
                false_pos = (s == S.NORMAL) & (u >= cea.spec)

                new_hr = np.where(found_large, _HIGH, np.where(found_small, _LOW, _NONE))
                new_surv = new_hr.copy()
                if strat.fp_effect == "surveillance":
                    new_surv = np.maximum(new_surv, np.where(false_pos, _LOW, _NONE))
                s = np.where(found_small | found_large, S.NORMAL, s)
                s = np.where(found_crc & (s == S.PRECLINICAL_EARLY), S.CLINICAL_EARLY, s)
                s = np.where(found_crc & (s == S.PRECLINICAL_LATE), S.CLINICAL_LATE, s)
                states[due] = s
                hr_level[due] = np.maximum(hr_level[due], new_hr)
                surv_level[due] = np.maximum(surv_level[due], new_surv)
                next_exam[due] = age + interval[surv_level[due]]
                surv_due[due] = np.where(surv_level[due] > _NONE, next_exam[due], surv_due[due])

                n_col += int(due.sum())
                n_poly += int((found_small | found_large).sum())
                n_screen_dx += int(found_crc.sum())
                cost[due] += cea.cost_colonoscopy * disc

        alive = _ALIVE[states]
        life_years += alive
        qaly += utility[states] * disc
        cost += treat[states] * disc

        at_risk = _AT_RISK[states]
        nxt = _step(cum, i, hr_level, states, uniforms(nh_keys, age))
        n_sympt += int((at_risk & _CLINICAL[nxt]).sum())
        states = nxt

    crc_deaths = int((states == S.CRC_DEATH).sum())
    return cost, qaly, life_years, np.array([n_col, n_poly, n_screen_dx, n_sympt, crc_deaths], dtype=np.int64)


def hr_tables(nh: NaturalHistoryParams, cea: CeaParams, life_table: LifeTable, age_min: int = 50,
              age_max: int = 100) -> np.ndarray:
    """Row CDFs for lambda1 hazard ratios (1, hr_low, hr_high): shape (3, ages, 9, 9)."""
    return np.stack([
        cumulative_rows(np.asarray(transition_table(nh, life_table, age_min, age_max, hr).matrices))
        for hr in (1.0, cea.hr_low, cea.hr_high)
    ])


def simulate_strategy(nh: NaturalHistoryParams, cea: CeaParams, strat: ScreeningStrategy, life_table: LifeTable,
                      n: int, master_seed: int, draw_index: int = 0, *, age_max: int = 100,
                      workers: int = 1) -> StrategyOutcome:
    """Simulate ``n`` people from age 50 to ``age_max`` under ``strat``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    age_min = 50
    if strat.start_age < age_min:
        raise ValueError("screening cannot start before the cohort's starting age of 50")
    cum = hr_tables(nh, cea, life_table, age_min, age_max)
    init_cum = np.cumsum(initial_state_distribution(nh))
    init_cum[-1] = 1.0
    fn = partial(_run_range, cum=cum, init_cum=init_cum, age_min=age_min, cea=cea, strat=strat,
                 master_seed=master_seed, draw_index=draw_index)
    parts = parallel.pmap(fn, parallel.chunk_ranges(n, workers), workers=workers)
    # per-person arrays are concatenated before summing so totals do not depend on the partition
    cost = np.concatenate([p[0] for p in parts])
    qaly = np.concatenate([p[1] for p in parts])
    life_years = np.concatenate([p[2] for p in parts])
    tallies = np.sum([p[3] for p in parts], axis=0)
    return StrategyOutcome(
        strategy=strat.name,
        n=n,
        cost=float(cost.sum() / n),
        qaly=float(qaly.sum() / n),
        colonoscopies=int(tallies[0]),
        polypectomies=int(tallies[1]),
        screen_detected=int(tallies[2]),
        symptomatic=int(tallies[3]),
        crc_deaths=int(tallies[4]),
        life_years=float(life_years.sum() / n),
    )


def compare(nh: NaturalHistoryParams, cea: CeaParams, life_table: LifeTable, n: int, master_seed: int,
            draw_index: int = 0, strat: ScreeningStrategy = ScreeningStrategy(), **kw):
    """No-screening and screening outcomes on shared natural-history streams."""
    none = simulate_strategy(nh, cea, ScreeningStrategy.none(), life_table, n, master_seed, draw_index, **kw)
    screen = simulate_strategy(nh, cea, strat, life_table, n, master_seed, draw_index, **kw)
    return none, screen
