"""Individual-level annual-cycle simulation of the natural-history cohort.

Each individual consumes one uniform per year of age from its own
counter-based stream, so cohort tallies do not depend on execution order or
worker count. ``expected_outputs`` gives the infinite-cohort limit of the
same tallies by propagating the state distribution through P(a).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import partial
from typing import TYPE_CHECKING

import numpy as np

from crcvoi import parallel
from crcvoi.nathist import (
    AT_RISK_STATES,
    CLINICAL_STATES,
    N_STATES,
    PRECLINICAL_EARLY_PREVALENCE,
    PRECLINICAL_LATE_PREVALENCE,
    DomainError,
    HealthState,
    LifeTable,
    NaturalHistoryParams,
    TransitionMatrixTable,
    transition_table,
)
from crcvoi.rng import RngStreamKey, stream_keys, uniforms

if TYPE_CHECKING:
    from crcvoi.targets import TargetBinSpec

_AT_RISK = np.zeros(N_STATES, dtype=bool)
_AT_RISK[list(AT_RISK_STATES)] = True


def initial_state_distribution(params: NaturalHistoryParams) -> np.ndarray:
    preclinical = PRECLINICAL_EARLY_PREVALENCE + PRECLINICAL_LATE_PREVALENCE
    if params.p_adeno > 1.0 - preclinical:
        raise DomainError(
            f"p_adeno={params.p_adeno} leaves no room for the fixed {preclinical:.4f} preclinical prevalence"
        )
    d = np.zeros(N_STATES)
    d[HealthState.SMALL_ADENOMA] = params.p_adeno * params.p_small
    d[HealthState.LARGE_ADENOMA] = params.p_adeno * (1.0 - params.p_small)
    d[HealthState.PRECLINICAL_EARLY] = PRECLINICAL_EARLY_PREVALENCE
    d[HealthState.PRECLINICAL_LATE] = PRECLINICAL_LATE_PREVALENCE
    d[HealthState.NORMAL] = 1.0 - params.p_adeno - preclinical
    return d


def cumulative_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise CDFs of stochastic matrices, last column pinned to exactly 1."""
    cum = np.cumsum(p, axis=-1)
    cum[..., -1] = 1.0
    return cum


def sample_next(cum: np.ndarray, states: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw from row ``states`` of one age's CDF matrix."""
    return (u[:, None] >= cum[states]).sum(axis=1)


@dataclass(frozen=True)
class CohortOutputs:
    """Tallies of a simulated (or expected) cohort.

    ``state_counts[i]`` is the occupancy at age ``age_min + i`` (ages
    age_min..age_max). ``new_diagnoses[i]`` counts first entries into
    (clinical early, clinical late) during the cycle starting at age
    ``age_min + i`` and ``person_years_at_risk[i]`` the individuals alive and
    undiagnosed at the start of that cycle (ages age_min..age_max-1).
    """

    age_min: int
    n: int
    state_counts: np.ndarray
    new_diagnoses: np.ndarray
    person_years_at_risk: np.ndarray

    @property
    def age_max(self) -> int:
        return self.age_min + len(self.state_counts) - 1

    def alive_counts(self) -> np.ndarray:
        return self.state_counts[:, : HealthState.CRC_DEATH].sum(axis=1)

    def __add__(self, other: "CohortOutputs") -> "CohortOutputs":
        if self.age_min != other.age_min or self.state_counts.shape != other.state_counts.shape:
            raise ValueError("cannot combine cohorts over different age ranges")
        return CohortOutputs(
            self.age_min,
            self.n + other.n,
            self.state_counts + other.state_counts,
            self.new_diagnoses + other.new_diagnoses,
            self.person_years_at_risk + other.person_years_at_risk,
        )

    def equals(self, other: "CohortOutputs") -> bool:
        return (
            self.age_min == other.age_min
            and self.n == other.n
            and np.array_equal(self.state_counts, other.state_counts)
            and np.array_equal(self.new_diagnoses, other.new_diagnoses)
            and np.array_equal(self.person_years_at_risk, other.person_years_at_risk)
        )

    def to_csv(self, states_path, incidence_path) -> None:
        with open(states_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["age", "state", "count"])
            for i, row in enumerate(self.state_counts):
                for s in HealthState:
                    w.writerow([self.age_min + i, s.name, row[s]])
        with open(incidence_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["age", "stage", "new_cases", "person_years"])
            for i in range(len(self.person_years_at_risk)):
                for j, stage in enumerate(("early", "late")):
                    w.writerow([self.age_min + i, stage, self.new_diagnoses[i, j], self.person_years_at_risk[i]])


def _simulate_range(bounds: tuple[int, int], cum: np.ndarray, init_cum: np.ndarray, age_min: int,
                    master_seed: int, draw_index: int, purpose: str) -> CohortOutputs:
    lo, hi = bounds
    idx = np.arange(lo, hi)
    n_steps = cum.shape[0] - 1
    init_u = uniforms(stream_keys(master_seed, purpose + ":init", draw_index, idx), 0)
    states = np.searchsorted(init_cum, init_u, side="right")
    keys = stream_keys(master_seed, purpose, draw_index, idx)

    counts = np.zeros((n_steps + 1, N_STATES), dtype=np.int64)
    new_dx = np.zeros((n_steps, 2), dtype=np.int64)
    py = np.zeros(n_steps, dtype=np.int64)
    counts[0] = np.bincount(states, minlength=N_STATES)
    for i in range(n_steps):
        at_risk = _AT_RISK[states]
        py[i] = at_risk.sum()
        nxt = sample_next(cum[i], states, uniforms(keys, age_min + i))
        entered = at_risk & ~_AT_RISK[nxt]
        new_dx[i, 0] = np.count_nonzero(entered & (nxt == HealthState.CLINICAL_EARLY))
        new_dx[i, 1] = np.count_nonzero(entered & (nxt == HealthState.CLINICAL_LATE))
        states = nxt
        counts[i + 1] = np.bincount(states, minlength=N_STATES)
    return CohortOutputs(age_min, hi - lo, counts, new_dx, py)


def simulate_states(table: TransitionMatrixTable, init_distribution: np.ndarray, n: int, master_seed: int,
                    draw_index: int = 0, *, workers: int = 1, purpose: str = "nh") -> CohortOutputs:
    """Simulate ``n`` individuals through ``table`` from a starting distribution."""
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    init_cum = np.cumsum(np.asarray(init_distribution, dtype=float))
    init_cum[-1] = 1.0
    cum = cumulative_rows(np.asarray(table.matrices))
    fn = partial(_simulate_range, cum=cum, init_cum=init_cum, age_min=table.age_min,
                 master_seed=master_seed, draw_index=draw_index, purpose=purpose)
    parts = parallel.pmap(fn, parallel.chunk_ranges(n, workers), workers=workers)
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def simulate_cohort(params: NaturalHistoryParams, life_table: LifeTable, n: int, master_seed: int,
                    draw_index: int = 0, *, age_max: int = 100, workers: int = 1,
                    purpose: str = "nh") -> CohortOutputs:
    table = transition_table(params, life_table, 50, age_max)
    return simulate_states(table, initial_state_distribution(params), n, master_seed, draw_index,
                           workers=workers, purpose=purpose)


def simulate_individual(table: TransitionMatrixTable, init: HealthState, stream: RngStreamKey) -> np.ndarray:
    """State at each age from ``table.age_min`` until death or ``table.age_max``."""
    init = HealthState(init)
    if init >= HealthState.CRC_DEATH:
        raise ValueError("individuals must start in an alive state")
    cum = cumulative_rows(np.asarray(table.matrices))
    key = stream.key
    traj = [int(init)]
    for i in range(len(table) - 1):
        u = uniforms(key, table.age_min + i)
        nxt = int(np.searchsorted(cum[i, traj[-1]], u, side="right"))
        traj.append(nxt)
        if nxt >= HealthState.CRC_DEATH:
            break
    return np.array(traj)


def expected_outputs(table: TransitionMatrixTable, init_distribution: np.ndarray) -> CohortOutputs:
    """Expected tallies per person: the infinite-cohort limit of ``simulate_states``."""
    p = np.asarray(table.matrices)
    n_steps = len(p) - 1
    occ = np.zeros((n_steps + 1, N_STATES))
    new_dx = np.zeros((n_steps, 2))
    occ[0] = init_distribution
    clin = list(CLINICAL_STATES)
    for i in range(n_steps):
        at_risk = occ[i] * _AT_RISK
        new_dx[i] = at_risk @ p[i][:, clin]
        occ[i + 1] = occ[i] @ p[i]
    py = (occ[:-1] * _AT_RISK).sum(axis=1)
    return CohortOutputs(table.age_min, 1, occ, new_dx, py)


@dataclass(frozen=True)
class ModelPrediction:
    """Model-predicted target quantities; NaN marks an undefined value."""

    adenoma_prevalence: np.ndarray
    proportion_small: np.ndarray
    incidence_early: np.ndarray
    incidence_late: np.ndarray

    def by_type(self, target_type: str) -> np.ndarray:
        return getattr(self, target_type)


def epi_outputs(cohort: CohortOutputs, bins: "TargetBinSpec") -> ModelPrediction:
    counts = cohort.state_counts
    alive = cohort.alive_counts()
    prev, small = [], []
    for age in bins.adenoma_ages:
        i = age - cohort.age_min
        if not 0 <= i < len(counts):
            raise ValueError(f"adenoma target age {age} outside simulated range")
        s, lg = counts[i, HealthState.SMALL_ADENOMA], counts[i, HealthState.LARGE_ADENOMA]
        prev.append((s + lg) / alive[i] if alive[i] > 0 else np.nan)
        small.append(s / (s + lg) if s + lg > 0 else np.nan)
    early, late = [], []
    for lo, hi in bins.incidence_bins:
        i, j = lo - cohort.age_min, hi - cohort.age_min + 1
        if i < 0 or j > len(cohort.person_years_at_risk):
            raise ValueError(f"incidence bin {lo}-{hi} outside simulated range")
        py = cohort.person_years_at_risk[i:j].sum()
        dx = cohort.new_diagnoses[i:j].sum(axis=0)
        early.append(dx[0] / py * 1e5 if py > 0 else np.nan)
        late.append(dx[1] / py * 1e5 if py > 0 else np.nan)
    return ModelPrediction(np.array(prev, dtype=float), np.array(small, dtype=float),
                           np.array(early, dtype=float), np.array(late, dtype=float))
