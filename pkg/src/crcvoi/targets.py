"""Simulated calibration targets and the calibration likelihood."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from crcvoi import parallel
from crcvoi.microsim import (
    ModelPrediction,
    epi_outputs,
    expected_outputs,
    initial_state_distribution,
    simulate_cohort,
    simulate_states,
)
from crcvoi.nathist import DomainError, LifeTable, NaturalHistoryParams, transition_table

TARGET_TYPES = ("adenoma_prevalence", "proportion_small", "incidence_early", "incidence_late")
ADENOMA_TYPES = TARGET_TYPES[:2]
MISSING_PENALTY = -1e10
CSV_COLUMNS = ["target_type", "bin_lo", "bin_hi", "mean", "se", "cohort_size"]


class TargetFileError(ValueError):
    pass


@dataclass(frozen=True)
class TargetBinSpec:
    adenoma_ages: tuple[int, ...] = (55, 60, 65, 70, 75, 80)
    incidence_bins: tuple[tuple[int, int], ...] = tuple((a, a + 4) for a in range(50, 85, 5))

    def __post_init__(self):
        ages = tuple(int(a) for a in self.adenoma_ages)
        bins = tuple((int(lo), int(hi)) for lo, hi in self.incidence_bins)
        object.__setattr__(self, "adenoma_ages", ages)
        object.__setattr__(self, "incidence_bins", bins)
        if not ages or not bins:
            raise ValueError("need at least one adenoma age and one incidence bin")
        if any(a < 50 for a in ages) or list(ages) != sorted(set(ages)):
            raise ValueError(f"adenoma ages must be distinct, ordered and >= 50: {ages}")
        prev_hi = 49
        for lo, hi in bins:
            if lo > hi or lo <= prev_hi:
                raise ValueError(f"incidence bins must be ordered and non-overlapping: {bins}")
            prev_hi = hi

    @property
    def required_age_max(self) -> int:
        """Last age a simulation must reach to cover every bin."""
        return max(max(self.adenoma_ages), self.incidence_bins[-1][1] + 1)

    def positions(self, target_type: str) -> list[tuple[int, int]]:
        if target_type in ADENOMA_TYPES:
            return [(a, a) for a in self.adenoma_ages]
        return list(self.incidence_bins)

    def to_dict(self) -> dict:
        return {"adenoma_ages": list(self.adenoma_ages), "incidence_bins": [list(b) for b in self.incidence_bins]}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetBinSpec":
        return cls(tuple(d["adenoma_ages"]), tuple(tuple(b) for b in d["incidence_bins"]))


@dataclass(frozen=True)
class CalibrationTarget:
    target_type: str
    bin_lo: int
    bin_hi: int
    mean: float
    se: float
    cohort_size: int

    def __post_init__(self):
        if self.target_type not in TARGET_TYPES:
            raise ValueError(f"unknown target type {self.target_type!r}")
        if not (math.isfinite(self.se) and self.se > 0):
            raise ValueError(f"{self.target_type} {self.bin_lo}-{self.bin_hi}: se must be > 0, got {self.se}")
        if not math.isfinite(self.mean):
            raise ValueError(f"{self.target_type} {self.bin_lo}-{self.bin_hi}: mean must be finite")
        if self.target_type in ADENOMA_TYPES and not 0 <= self.mean <= 1:
            raise ValueError(f"{self.target_type} {self.bin_lo}: mean must lie in [0, 1], got {self.mean}")


@dataclass(frozen=True)
class TargetSet:
    targets: tuple[CalibrationTarget, ...]
    bins: TargetBinSpec
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        present = {t.target_type for t in self.targets}
        missing = [t for t in TARGET_TYPES if t not in present]
        if missing:
            raise ValueError(f"target set lacks target types {missing}")
        index = []
        for t in self.targets:
            try:
                pos = self.bins.positions(t.target_type).index((t.bin_lo, t.bin_hi))
            except ValueError:
                raise ValueError(f"target {t.target_type} {t.bin_lo}-{t.bin_hi} does not match the bin spec") from None
            index.append((TARGET_TYPES.index(t.target_type), pos))
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def means(self) -> np.ndarray:
        return np.array([t.mean for t in self.targets])

    @property
    def ses(self) -> np.ndarray:
        return np.array([t.se for t in self.targets])

    def select(self, predicate) -> "TargetSet":
        return TargetSet(tuple(t for t in self.targets if predicate(t)), self.bins, self.metadata)

    def predicted(self, phi: ModelPrediction) -> np.ndarray:
        """The entry of ``phi`` matching each target, in target order."""
        by_type = [np.asarray(phi.by_type(name), dtype=float) for name in TARGET_TYPES]
        return np.array([by_type[k][j] for k, j in self._index])

    def __eq__(self, other):
        return isinstance(other, TargetSet) and self.targets == other.targets and self.bins == other.bins


def _replicate(rep: tuple[int, int], params, life_table, n_adenoma, n_cancer, bins, master_seed, age_max):
    _, draw = rep
    adenoma = epi_outputs(
        simulate_cohort(params, life_table, n_adenoma, master_seed, draw, age_max=age_max,
                        purpose="targets-adenoma"), bins)
    cancer = epi_outputs(
        simulate_cohort(params, life_table, n_cancer, master_seed, draw, age_max=age_max,
                        purpose="targets-cancer"), bins)
    return np.concatenate([adenoma.adenoma_prevalence, adenoma.proportion_small,
                           cancer.incidence_early, cancer.incidence_late])


def generate_targets(true_params: NaturalHistoryParams, life_table: LifeTable, reps: int = 100,
                     n_adenoma: int = 500, n_cancer: int = 100_000, bins: TargetBinSpec | None = None,
                     master_seed: int = 20190101, se_mode: str = "sd", workers: int = 1,
                     draw_indices: Sequence[int] | None = None) -> TargetSet:
    """Confirmatory simulation: replicate the model at known parameters and summarise.

    ``se_mode='sd'`` uses the across-replication standard deviation of the
    single-cohort estimates; ``'sem'`` divides it by sqrt(reps).
    """
    if reps < 2:
        raise ValueError(f"need at least 2 replications to estimate an SE, got {reps}")
    if se_mode not in ("sd", "sem"):
        raise ValueError(f"se_mode must be 'sd' or 'sem', got {se_mode!r}")
    bins = bins or TargetBinSpec()
    draws = list(range(reps)) if draw_indices is None else list(draw_indices)
    if len(draws) != reps:
        raise ValueError("draw_indices must have one entry per replication")
    fn = partial(_replicate, params=true_params, life_table=life_table, n_adenoma=n_adenoma,
                 n_cancer=n_cancer, bins=bins, master_seed=master_seed, age_max=bins.required_age_max)
    values = np.array(parallel.pmap(fn, list(enumerate(draws)), workers=workers))

    targets = []
    col = 0
    for ttype in TARGET_TYPES:
        size = n_adenoma if ttype in ADENOMA_TYPES else n_cancer
        for lo, hi in bins.positions(ttype):
            v = values[:, col]
            col += 1
            if np.any(np.isnan(v)):
                warnings.warn(f"dropping {ttype} {lo}-{hi}: undefined in {int(np.isnan(v).sum())} replication(s)")
                continue
            sd = float(np.std(v, ddof=1))
            se = sd / math.sqrt(reps) if se_mode == "sem" else sd
            if not se > 0:
                raise ValueError(f"{ttype} {lo}-{hi}: replications have zero variance; SE undefined")
            targets.append(CalibrationTarget(ttype, lo, hi, float(np.mean(v)), se, size))
    meta = {
        "true_params": true_params.as_dict(),
        "reps": reps,
        "n_adenoma": n_adenoma,
        "n_cancer": n_cancer,
        "master_seed": master_seed,
        "se_mode": se_mode,
        "bins": bins.to_dict(),
    }
    return TargetSet(tuple(targets), bins, meta)


def log_likelihood_terms(phi: ModelPrediction, targets: TargetSet) -> np.ndarray:
    """Per-target log density, in target order.

    An undefined proportion-small prediction contributes ``MISSING_PENALTY``;
    any other undefined or infinite prediction contributes -inf.
    """
    pred = targets.predicted(phi)
    y, se = targets.means, targets.ses
    kinds = np.array([t.target_type for t in targets.targets])
    with np.errstate(invalid="ignore"):
        z = (y - pred) / se
        out = -0.5 * z * z - np.log(se) - 0.5 * math.log(2 * math.pi)
    nan = np.isnan(pred)
    out[nan & (kinds == "proportion_small")] = MISSING_PENALTY
    out[(nan & (kinds != "proportion_small")) | np.isinf(pred)] = -math.inf
    return out


def log_likelihood(phi: ModelPrediction, targets: TargetSet) -> float:
    """Sum of independent normal log densities of the targets given predictions."""
    return float(np.sum(log_likelihood_terms(phi, targets)))


@dataclass(frozen=True)
class CalibrationLikelihood:
    """Log-likelihood of the calibrated parameters, as a picklable callable.

    ``mode='expected'`` evaluates the model-predicted outputs as exact
    expectations over individual-level randomness. ``mode='microsim'``
    simulates one cohort of ``n_lik`` individuals; every parameter set uses
    the same random streams, so the estimate is a deterministic function of
    the parameters.
    """

    targets: TargetSet
    life_table: LifeTable
    base: NaturalHistoryParams = NaturalHistoryParams()
    mode: str = "expected"
    n_lik: int = 10_000
    master_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("expected", "microsim"):
            raise ValueError(f"likelihood mode must be 'expected' or 'microsim', got {self.mode!r}")

    def predict(self, theta_u) -> ModelPrediction:
        params = self.base.with_calibrated(theta_u)
        table = transition_table(params, self.life_table, 50, self.targets.bins.required_age_max)
        init = initial_state_distribution(params)
        if self.mode == "expected":
            cohort = expected_outputs(table, init)
        else:
            cohort = simulate_states(table, init, self.n_lik, self.master_seed, 0, purpose="likelihood")
        return epi_outputs(cohort, self.targets.bins)

    def __call__(self, theta_u) -> float:
        theta_u = np.asarray(theta_u, dtype=float)
        if not np.all(np.isfinite(theta_u)):
            return -math.inf
        try:
            phi = self.predict(theta_u)
        except DomainError:
            return -math.inf
        return log_likelihood(phi, self.targets)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def write_targets(ts: TargetSet, path, extra_meta: dict | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in ts.targets:
            w.writerow([t.target_type, t.bin_lo, t.bin_hi, _fmt(float(t.mean)), _fmt(float(t.se)), t.cohort_size])
    meta = {**ts.metadata, "bins": ts.bins.to_dict(), **(extra_meta or {})}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_targets(path) -> TargetSet:
    path = Path(path)
    targets = []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None:
            raise TargetFileError(f"{path}: empty target file")
        if header != CSV_COLUMNS:
            raise TargetFileError(f"{path}: expected columns {CSV_COLUMNS}, got {header}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(CSV_COLUMNS):
                    raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
                targets.append(CalibrationTarget(row[0], int(row[1]), int(row[2]), float(row[3]),
                                                 float(row[4]), int(row[5])))
            except ValueError as exc:
                raise TargetFileError(f"{path}: row {rowno}: {exc}") from exc
    if not targets:
        raise TargetFileError(f"{path}: no targets")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if "bins" in meta:
        bins = TargetBinSpec.from_dict(meta["bins"])
    else:
        ages = sorted({t.bin_lo for t in targets if t.target_type in ADENOMA_TYPES})
        inc = sorted({(t.bin_lo, t.bin_hi) for t in targets if t.target_type not in ADENOMA_TYPES})
        bins = TargetBinSpec(tuple(ages), tuple(inc))
    try:
        return TargetSet(tuple(targets), bins, meta)
    except ValueError as exc:
        raise TargetFileError(f"{path}: {exc}") from exc
