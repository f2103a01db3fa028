"""Natural history of colorectal cancer as an age-dependent Markov process.

Nine health states, a Weibull hazard for adenoma onset, constant progression
rates, and life-table background mortality. The annual transition matrices
are exact for intensities held constant within each year of age.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when an input lies outside the mathematical domain of an operation."""


class HealthState(IntEnum):
    NORMAL = 0
    SMALL_ADENOMA = 1
    LARGE_ADENOMA = 2
    PRECLINICAL_EARLY = 3
    PRECLINICAL_LATE = 4
    CLINICAL_EARLY = 5
    CLINICAL_LATE = 6
    CRC_DEATH = 7
    OTHER_DEATH = 8


N_STATES = len(HealthState)
ALIVE_STATES = tuple(s for s in HealthState if s < HealthState.CRC_DEATH)
DEATH_STATES = (HealthState.CRC_DEATH, HealthState.OTHER_DEATH)
# states still at risk of a first clinical diagnosis
AT_RISK_STATES = (
    HealthState.NORMAL,
    HealthState.SMALL_ADENOMA,
    HealthState.LARGE_ADENOMA,
    HealthState.PRECLINICAL_EARLY,
    HealthState.PRECLINICAL_LATE,
)
CLINICAL_STATES = (HealthState.CLINICAL_EARLY, HealthState.CLINICAL_LATE)

# Where symptomatic early preclinical cancers go. The parameter table labels
# this rate "to clinical late"; the model text and the state diagram route it
# to clinical early. Swap to HealthState.CLINICAL_LATE for the other reading.
LAMBDA5_DESTINATION = HealthState.CLINICAL_EARLY

# fixed prevalence of preclinical cancer in the starting cohort
PRECLINICAL_EARLY_PREVALENCE = 0.0012
PRECLINICAL_LATE_PREVALENCE = 0.0008


@dataclass(frozen=True)
class NaturalHistoryParams:
    """The eleven natural-history parameters.

    The first nine are unobservable and calibrated; ``lam7`` and ``lam8``
    (stage-specific CRC mortality) are external.
    """

    p_adeno: float = 0.25
    p_small: float = 0.71
    l: float = 2.86e-6
    gamma: float = 2.78
    lam2: float = 0.0346
    lam3: float = 0.0215
    lam4: float = 0.3697
    lam5: float = 0.2382
    lam6: float = 0.4582
    lam7: float = 0.0302
    lam8: float = 0.2099

    CALIBRATED = ("p_adeno", "p_small", "l", "gamma", "lam2", "lam3", "lam4", "lam5", "lam6")
    EXTERNAL = ("lam7", "lam8")

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise DomainError(f"{f.name} must be finite, got {v}")
        for name in ("p_adeno", "p_small"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        for name in ("l", "gamma"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("lam2", "lam3", "lam4", "lam5", "lam6", "lam7", "lam8"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def calibrated_mask(self) -> np.ndarray:
        names = [f.name for f in fields(self)]
        return np.array([n in self.CALIBRATED for n in names])

    def calibrated_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.CALIBRATED], dtype=float)

    def with_calibrated(self, theta: Sequence[float]) -> "NaturalHistoryParams":
        if len(theta) != len(self.CALIBRATED):
            raise ValueError(f"expected {len(self.CALIBRATED)} calibrated values, got {len(theta)}")
        return replace(self, **{n: float(v) for n, v in zip(self.CALIBRATED, theta)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LifeTable:
    """Annual other-cause mortality rates by integer age."""

    ages: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=int)
        rates = np.asarray(self.rates, dtype=float)
        if ages.ndim != 1 or ages.shape != rates.shape or ages.size == 0:
            raise ValueError("life table needs matching non-empty 1-d ages and rates")
        if np.any(np.diff(ages) != 1):
            raise ValueError("life table ages must be contiguous and increasing")
        if np.any(~np.isfinite(rates)) or np.any(rates < 0):
            raise ValueError("life table rates must be finite and >= 0")
        ages.setflags(write=False)
        rates.setflags(write=False)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "rates", rates)

    @property
    def min_age(self) -> int:
        return int(self.ages[0])

    @property
    def max_age(self) -> int:
        return int(self.ages[-1])

    def rate(self, age: int) -> float:
        if not self.min_age <= age <= self.max_age:
            raise ValueError(f"age {age} outside life table range [{self.min_age}, {self.max_age}]")
        return float(self.rates[int(age) - self.min_age])

    def scaled(self, factor: float) -> "LifeTable":
        return LifeTable(self.ages.copy(), self.rates * factor)

    @classmethod
    def constant(cls, rate: float, min_age: int = 0, max_age: int = 110) -> "LifeTable":
        ages = np.arange(min_age, max_age + 1)
        return cls(ages, np.full(ages.shape, float(rate)))

    @classmethod
    def gompertz(cls, a0: float = 1e-4, b: float = 0.085, pivot: float = 30.0,
                 min_age: int = 0, max_age: int = 110) -> "LifeTable":
        ages = np.arange(min_age, max_age + 1)
        return cls(ages, a0 * np.exp(b * (ages - pivot)))

    @classmethod
    def from_csv(cls, path) -> "LifeTable":
        ages, rates = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(row for row in fh if not row.startswith("#"))
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["age", "rate"]:
                raise ValueError(f"{path}: expected header 'age,rate'")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    ages.append(int(row[0]))
                    rates.append(float(row[1]))
                except (ValueError, IndexError) as exc:
                    raise ValueError(f"{path}: malformed row {lineno}: {row}") from exc
        return cls(np.array(ages), np.array(rates))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("age,rate\n")
            for a, r in zip(self.ages, self.rates):
                fh.write(f"{int(a)},{float(r)!r}\n")


def bundled_life_table() -> LifeTable:
    """Synthetic Gompertz table shipped with the package (ages 0-110)."""
    with resources.as_file(resources.files("crcvoi.data") / "life_table_gompertz.csv") as p:
        return LifeTable.from_csv(Path(p))


def weibull_hazard(l: float, gamma: float, a):
    """Weibull hazard ``l * gamma * a**(gamma - 1)``; accepts scalar or array ages."""
    if not (math.isfinite(l) and math.isfinite(gamma)) or l <= 0 or gamma <= 0:
        raise DomainError(f"Weibull scale and shape must be finite and > 0 (l={l}, gamma={gamma})")
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise DomainError("age must be >= 0")
    out = l * gamma * np.power(a, gamma - 1.0)
    return float(out) if out.ndim == 0 else out


def build_intensity_matrix(params: NaturalHistoryParams, life_table: LifeTable, a: int,
                           hr_lambda1: float = 1.0) -> np.ndarray:
    """Intensity matrix Q(a) in 1/year.

    ``hr_lambda1`` multiplies only the Normal -> small adenoma rate (raised
    adenoma recurrence after polypectomy).
    """
    return _intensity_stack(params, life_table, np.array([a]), hr_lambda1)[0]


def _intensity_stack(params: NaturalHistoryParams, life_table: LifeTable, ages: np.ndarray,
                     hr_lambda1: float) -> np.ndarray:
    if hr_lambda1 < 0 or not math.isfinite(hr_lambda1):
        raise DomainError(f"hazard ratio must be finite and >= 0, got {hr_lambda1}")
    if ages.min() < life_table.min_age or ages.max() > life_table.max_age:
        raise ValueError(
            f"ages {ages.min()}-{ages.max()} outside life table range [{life_table.min_age}, {life_table.max_age}]"
        )
    S = HealthState
    q = np.zeros((len(ages), N_STATES, N_STATES))
    q[:, S.NORMAL, S.SMALL_ADENOMA] = hr_lambda1 * weibull_hazard(params.l, params.gamma, ages)
    q[:, S.SMALL_ADENOMA, S.LARGE_ADENOMA] = params.lam2
    q[:, S.LARGE_ADENOMA, S.PRECLINICAL_EARLY] = params.lam3
    q[:, S.PRECLINICAL_EARLY, S.PRECLINICAL_LATE] = params.lam4
    q[:, S.PRECLINICAL_EARLY, LAMBDA5_DESTINATION] += params.lam5
    q[:, S.PRECLINICAL_LATE, S.CLINICAL_LATE] = params.lam6
    q[:, S.CLINICAL_EARLY, S.CRC_DEATH] = params.lam7
    q[:, S.CLINICAL_LATE, S.CRC_DEATH] = params.lam8
    q[:, list(ALIVE_STATES), S.OTHER_DEATH] = life_table.rates[ages - life_table.min_age][:, None]
    diag = np.arange(N_STATES)
    q[:, diag, diag] = 0.0
    q[:, diag, diag] = -q.sum(axis=2)
    return q


def matrix_exponential(q: np.ndarray) -> np.ndarray:
    """exp(Q) by scaling and squaring around a truncated Taylor series.

    Works on a single square matrix or a stack ``(..., n, n)``. Rows of an
    intensity matrix map to rows summing to one; rounding-level negatives are
    clipped to zero.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim < 2 or q.shape[-1] != q.shape[-2]:
        raise DomainError(f"expected square matrix or stack of them, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DomainError("matrix contains non-finite entries")
    norm = float(np.max(np.abs(q).sum(axis=-1))) if q.size else 0.0
    squarings = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    a = q / (2.0 ** squarings)
    eye = np.broadcast_to(np.eye(q.shape[-1]), q.shape)
    result = eye.copy()
    term = eye.copy()
    for k in range(1, 40):
        term = term @ a / k
        result = result + term
        if np.max(np.abs(term)) < 1e-18:
            break
    for _ in range(squarings):
        result = result @ result
    return np.clip(result, 0.0, None)


@dataclass(frozen=True)
class TransitionMatrixTable:
    """Annual transition probability matrices P(a) for consecutive ages."""

    age_min: int
    matrices: np.ndarray  # (n_ages, 9, 9)

    @property
    def age_max(self) -> int:
        return self.age_min + len(self.matrices) - 1

    def __len__(self) -> int:
        return len(self.matrices)

    def at(self, age: int) -> np.ndarray:
        if not self.age_min <= age <= self.age_max:
            raise ValueError(f"age {age} outside table range [{self.age_min}, {self.age_max}]")
        return self.matrices[age - self.age_min]


def transition_table(params: NaturalHistoryParams, life_table: LifeTable, age_min: int = 50,
                     age_max: int = 100, hr_lambda1: float = 1.0) -> TransitionMatrixTable:
    if age_min > age_max:
        raise ValueError(f"age_min {age_min} > age_max {age_max}")
    p = matrix_exponential(_intensity_stack(params, life_table, np.arange(age_min, age_max + 1), hr_lambda1))
    p.setflags(write=False)
    return TransitionMatrixTable(age_min, p)
