"""Run configuration: a strict YAML document validated with pydantic."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from crcvoi.imis import ImisConfig, UNIQUE_FRACTION
from crcvoi.nathist import LifeTable, NaturalHistoryParams, bundled_life_table
from crcvoi.psa import EXTERNAL_INTERVALS, UncertaintyApproach
from crcvoi.screening import CeaParams, ScreeningStrategy
from crcvoi.stats import DistributionSpec, PriorSet, default_priors, fit_from_interval
from crcvoi.targets import TargetBinSpec


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DistributionConfig(_Strict):
    """Either explicit parameters or a 95% interval to fit."""

    family: Literal["beta", "lognormal", "normal", "uniform", "fixed"]
    params: Optional[dict[str, float]] = None
    lb: Optional[float] = None
    ub: Optional[float] = None
    upper: Optional[float] = None

    @model_validator(mode="after")
    def _one_form(self):
        if (self.params is None) == (self.lb is None or self.ub is None):
            raise ValueError("give either params or both lb and ub")
        self.to_spec()
        return self

    def to_spec(self) -> DistributionSpec:
        if self.params is not None:
            return DistributionSpec.from_dict({"family": self.family, **self.params, "upper": self.upper})
        return fit_from_interval(self.family, self.lb, self.ub, upper=self.upper)


def _default_priors() -> dict[str, DistributionConfig]:
    return {name: DistributionConfig(family=s.family, params=s.param_dict)
            for name, s in zip(NaturalHistoryParams.CALIBRATED, default_priors())}


def _default_external() -> dict[str, DistributionConfig]:
    return {k: DistributionConfig(family=f, lb=lb, ub=ub, upper=cap) for k, (f, lb, ub, cap) in EXTERNAL_INTERVALS.items()}


class ModelConfig(_Strict):
    lam7: float = NaturalHistoryParams.lam7
    lam8: float = NaturalHistoryParams.lam8
    life_table: Optional[str] = None
    age_max: int = Field(100, ge=86)


class TargetsConfig(_Strict):
    adenoma_ages: list[int] = list(TargetBinSpec().adenoma_ages)
    incidence_bins: list[tuple[int, int]] = list(TargetBinSpec().incidence_bins)
    reps: int = Field(100, ge=2)
    n_adenoma: int = Field(500, ge=1)
    n_cancer: int = Field(100_000, ge=1)
    se_mode: Literal["sd", "sem"] = "sd"
    true_params: dict[str, float] = {n: getattr(NaturalHistoryParams, n) for n in NaturalHistoryParams.CALIBRATED}

    @model_validator(mode="after")
    def _check(self):
        unknown = set(self.true_params) - set(NaturalHistoryParams.CALIBRATED)
        if unknown:
            raise ValueError(f"unknown true_params {sorted(unknown)}")
        TargetBinSpec(tuple(self.adenoma_ages), tuple(self.incidence_bins))
        return self

    def bins(self) -> TargetBinSpec:
        return TargetBinSpec(tuple(self.adenoma_ages), tuple(self.incidence_bins))


class ImisSection(_Strict):
    n0: int = 1000
    b: int = 250
    j: int = 5000
    max_iterations: int = 200
    stop_fraction: float = UNIQUE_FRACTION
    n_lik: int = 10_000
    likelihood_mode: Literal["expected", "microsim"] = "expected"
    transform: bool = True
    n_optimizations: int = Field(1, ge=0)
    opt_max_evals: int = Field(20_000, ge=1)
    opt_hessian_step: float = Field(0.05, gt=0)

    @model_validator(mode="after")
    def _check(self):
        self.to_imis(0).validate()
        return self

    def to_imis(self, seed: int) -> ImisConfig:
        return ImisConfig(**self.model_dump(), master_seed=seed)


class StrategyConfig(_Strict):
    start_age: int = 50
    stop_age: int = 85
    routine_interval: int = 10
    surveillance_low: int = 5
    surveillance_high: int = 3
    fp_effect: Literal["surveillance", "none"] = "surveillance"
    surveillance_mode: Literal["replace", "supplement"] = "replace"

    @model_validator(mode="after")
    def _check(self):
        self.to_strategy()
        return self

    def to_strategy(self) -> ScreeningStrategy:
        return ScreeningStrategy(kind="colonoscopy", **self.model_dump())


class CeaConfig(_Strict):
    point: dict[str, float] = {k: v for k, v in CeaParams().as_dict().items() if k != "discount_rate"}
    discount_rate: float = Field(0.03, ge=0)
    external: dict[str, DistributionConfig] = Field(default_factory=_default_external)
    strategy: StrategyConfig = StrategyConfig()

    @model_validator(mode="after")
    def _check(self):
        unknown = set(self.external) - set(CeaParams.SAMPLED)
        if unknown:
            raise ValueError(f"unknown external parameters {sorted(unknown)}")
        missing = set(CeaParams.SAMPLED) - set(self.external)
        if missing:
            raise ValueError(f"missing external parameters {sorted(missing)}")
        self.params()
        return self

    def params(self) -> CeaParams:
        return CeaParams(**{**self.point, "discount_rate": self.discount_rate})

    def specs(self) -> dict[str, DistributionSpec]:
        return {k: self.external[k].to_spec() for k in CeaParams.SAMPLED}


class PsaConfig(_Strict):
    approaches: list[str] = [a.value for a in UncertaintyApproach]
    n_draws: int = Field(1000, ge=2)
    n_individuals: int = Field(10_000, ge=1)
    wtp_min: float = 0.0
    wtp_max: float = 150_000.0
    wtp_step: float = Field(1000.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if not self.approaches:
            raise ValueError("approach list is empty")
        for a in self.approaches:
            UncertaintyApproach.parse(a)
        if self.wtp_max < self.wtp_min:
            raise ValueError("wtp_max must be >= wtp_min")
        return self

    def approach_list(self) -> list[UncertaintyApproach]:
        return [UncertaintyApproach.parse(a) for a in self.approaches]

    def wtp_grid(self):
        import numpy as np

        n = int(round((self.wtp_max - self.wtp_min) / self.wtp_step))
        return self.wtp_min + self.wtp_step * np.arange(n + 1)


class ValidateConfig(_Strict):
    n_per_draw: int = Field(100_000, ge=1)
    max_draws: Optional[int] = Field(500, ge=1)


class SeedsConfig(_Strict):
    master: int = Field(20190101, ge=0)


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    priors: dict[str, DistributionConfig] = Field(default_factory=_default_priors)
    targets: TargetsConfig = TargetsConfig()
    imis: ImisSection = ImisSection()
    cea: CeaConfig = CeaConfig()
    psa: PsaConfig = PsaConfig()
    validate_: ValidateConfig = Field(ValidateConfig(), alias="validate")
    seeds: SeedsConfig = SeedsConfig()
    base_dir: str = Field(".", exclude=True)

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _check(self):
        if set(self.priors) != set(NaturalHistoryParams.CALIBRATED):
            raise ValueError(f"priors must cover exactly {list(NaturalHistoryParams.CALIBRATED)}")
        self.prior_set()
        if self.model.life_table is not None and not self._resolve(self.model.life_table).is_file():
            raise ValueError(f"life table file not found: {self.model.life_table}")
        if self.targets.bins().required_age_max > self.model.age_max:
            raise ValueError("model.age_max is below the last target age")
        return self

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    # -- builders ---------------------------------------------------------------

    def prior_set(self) -> PriorSet:
        return PriorSet(tuple(self.priors[n].to_spec() for n in NaturalHistoryParams.CALIBRATED))

    def life_table(self) -> LifeTable:
        if self.model.life_table is None:
            return bundled_life_table()
        return LifeTable.from_csv(self._resolve(self.model.life_table))

    def base_nh(self) -> NaturalHistoryParams:
        return NaturalHistoryParams(lam7=self.model.lam7, lam8=self.model.lam8)

    def true_nh(self) -> NaturalHistoryParams:
        return NaturalHistoryParams(**{**self.base_nh().as_dict(), **self.targets.true_params})

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return self.model_copy(update={"seeds": SeedsConfig(master=seed)})

    def canonical(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return self.seeds.master


def _format_error(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        where = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{where}: {e['msg']}")
    return "; ".join(lines)


def load_config(path: str | Path | None) -> RunConfig:
    """Read and validate a YAML config; ``None`` gives the bundled default."""
    if path is None:
        text = resources.files("crcvoi.data").joinpath("default_config.yaml").read_text()
        base = "."
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        base = str(path.parent)
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return RunConfig.model_validate({**raw, "base_dir": base})
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
