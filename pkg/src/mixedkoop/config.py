"""Run configuration: one YAML file, validated strictly (unknown keys are errors)."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .adapkoopnet import ModelConfig
from .core import LeadProfile
from .mpc import ConstraintSet, MpcWeights
from .sim import Scenario, SWEEP_AXES


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    source: Literal["synthetic", "csv"] = "synthetic"
    csv_path: Path | None = None
    schema_map: dict[str, str] = Field(default_factory=dict)
    dataset_dir: Path | None = None
    n_runs: int = Field(6, ge=1)
    n_vehicles: int = Field(8, ge=2)
    truck_fraction: float = Field(0.25, ge=0, le=1)
    duration: float = Field(180.0, gt=0)
    stride: int = Field(6, ge=1)
    min_duration: float = Field(30.0, gt=0)


class ModelSection(_Strict):
    variant: Literal["adapkoopnet", "koopnet", "s-adapkoopnet", "edmd"] = "adapkoopnet"
    scale: Literal["desk", "paper"] = "desk"
    context: int | None = Field(None, ge=1)
    horizon: int = Field(15, ge=1)
    epochs: int | None = Field(None, ge=1)
    overrides: dict[str, float | int | str] = Field(default_factory=dict)
    edmd_centers: int = Field(20, ge=1)
    checkpoint: Path | None = None

    def model_config_for(self, seed: int) -> ModelConfig:
        variant = "adapkoopnet" if self.variant == "edmd" else self.variant
        over = dict(self.overrides)
        if self.context is not None:
            over["context"] = self.context
        over["horizon"] = self.horizon
        if self.epochs is not None:
            over["max_epochs"] = self.epochs
        over["seed"] = seed
        try:
            if self.scale == "desk":
                return ModelConfig.desk(variant, **over)
            base = ModelConfig.paper(variant).to_dict()
            base.update(over)
            return ModelConfig(**base)
        except TypeError as exc:
            raise ConfigError(f"model.overrides: {exc}") from None


class ProfileSection(_Strict):
    base_speed: float = 25.0
    amplitude: float = 5.0
    angular_rate: float = 0.1667
    onset: float = 4.8
    duration: float = 180.0


class ScenarioSection(_Strict):
    n_vehicles: int = Field(10, ge=1)
    penetration: float = Field(0.2, ge=0, le=1)
    truck_fraction: float = Field(0.2, ge=0, le=1)
    placement: Literal["random", "front", "middle", "rear", "explicit"] = "random"
    roster: str | None = None
    comm_mode: Literal["full", "degraded"] = "full"
    controllers: int | None = Field(None, ge=0)
    partition: Literal["auto", "global", "segments"] = "auto"
    duration: float = Field(180.0, gt=0)
    dt: float = Field(0.12, gt=0)
    profile: ProfileSection = Field(default_factory=ProfileSection)

    def build(self, seed: int) -> Scenario:
        d = self.model_dump()
        d["profile"] = LeadProfile(**d["profile"])
        return Scenario(seed=seed, **d)


class MpcSection(_Strict):
    q_cav_v: float = Field(10.0, gt=0)
    q_hdv_dv: float = Field(20.0, gt=0)
    r_u: float = Field(2.0, gt=0)
    horizon: int = Field(10, ge=1)


class ConstraintSection(_Strict):
    h_min: float = 20.0
    h_max: float = 150.0
    v_min: float = 0.0
    v_max: float = 150.0
    a_min: float = -6.0
    a_max: float = 6.0
    u_min: float = -6.0
    u_max: float = 6.0
    slack_weight: float = Field(1e4, gt=0)


class SweepSection(_Strict):
    axis: str = "penetration"
    values: list[float | int | str] = Field(default_factory=lambda: [0.0, 0.1, 0.2])
    repeats: int = Field(1, ge=1)

    @field_validator("axis")
    @classmethod
    def _axis(cls, v: str) -> str:
        if v not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {v!r}; allowed: {', '.join(SWEEP_AXES)}")
        return v


class RunConfig(_Strict):
    seed: int = 0
    out: Path = Path("runs/default")
    jobs: int = Field(1, ge=1)
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    mpc: MpcSection = Field(default_factory=MpcSection)
    constraints: ConstraintSection = Field(default_factory=ConstraintSection)
    sweep: SweepSection = Field(default_factory=SweepSection)

    # resolved locations
    @property
    def dataset_dir(self) -> Path:
        return self.data.dataset_dir or self.out / "dataset"

    @property
    def checkpoint(self) -> Path:
        return self.model.checkpoint or self.out / "model.ckpt"

    def weights(self) -> MpcWeights:
        return MpcWeights(**self.mpc.model_dump())

    def constraint_set(self) -> ConstraintSet:
        try:
            return ConstraintSet(**self.constraints.model_dump())
        except ValueError as exc:
            raise ConfigError(f"constraints: {exc}") from None

    def resolve(self, base: Path) -> "RunConfig":
        """Make every relative path absolute against ``base`` (the config file's directory)."""
        def fix(p):
            return None if p is None else (p if p.is_absolute() else (base / p).resolve())
        upd = self.model_copy(deep=True)
        upd.out = fix(upd.out)
        upd.data.csv_path = fix(upd.data.csv_path)
        upd.data.dataset_dir = fix(upd.data.dataset_dir)
        upd.model.checkpoint = fix(upd.model.checkpoint)
        return upd


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read and validate a config; ``overrides`` (from CLI flags) take precedence."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = path.resolve().parent
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"  {'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n" + "\n".join(lines)) from None
    return cfg.resolve(base if path is not None else Path.cwd())
