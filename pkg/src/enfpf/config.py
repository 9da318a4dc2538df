"""Experiment configuration: JSON schema, validation and round-tripping.

A config file is a JSON object. Unknown keys are rejected at every level and
validation errors name the offending field path. Omitted fields take the
defaults documented on each model below.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from . import dynamics
from .errors import ContractViolation

EXPERIMENTS = (
    "track_stats",
    "invariant_accel",
    "moment_ablation",
    "l96_accel",
    "ks_accel",
    "pullback",
    "kb_verify",
)

DEFAULT_DT = {
    "lorenz63": 0.05,
    "lorenz63_qp": 0.05,
    "lorenz96": 0.05,
    "kuramoto_sivashinsky": 0.25,
    "ornstein_uhlenbeck": 0.01,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    """Model name, parameter overrides and stepper dt (per-model default if omitted)."""

    name: Literal["lorenz63", "lorenz63_qp", "lorenz96", "kuramoto_sivashinsky", "ornstein_uhlenbeck"]
    params: dict[str, float] = Field(default_factory=dict)
    dt: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _buildable(self):
        try:
            build_model(self)
        except (ContractViolation, TypeError) as exc:
            raise ValueError(f"invalid model parameters: {exc}") from exc
        return self

    @property
    def step(self) -> float:
        return self.dt if self.dt is not None else DEFAULT_DT[self.name]


class ObservationConfig(_Strict):
    """Observed marginal moments and the noise level.

    ``variables=None`` observes every state variable. ``gamma_fraction`` is
    the observation standard deviation as a fraction of each statistic's
    temporal standard deviation.
    """

    variables: Optional[list[int]] = None
    orders: list[int] = Field(default_factory=lambda: [1, 2], min_length=1)
    cross: list[tuple[int, int]] = Field(default_factory=list)
    gamma_fraction: float = Field(default=0.2, gt=0)

    @field_validator("orders")
    @classmethod
    def _orders(cls, v):
        if any(k not in (1, 2, 3) for k in v):
            raise ValueError("moment orders must be 1, 2 or 3")
        return v

    @field_validator("variables")
    @classmethod
    def _variables(cls, v):
        if v is not None and (not v or min(v) < 0):
            raise ValueError("variables must be a non-empty list of indices >= 0")
        return v


class ArmConfig(_Strict):
    """One arm of an experiment. Unset fields inherit the experiment-level values."""

    label: str
    filtered: bool = True
    observation: Optional[ObservationConfig] = None
    use_score: Optional[bool] = None


class KBConfig(_Strict):
    """Parameters of the density-space Kalman-Bucy verification.

    The equivalence run uses sigma = 0 on ``[-half_width, half_width]`` with
    ``n`` cells and is repeated on ``coarse_n`` cells to show the discrepancy
    shrinking under refinement. The normalization run uses
    ``sigma = normalization_sigma`` on a domain ``normalization_width_std`` stationary
    standard deviations wide, with the diffusive dt 0.25 h^2 / sigma^2.
    """

    theta: float = Field(default=1.0, gt=0)
    gamma: float = Field(default=0.1, gt=0)
    T: float = Field(default=2.0, gt=0)
    dt: float = Field(default=1e-3, gt=0)
    n: int = Field(default=400, ge=50)
    half_width: float = Field(default=4.0, gt=0)
    rank: int = Field(default=4, ge=1)
    coarse_n: int = Field(default=200, ge=50)
    normalization_sigma: float = Field(default=1.0, gt=0)
    normalization_n: int = Field(default=200, ge=50)
    normalization_steps: int = Field(default=2000, ge=1)
    normalization_width_std: float = Field(default=8.0, gt=0)
    n_samples: int = Field(default=100, ge=1)
    nonlinear: bool = True


class ExperimentConfig(_Strict):
    """Declarative description of one experiment.

    Cycle 0 is the initial ensemble. Cycle ``c`` is assimilated iff
    ``start < c <= end`` for ``filter_window = (start, end)``; ``start == end``
    disables assimilation. ``filter_window`` defaults to every cycle.
    ``score_window`` (inclusive) is the range of cycles averaged in the
    summary; it defaults to every cycle after 0.
    """

    experiment: Literal[
        "track_stats", "invariant_accel", "moment_ablation", "l96_accel", "ks_accel", "pullback", "kb_verify"
    ]
    model: ModelConfig = Field(default_factory=lambda: ModelConfig(name="ornstein_uhlenbeck"))
    J: int = Field(default=100, ge=2)
    J_ref: int = Field(default=100, ge=2)
    n_cycles: int = Field(default=0, ge=0)
    tau: Optional[float] = Field(default=None, gt=0)
    filter_window: Optional[tuple[int, int]] = None
    score_window: Optional[tuple[int, int]] = None
    observation: ObservationConfig = Field(default_factory=ObservationConfig)
    arms: list[ArmConfig] = Field(
        default_factory=lambda: [ArmConfig(label="filtered"), ArmConfig(label="unfiltered", filtered=False)]
    )
    use_score: bool = False
    gain_mode: Literal["direct", "square_root"] = "direct"
    seed: int = Field(default=0, ge=0)
    replicates: int = Field(default=1, ge=1)
    spinup_time: float = Field(default=500.0, ge=0)
    cold_start_fraction: float = Field(default=0.05, gt=0)
    ergodic_time: float = Field(default=2000.0, gt=0)
    ergodic_burn: float = Field(default=100.0, ge=0)
    calibration_cycles: int = Field(default=1500, ge=2)
    noisy_observations: Optional[bool] = None
    reach_factor: float = Field(default=1.2, gt=1)
    reach_smoothing: int = Field(default=1, ge=1)
    kb: Optional[KBConfig] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.experiment == "kb_verify":
            if self.kb is None:
                object.__setattr__(self, "kb", KBConfig())
            return self
        if self.tau is None:
            raise ValueError("tau is required for filtering experiments")
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be at least 1 for filtering experiments")
        if not self.arms:
            raise ValueError("at least one arm is required")
        labels = [a.label for a in self.arms]
        if len(set(labels)) != len(labels):
            raise ValueError("arm labels must be unique")
        return self

    @field_validator("tau")
    @classmethod
    def _tau_multiple(cls, v, info: ValidationInfo):
        model = info.data.get("model")
        if v is not None and model is not None:
            try:
                dynamics.substeps_for(v, model.step)
            except ContractViolation as exc:
                raise ValueError(str(exc)) from exc
        return v

    @field_validator("filter_window", "score_window")
    @classmethod
    def _window_inside(cls, v, info: ValidationInfo):
        if v is None:
            return v
        if not 0 <= v[0] <= v[1]:
            raise ValueError("window must satisfy 0 <= start <= end")
        n_cycles = info.data.get("n_cycles")
        if n_cycles is not None and v[1] > n_cycles:
            raise ValueError(f"end {v[1]} exceeds n_cycles={n_cycles}")
        return v

    @property
    def window(self) -> tuple[int, int]:
        return self.filter_window if self.filter_window is not None else (0, self.n_cycles)

    @property
    def scoring(self) -> tuple[int, int]:
        return self.score_window if self.score_window is not None else (min(1, self.n_cycles), self.n_cycles)

    @property
    def perturb_observations(self) -> bool:
        """Add N(0, gamma) noise to each observation; defaults to True only for time-varying truths."""
        if self.noisy_observations is not None:
            return self.noisy_observations
        return self.experiment in ("track_stats", "pullback")

    def arm_observation(self, arm: ArmConfig) -> ObservationConfig:
        return arm.observation if arm.observation is not None else self.observation

    def arm_score(self, arm: ArmConfig) -> bool:
        return self.use_score if arm.use_score is None else arm.use_score


def build_model(cfg: ModelConfig) -> dynamics.ModelSystem:
    p = dict(cfg.params)
    if cfg.name in ("lorenz63", "lorenz63_qp"):
        return dynamics.lorenz63(**p, forced=cfg.name == "lorenz63_qp")
    if cfg.name == "lorenz96":
        return dynamics.lorenz96(**p)
    if cfg.name == "kuramoto_sivashinsky":
        return dynamics.kuramoto_sivashinsky(**p)
    return dynamics.ornstein_uhlenbeck(**p)


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or validated."""


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            path = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{path}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dump_config(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def bundled_config_dir() -> Path:
    return Path(__file__).with_name("configs")


def bundled_configs() -> dict:
    """Map of bundled config name (file stem) to path."""
    return {p.stem: p for p in sorted(bundled_config_dir().glob("*.json"))}
