"""Experiment configuration.

A run is described by one JSON document: the command, the seed, the domain and
the section for the command. Every model forbids unknown keys so a misspelt
rate constant fails loudly instead of silently taking its default.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from borderlab.dynamics.flow import VectorField, example_field
from borderlab.dynamics.pdmp import ROW_TOL, PdmpTriplet
from borderlab.dynamics.sde import ControlledCoefficients, from_field, ornstein_uhlenbeck, steered
from borderlab.geometry import (
    AnnulusDomain,
    BallDomain,
    IntervalDomain,
    SmoothDomain,
    ellipse_domain,
)
from borderlab.necessary import profile_field
from borderlab.phage import PhageRates

logger = logging.getLogger(__name__)

Command = Literal["flow", "zeta", "sde", "value", "pdmp", "phage"]
ExampleId = Literal["ex31", "ex32", "ex32_dominating", "ex35", "ex36", "ex37_polar"]

Point = list[float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_eps0(eps0: float | None, reach: float) -> None:
    if eps0 is not None and eps0 >= reach:
        raise ValueError(f"eps0 must be below the reach {reach:.6g}, got {eps0}")


# =============================================================================
# Domains
# =============================================================================


class IntervalSpec(StrictModel):
    kind: Literal["interval"]
    alpha: float
    beta: float
    eps0: PositiveFloat | None = None

    @model_validator(mode="after")
    def _ordered(self) -> IntervalSpec:
        if not self.alpha < self.beta:
            raise ValueError(f"interval requires alpha < beta, got [{self.alpha}, {self.beta}]")
        _check_eps0(self.eps0, (self.beta - self.alpha) / 2)
        return self

    def build(self) -> SmoothDomain:
        return IntervalDomain(self.alpha, self.beta, self.eps0)


class BallSpec(StrictModel):
    kind: Literal["ball"]
    center: Point
    radius: PositiveFloat
    eps0: PositiveFloat | None = None

    @model_validator(mode="after")
    def _tube(self) -> BallSpec:
        if not self.center:
            raise ValueError("ball center must not be empty")
        _check_eps0(self.eps0, self.radius)
        return self

    def build(self) -> SmoothDomain:
        return BallDomain(self.center, self.radius, self.eps0)


class AnnulusSpec(StrictModel):
    kind: Literal["annulus"]
    r_inner: PositiveFloat
    r_outer: PositiveFloat
    center: Point = Field(default_factory=lambda: [0.0, 0.0])
    eps0: PositiveFloat | None = None

    @model_validator(mode="after")
    def _ordered(self) -> AnnulusSpec:
        if not self.r_inner < self.r_outer:
            raise ValueError(
                f"annulus requires r_inner < r_outer, got {self.r_inner}, {self.r_outer}"
            )
        if len(self.center) < 2:
            raise ValueError("annulus requires dimension >= 2")
        _check_eps0(self.eps0, min((self.r_outer - self.r_inner) / 2, self.r_inner))
        return self

    def build(self) -> SmoothDomain:
        return AnnulusDomain(self.r_inner, self.r_outer, self.center, self.eps0)


class EllipseSpec(StrictModel):
    kind: Literal["ellipse"]
    center: Point
    semi_axes: list[PositiveFloat]
    eps0: PositiveFloat | None = None

    @model_validator(mode="after")
    def _same_dimension(self) -> EllipseSpec:
        if len(self.center) != len(self.semi_axes):
            raise ValueError("center and semi_axes must have the same length")
        # Smallest radius of curvature sits at the ends of the longest axis
        _check_eps0(self.eps0, min(self.semi_axes) ** 2 / max(self.semi_axes))
        return self

    def build(self) -> SmoothDomain:
        return ellipse_domain(self.center, self.semi_axes, self.eps0)


DomainSpec = Annotated[
    IntervalSpec | BallSpec | AnnulusSpec | EllipseSpec, Field(discriminator="kind")
]


# =============================================================================
# Fields and coefficients
# =============================================================================


class ExampleFieldSpec(StrictModel):
    kind: Literal["example"]
    id: ExampleId

    def build(self) -> VectorField:
        return example_field(self.id)


class ProfileFieldSpec(StrictModel):
    """One-dimensional fields with a closed-form zeta profile."""

    kind: Literal["profile"]
    profile: Literal["hoelder", "log_modulus"]
    parameter: PositiveFloat

    def build(self) -> VectorField:
        return profile_field(self.profile, self.parameter)


FieldSpec = Annotated[ExampleFieldSpec | ProfileFieldSpec, Field(discriminator="kind")]


class FieldCoefficientsSpec(StrictModel):
    """b(x, u) = field(x) (+ u when controls are listed), sigma = sigma * I."""

    kind: Literal["field"]
    field: FieldSpec
    sigma: NonNegativeFloat = 0.0
    controls: list[Point] | None = None

    def build(self) -> ControlledCoefficients:
        field = self.field.build()
        if self.controls:
            return steered(field, self.controls, sigma=self.sigma)
        return from_field(field, sigma=self.sigma)


class OuCoefficientsSpec(StrictModel):
    kind: Literal["ornstein_uhlenbeck"]
    dimension: PositiveInt = 1
    rate: PositiveFloat = 1.0
    scale: NonNegativeFloat = 1.0

    def build(self) -> ControlledCoefficients:
        return ornstein_uhlenbeck(self.dimension, self.rate, self.scale)


CoefficientsSpec = Annotated[
    FieldCoefficientsSpec | OuCoefficientsSpec, Field(discriminator="kind")
]


# =============================================================================
# Command sections
# =============================================================================


class FlowSection(StrictModel):
    field: FieldSpec
    x0: Point
    horizon: PositiveFloat
    step: PositiveFloat
    hit_tolerance: PositiveFloat = 1e-9


class ZetaSection(StrictModel):
    field: FieldSpec
    eps_min: PositiveFloat = 1e-6
    n_levels: int = Field(default=20, ge=2)
    samples_per_level: PositiveInt = 50
    beta_grid: list[float] | None = None
    delta_grid: list[PositiveFloat] | None = None
    escape_start: PositiveInt = 5
    escape_levels: PositiveInt = 20

    @field_validator("beta_grid")
    @classmethod
    def _betas_above_one(cls, value: list[float] | None) -> list[float] | None:
        if value is not None and (not value or min(value) <= 1):
            raise ValueError("beta_grid must be non-empty with every beta > 1")
        return value


class SdeSection(StrictModel):
    coefficients: CoefficientsSpec
    x0: Point
    horizon: PositiveFloat
    step: PositiveFloat
    n_paths: PositiveInt
    control: Point | None = None
    recorded_paths: PositiveInt = 10
    deltas: list[PositiveFloat] | None = None


class ValueSection(StrictModel):
    """Value estimates; lam = None takes max(lambda_min, 1) from the discount threshold."""

    coefficients: CoefficientsSpec
    starts: list[Point] = Field(min_length=1)
    lam: PositiveFloat | None = None
    n_approx: PositiveInt | None = None
    horizon_cut: PositiveFloat = 10.0
    n_paths: PositiveInt = 1000
    step: PositiveFloat = 0.01
    tolerance: PositiveFloat | None = None
    epsilon: PositiveFloat | None = None
    threshold_samples: PositiveInt | None = None
    enforce_threshold: bool = False
    exterior: bool = False

    @model_validator(mode="after")
    def _exterior_is_sharp(self) -> ValueSection:
        if self.exterior and self.n_approx is not None:
            raise ValueError("exterior occupation uses the sharp indicator; leave n_approx unset")
        return self


class PdmpSection(StrictModel):
    """Switched PDMP with constant velocity and constant jump rate in each mode."""

    modes: list[str] = Field(min_length=2)
    transition: list[list[NonNegativeFloat]]
    rates: list[NonNegativeFloat]
    velocities: list[Point]
    mode0: str
    x0: Point
    horizon: PositiveFloat
    step: PositiveFloat
    n_paths: PositiveInt
    occupation_from: NonNegativeFloat = 0.0
    boundary_samples: PositiveInt = 64

    @model_validator(mode="after")
    def _shapes(self) -> PdmpSection:
        g = len(self.modes)
        if len(self.transition) != g or any(len(row) != g for row in self.transition):
            raise ValueError(f"transition must be {g}x{g}")
        for i, row in enumerate(self.transition):
            if abs(math.fsum(row) - 1.0) > ROW_TOL:
                raise ValueError(f"transition row {i} sums to {math.fsum(row):.15g}, expected 1")
            if row[i] != 0:
                raise ValueError(f"transition row {i} has non-zero diagonal {row[i]}")
        if len(self.rates) != g or len(self.velocities) != g:
            raise ValueError(f"rates and velocities need one entry per mode ({g})")
        if any(len(v) != len(self.x0) for v in self.velocities):
            raise ValueError("every velocity must have the dimension of x0")
        if self.mode0 not in self.modes:
            raise ValueError(f"mode0 '{self.mode0}' is not one of the modes")
        if self.occupation_from >= self.horizon:
            raise ValueError("occupation_from must be smaller than horizon")
        return self

    def build(self) -> PdmpTriplet:
        rates = np.asarray(self.rates, dtype=float)
        velocities = np.asarray(self.velocities, dtype=float)

        def drift(modes: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
            return velocities[modes]

        def intensity(modes: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
            return rates[modes]

        return PdmpTriplet(
            modes=list(self.modes),
            drift=drift,
            intensity=intensity,
            transition=np.asarray(self.transition, dtype=float),
            dimension=len(self.x0),
            intensity_bound=float(np.max(rates)),
            name="pdmp",
        )


class RatesSpec(StrictModel):
    k1: PositiveFloat = 1.0
    k_neg1: PositiveFloat = 1.0
    k2: PositiveFloat = 1.0
    k_neg2: PositiveFloat = 1.0
    k3: PositiveFloat = 1.0
    k_neg3: PositiveFloat = 1.0
    k4: PositiveFloat = 1.0
    k_neg4: PositiveFloat = 1.0
    k5: PositiveFloat = 1.0
    k6: PositiveFloat = 1.0
    n_copies: PositiveInt = 5
    r: float = Field(default=0.1, gt=0, lt=1 / 3)

    def build(self) -> PhageRates:
        return PhageRates(**self.model_dump())


class PhageSection(StrictModel):
    rates: RatesSpec = Field(default_factory=RatesSpec)
    starts: list[Point] = Field(default_factory=lambda: [[math.sqrt(0.5), 0.0]], min_length=1)
    horizon: PositiveFloat = 100.0
    step: PositiveFloat = 0.02
    n_paths: PositiveInt = 10_000
    random_rate_vectors: NonNegativeInt = 0
    mode0: Literal["e1", "e2", "e3", "e4"] = "e1"
    chart: bool = True
    cartesian_paths: NonNegativeInt = 0

    @field_validator("starts")
    @classmethod
    def _planar(cls, value: list[Point]) -> list[Point]:
        if any(len(p) != 2 for p in value):
            raise ValueError("phage starts are points in the plane")
        return value


NEEDS_DOMAIN = {"flow", "zeta", "value"}


class ExperimentConfig(StrictModel):
    """Resolved experiment: command, seed, domain and the command's section."""

    command: Command
    seed: int = Field(ge=0, lt=2**64)
    domain: DomainSpec | None = None
    workers: PositiveInt | None = None
    out: str = "results"
    flow: FlowSection | None = None
    zeta: ZetaSection | None = None
    sde: SdeSection | None = None
    value: ValueSection | None = None
    pdmp: PdmpSection | None = None
    phage: PhageSection | None = None

    @model_validator(mode="after")
    def _section_present(self) -> ExperimentConfig:
        if self.section is None:
            raise ValueError(f"command '{self.command}' needs a '{self.command}' section")
        if self.command in NEEDS_DOMAIN and self.domain is None:
            raise ValueError(f"command '{self.command}' needs a domain")
        return self

    @property
    def section(self) -> Any:
        return getattr(self, self.command)


def _format_errors(error: ValidationError) -> list[str]:
    return [
        f"{'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    ]


def parse_config(data: Any, source: str = "<config>") -> ExperimentConfig:
    """Validate a decoded JSON document.

    Raises:
        ConfigError: With one `loc: message` diagnostic per offending field.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(source, _format_errors(e)) from e


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a JSON config file, apply top-level overrides and validate.

    Raises:
        ConfigError: If the file is unreadable, not JSON, or fails validation.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(str(path), [f"cannot read file: {e.strerror or e}"]) from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), [f"line {e.lineno}, column {e.colno}: {e.msg}"]) from e
    if not isinstance(data, dict):
        raise ConfigError(str(path), ["<root>: expected a JSON object"])
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = parse_config(data, str(path))
    logger.debug("Loaded %s config from %s (seed %d)", config.command, path, config.seed)
    return config


class ConfigError(Exception):
    """Configuration failed to load or validate."""

    def __init__(self, source: str, diagnostics: list[str]) -> None:
        self.source = source
        self.diagnostics = diagnostics
        super().__init__(f"{source}: " + "; ".join(diagnostics))
