"""Averaged phage-lambda toggle as a switched PDMP, and the border-avoidance run.

The DNA binding state is the mode (e1 free, e2 promoter bound, e3 repressor site
bound, e4 both bound); the repressor and its dimer are the continuous state x.
Inside the lysis disc |x|^2 <= r only degradation acts. Outside it the
mass-action drift is damped by a cutoff chi that vanishes on both circles of
the lysogeny annulus r <= |x|^2 <= 1; that zero is what keeps paths off the
lysis threshold.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit, log_expit

from borderlab.base import NumericError, as_seed_sequence, gen_run_id
from borderlab.dynamics.flow import OutOfRange
from borderlab.dynamics.pdmp import (
    BoundaryCheck,
    PdmpTriplet,
    check_boundary_condition,
    simulate_pdmp_ensemble,
)
from borderlab.geometry import AnnulusDomain

logger = logging.getLogger(__name__)

Array = np.ndarray

MODES = ["e1", "e2", "e3", "e4"]

# Relative slack under which |x|^2 counts as lying on the lysis circle
CIRCLE_RTOL = 1e-12

# Boundary samples per circle and inward offset for the boundary check
CIRCLE_SAMPLES = 64
CIRCLE_ETA = 1e-7

RATE_NAMES = (
    "k1",
    "k_neg1",
    "k2",
    "k_neg2",
    "k3",
    "k_neg3",
    "k4",
    "k_neg4",
    "k5",
    "k6",
)


@dataclass(frozen=True)
class PhageRates:
    """Reaction rates, transcription copy number and lysis threshold.

    k5 is the transcription rate of the full binding scheme; the averaged drift only
    keeps the copy number n_copies, so k5 is carried for the record.
    """

    k1: float = 1.0
    k_neg1: float = 1.0
    k2: float = 1.0
    k_neg2: float = 1.0
    k3: float = 1.0
    k_neg3: float = 1.0
    k4: float = 1.0
    k_neg4: float = 1.0
    k5: float = 1.0
    k6: float = 1.0
    n_copies: int = 5
    r: float = 0.1

    def __post_init__(self) -> None:
        for name in RATE_NAMES:
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise OutOfRange(f"rate {name} must be positive, got {value}")
        if self.n_copies < 1:
            raise OutOfRange(f"n_copies must be a positive integer, got {self.n_copies}")
        # chi needs a nonempty plateau 2r <= |x|^2 <= 1 - r
        if not 0 < self.r < 1 / 3:
            raise OutOfRange(f"r must lie in (0, 1/3), got {self.r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def random_rates(
    rng: np.random.Generator,
    *,
    low: float = 0.1,
    high: float = 10.0,
    max_copies: int = 10,
    r: float = 0.1,
) -> PhageRates:
    """Log-uniform rates on [low, high] and a uniform copy number in 1..max_copies."""
    values = np.exp(rng.uniform(math.log(low), math.log(high), len(RATE_NAMES)))
    rates = {name: float(v) for name, v in zip(RATE_NAMES, values, strict=True)}
    return PhageRates(**rates, n_copies=int(rng.integers(1, max_copies + 1)), r=r)


def _mode_index(mode: int | str) -> int:
    if isinstance(mode, str):
        if mode not in MODES:
            raise UnknownMode(f"Unknown mode '{mode}', expected one of {MODES}")
        return MODES.index(mode)
    if isinstance(mode, (int, np.integer)) and 0 <= int(mode) < len(MODES):
        return int(mode)
    raise UnknownMode(f"Unknown mode {mode!r}, expected one of {MODES}")


def _theta_table(rates: PhageRates) -> Array:
    return np.array(
        [rates.k2 + rates.k3, rates.k_neg2 + rates.k4, rates.k_neg3, rates.k_neg4]
    )


def theta_hat(rates: PhageRates, mode: int | str) -> float:
    """Total binding propensity out of a mode."""
    return float(_theta_table(rates)[_mode_index(mode)])


def _ramp(t: Array) -> Array:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def smooth_theta(rates: PhageRates, mode: int | str, x: Any) -> float:
    """theta_hat(mode) switched on by a C1 cubic ramp in |x|^2 over [r, 2r]."""
    s = float(np.sum(np.asarray(x, dtype=float) ** 2))
    return theta_hat(rates, mode) * float(_ramp(np.asarray((s - rates.r) / rates.r)))


def build_Q(rates: PhageRates) -> Array:
    """Post-jump matrix: the binding scheme's rate matrix divided row-wise by theta_hat."""
    q_hat = np.array(
        [
            [0.0, rates.k2, rates.k3, 0.0],
            [rates.k_neg2, 0.0, 0.0, rates.k4],
            [rates.k_neg3, 0.0, 0.0, 0.0],
            [0.0, rates.k_neg4, 0.0, 0.0],
        ]
    )
    return q_hat / _theta_table(rates)[:, None]


def _steady(rates: PhageRates, modes: Array, x: Array) -> Array:
    x1, x2 = x[:, 0], x[:, 1]
    transcription = rates.n_copies * (modes == 1)
    return np.stack(
        [
            -rates.k1 * x1**2 - rates.k6 * x1 + 2 * rates.k_neg1 * x2 + transcription,
            rates.k1 * x1**2 - rates.k_neg1 * x2,
        ],
        axis=1,
    )


def steady_drift(rates: PhageRates, mode: int | str, x: Any) -> Array:
    """Mass-action drift before the cutoff; transcription only in the promoter-bound mode."""
    pts = np.asarray(x, dtype=float).reshape(1, 2)
    return _steady(rates, np.array([_mode_index(mode)]), pts)[0]


def _chi(rates: PhageRates, lower_gap: Array, upper_gap: Array) -> Array:
    """Piecewise linear cutoff in s from the gaps s - r and 1 - s."""
    return np.clip(np.minimum(lower_gap, upper_gap) / rates.r, 0.0, 1.0)


def _drift_batch(rates: PhageRates, modes: Array, x: Array) -> Array:
    s = np.sum(x**2, axis=1)
    lysis = np.stack([-rates.k6 * x[:, 0], -rates.k_neg1 * x[:, 1]], axis=1)
    steady = _steady(rates, modes, x) * _chi(rates, s - rates.r, 1.0 - s)[:, None]
    inside = s <= rates.r * (1 + CIRCLE_RTOL)
    return np.where(inside[:, None], lysis, steady)


def drift_eval(rates: PhageRates, mode: int | str, x: Any) -> Array:
    """Switched drift: degradation only on the lysis disc, damped mass action outside."""
    pts = np.asarray(x, dtype=float).reshape(1, 2)
    return _drift_batch(rates, np.array([_mode_index(mode)]), pts)[0]


@dataclass
class PhageModel:
    """The switched PDMP on the four binding modes and the lysogeny annulus."""

    rates: PhageRates
    triplet: PdmpTriplet
    domain: AnnulusDomain

    @classmethod
    def from_rates(cls, rates: PhageRates | None = None) -> PhageModel:
        rates = rates or PhageRates()
        table = _theta_table(rates)

        def drift(modes: Array, x: Array, u: Array) -> Array:
            return _drift_batch(rates, modes, x)

        def intensity(modes: Array, x: Array, u: Array) -> Array:
            s = np.sum(x**2, axis=1)
            return table[modes] * _ramp((s - rates.r) / rates.r)

        triplet = PdmpTriplet(
            modes=list(MODES),
            drift=drift,
            intensity=intensity,
            transition=build_Q(rates),
            dimension=2,
            intensity_bound=float(np.max(table)),
            name="phage",
        )
        return cls(rates=rates, triplet=triplet, domain=AnnulusDomain(math.sqrt(rates.r), 1.0))


def to_chart(rates: PhageRates, x: Any) -> Array:
    """(q, phi) with q = ln((s - r) / (1 - s)), s = |x|^2, for points strictly inside the annulus."""
    pts = np.asarray(x, dtype=float).reshape(-1, 2)
    s = np.sum(pts**2, axis=1)
    q = np.log(s - rates.r) - np.log(1.0 - s)
    return np.stack([q, np.arctan2(pts[:, 1], pts[:, 0])], axis=1)


def _chart_geometry(rates: PhageRates, y: Array) -> tuple[Array, Array, Array, Array]:
    """Gaps s - r and 1 - s, s and the Cartesian point, all from (q, phi)."""
    q, phi = y[:, 0], y[:, 1]
    lower_gap = (1.0 - rates.r) * expit(q)
    upper_gap = (1.0 - rates.r) * expit(-q)
    s = rates.r + lower_gap
    rho = np.sqrt(s)
    x = np.stack([rho * np.cos(phi), rho * np.sin(phi)], axis=1)
    return lower_gap, upper_gap, s, x


def from_chart(rates: PhageRates, y: Any) -> Array:
    return _chart_geometry(rates, np.asarray(y, dtype=float).reshape(-1, 2))[3]


def chart_log_distance(rates: PhageRates, y: Any) -> Array:
    """Natural log of the distance to the annulus boundary, computed in the chart."""
    pts = np.asarray(y, dtype=float).reshape(-1, 2)
    q = pts[:, 0]
    s = rates.r + (1.0 - rates.r) * expit(q)
    log_scale = math.log(1.0 - rates.r)
    to_inner = log_scale + log_expit(q) - np.log(np.sqrt(s) + math.sqrt(rates.r))
    to_outer = log_scale + log_expit(-q) - np.log(1.0 + np.sqrt(s))
    return np.minimum(to_inner, to_outer)


def chart_triplet(model: PhageModel) -> PdmpTriplet:
    """The same PDMP in logit-radial coordinates (q, phi).

    In the chart the damped drift stays bounded up to both circles, so the distance
    to the boundary keeps its relative precision however close a path gets.
    """
    rates = model.rates
    table = _theta_table(rates)

    def drift(modes: Array, y: Array, u: Array) -> Array:
        lower_gap, upper_gap, s, x = _chart_geometry(rates, y)
        b = _steady(rates, modes, x)
        radial = np.sum(x * b, axis=1)
        # chi / ((s - r)(1 - s)) without cancellation
        scale = 1.0 / (np.maximum(lower_gap, rates.r) * np.maximum(upper_gap, rates.r))
        dq = 2.0 * (1.0 - rates.r) * radial * scale
        dphi = _chi(rates, lower_gap, upper_gap) * (x[:, 0] * b[:, 1] - x[:, 1] * b[:, 0]) / s
        return np.stack([dq, dphi], axis=1)

    def intensity(modes: Array, y: Array, u: Array) -> Array:
        lower_gap = (1.0 - rates.r) * expit(y[:, 0])
        return table[modes] * _ramp(lower_gap / rates.r)

    return PdmpTriplet(
        modes=list(MODES),
        drift=drift,
        intensity=intensity,
        transition=model.triplet.transition,
        dimension=2,
        intensity_bound=model.triplet.intensity_bound,
        name="phage-chart",
    )


@dataclass
class StartSummary:
    """Border-avoidance outcome for one start."""

    start: Array
    min_log10_distance: float
    hit_count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "start": self.start.tolist(),
            "min_log10_distance": self.min_log10_distance,
            "hit_count": self.hit_count,
        }


@dataclass
class BorderReport:
    """Border-avoidance run over several starts, with the boundary condition check."""

    rates: PhageRates
    starts: list[StartSummary]
    n_paths: int
    horizon: float
    chart: bool
    boundary_check: BoundaryCheck
    path_minima: Array = field(repr=False)

    @property
    def hit_count(self) -> int:
        return sum(s.hit_count for s in self.starts)

    @property
    def min_log10_distance(self) -> float:
        return min(s.min_log10_distance for s in self.starts)

    @property
    def min_distance(self) -> float:
        return 10.0**self.min_log10_distance

    def circles(self) -> list[dict[str, Any]]:
        """Per-circle boundary value and whether the drift jumps across the circle."""
        jumps = {p.component for p in self.boundary_check.discontinuities}
        return [
            {
                "circle": name,
                "max_value": self.boundary_check.component_max[k],
                "discontinuous": k in jumps,
            }
            for k, name in enumerate(("inner", "outer"))
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rates": self.rates.to_dict(),
            "r": self.rates.r,
            "n_paths": self.n_paths,
            "horizon": self.horizon,
            "chart": self.chart,
            "coordinates": "chart" if self.chart else "cartesian",
            # The chart drift is bounded, so chart paths cannot reach a circle
            "hits_detectable": not self.chart,
            "starts": [s.to_dict() for s in self.starts],
            "min_distance": self.min_distance,
            "min_log10_distance": self.min_log10_distance,
            "hit_count": self.hit_count,
            "boundary_check": {**self.boundary_check.to_dict(), "circles": self.circles()},
        }


def run_border_avoidance(
    model: PhageModel,
    starts: Sequence[Any],
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    mode0: int | str = "e1",
    chart: bool = True,
    workers: int | None = None,
    run_id: str | None = None,
) -> BorderReport:
    """Simulate n_paths paths from each start and record how close they get to the boundary.

    Args:
        chart: Integrate in the logit-radial chart. Otherwise integrate in Cartesian
            coordinates, where a path counts as a hit once its signed distance is <= 0.
    """
    run_id = run_id or gen_run_id()
    rates = model.rates
    points = np.asarray(starts, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise InvalidStart("At least one start is required")
    s = np.sum(points**2, axis=1)
    bad = ~((s > rates.r) & (s < 1.0))
    if np.any(bad):
        raise InvalidStart(
            f"Starts must satisfy r < |x|^2 < 1 with r = {rates.r}; offending: {points[bad].tolist()}"
        )

    triplet = chart_triplet(model) if chart else model.triplet
    mode = _mode_index(mode0)
    seeds = as_seed_sequence(seed)
    logger.info(
        "[%s] phage: %d starts x %d paths, horizon %g, step %g, %s coordinates",
        run_id,
        len(points),
        n_paths,
        horizon,
        step,
        "chart" if chart else "cartesian",
    )

    summaries = []
    minima = []
    for start, child in zip(points, seeds.spawn(len(points)), strict=True):
        if chart:
            ensemble = simulate_pdmp_ensemble(
                triplet,
                mode,
                to_chart(rates, start)[0],
                horizon,
                step,
                n_paths,
                child,
                distance_fn=lambda y: chart_log_distance(rates, y),
                workers=workers,
                run_id=run_id,
            )
            log_min = np.asarray(ensemble.min_distance) / math.log(10.0)
            hits = int(np.sum(~np.isfinite(log_min)))
        else:
            ensemble = simulate_pdmp_ensemble(
                triplet,
                mode,
                start,
                horizon,
                step,
                n_paths,
                child,
                domain=model.domain,
                workers=workers,
                run_id=run_id,
            )
            d = np.asarray(ensemble.min_distance)
            hits = int(np.sum(d <= 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                log_min = np.where(d > 0, np.log10(np.maximum(d, 0.0)), -np.inf)
        minima.append(log_min)
        summaries.append(StartSummary(start.copy(), float(np.min(log_min)), hits))

    check = check_boundary_condition(model.triplet, model.domain, CIRCLE_SAMPLES, eta=CIRCLE_ETA)
    report = BorderReport(
        rates=rates,
        starts=summaries,
        n_paths=n_paths,
        horizon=horizon,
        chart=chart,
        boundary_check=check,
        path_minima=np.stack(minima),
    )
    logger.info(
        "[%s] phage: %d hits, min log10 distance %.4g",
        run_id,
        report.hit_count,
        report.min_log10_distance,
    )
    if report.hit_count:
        logger.warning("[%s] phage: %d paths reached the boundary", run_id, report.hit_count)
    return report


def sweep_border_avoidance(
    n_vectors: int,
    starts: Sequence[Any],
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    base: PhageRates | None = None,
    mode0: int | str = "e1",
    chart: bool = True,
    workers: int | None = None,
    run_id: str | None = None,
) -> list[BorderReport]:
    """Border avoidance for the base rates plus n_vectors random rate vectors with the same r."""
    run_id = run_id or gen_run_id()
    base = base or PhageRates()
    rate_seed, path_seed = as_seed_sequence(seed).spawn(2)
    rng = np.random.default_rng(rate_seed)
    rate_list = [base] + [random_rates(rng, r=base.r) for _ in range(n_vectors)]
    return [
        run_border_avoidance(
            PhageModel.from_rates(rates),
            starts,
            horizon,
            step,
            n_paths,
            child,
            mode0=mode0,
            chart=chart,
            workers=workers,
            run_id=run_id,
        )
        for rates, child in zip(rate_list, path_seed.spawn(len(rate_list)), strict=True)
    ]


class UnknownMode(NumericError):
    """Mode outside {e1, e2, e3, e4}."""

    pass


class InvalidStart(NumericError):
    """Start point not strictly inside the lysogeny annulus."""

    pass
