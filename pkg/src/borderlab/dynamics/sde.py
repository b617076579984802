"""Controlled diffusions dX = b(X, u) dt + sigma(X, u) dW and their shaken variants.

Fixed-step Euler-Maruyama over batches of paths. Suprema over time are taken over
the grid times. Paths are split into seed-stable chunks (see base.run_chunked),
so every estimator is deterministic given its root seed and independent of the
worker count.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np

from borderlab.base import (
    Estimate,
    NumericError,
    as_seed_sequence,
    concat_chunks,
    gen_run_id,
    run_chunked,
)
from borderlab.dynamics.flow import NonFinite, OutOfRange, VectorField
from borderlab.geometry import SmoothDomain

logger = logging.getLogger(__name__)

# Sup-moment estimates need at least this many paths
MIN_MOMENT_PATHS = 1000

# Slack on declared sup norms and Lipschitz constants
NORM_SLACK = 1e-6
LIPSCHITZ_SLACK = 1e-3

# Spawn keys for the auxiliary streams of a chunk; ordinary children use 0, 1, ...
_DIRECTION_KEY = 2**31
_UNPAIRED_KEY = 2**31 + 1

Array = np.ndarray
DriftMap = Callable[[Array, Array], Array]
DiffusionMap = Callable[[Array, Array], Array]


@dataclass
class NormAudit:
    """Sampled sup norms and difference quotients against the declared constants."""

    drift_sup: float
    diffusion_sup: float
    drift_lipschitz: float
    diffusion_lipschitz: float
    ok: bool


@dataclass
class ControlledCoefficients:
    """Drift b(x, u) and diffusion sigma(x, u) with their declared norms.

    `drift` maps points (M, N) and controls (M, m) to velocities (M, N);
    `diffusion` maps them to matrices (M, N, d). Controls are rows of control_grid.
    """

    drift: DriftMap
    diffusion: DiffusionMap
    dimension: int
    noise_dimension: int
    control_grid: Array
    drift_bound: float = math.inf
    diffusion_bound: float = math.inf
    drift_lipschitz: float = math.inf
    diffusion_lipschitz: float = math.inf
    name: str = "coefficients"

    def __post_init__(self) -> None:
        grid = np.asarray(self.control_grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
        if grid.ndim != 2 or len(grid) == 0:
            raise InvalidControl(f"{self.name}: control_grid must be a non-empty list of controls")
        self.control_grid = grid

    @property
    def control_dimension(self) -> int:
        return int(self.control_grid.shape[1])

    def check_declared_norms(self, points: Any) -> NormAudit:
        """Audit the declared norms on sample points and every grid control.

        Difference quotients use consecutive pairs of points. Failures are logged,
        not raised.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, self.dimension)
        drift_sup = diffusion_sup = drift_lip = diffusion_lip = 0.0
        dx = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        usable = dx > 0
        for u in self.control_grid:
            controls = np.broadcast_to(u, (len(pts), self.control_dimension))
            b = self.drift(pts, controls)
            s = self.diffusion(pts, controls)
            b_norm = np.linalg.norm(b, axis=1)
            s_norm = np.linalg.norm(s, axis=(1, 2))
            drift_sup = max(drift_sup, float(np.max(b_norm)))
            diffusion_sup = max(diffusion_sup, float(np.max(s_norm)))
            if np.any(usable):
                db = np.linalg.norm(np.diff(b, axis=0), axis=1)[usable] / dx[usable]
                ds = np.linalg.norm(np.diff(s, axis=0), axis=(1, 2))[usable] / dx[usable]
                drift_lip = max(drift_lip, float(np.max(db)))
                diffusion_lip = max(diffusion_lip, float(np.max(ds)))

        checks = {
            "||b||_0": (drift_sup, self.drift_bound * (1 + NORM_SLACK)),
            "||sigma||_0": (diffusion_sup, self.diffusion_bound * (1 + NORM_SLACK)),
            "[b]_1": (drift_lip, self.drift_lipschitz * (1 + LIPSCHITZ_SLACK)),
            "[sigma]_1": (diffusion_lip, self.diffusion_lipschitz * (1 + LIPSCHITZ_SLACK)),
        }
        ok = True
        for label, (observed, declared) in checks.items():
            if observed > declared:
                ok = False
                logger.warning(
                    "%s: sampled %s = %.6g exceeds declared %.6g", self.name, label, observed, declared
                )
        return NormAudit(drift_sup, diffusion_sup, drift_lip, diffusion_lip, ok)


def from_field(
    field: VectorField,
    *,
    sigma: float = 0.0,
    drift_bound: float = math.inf,
    drift_lipschitz: float = math.inf,
) -> ControlledCoefficients:
    """Uncontrolled coefficients b(x, u) = field(x), sigma = sigma * I."""
    n = field.dimension
    identity = np.eye(n)

    def drift(x: Array, u: Array) -> Array:
        return field(x)

    def diffusion(x: Array, u: Array) -> Array:
        return np.broadcast_to(sigma * identity, (len(x), n, n))

    return ControlledCoefficients(
        drift=drift,
        diffusion=diffusion,
        dimension=n,
        noise_dimension=n,
        control_grid=np.zeros((1, 1)),
        drift_bound=drift_bound,
        diffusion_bound=abs(sigma) * math.sqrt(n),
        drift_lipschitz=drift_lipschitz,
        diffusion_lipschitz=0.0,
        name=field.name,
    )


def steered(field: VectorField, control_grid: Any, *, sigma: float = 0.0) -> ControlledCoefficients:
    """b(x, u) = field(x) + u with u from control_grid, sigma = sigma * I."""
    n = field.dimension
    grid = np.asarray(control_grid, dtype=float).reshape(-1, n)
    identity = np.eye(n)

    def drift(x: Array, u: Array) -> Array:
        return field(x) + u

    def diffusion(x: Array, u: Array) -> Array:
        return np.broadcast_to(sigma * identity, (len(x), n, n))

    return ControlledCoefficients(
        drift=drift,
        diffusion=diffusion,
        dimension=n,
        noise_dimension=n,
        control_grid=grid,
        diffusion_bound=abs(sigma) * math.sqrt(n),
        diffusion_lipschitz=0.0,
        name=f"{field.name}+steering",
    )


def ornstein_uhlenbeck(dimension: int = 1, rate: float = 1.0, scale: float = 1.0) -> ControlledCoefficients:
    """dX = -rate X dt + scale dW."""
    identity = np.eye(dimension)
    return ControlledCoefficients(
        drift=lambda x, u: -rate * x,
        diffusion=lambda x, u: np.broadcast_to(scale * identity, (len(x), dimension, dimension)),
        dimension=dimension,
        noise_dimension=dimension,
        control_grid=np.zeros((1, 1)),
        diffusion_bound=abs(scale) * math.sqrt(dimension),
        drift_lipschitz=abs(rate),
        diffusion_lipschitz=0.0,
        name="ornstein_uhlenbeck",
    )


@dataclass(frozen=True)
class ControlPolicy:
    """Admissible control: constant, piecewise constant in time, or state feedback.

    Feedback outputs are quantised to `grid` when one is given.
    """

    kind: str
    value: Array | None = None
    times: Array | None = None
    values: Array | None = None
    fn: Callable[[float, Array], Array] | None = None
    grid: Array | None = None
    label: str = ""

    @classmethod
    def constant(cls, value: Any, label: str | None = None) -> ControlPolicy:
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(kind="constant", value=v, label=label or f"constant{v.tolist()}")

    @classmethod
    def schedule(cls, times: Any, values: Any, label: str | None = None) -> ControlPolicy:
        """Piecewise constant control equal to values[i] on [times[i], times[i+1])."""
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) != len(v) or len(t) == 0:
            raise InvalidControl("schedule needs one value per switching time")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise InvalidControl("schedule times must start at 0 and increase strictly")
        return cls(kind="piecewise_constant", times=t, values=v, label=label or f"schedule[{len(t)}]")

    @classmethod
    def feedback(
        cls,
        fn: Callable[[float, Array], Array],
        grid: Any = None,
        label: str = "feedback",
    ) -> ControlPolicy:
        g = None if grid is None else np.asarray(grid, dtype=float).reshape(len(grid), -1)
        return cls(kind="feedback", fn=fn, grid=g, label=label)

    def controls(self, t: float, x: Array) -> Array:
        """Controls (M, m) applied at time t to states x (M, N)."""
        m = len(x)
        if self.kind == "constant":
            assert self.value is not None
            return np.broadcast_to(self.value, (m, self.value.size))
        if self.kind == "piecewise_constant":
            assert self.times is not None and self.values is not None
            i = int(np.searchsorted(self.times, t, side="right")) - 1
            return np.broadcast_to(self.values[i], (m, self.values.shape[1]))
        assert self.fn is not None
        u = np.asarray(self.fn(t, x), dtype=float).reshape(m, -1)
        if self.grid is None:
            return u
        nearest = np.argmin(
            np.sum((u[:, None, :] - self.grid[None, :, :]) ** 2, axis=2), axis=1
        )
        return self.grid[nearest]

    def check(self, coeffs: ControlledCoefficients) -> None:
        """Reject open-loop values that are not in the coefficients' control grid."""
        if self.kind == "feedback":
            return
        values = self.value[None, :] if self.kind == "constant" else self.values
        assert values is not None
        grid = coeffs.control_grid
        if values.shape[1] != grid.shape[1]:
            raise InvalidControl(
                f"{self.label}: control dimension {values.shape[1]} != {grid.shape[1]}"
            )
        for v in values:
            if not np.any(np.all(np.isclose(grid, v, rtol=0, atol=1e-12), axis=1)):
                raise InvalidControl(f"{self.label}: control {v.tolist()} is not in the grid")


def normal_steering_policy(coeffs: ControlledCoefficients, domain: SmoothDomain) -> ControlPolicy:
    """Feedback picking the grid control with the smallest outward speed <b(x, u), nu(pi x)>."""
    grid = coeffs.control_grid

    def steer(t: float, x: Array) -> Array:
        normal = domain.project(x, strict=False).normal
        speeds = np.stack(
            [
                np.einsum("mn,mn->m", coeffs.drift(x, np.broadcast_to(u, (len(x), u.size))), normal)
                for u in grid
            ],
            axis=1,
        )
        return grid[np.argmin(speeds, axis=1)]

    return ControlPolicy.feedback(steer, grid=grid, label="normal_steering")


@dataclass(frozen=True)
class ShakenDirection:
    """Shift delta^2 e(t) applied to the coefficient arguments.

    With `e` unset each path draws one uniform random unit vector.
    """

    delta: float
    e: Callable[[float], Array] | None = None

    def __post_init__(self) -> None:
        if not self.delta >= 0:
            raise OutOfRange(f"delta must be non-negative, got {self.delta}")


@dataclass
class SdePaths:
    """Recorded paths: times (K,), states (K, M, N)."""

    times: Array
    states: Array
    name: str = ""

    def path(self, i: int = 0) -> Array:
        return self.states[:, i, :]


@dataclass
class SupMomentEstimate:
    """E[sup_t |X_t - center|^2] with the moment bound it is checked against."""

    estimate: Estimate
    bound: float
    within_bound: bool


def time_grid(horizon: float, step: float) -> Array:
    """Grid 0 = t_0 < ... < t_K = horizon with spacing step (last step may be short)."""
    if step <= 0 or horizon <= 0:
        raise OutOfRange(f"step and horizon must be positive, got {step}, {horizon}")
    n_steps = math.ceil(horizon / step - 1e-12)
    return np.minimum(np.arange(n_steps + 1) * step, horizon)


def lambda0_from_norms(coeffs: ControlledCoefficients) -> float:
    """Conservative moment constant 3 + 6||b||^2 + 12||sigma||^2 + 4[b]^2 + 16[sigma]^2."""
    return (
        3.0
        + 6.0 * coeffs.drift_bound**2
        + 12.0 * coeffs.diffusion_bound**2
        + 4.0 * coeffs.drift_lipschitz**2
        + 16.0 * coeffs.diffusion_lipschitz**2
    )


def growth_factor(lambda0: float, horizon: float) -> float:
    """lambda0 e^{lambda0 T}, infinite on overflow."""
    with np.errstate(over="ignore"):
        return float(lambda0 * np.exp(lambda0 * horizon))


def euler_maruyama(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    starts: list[Array],
    times: Array,
    rngs: list[np.random.Generator],
    shifts: list[Callable[[float], Array] | None] | None = None,
    on_step: Callable[[int, list[Array]], None] | None = None,
) -> list[Array]:
    """Advance several copies of a batch on one grid.

    Copies that share a Generator object share their Gaussian increments.
    on_step(k, states) runs after every step k = 1..K.
    """
    states = [np.array(s, dtype=float, copy=True) for s in starts]
    shifts = shifts or [None] * len(states)
    m = len(states[0])
    d = coeffs.noise_dimension
    for k in range(len(times) - 1):
        t, dt = float(times[k]), float(times[k + 1] - times[k])
        sqrt_dt = math.sqrt(dt)
        draws: dict[int, Array] = {}
        for i, x in enumerate(states):
            rng = rngs[i]
            xi = draws.get(id(rng))
            if xi is None:
                xi = rng.standard_normal((m, d))
                draws[id(rng)] = xi
            u = policy.controls(t, x)
            shift = shifts[i]
            y = x if shift is None else x + shift(t)
            b = coeffs.drift(y, u)
            s = coeffs.diffusion(y, u)
            states[i] = x + b * dt + np.einsum("mnd,md->mn", s, xi) * sqrt_dt
        if not all(np.all(np.isfinite(x)) for x in states):
            raise NonFinite(f"{coeffs.name}: non-finite state at t = {times[k + 1]:.6g}")
        if on_step is not None:
            on_step(k + 1, states)
    return states


def start_batch(coeffs: ControlledCoefficients, x0: Any, size: int) -> Array:
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.size != coeffs.dimension:
        raise OutOfRange(f"x0 has dimension {x.size}, expected {coeffs.dimension}")
    return np.broadcast_to(x, (size, coeffs.dimension)).copy()


def _side_stream(ss: np.random.SeedSequence, key: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, key))
    )


def _shift_for(
    shaken: ShakenDirection, ss: np.random.SeedSequence, size: int, dimension: int
) -> Callable[[float], Array]:
    scale = shaken.delta**2
    if shaken.e is not None:
        e = shaken.e

        def fixed(t: float) -> Array:
            v = np.asarray(e(t), dtype=float)
            if float(np.linalg.norm(v)) > 1 + 1e-12:
                raise InvalidControl(f"shaking direction has norm {np.linalg.norm(v):.6g} > 1")
            return scale * v

        return fixed

    g = _side_stream(ss, _DIRECTION_KEY).standard_normal((size, dimension))
    directions = scale * g / np.linalg.norm(g, axis=1, keepdims=True)
    return lambda t: directions


def simulate_paths(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x0: Any,
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    shaken: ShakenDirection | None = None,
    workers: int | None = None,
) -> SdePaths:
    """Record whole Euler-Maruyama paths, optionally for the shaken system."""
    policy.check(coeffs)
    times = time_grid(horizon, step)

    def chunk(ss: np.random.SeedSequence, size: int) -> Array:
        x = start_batch(coeffs, x0, size)
        out = np.empty((len(times), size, coeffs.dimension))
        out[0] = x
        shift = None if shaken is None else _shift_for(shaken, ss, size, coeffs.dimension)

        def record(k: int, states: list[Array]) -> None:
            out[k] = states[0]

        euler_maruyama(
            coeffs, policy, [x], times, [np.random.default_rng(ss)], [shift], on_step=record
        )
        return out

    chunks = run_chunked(chunk, n_paths, seed, workers=workers)
    return SdePaths(times=times, states=np.concatenate(chunks, axis=1), name=coeffs.name)


def simulate_path(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x0: Any,
    horizon: float,
    step: float,
    seed: int | np.random.SeedSequence,
) -> tuple[Array, Array]:
    """Single Euler-Maruyama path as (times, states (K, N))."""
    paths = simulate_paths(coeffs, policy, x0, horizon, step, 1, seed, workers=1)
    return paths.times, paths.path(0)


def simulate_shaken_path(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    shaken: ShakenDirection,
    x0: Any,
    horizon: float,
    step: float,
    seed: int | np.random.SeedSequence,
) -> tuple[Array, Array]:
    """Shaken path driven by the same noise as simulate_path under the same seed."""
    paths = simulate_paths(coeffs, policy, x0, horizon, step, 1, seed, shaken=shaken, workers=1)
    return paths.times, paths.path(0)


def terminal_states(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x0: Any,
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    workers: int | None = None,
) -> Array:
    """X_T for n_paths paths, shape (n_paths, N), without storing the paths."""
    policy.check(coeffs)
    times = time_grid(horizon, step)

    def chunk(ss: np.random.SeedSequence, size: int) -> Array:
        x = start_batch(coeffs, x0, size)
        return euler_maruyama(coeffs, policy, [x], times, [np.random.default_rng(ss)])[0]

    return concat_chunks(run_chunked(chunk, n_paths, seed, workers=workers))


def estimate_sup_moment(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x0: Any,
    horizon: float,
    n_paths: int,
    step: float,
    seed: int | np.random.SeedSequence,
    *,
    center: Any = None,
    workers: int | None = None,
    run_id: str | None = None,
) -> SupMomentEstimate:
    """Monte Carlo E[sup_{t<=T} |X_t - center|^2] (center defaults to the origin).

    The estimate is checked against lambda0 e^{lambda0 T} (1 + |x0|^2) with lambda0
    from the declared norms.
    """
    if n_paths < MIN_MOMENT_PATHS:
        raise OutOfRange(f"estimate_sup_moment needs n_paths >= {MIN_MOMENT_PATHS}, got {n_paths}")
    run_id = run_id or gen_run_id()
    policy.check(coeffs)
    times = time_grid(horizon, step)
    c = np.zeros(coeffs.dimension) if center is None else np.asarray(center, dtype=float).reshape(-1)

    def chunk(ss: np.random.SeedSequence, size: int) -> Array:
        x = start_batch(coeffs, x0, size)
        best = np.sum((x - c) ** 2, axis=1)

        def track(k: int, states: list[Array]) -> None:
            np.maximum(best, np.sum((states[0] - c) ** 2, axis=1), out=best)

        euler_maruyama(coeffs, policy, [x], times, [np.random.default_rng(ss)], on_step=track)
        return best

    estimate = Estimate.from_samples(concat_chunks(run_chunked(chunk, n_paths, seed, workers=workers)))
    x_norm_sq = float(np.sum(np.asarray(x0, dtype=float) ** 2))
    bound = growth_factor(lambda0_from_norms(coeffs), horizon) * (1.0 + x_norm_sq)
    within = estimate.mean <= bound
    logger.info(
        "[%s] %s: E sup|X|^2 = %.6g +/- %.2g over %d paths (bound %.3g)",
        run_id,
        coeffs.name,
        estimate.mean,
        estimate.std_error,
        estimate.n,
        bound,
    )
    return SupMomentEstimate(estimate=estimate, bound=bound, within_bound=within)


def paired_deviation(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    shaken: ShakenDirection,
    x0: Any,
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    paired: bool = True,
    workers: int | None = None,
) -> Estimate:
    """E[sup_t |X^delta_t - X_t|] with common (paired) or independent noise."""
    policy.check(coeffs)
    times = time_grid(horizon, step)

    def chunk(ss: np.random.SeedSequence, size: int) -> Array:
        x = start_batch(coeffs, x0, size)
        base_rng = np.random.default_rng(ss)
        shaken_rng = base_rng if paired else _side_stream(ss, _UNPAIRED_KEY)
        shift = _shift_for(shaken, ss, size, coeffs.dimension)
        worst = np.zeros(size)

        def track(k: int, states: list[Array]) -> None:
            np.maximum(worst, np.linalg.norm(states[1] - states[0], axis=1), out=worst)

        euler_maruyama(
            coeffs, policy, [x, x], times, [base_rng, shaken_rng], [None, shift], on_step=track
        )
        return worst

    return Estimate.from_samples(concat_chunks(run_chunked(chunk, n_paths, seed, workers=workers)))


def initial_condition_deviation(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x: Any,
    y: Any,
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    workers: int | None = None,
) -> Estimate:
    """E[sup_t |X^x_t - X^y_t|] under common noise."""
    policy.check(coeffs)
    times = time_grid(horizon, step)

    def chunk(ss: np.random.SeedSequence, size: int) -> Array:
        rng = np.random.default_rng(ss)
        a = start_batch(coeffs, x, size)
        b = start_batch(coeffs, y, size)
        worst = np.linalg.norm(a - b, axis=1)

        def track(k: int, states: list[Array]) -> None:
            np.maximum(worst, np.linalg.norm(states[0] - states[1], axis=1), out=worst)

        euler_maruyama(coeffs, policy, [a, b], times, [rng, rng], on_step=track)
        return worst

    return Estimate.from_samples(concat_chunks(run_chunked(chunk, n_paths, seed, workers=workers)))


@dataclass
class ShakingLaw:
    """Paired deviations over a delta grid and their log-log slope."""

    deltas: list[float]
    estimates: list[Estimate]
    slope: float
    bounds: list[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "deltas": self.deltas,
            "estimates": [e.to_dict() for e in self.estimates],
            "slope": self.slope,
            "bounds": self.bounds,
        }


def shaking_law(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x0: Any,
    deltas: list[float],
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    workers: int | None = None,
) -> ShakingLaw:
    """Paired deviation for each delta (same seed) and the fitted slope of log E against log delta.

    Each delta is also paired with its bound lambda0 e^{lambda0 T} delta.
    """
    if len(deltas) < 2 or min(deltas) <= 0:
        raise OutOfRange("shaking_law needs at least two positive deltas")
    root = as_seed_sequence(seed)
    estimates = [
        paired_deviation(
            coeffs, policy, ShakenDirection(delta), x0, horizon, step, n_paths, root, workers=workers
        )
        for delta in deltas
    ]
    means = np.array([e.mean for e in estimates])
    if np.any(means <= 0):
        raise NumericError("paired deviation vanished; the coefficients do not depend on the state")
    slope = float(np.polyfit(np.log(deltas), np.log(means), 1)[0])
    factor = growth_factor(lambda0_from_norms(coeffs), horizon)
    return ShakingLaw(
        deltas=list(deltas),
        estimates=estimates,
        slope=slope,
        bounds=[factor * d for d in deltas],
    )


class InvalidControl(NumericError):
    """Control value outside the admissible set."""

    pass

