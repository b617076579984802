"""Deterministic flows dX = b(X) dt with boundary-hit detection.

Classical RK4 with a step limiter near the boundary: while the path is in the
tube and moving outward, one step never covers more than KAPPA of the remaining
distance. A step that crosses the boundary is bisected until the signed distance
lies in [0, hit_tolerance].

Ships the one- and two-dimensional example fields used by the invariance
diagnostics, including the implicitly defined b0 of the slow-escape example.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import optimize

from borderlab.base import NumericError, gen_run_id
from borderlab.geometry import OutsideDomain, SmoothDomain

logger = logging.getLogger(__name__)

# Fraction of the remaining distance an outward step may cover
KAPPA = 0.1

# Absolute distance tolerance for reporting a boundary hit
HIT_TOLERANCE = 1e-9

# Field values below this are treated as exact equilibria
ROOT_CLAMP = 1e-14

# Largest y for which t^t = exp(1 / ln y) has a root in (0, 1/e]
B0_Y_MAX = math.exp(-math.e)

Array = np.ndarray

EXAMPLE_IDS = ("ex31", "ex32", "ex32_dominating", "ex35", "ex36", "ex37_polar")


@dataclass(frozen=True)
class VectorField:
    """Autonomous vector field b.

    `eval` maps an array of shape (..., N) to velocities of the same shape.
    Fields with a native polar form carry `polar_rhs` on (rho, theta) states;
    integrate_flow then works in polar coordinates.
    """

    eval: Callable[[Array], Array]
    name: str
    dimension: int
    continuity_note: str = "lipschitz"
    polar_rhs: Callable[[Array], Array] | None = None

    def __call__(self, x: Any) -> Array:
        v = np.asarray(self.eval(np.asarray(x, dtype=float)), dtype=float)
        return np.where(np.abs(v) < ROOT_CLAMP, 0.0, v)


@dataclass
class FlowResult:
    """Trajectory of an integrated flow, with the boundary hit if one occurred."""

    times: Array
    states: Array
    hit_time: float | None = None
    hit_point: Array | None = None
    distances: Array | None = None
    field_name: str = ""

    @property
    def hit(self) -> bool:
        return self.hit_time is not None

    def to_markdown(self) -> str:
        """Format a one-paragraph summary as markdown."""
        lines = [f"**Flow {self.field_name}** over t in [0, {self.times[-1]:.6g}]"]
        lines.append(f"- steps: {len(self.times) - 1}")
        lines.append(f"- final state: {np.array2string(self.states[-1], precision=10)}")
        if self.hit:
            lines.append(f"- boundary hit at t = {self.hit_time:.12g}")
        else:
            lines.append("- no boundary hit")
        if self.distances is not None:
            lines.append(f"- min signed distance: {float(np.min(self.distances)):.6g}")
        return "\n".join(lines)


def _rk4(rhs: Callable[[Array], Array], y: Array, h: float) -> Array:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def to_polar(x: Array) -> Array:
    return np.array([math.hypot(x[0], x[1]), math.atan2(x[1], x[0])])


def from_polar(y: Array) -> Array:
    return np.array([y[0] * math.cos(y[1]), y[0] * math.sin(y[1])])


@dataclass
class _BoundaryState:
    """Signed distance and outward speed at a state."""

    distance: float
    outward: float = 0.0


def integrate_flow(
    field: VectorField,
    x0: Any,
    horizon: float,
    step: float,
    domain: SmoothDomain | None = None,
    *,
    hit_tolerance: float = HIT_TOLERANCE,
    run_id: str | None = None,
) -> FlowResult:
    """Integrate dX = b(X) dt with RK4, stopping at the first boundary hit.

    Args:
        field: Vector field b.
        x0: Start point.
        horizon: Final time.
        step: Nominal step.
        domain: When given, the signed distance is monitored and the hit time located.
        hit_tolerance: Distance below which the path counts as on the boundary.

    Returns:
        FlowResult with times, states and (when a domain is given) distances.

    Raises:
        OutOfRange: If step or horizon is not positive.
        OutsideDomain: If x0 lies outside the domain beyond the hit tolerance.
        NonFinite: If the field blows up.
        StepUnderflow: If bisection cannot separate a tangential approach.
    """
    if step <= 0 or horizon <= 0:
        raise OutOfRange(f"step and horizon must be positive, got {step}, {horizon}")
    run_id = run_id or gen_run_id()

    if field.polar_rhs is not None:
        rhs, chart = field.polar_rhs, from_polar
        y = to_polar(np.asarray(x0, dtype=float))
    else:
        rhs, chart = field, _identity
        y = np.asarray(x0, dtype=float).reshape(field.dimension)

    time_tol = 1e-9 * horizon

    def boundary_state(state: Array) -> _BoundaryState:
        assert domain is not None
        x = chart(state)
        d = domain.signed_distance(x)
        if abs(d) > domain.eps0:
            return _BoundaryState(d)
        normal = domain.boundary_frame(x).normal
        return _BoundaryState(d, float(field(x) @ normal))

    t = 0.0
    times = [0.0]
    states = [chart(y)]
    dists: list[float] = []
    hit_time = None
    current = None

    if domain is not None:
        current = boundary_state(y)
        dists.append(current.distance)
        if current.distance < -hit_tolerance:
            raise OutsideDomain(f"Start {x0} lies outside the domain")
        if current.distance <= hit_tolerance:
            hit_time = 0.0

    while hit_time is None and t < horizon * (1 - 1e-15):
        h = min(step, horizon - t)
        if current is not None and current.outward > 0:
            h = min(h, max(KAPPA * current.distance / current.outward, time_tol))

        y_new = _rk4(rhs, y, h)
        if not np.all(np.isfinite(y_new)):
            raise NonFinite(f"{field.name}: non-finite state at t = {t + h:.6g}")

        if domain is None:
            t += h
            y = y_new
            times.append(t)
            states.append(chart(y))
            continue

        nxt = boundary_state(y_new)
        if nxt.distance < 0:
            s, y, d_hit = _locate_crossing(rhs, chart, domain, y, h, t, hit_tolerance)
            t += s
            hit_time = t
            times.append(t)
            states.append(chart(y))
            dists.append(d_hit)
            break

        t += h
        y_prev, y = y, y_new
        current = nxt
        times.append(t)
        states.append(chart(y))
        dists.append(nxt.distance)
        remaining = nxt.distance / nxt.outward if nxt.outward > 0 else math.inf
        stalled = np.array_equal(y_new, y_prev)
        if nxt.distance == 0 or (
            nxt.distance <= hit_tolerance and (remaining <= time_tol or stalled)
        ):
            hit_time = t

    result = FlowResult(
        times=np.asarray(times),
        states=np.asarray(states),
        hit_time=hit_time,
        hit_point=states[-1] if hit_time is not None else None,
        distances=np.asarray(dists) if domain is not None else None,
        field_name=field.name,
    )
    logger.debug(
        "[%s] %s: %d steps, hit=%s",
        run_id,
        field.name,
        len(times) - 1,
        f"{hit_time:.12g}" if hit_time is not None else "none",
    )
    return result


def _locate_crossing(
    rhs: Callable[[Array], Array],
    chart: Callable[[Array], Array],
    domain: SmoothDomain,
    y: Array,
    h: float,
    t: float,
    hit_tolerance: float,
) -> tuple[float, Array, float]:
    lo, hi = 0.0, h
    while True:
        if hi - lo <= 2 * np.spacing(max(t + hi, 1.0)):
            raise StepUnderflow(f"Cannot separate the boundary crossing near t = {t:.12g}")
        mid = 0.5 * (lo + hi)
        y_mid = _rk4(rhs, y, mid)
        d_mid = domain.signed_distance(chart(y_mid))
        if 0 <= d_mid <= hit_tolerance:
            return mid, y_mid, d_mid
        if d_mid < 0:
            hi = mid
        else:
            lo = mid


def _identity(y: Array) -> Array:
    return y


# Example fields


def _ex31(p: Array) -> Array:
    x = p[..., 0]
    return np.sqrt(np.maximum(1.0 - x, 0.0))[..., None]


def _ex32(p: Array) -> Array:
    x = p[..., 0]
    v = np.where(
        x > 0.75,
        -np.sqrt(np.abs(1.0 - x)),
        np.where(x >= 0.25, -2.0 * x + 1.0, np.sqrt(np.abs(x))),
    )
    return v[..., None]


def _ex32_dominating(p: Array) -> Array:
    x = p[..., 0]
    v = np.select(
        [x > 0.75, x >= 2 / 3, x > 1 / 3, x >= 0.25],
        [0.0 * x, 4.0 * x - 3.0, -2.0 * x + 1.0, 4.0 * x - 1.0],
        default=0.0,
    )
    return v[..., None]


def _ex35(p: Array) -> Array:
    x = p[..., 0]
    safe = np.where(x > 0, x, 1.0)
    v = np.where(x > 0, -np.abs(np.sqrt(safe) * np.sin(1.0 / safe)), 0.0)
    return v[..., None]


def _ex36(p: Array) -> Array:
    y = p[..., 0]
    flat = np.atleast_1d(y).ravel()
    out = np.zeros_like(flat)
    b0_max = solve_b0(B0_Y_MAX)
    for i, value in enumerate(flat):
        if value <= 0:
            continue
        if value >= B0_Y_MAX:
            out[i] = -value / b0_max
        else:
            out[i] = -value / solve_b0(value)
    return out.reshape(np.shape(y))[..., None]


def _polar_speed(theta: Array) -> Array:
    return np.maximum(theta, 0.0) * np.maximum(np.pi / 2 - theta, 0.0)


def _ex37_polar_rhs(state: Array) -> Array:
    rho, theta = state[..., 0], state[..., 1]
    f = _polar_speed(theta)
    gap = np.maximum(1.0 - rho, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta_dot = np.where(f > 0, f / gap, 0.0)
    return np.stack([np.sqrt(gap) * f, theta_dot], axis=-1)


def _ex37_cartesian(p: Array) -> Array:
    x, y = p[..., 0], p[..., 1]
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    polar = _ex37_polar_rhs(np.stack([rho, theta], axis=-1))
    rho_dot, theta_dot = polar[..., 0], polar[..., 1]
    vx = rho_dot * np.cos(theta) - rho * theta_dot * np.sin(theta)
    vy = rho_dot * np.sin(theta) + rho * theta_dot * np.cos(theta)
    return np.stack([vx, vy], axis=-1)


_EXAMPLES: dict[str, VectorField] = {
    "ex31": VectorField(_ex31, "ex31", 1, "hoelder"),
    "ex32": VectorField(_ex32, "ex32", 1, "hoelder"),
    "ex32_dominating": VectorField(_ex32_dominating, "ex32_dominating", 1, "lipschitz"),
    "ex35": VectorField(_ex35, "ex35", 1, "hoelder"),
    "ex36": VectorField(_ex36, "ex36", 1, "log-modulus"),
    "ex37_polar": VectorField(_ex37_cartesian, "ex37_polar", 2, "custom", _ex37_polar_rhs),
}


def example_field(example_id: str) -> VectorField:
    """Return one of the shipped example fields.

    Raises:
        UnknownExample: If the id is not one of EXAMPLE_IDS.
    """
    try:
        return _EXAMPLES[example_id]
    except KeyError:
        raise UnknownExample(
            f"Unknown example '{example_id}', expected one of {', '.join(EXAMPLE_IDS)}"
        ) from None


def solve_b0(y: float) -> float:
    """Root t in (0, 1/e] of t^t = exp(1 / ln y), i.e. t ln t = 1 / ln y.

    Raises:
        OutOfRange: If y is outside (0, e^{-e}], where no root exists.
    """
    if not 0 < y < 1:
        raise OutOfRange(f"solve_b0 needs 0 < y < 1, got {y}")
    if y > B0_Y_MAX:
        raise OutOfRange(f"t^t = exp(1/ln y) has no root for y > e^-e ({B0_Y_MAX:.6g}), got {y}")
    target = 1.0 / math.log(y)
    upper = 1.0 / math.e
    if target <= -upper:
        return upper
    return float(
        optimize.bisect(lambda t: t * math.log(t) - target, 1e-300, upper, xtol=1e-16, maxiter=2000)
    )


def b0_bounds(y: float) -> tuple[float, float]:
    """Enclosure 1 / (2 L ln L) < b0(y) < 1 / L with L = ln(1/y)."""
    if not 0 < y < B0_Y_MAX:
        raise OutOfRange(f"b0_bounds needs 0 < y < e^-e, got {y}")
    big_l = -math.log(y)
    return 1.0 / (2 * big_l * math.log(big_l)), 1.0 / big_l


def bertrand_sum(n: int, m: int) -> float:
    """Partial sum of 1 / ((k + 1) ln k) for k = n .. n + m."""
    if n < 2 or m < 0:
        raise OutOfRange(f"bertrand_sum needs n >= 2 and m >= 0, got {n}, {m}")
    k = np.arange(n, n + m + 1, dtype=float)
    return float(np.sum(1.0 / ((k + 1) * np.log(k))))


def bertrand_escape_bound(n: int, m: int) -> float:
    """Lower bound on the time to go from 1/n to 1/(n + m + 1) under the ex36 field."""
    if n < 1 / B0_Y_MAX or m < 0:
        raise OutOfRange(f"bertrand_escape_bound needs 1/n <= e^-e and m >= 0, got {n}, {m}")
    return float(sum(solve_b0(1.0 / k) / (k + 1) for k in range(n, n + m + 1)))


def polar_trap_bound(rho0: float, theta0: float) -> float:
    """Upper bound 1 - (pi/4 + (1 - rho0)^{-1/2})^{-2} on the radius of the polar example."""
    if not 0 <= rho0 < 1 or not 0 < theta0 < math.pi / 2:
        raise OutOfRange(f"polar_trap_bound needs rho0 in [0,1), theta0 in (0, pi/2), got {rho0}, {theta0}")
    return 1.0 - (math.pi / 4 + (1.0 - rho0) ** -0.5) ** -2


def integrate_polar(
    rho0: Any,
    theta0: Any,
    horizon: float,
    step: float,
) -> tuple[Array, Array, Array]:
    """Integrate the polar example for a batch of starts at once.

    Returns:
        times (K,), rho (K, M) and theta (K, M).
    """
    if step <= 0 or horizon <= 0:
        raise OutOfRange(f"step and horizon must be positive, got {step}, {horizon}")
    state = np.stack([np.atleast_1d(rho0), np.atleast_1d(theta0)], axis=-1).astype(float)
    n_steps = math.ceil(horizon / step - 1e-12)
    times = np.minimum(np.arange(n_steps + 1) * step, horizon)
    rho = np.empty((n_steps + 1, len(state)))
    theta = np.empty_like(rho)
    rho[0], theta[0] = state[:, 0], state[:, 1]
    for k in range(n_steps):
        state = _rk4(_ex37_polar_rhs, state, times[k + 1] - times[k])
        if not np.all(np.isfinite(state)):
            raise NonFinite(f"ex37_polar: non-finite state at t = {times[k + 1]:.6g}")
        rho[k + 1], theta[k + 1] = state[:, 0], state[:, 1]
    return times, rho, theta


class StepUnderflow(NumericError):
    """Hit-time bisection reached machine resolution."""

    pass


class NonFinite(NumericError):
    """The state became infinite or NaN."""

    pass


class UnknownExample(NumericError):
    """Example id not recognised."""

    pass


class OutOfRange(NumericError):
    """Argument outside its valid range."""

    pass
