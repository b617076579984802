"""Switch-type piecewise deterministic Markov processes.

A process is given by its characteristic triplet: a mode-dependent drift b, a
bounded jump intensity theta and a mode transition matrix Q with zero diagonal.
Between jumps the state follows the flow of b in the current mode; the
inter-jump time has survival exp(-integral of theta along the flow); at a jump
only the mode changes, drawn from the row Q(mode, .).

Jump times are sampled by inverting the cumulative intensity, integrated by the
trapezoid rule alongside RK4 flow steps. Thinning with the intensity bound is
available as an independent oracle.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg
from scipy.integrate import cumulative_trapezoid

from borderlab.base import NumericError, concat_chunks, gen_run_id, run_chunked
from borderlab.dynamics.flow import NonFinite, OutOfRange
from borderlab.geometry import SmoothDomain

logger = logging.getLogger(__name__)

# Jumps per path before the run is declared a storm
MAX_JUMPS = 1_000_000

# Row-sum tolerance for the transition matrix
ROW_TOL = 1e-12

# Default tolerance and interior offset for the boundary condition check
BOUNDARY_TOL = 1e-9
INTERIOR_ETA = 1e-6

Array = np.ndarray
ModeDrift = Callable[[Array, Array, Array], Array]
ModeIntensity = Callable[[Array, Array, Array], Array]
JumpControl = Callable[[Array, Array, Array], Array]


def zero_control(modes: Array, x: Array, s: Array) -> Array:
    """The trivial control u = 0 (a singleton control set)."""
    return np.zeros((len(x), 1))


@dataclass
class PdmpTriplet:
    """Characteristic triplet (b, theta, Q) over a finite list of modes.

    `drift(modes, x, u)` and `intensity(modes, x, u)` are vectorised: modes is an
    integer array (M,), x is (M, N), u is (M, m); they return (M, N) and (M,).
    """

    modes: list[str]
    drift: ModeDrift
    intensity: ModeIntensity
    transition: Array
    dimension: int
    intensity_bound: float = math.inf
    name: str = "pdmp"

    def __post_init__(self) -> None:
        q = np.asarray(self.transition, dtype=float)
        g = len(self.modes)
        if q.shape != (g, g):
            raise BadRow(f"{self.name}: transition must be {g}x{g}, got {q.shape}")
        self.transition = q
        for i in range(g):
            _check_row(q, i, self.name)
        self._cumulative = np.cumsum(q, axis=1)
        self._last_positive = np.array([int(np.nonzero(row > 0)[0][-1]) for row in q])

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mode_index(self, mode: int | str) -> int:
        if isinstance(mode, str):
            try:
                return self.modes.index(mode)
            except ValueError:
                raise OutOfRange(f"{self.name}: unknown mode '{mode}'") from None
        if not 0 <= int(mode) < self.n_modes:
            raise OutOfRange(f"{self.name}: mode index {mode} out of range")
        return int(mode)

    def check_intensity(self, points: Any, controls: Any = None) -> bool:
        """Check 0 <= theta <= intensity_bound on sample points in every mode."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dimension)
        u = np.zeros((len(pts), 1)) if controls is None else np.asarray(controls, dtype=float)
        ok = True
        for i in range(self.n_modes):
            theta = self.intensity(np.full(len(pts), i), pts, u)
            if np.any(theta < 0) or np.any(theta > self.intensity_bound * (1 + 1e-12)):
                ok = False
                logger.warning(
                    "%s: intensity in mode %s leaves [0, %.6g] (range %.6g..%.6g)",
                    self.name,
                    self.modes[i],
                    self.intensity_bound,
                    float(np.min(theta)),
                    float(np.max(theta)),
                )
        return ok

    def post_jump_modes(self, old: Array, uniforms: Array) -> Array:
        """Inverse-CDF draw of the next mode for each old mode."""
        cum = self._cumulative[old]
        new = np.sum(cum <= uniforms[:, None], axis=1)
        return np.minimum(new, self._last_positive[old])


def _check_row(q: Array, i: int, name: str) -> None:
    row = q[i]
    if np.any(row < 0):
        raise BadRow(f"{name}: row {i} has negative entries")
    if abs(float(np.sum(row)) - 1.0) > ROW_TOL:
        raise BadRow(f"{name}: row {i} sums to {np.sum(row):.15g}, expected 1")
    if row[i] != 0:
        raise BadRow(f"{name}: row {i} has non-zero diagonal {row[i]}")


@dataclass
class PdmpPath:
    """One simulated path: jump times T_0 = 0 < T_1 < ..., one mode and one segment per interval."""

    jump_times: Array
    modes: list[int]
    segments: list[tuple[Array, Array]]

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times) - 1

    def rows(self) -> tuple[Array, Array, Array]:
        """Flattened (times, mode indices, states) over all segments."""
        times = np.concatenate([seg[0] for seg in self.segments])
        states = np.concatenate([seg[1] for seg in self.segments])
        modes = np.concatenate(
            [np.full(len(seg[0]), m) for seg, m in zip(self.segments, self.modes, strict=True)]
        )
        return times, modes, states


@dataclass
class PdmpEnsemble:
    """Per-path summaries of a batch of PDMP paths."""

    horizon: float
    jump_counts: Array
    final_states: Array
    final_modes: Array
    occupation: Array
    time_average: Array
    min_distance: Array | None = None

    @property
    def n_paths(self) -> int:
        return len(self.jump_counts)


def _controls_for(
    controls: Sequence[JumpControl], n_jumps: Array, modes: Array, x: Array, s: Array
) -> Array:
    if len(controls) == 1:
        return np.asarray(controls[0](modes, x, s), dtype=float)
    which = np.minimum(n_jumps, len(controls) - 1)
    first = np.asarray(controls[int(which[0])](modes[:1], x[:1], s[:1]), dtype=float)
    out = np.empty((len(x), first.shape[1]))
    for j in np.unique(which):
        mask = which == j
        out[mask] = controls[int(j)](modes[mask], x[mask], s[mask])
    return out


def _rk4_batch(
    triplet: PdmpTriplet,
    controls: Sequence[JumpControl],
    n_jumps: Array,
    modes: Array,
    x: Array,
    s: Array,
    r: Array,
) -> Array:
    def rhs(y: Array, offset: Array) -> Array:
        u = _controls_for(controls, n_jumps, modes, y, s + offset)
        return triplet.drift(modes, y, u)

    rr = r[:, None]
    k1 = rhs(x, 0 * r)
    k2 = rhs(x + 0.5 * rr * k1, 0.5 * r)
    k3 = rhs(x + 0.5 * rr * k2, 0.5 * r)
    k4 = rhs(x + rr * k3, r)
    return x + (rr / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _theta(
    triplet: PdmpTriplet,
    controls: Sequence[JumpControl],
    n_jumps: Array,
    modes: Array,
    x: Array,
    s: Array,
) -> Array:
    u = _controls_for(controls, n_jumps, modes, x, s)
    return np.asarray(triplet.intensity(modes, x, u), dtype=float)


class _Stepper:
    """Advances a batch of paths through fixed global steps, jumping inside steps."""

    def __init__(
        self,
        triplet: PdmpTriplet,
        controls: Sequence[JumpControl],
        modes: Array,
        x: Array,
        rng: np.random.Generator,
        max_jumps: int,
    ) -> None:
        self.triplet = triplet
        self.controls = controls
        self.modes = modes
        self.x = x
        self.rng = rng
        self.max_jumps = max_jumps
        m = len(x)
        self.since = np.zeros(m)
        self.n_jumps = np.zeros(m, dtype=int)
        self.cumulative = np.zeros(m)
        self.threshold = -np.log1p(-rng.random(m))

    def advance(
        self,
        t: float,
        h: float,
        on_piece: Callable[[Array, Array, float, Array, Array, Array, Array], None] | None = None,
        on_jump: Callable[[Array, Array, Array, Array], None] | None = None,
    ) -> None:
        """Advance every path by h.

        on_piece(idx, modes, t, start, length, x_start, x_end) sees every flow piece;
        on_jump(idx, times, new_modes, x) sees every jump.
        """
        tr = self.triplet
        remaining = np.full(len(self.x), h)
        active = np.arange(len(self.x))
        while active.size:
            x0 = self.x[active]
            m0 = self.modes[active]
            s0 = self.since[active]
            n0 = self.n_jumps[active]
            r = remaining[active]
            x1 = _rk4_batch(tr, self.controls, n0, m0, x0, s0, r)
            if not np.all(np.isfinite(x1)):
                raise NonFinite(f"{tr.name}: non-finite state near t = {t + h:.6g}")
            th0 = _theta(tr, self.controls, n0, m0, x0, s0)
            th1 = _theta(tr, self.controls, n0, m0, x1, s0 + r)
            inc = 0.5 * (th0 + th1) * r
            need = self.threshold[active] - self.cumulative[active]
            jump = inc >= need

            stay = ~jump
            if np.any(stay):
                idx = active[stay]
                start = t + h - r[stay]
                if on_piece is not None:
                    on_piece(idx, m0[stay], t, start, r[stay], x0[stay], x1[stay])
                self.x[idx] = x1[stay]
                self.cumulative[idx] += inc[stay]
                self.since[idx] += r[stay]
                remaining[idx] = 0.0

            if not np.any(jump):
                break

            idx = active[jump]
            inc_j = inc[jump]
            safe = np.where(inc_j > 0, inc_j, 1.0)
            # Linear interpolation of Lambda within the piece
            tau = np.where(inc_j > 0, np.clip(need[jump] / safe, 0.0, 1.0), 0.0) * r[jump]
            xj = _rk4_batch(tr, self.controls, n0[jump], m0[jump], x0[jump], s0[jump], tau)
            start = t + h - r[jump]
            if on_piece is not None:
                on_piece(idx, m0[jump], t, start, tau, x0[jump], xj)
            new_modes = tr.post_jump_modes(m0[jump], self.rng.random(idx.size))
            self.x[idx] = xj
            self.modes[idx] = new_modes
            self.since[idx] = 0.0
            self.cumulative[idx] = 0.0
            self.threshold[idx] = -np.log1p(-self.rng.random(idx.size))
            self.n_jumps[idx] += 1
            remaining[idx] = r[jump] - tau
            if on_jump is not None:
                on_jump(idx, start + tau, new_modes, xj)
            if int(np.max(self.n_jumps[idx])) > self.max_jumps:
                raise JumpStorm(
                    f"{tr.name}: more than {self.max_jumps} jumps before t = {t + h:.6g}; "
                    "check the intensity bound"
                )
            active = idx[remaining[idx] > 0]


def _time_grid(horizon: float, step: float) -> Array:
    if step <= 0 or horizon <= 0:
        raise OutOfRange(f"step and horizon must be positive, got {step}, {horizon}")
    n_steps = math.ceil(horizon / step - 1e-12)
    return np.minimum(np.arange(n_steps + 1) * step, horizon)


def _flow_grid(
    triplet: PdmpTriplet,
    mode: int,
    x_start: Any,
    control: JumpControl,
    horizon: float,
    step: float,
) -> tuple[Array, Array, Array]:
    """Flow in a fixed mode on the step grid, with theta along it."""
    times = _time_grid(horizon, step)
    controls = [control]
    modes = np.array([mode])
    n0 = np.zeros(1, dtype=int)
    x = np.asarray(x_start, dtype=float).reshape(1, triplet.dimension)
    states = np.empty((len(times), triplet.dimension))
    theta = np.empty(len(times))
    states[0] = x[0]
    theta[0] = _theta(triplet, controls, n0, modes, x, np.zeros(1))[0]
    for k in range(len(times) - 1):
        h = np.array([times[k + 1] - times[k]])
        x = _rk4_batch(triplet, controls, n0, modes, x, np.array([times[k]]), h)
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"{triplet.name}: non-finite flow at t = {times[k + 1]:.6g}")
        states[k + 1] = x[0]
        theta[k + 1] = _theta(triplet, controls, n0, modes, x, np.array([times[k + 1]]))[0]
    return times, states, theta


def sample_jump_times(
    triplet: PdmpTriplet,
    mode: int | str,
    x_start: Any,
    control: JumpControl,
    horizon: float,
    step: float,
    uniform_draws: Any,
) -> Array:
    """First times with Lambda(t) >= -ln(U) for a batch of uniforms (NaN where none).

    Lambda is the trapezoid integral of theta along the flow from x_start in `mode`,
    interpolated linearly within a step.
    """
    u = np.asarray(uniform_draws, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise OutOfRange("uniform draws must lie in (0, 1)")
    times, _, theta = _flow_grid(triplet, triplet.mode_index(mode), x_start, control, horizon, step)
    big_lambda = cumulative_trapezoid(theta, times, initial=0.0)
    targets = -np.log(u)
    out = np.full(targets.shape, np.nan)
    hit = targets <= big_lambda[-1]
    k = np.searchsorted(big_lambda, targets[hit], side="left")
    k = np.clip(k, 1, len(times) - 1)
    lo, hi = big_lambda[k - 1], big_lambda[k]
    frac = np.where(hi > lo, (targets[hit] - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    out[hit] = times[k - 1] + frac * (times[k] - times[k - 1])
    return out


def sample_jump_time(
    triplet: PdmpTriplet,
    mode: int | str,
    x_start: Any,
    control: JumpControl,
    horizon: float,
    step: float,
    uniform_draw: float,
) -> float | None:
    """Scalar sample_jump_times; None when no jump occurs before the horizon."""
    t = sample_jump_times(triplet, mode, x_start, control, horizon, step, [uniform_draw])[0]
    return None if math.isnan(t) else float(t)


def sample_jump_time_thinning(
    triplet: PdmpTriplet,
    mode: int | str,
    x_start: Any,
    control: JumpControl,
    horizon: float,
    step: float,
    rng: np.random.Generator,
    n: int = 1,
) -> Array:
    """Jump times by thinning a Poisson clock of rate intensity_bound (NaN where none)."""
    bound = triplet.intensity_bound
    if not math.isfinite(bound) or bound <= 0:
        raise OutOfRange(f"{triplet.name}: thinning needs a finite positive intensity bound")
    i = triplet.mode_index(mode)
    times, states, _ = _flow_grid(triplet, i, x_start, control, horizon, step)
    controls = [control]
    out = np.full(n, np.nan)
    clock = np.zeros(n)
    active = np.arange(n)
    while active.size:
        clock[active] += rng.exponential(1.0 / bound, size=active.size)
        inside = clock[active] <= horizon
        active = active[inside]
        if not active.size:
            break
        t = clock[active]
        k = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
        modes = np.full(active.size, i)
        n0 = np.zeros(active.size, dtype=int)
        x = _rk4_batch(triplet, controls, n0, modes, states[k], times[k], t - times[k])
        theta = _theta(triplet, controls, n0, modes, x, t)
        accept = rng.random(active.size) * bound <= theta
        out[active[accept]] = t[accept]
        active = active[~accept]
    return out


def sample_post_jump(triplet: PdmpTriplet, mode: int | str, uniform_draw: float) -> int:
    """Inverse-CDF draw from the row Q(mode, .) in the fixed mode order."""
    if not 0 <= uniform_draw < 1:
        raise OutOfRange(f"uniform draw must lie in [0, 1), got {uniform_draw}")
    i = triplet.mode_index(mode)
    _check_row(triplet.transition, i, triplet.name)
    return int(triplet.post_jump_modes(np.array([i]), np.array([uniform_draw]))[0])


def simulate_pdmp(
    triplet: PdmpTriplet,
    mode0: int | str,
    x0: Any,
    horizon: float,
    step: float,
    seed: int | np.random.SeedSequence,
    *,
    controls: Sequence[JumpControl] | None = None,
    max_jumps: int = MAX_JUMPS,
) -> PdmpPath:
    """Simulate one path by alternating flow, jump-time and post-jump sampling.

    controls[n] drives the flow after the n-th jump as u_n(mode, x, time since jump);
    the last entry repeats.
    """
    times = _time_grid(horizon, step)
    controls = list(controls or [zero_control])
    x = np.asarray(x0, dtype=float).reshape(1, triplet.dimension).copy()
    stepper = _Stepper(
        triplet,
        controls,
        np.array([triplet.mode_index(mode0)]),
        x,
        np.random.default_rng(seed),
        max_jumps,
    )

    jump_times = [0.0]
    modes = [int(stepper.modes[0])]
    seg_t: list[float] = [0.0]
    seg_x: list[Array] = [x[0].copy()]
    segments: list[tuple[Array, Array]] = []

    def on_jump(idx: Array, when: Array, new_modes: Array, xj: Array) -> None:
        nonlocal seg_t, seg_x
        seg_t.append(float(when[0]))
        seg_x.append(xj[0].copy())
        segments.append((np.asarray(seg_t), np.asarray(seg_x)))
        jump_times.append(float(when[0]))
        modes.append(int(new_modes[0]))
        seg_t = [float(when[0])]
        seg_x = [xj[0].copy()]

    for k in range(len(times) - 1):
        stepper.advance(float(times[k]), float(times[k + 1] - times[k]), on_jump=on_jump)
        if seg_t[-1] < times[k + 1]:
            seg_t.append(float(times[k + 1]))
            seg_x.append(stepper.x[0].copy())
    segments.append((np.asarray(seg_t), np.asarray(seg_x)))
    return PdmpPath(jump_times=np.asarray(jump_times), modes=modes, segments=segments)


def simulate_pdmp_ensemble(
    triplet: PdmpTriplet,
    mode0: int | str,
    x0: Any,
    horizon: float,
    step: float,
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    controls: Sequence[JumpControl] | None = None,
    occupation_from: float = 0.0,
    domain: SmoothDomain | None = None,
    distance_fn: Callable[[Array], Array] | None = None,
    max_jumps: int = MAX_JUMPS,
    workers: int | None = None,
    run_id: str | None = None,
) -> PdmpEnsemble:
    """Simulate n_paths independent paths and keep per-path summaries.

    Args:
        occupation_from: Burn-in; mode occupation fractions cover [occupation_from, horizon].
        domain: Track the minimum signed distance to this domain.
        distance_fn: Track the minimum of this function of the state instead.
    """
    if not 0 <= occupation_from < horizon:
        raise OutOfRange(f"occupation_from must lie in [0, horizon), got {occupation_from}")
    run_id = run_id or gen_run_id()
    times = _time_grid(horizon, step)
    controls = list(controls or [zero_control])
    start_mode = triplet.mode_index(mode0)
    start = np.asarray(x0, dtype=float).reshape(triplet.dimension)
    g = triplet.n_modes
    distance = distance_fn
    if distance is None and domain is not None:
        dom = domain

        def distance(x: Array) -> Array:
            return np.asarray(dom.signed_distance(x), dtype=float).reshape(-1)

    window = horizon - occupation_from

    def chunk(ss: np.random.SeedSequence, size: int) -> tuple[Array, ...]:
        x = np.broadcast_to(start, (size, triplet.dimension)).copy()
        stepper = _Stepper(
            triplet, controls, np.full(size, start_mode), x, np.random.default_rng(ss), max_jumps
        )
        occupation = np.zeros((size, g))
        integral = np.zeros((size, triplet.dimension))
        min_d = distance(x) if distance is not None else np.zeros(size)

        def on_piece(
            idx: Array, modes: Array, t: float, begin: Array, length: Array, xa: Array, xb: Array
        ) -> None:
            overlap = np.clip(begin + length - occupation_from, 0.0, length)
            np.add.at(occupation, (idx, modes), overlap)
            integral[idx] += 0.5 * (xa + xb) * length[:, None]
            if distance is not None:
                min_d[idx] = np.minimum(min_d[idx], distance(xb))

        for k in range(len(times) - 1):
            stepper.advance(float(times[k]), float(times[k + 1] - times[k]), on_piece=on_piece)
        return (
            stepper.n_jumps,
            stepper.x,
            stepper.modes,
            occupation / window,
            integral / horizon,
            min_d,
        )

    counts, finals, modes, occupation, average, min_d = concat_chunks(
        run_chunked(chunk, n_paths, seed, workers=workers)
    )
    logger.info(
        "[%s] %s: %d paths, mean jumps %.4g over [0, %g]",
        run_id,
        triplet.name,
        n_paths,
        float(np.mean(counts)),
        horizon,
    )
    return PdmpEnsemble(
        horizon=horizon,
        jump_counts=counts,
        final_states=finals,
        final_modes=modes,
        occupation=occupation,
        time_average=average,
        min_distance=min_d if distance is not None else None,
    )


def stationary_distribution(transition: Any) -> Array:
    """Left eigenvector of Q for eigenvalue 1, normalised to a probability vector."""
    q = np.asarray(transition, dtype=float)
    values, vectors = linalg.eig(q.T)
    k = int(np.argmin(np.abs(values - 1.0)))
    pi = np.real(vectors[:, k])
    return pi / np.sum(pi)


def apply_generator(
    triplet: PdmpTriplet,
    test_fn: Callable[[int, Array], float],
    mode: int | str,
    x: Any,
    control: Any = None,
    *,
    gradient: Callable[[int, Array], Array] | None = None,
    stencil: float = 1e-6,
) -> float:
    """Generator <b, grad phi> + theta * sum_j (phi(j, x) - phi(i, x)) Q(i, j) at one point.

    Without an analytic gradient, central differences are used and checked against
    a doubled stencil.
    """
    i = triplet.mode_index(mode)
    y = np.asarray(x, dtype=float).reshape(triplet.dimension)
    u = np.zeros((1, 1)) if control is None else np.asarray(control, dtype=float).reshape(1, -1)
    modes = np.array([i])
    b = np.asarray(triplet.drift(modes, y[None, :], u), dtype=float)[0]
    theta = float(np.asarray(triplet.intensity(modes, y[None, :], u)).reshape(-1)[0])

    if gradient is not None:
        grad = np.asarray(gradient(i, y), dtype=float)
    else:
        grad = _central_gradient(test_fn, i, y, stencil)
        coarse = _central_gradient(test_fn, i, y, 2 * stencil)
        scale = max(1.0, float(np.linalg.norm(grad)))
        if float(np.linalg.norm(grad - coarse)) > 1e-3 * scale:
            logger.warning(
                "%s: test function is not differentiable at %s in mode %s", triplet.name, y, triplet.modes[i]
            )

    here = test_fn(i, y)
    jump = sum(
        (test_fn(j, y) - here) * triplet.transition[i, j]
        for j in range(triplet.n_modes)
        if triplet.transition[i, j] > 0
    )
    return float(b @ grad + theta * jump)


def _central_gradient(fn: Callable[[int, Array], float], mode: int, y: Array, h: float) -> Array:
    grad = np.empty_like(y)
    for k in range(y.size):
        e = np.zeros_like(y)
        e[k] = h
        grad[k] = (fn(mode, y + e) - fn(mode, y - e)) / (2 * h)
    return grad


@dataclass
class BoundaryPoint:
    """Boundary value min_u <b(mode, x, u), nu(x)> at one sample."""

    mode: int
    component: int
    point: Array
    value: float
    boundary_value: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "component": self.component,
            "point": self.point.tolist(),
            "value": self.value,
            "boundary_value": self.boundary_value,
        }


@dataclass
class BoundaryCheck:
    """Result of the boundary viability check inf_u <b, nu> <= tolerance."""

    satisfied: bool
    worst: BoundaryPoint
    witnesses: list[BoundaryPoint] = field(default_factory=list)
    discontinuities: list[BoundaryPoint] = field(default_factory=list)
    component_max: list[float] = field(default_factory=list)
    tolerance: float = BOUNDARY_TOL

    def to_dict(self, max_items: int = 10) -> dict[str, Any]:
        return {
            "satisfied": self.satisfied,
            "tolerance": self.tolerance,
            "worst": self.worst.to_dict(),
            "n_witnesses": len(self.witnesses),
            "witnesses": [w.to_dict() for w in self.witnesses[:max_items]],
            "n_discontinuities": len(self.discontinuities),
            "discontinuities": [d.to_dict() for d in self.discontinuities[:max_items]],
            "component_max": self.component_max,
        }


def check_boundary_condition(
    triplet: PdmpTriplet,
    domain: SmoothDomain,
    boundary_samples: int,
    control_grid: Any = None,
    *,
    tolerance: float = BOUNDARY_TOL,
    eta: float = INTERIOR_ETA,
) -> BoundaryCheck:
    """Check min_u <b(mode, x, u), nu(x)> <= tolerance on every boundary component and mode.

    The governing value is the interior-side limit of the drift, estimated by
    Richardson extrapolation 2 b(x - eta nu) - b(x - 2 eta nu). Samples where it
    differs from the on-boundary value by more than the tolerance are listed as
    discontinuities.
    """
    grid = np.zeros((1, 1)) if control_grid is None else np.asarray(control_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]

    points: list[BoundaryPoint] = []
    component_max = []
    for comp, (feet, normals) in enumerate(domain.boundary_samples(boundary_samples)):
        comp_max = -math.inf
        near = feet - eta * normals
        far = feet - 2 * eta * normals
        for i in range(triplet.n_modes):
            modes = np.full(len(feet), i)
            limit = np.full(len(feet), math.inf)
            on = np.full(len(feet), math.inf)
            for u in grid:
                uu = np.broadcast_to(u, (len(feet), u.size))
                b_near = triplet.drift(modes, near, uu)
                b_far = triplet.drift(modes, far, uu)
                b_on = triplet.drift(modes, feet, uu)
                lim = np.einsum("mn,mn->m", 2 * b_near - b_far, normals)
                limit = np.minimum(limit, lim)
                on = np.minimum(on, np.einsum("mn,mn->m", b_on, normals))
            for k in range(len(feet)):
                points.append(BoundaryPoint(i, comp, feet[k].copy(), float(limit[k]), float(on[k])))
            comp_max = max(comp_max, float(np.max(limit)))
        component_max.append(comp_max)

    worst = max(points, key=lambda p: p.value)
    witnesses = [p for p in points if p.value > tolerance]
    jumps = [p for p in points if abs(p.value - p.boundary_value) > tolerance]
    logger.info(
        "%s: boundary check on %d samples, worst %.3g, %d witnesses, %d discontinuities",
        triplet.name,
        len(points),
        worst.value,
        len(witnesses),
        len(jumps),
    )
    return BoundaryCheck(
        satisfied=not witnesses,
        worst=worst,
        witnesses=witnesses,
        discontinuities=jumps,
        component_max=component_max,
        tolerance=tolerance,
    )


class BadRow(NumericError):
    """Transition row is not a probability vector with zero diagonal."""

    pass


class JumpStorm(NumericError):
    """More jumps than the cap; the intensity is likely misconfigured."""

    pass
