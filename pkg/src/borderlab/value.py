"""Near-viability value estimates for controlled diffusions.

V_n(x) = inf_u E[ int_0^inf e^{-lambda t} f_n(X_t) dt ] with
f_n(x) = (1 - n d(x, complement of the interior))^+, and V the same with the
sharp indicator of the complement of the interior. The infimum over controls is
replaced by the minimum over a finite policy family evaluated on common random
numbers, so every reported minimum is an upper bound on the true value.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from borderlab.base import Estimate, NumericError, concat_chunks, gen_run_id, run_chunked
from borderlab.dynamics.flow import OutOfRange
from borderlab.dynamics.sde import (
    ControlledCoefficients,
    ControlPolicy,
    estimate_sup_moment,
    euler_maruyama,
    initial_condition_deviation,
    normal_steering_policy,
    simulate_paths,
    start_batch,
    time_grid,
)
from borderlab.geometry import HESSIAN_STENCIL, SmoothDomain, tube_grid

logger = logging.getLogger(__name__)

Array = np.ndarray
Indicator = Callable[[Array], Array]

# Margin added on top of 2 lambda0 + c_sigma^2 + c_L
LAMBDA_MARGIN = 1.0

# Halton points drawn per requested deep-interior start
DEEP_OVERSAMPLE = 64


def f_n_eval(domain: SmoothDomain, n: int, x: Any) -> Any:
    """(1 - n d(x))^+ with d(x) = max(delta_K(x), 0), the distance to the complement of the interior."""
    if n < 1:
        raise OutOfRange(f"n must be a positive integer, got {n}")
    d = np.maximum(np.asarray(domain.signed_distance(x), dtype=float), 0.0)
    out = np.maximum(1.0 - n * d, 0.0)
    return float(out) if out.ndim == 0 else out


def approximating_indicator(domain: SmoothDomain, n: int) -> Indicator:
    def f_n(x: Array) -> Array:
        return np.asarray(f_n_eval(domain, n, x), dtype=float).reshape(len(x))

    return f_n


def interior_complement_indicator(domain: SmoothDomain) -> Indicator:
    """1 on the complement of the interior, boundary included."""

    def indicator(x: Array) -> Array:
        return (np.asarray(domain.signed_distance(x)).reshape(len(x)) <= 0).astype(float)

    return indicator


def exterior_indicator(domain: SmoothDomain) -> Indicator:
    """1 strictly outside K."""

    def indicator(x: Array) -> Array:
        return (np.asarray(domain.signed_distance(x)).reshape(len(x)) < 0).astype(float)

    return indicator


@dataclass
class ValueConfig:
    """Discount, approximation index and Monte Carlo settings for value estimates.

    n_approx = None selects the sharp indicator (V itself); with `exterior` it is
    the indicator of the exterior of K instead (V_K). When `tolerance` is set
    the truncation bound e^{-lam T_max} / lam must not exceed it.
    """

    lam: float = 1.0
    n_approx: int | None = None
    horizon_cut: float = 10.0
    n_paths: int = 1000
    step: float = 0.01
    policy_family: list[ControlPolicy] = dataclasses.field(default_factory=list)
    seed: int = 0
    tolerance: float | None = None
    workers: int | None = None
    exterior: bool = False

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise OutOfRange(f"lambda must be positive, got {self.lam}")
        if self.horizon_cut <= 0 or self.step <= 0 or self.n_paths < 1:
            raise OutOfRange("horizon_cut, step and n_paths must be positive")
        if self.n_approx is not None and self.n_approx < 1:
            raise OutOfRange(f"n_approx must be a positive integer, got {self.n_approx}")
        if self.exterior and self.n_approx is not None:
            raise OutOfRange("exterior occupation uses the sharp indicator; leave n_approx unset")
        if self.tolerance is not None and self.truncation_bound > self.tolerance:
            raise OutOfRange(
                f"truncation bound {self.truncation_bound:.3g} exceeds tolerance {self.tolerance:.3g}; "
                "increase horizon_cut"
            )

    @property
    def truncation_bound(self) -> float:
        """e^{-lam T_max} / lam, the tail of the discounted integral of a [0, 1] integrand."""
        return math.exp(-self.lam * self.horizon_cut) / self.lam

    def indicator(self, domain: SmoothDomain) -> Indicator:
        if self.exterior:
            return exterior_indicator(domain)
        if self.n_approx is None:
            return interior_complement_indicator(domain)
        return approximating_indicator(domain, self.n_approx)

    def check_threshold(self, threshold: LambdaThreshold) -> None:
        """Enforced mode: reject a discount below lambda_min."""
        if self.lam < threshold.lambda_min:
            raise OutOfRange(
                f"lambda = {self.lam:.6g} is below lambda_min = {threshold.lambda_min:.6g}"
            )


@dataclass
class OccupationEstimate:
    """Discounted occupation E[int_0^T_max e^{-lambda t} g(X_t) dt], optionally times lambda."""

    mean: float
    std_error: float
    n_paths: int
    truncation_bound: float
    normalized: bool
    lam: float
    policy: str = ""
    candidates: list[OccupationEstimate] = dataclasses.field(default_factory=list)

    @property
    def upper(self) -> float:
        """mean + 2 standard errors + the truncated tail, on the reported scale."""
        tail = self.lam * self.truncation_bound if self.normalized else self.truncation_bound
        return self.mean + 2 * self.std_error + tail

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "policy": self.policy,
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "truncation_bound": self.truncation_bound,
            "normalized": self.normalized,
            "lambda": self.lam,
        }
        if self.candidates:
            data["candidates"] = [c.to_dict() for c in self.candidates]
        return data


def discounted_occupation(
    coeffs: ControlledCoefficients,
    policy: ControlPolicy,
    x0: Any,
    lam: float,
    target_indicator: Indicator,
    config: ValueConfig,
    *,
    normalized: bool = True,
) -> OccupationEstimate:
    """Monte Carlo discounted occupation with trapezoidal time quadrature up to T_max."""
    if not lam > 0:
        raise OutOfRange(f"lambda must be positive, got {lam}")
    policy.check(coeffs)
    times = time_grid(config.horizon_cut, config.step)
    discount = np.exp(-lam * times)

    def chunk(ss: np.random.SeedSequence, size: int) -> Array:
        x = start_batch(coeffs, x0, size)
        total = np.zeros(size)
        previous = target_indicator(x) * discount[0]

        def accumulate(k: int, states: list[Array]) -> None:
            current = target_indicator(states[0]) * discount[k]
            total[:] += 0.5 * (times[k] - times[k - 1]) * (previous + current)
            previous[:] = current

        euler_maruyama(
            coeffs, policy, [x], times, [np.random.default_rng(ss)], on_step=accumulate
        )
        return total

    values = concat_chunks(run_chunked(chunk, config.n_paths, config.seed, workers=config.workers))
    if normalized:
        values = lam * values
    estimate = Estimate.from_samples(values)
    return OccupationEstimate(
        mean=estimate.mean,
        std_error=estimate.std_error,
        n_paths=estimate.n,
        truncation_bound=math.exp(-lam * config.horizon_cut) / lam,
        normalized=normalized,
        lam=lam,
        policy=policy.label,
    )


def default_policy_family(
    coeffs: ControlledCoefficients, domain: SmoothDomain
) -> list[ControlPolicy]:
    """One constant policy per grid control, plus normal steering when there is a choice."""
    family = [ControlPolicy.constant(u) for u in coeffs.control_grid]
    if len(coeffs.control_grid) > 1:
        family.append(normal_steering_policy(coeffs, domain))
    return family


def estimate_value(
    coeffs: ControlledCoefficients,
    domain: SmoothDomain,
    x0: Any,
    config: ValueConfig,
    *,
    run_id: str | None = None,
) -> OccupationEstimate:
    """Minimum over the policy family of the normalized discounted occupation of f_n (or the sharp indicator).

    Every policy runs on the same root seed.
    """
    if not config.policy_family:
        raise OutOfRange("policy_family must not be empty")
    run_id = run_id or gen_run_id()
    indicator = config.indicator(domain)
    candidates = [
        discounted_occupation(coeffs, policy, x0, config.lam, indicator, config)
        for policy in config.policy_family
    ]
    best = min(candidates, key=lambda c: c.mean)
    logger.info(
        "[%s] V_%s(%s) = %.6g +/- %.2g via %s (%d policies)",
        run_id,
        "K" if config.exterior else "inf" if config.n_approx is None else config.n_approx,
        np.array2string(np.asarray(x0, dtype=float), precision=4),
        best.mean,
        best.std_error,
        best.policy,
        len(candidates),
    )
    return dataclasses.replace(best, candidates=candidates)


@dataclass
class LambdaThreshold:
    """Discount threshold lambda_min = 2 lambda0_fit + c_sigma^2 + c_L + margin and the t* checks."""

    lambda_min: float
    c_sigma: float
    c_L: float
    lambda0_fit: float
    t_star: float
    k_fit: float
    exit_probability: Estimate | None
    exit_ok: bool
    discount_ok: bool
    margin: float = LAMBDA_MARGIN

    @property
    def discount_level(self) -> float:
        return math.exp(-self.lambda_min * self.t_star) if math.isfinite(self.t_star) else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda_min": self.lambda_min,
            "c_sigma": self.c_sigma,
            "c_L": self.c_L,
            "lambda0_fit": self.lambda0_fit,
            "t_star": self.t_star,
            "k_fit": self.k_fit,
            "margin": self.margin,
            "exit_probability": None if self.exit_probability is None else self.exit_probability.to_dict(),
            "exit_ok": self.exit_ok,
            "discount_level": self.discount_level,
            "discount_ok": self.discount_ok,
        }


def _generator_delta(
    coeffs: ControlledCoefficients, u: Array, pts: Array, gradient: Array, hessian: Array
) -> Array:
    """L^u delta_K = 1/2 Tr(sigma sigma^T D^2 delta_K) + <b, D delta_K>."""
    controls = np.broadcast_to(u, (len(pts), u.size))
    b = coeffs.drift(pts, controls)
    s = coeffs.diffusion(pts, controls)
    a = np.einsum("mik,mjk->mij", s, s)
    return 0.5 * np.einsum("mij,mji->m", a, hessian) + np.einsum("mn,mn->m", b, gradient)


def boundary_constants(
    coeffs: ControlledCoefficients, domain: SmoothDomain, tube_samples: int
) -> tuple[float, float]:
    """Sampled suprema c_sigma and c_L over tube points and grid controls.

    Raises:
        TubeTooSmall: If eps0 cannot hold the second-derivative stencil.
    """
    if domain.eps0 <= 2 * HESSIAN_STENCIL:
        raise TubeTooSmall(
            f"eps0 = {domain.eps0:.3g} is too small for the {HESSIAN_STENCIL:g} Hessian stencil"
        )
    pts = tube_grid(domain, domain.eps0, tube_samples)
    proj = domain.project(pts)
    depth = proj.distance
    feet = proj.foot
    grad_x = domain.gradient(pts)
    grad_y = -proj.normal
    hess_x = domain.hessian(pts)
    hess_y = domain.hessian(feet)

    c_sigma = 0.0
    c_l = 0.0
    for u in coeffs.control_grid:
        controls = np.broadcast_to(u, (len(pts), u.size))
        s_x = coeffs.diffusion(pts, controls)
        s_y = coeffs.diffusion(feet, controls)
        c_sigma = max(c_sigma, float(np.max(np.linalg.norm(s_x - s_y, axis=(1, 2)) / depth)))
        l_x = _generator_delta(coeffs, u, pts, grad_x, hess_x)
        l_y = _generator_delta(coeffs, u, feet, grad_y, hess_y)
        c_l = max(c_l, float(np.max(np.abs(l_x - l_y) / depth)))
    return c_sigma, c_l


def _fit_growth(ratio: float, horizon: float) -> float:
    """Smallest lambda >= 0 with lambda e^{lambda T} >= ratio."""
    if ratio <= 0:
        return 0.0
    lo = 1e-12

    def excess(lam: float) -> float:
        return math.log(lam) + lam * horizon - math.log(ratio)

    if excess(lo) >= 0:
        return 0.0
    hi = 1.0
    while excess(hi) < 0:
        hi *= 2.0
    return float(optimize.brentq(excess, lo, hi))


def lambda_threshold(
    coeffs: ControlledCoefficients,
    domain: SmoothDomain,
    tube_samples: int,
    *,
    policy: ControlPolicy | None = None,
    horizon: float = 1.0,
    step: float = 0.01,
    n_paths: int = 1000,
    seed: int = 0,
    margin: float = LAMBDA_MARGIN,
    workers: int | None = None,
    run_id: str | None = None,
) -> LambdaThreshold:
    """Estimate c_sigma, c_L, lambda0 and t* and return the discount threshold.

    lambda0_fit solves lambda e^{lambda T} = ratio for the simulated sup-moment and
    initial-condition ratios. k_fit is the largest ratio E sup|X_s - x|^2 / t over
    t in {T/4, T/2, T}; t* = eps0^3 / (32 k_fit diam K). Both t* inequalities are
    checked: the exit probability P(sup_{s<=t*} |X_s - x| >= eps0/2) and the discount
    e^{-lambda_min t*} against eps0 / (8 diam K).
    """
    run_id = run_id or gen_run_id()
    if not margin > 0:
        raise OutOfRange(f"margin must be positive, got {margin}")
    c_sigma, c_l = boundary_constants(coeffs, domain, tube_samples)
    policy = policy or ControlPolicy.constant(coeffs.control_grid[0])

    starts = tube_grid(domain, domain.eps0, 2)
    x, y = starts[0], starts[-1]
    if np.allclose(x, y):
        y = x - 0.5 * domain.eps0 * domain.project(x).normal[0]

    moment = estimate_sup_moment(
        coeffs, policy, x, horizon, n_paths, step, seed, workers=workers, run_id=run_id
    )
    moment_ratio = moment.estimate.mean / (1.0 + float(x @ x))
    deviation = initial_condition_deviation(
        coeffs, policy, x, y, horizon, step, n_paths, seed, workers=workers
    )
    deviation_ratio = deviation.mean / float(np.linalg.norm(x - y))
    lambda0_fit = max(_fit_growth(moment_ratio, horizon), _fit_growth(deviation_ratio, horizon))

    k_fit = 0.0
    for t in (horizon / 4, horizon / 2, horizon):
        spread = estimate_sup_moment(
            coeffs, policy, x, t, n_paths, min(step, t / 4), seed, center=x, workers=workers
        )
        k_fit = max(k_fit, spread.estimate.mean / t)

    diameter = domain.diameter()
    level = domain.eps0 / (8 * diameter)
    lambda_min = 2 * lambda0_fit + c_sigma**2 + c_l + margin

    if k_fit > 0:
        t_star = domain.eps0**3 / (32 * k_fit * diameter)
        paths = simulate_paths(
            coeffs, policy, x, t_star, min(step, t_star / 20), n_paths, seed, workers=workers
        )
        excursion = np.max(np.linalg.norm(paths.states - x, axis=2), axis=0)
        exit_probability = Estimate.from_samples((excursion >= domain.eps0 / 2).astype(float))
        exit_ok = exit_probability.mean <= level
        discount_ok = math.exp(-lambda_min * t_star) <= level
    else:
        t_star = math.inf
        exit_probability = None
        exit_ok = True
        discount_ok = True

    if not discount_ok:
        logger.warning(
            "[%s] e^{-lambda_min t*} = %.3g exceeds eps0/(8 diam K) = %.3g; "
            "a larger discount is needed for the t* argument",
            run_id,
            math.exp(-lambda_min * t_star),
            level,
        )
    logger.info(
        "[%s] lambda_min = %.6g (lambda0_fit %.4g, c_sigma %.4g, c_L %.4g, t* %.4g)",
        run_id,
        lambda_min,
        lambda0_fit,
        c_sigma,
        c_l,
        t_star,
    )
    return LambdaThreshold(
        lambda_min=lambda_min,
        c_sigma=c_sigma,
        c_L=c_l,
        lambda0_fit=lambda0_fit,
        t_star=t_star,
        k_fit=k_fit,
        exit_probability=exit_probability,
        exit_ok=exit_ok,
        discount_ok=discount_ok,
        margin=margin,
    )


@dataclass
class Certificate:
    """Outcome of the near-viability search at one start."""

    achieved: bool
    policy: str | None
    estimate: OccupationEstimate
    epsilon: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "achieved": self.achieved,
            "policy": self.policy,
            "epsilon": self.epsilon,
            "estimate": self.estimate.to_dict(),
        }


def near_viability_certificate(
    coeffs: ControlledCoefficients,
    domain: SmoothDomain,
    x0: Any,
    epsilon: float,
    config: ValueConfig,
) -> Certificate:
    """Search the policy family for normalized mean + 2 std_error + lambda * truncation <= epsilon."""
    if not epsilon > 0:
        raise OutOfRange(f"epsilon must be positive, got {epsilon}")
    value = estimate_value(coeffs, domain, x0, config)
    witnesses = [c for c in value.candidates if c.upper <= epsilon]
    if witnesses:
        witness = min(witnesses, key=lambda c: c.upper)
        return Certificate(True, witness.policy, witness, epsilon)
    best = min(value.candidates, key=lambda c: c.upper)
    return Certificate(False, None, best, epsilon)


@dataclass
class TubeScan:
    """Values at tube starts (delta_K <= eps0/2) and deep-interior starts."""

    tube_points: Array
    tube_values: list[OccupationEstimate]
    deep_points: Array
    deep_values: list[OccupationEstimate]

    @property
    def max_tube(self) -> OccupationEstimate:
        return max(self.tube_values, key=lambda v: v.mean)

    @property
    def max_deep(self) -> OccupationEstimate | None:
        return max(self.deep_values, key=lambda v: v.mean) if self.deep_values else None

    @property
    def consistent(self) -> bool:
        """max deep value <= max tube value + 2 joint standard errors."""
        deep = self.max_deep
        if deep is None:
            return True
        tube = self.max_tube
        joint = math.hypot(deep.std_error, tube.std_error)
        return deep.mean <= tube.mean + 2 * joint

    def to_dict(self) -> dict[str, Any]:
        return {
            "tube": [
                {"x": p.tolist(), **v.to_dict()}
                for p, v in zip(self.tube_points, self.tube_values, strict=True)
            ],
            "deep": [
                {"x": p.tolist(), **v.to_dict()}
                for p, v in zip(self.deep_points, self.deep_values, strict=True)
            ],
            "consistent": self.consistent,
        }


def deep_interior_points(domain: SmoothDomain, n: int, seed: int = 0) -> Array:
    """Halton points of the boundary bounding box with delta_K > eps0 / 2."""
    if n < 1:
        return np.empty((0, domain.dimension))
    feet = np.concatenate([f for f, _ in domain.boundary_samples(256)])
    lo, hi = feet.min(axis=0), feet.max(axis=0)
    if domain.dimension == 1:
        raw = np.linspace(lo[0], hi[0], DEEP_OVERSAMPLE * n + 2)[1:-1, None]
    else:
        sampler = qmc.Halton(d=domain.dimension, scramble=True, seed=seed)
        raw = qmc.scale(sampler.random(DEEP_OVERSAMPLE * n), lo, hi)
    keep = raw[np.asarray(domain.signed_distance(raw)) > domain.eps0 / 2]
    if len(keep) == 0:
        return np.empty((0, domain.dimension))
    idx = np.linspace(0, len(keep) - 1, min(n, len(keep))).round().astype(int)
    return keep[np.unique(idx)]


def tube_value_scan(
    coeffs: ControlledCoefficients,
    domain: SmoothDomain,
    config: ValueConfig,
    n_tube: int,
    n_deep: int,
) -> TubeScan:
    """Value estimates over tube starts in {delta_K <= eps0/2} and deep-interior starts."""
    run_id = gen_run_id()
    tube_points = tube_grid(domain, domain.eps0 / 2, n_tube)
    deep_points = deep_interior_points(domain, n_deep, config.seed)
    tube_values = [estimate_value(coeffs, domain, x, config, run_id=run_id) for x in tube_points]
    deep_values = [estimate_value(coeffs, domain, x, config, run_id=run_id) for x in deep_points]
    scan = TubeScan(tube_points, tube_values, deep_points, deep_values)
    if not scan.consistent:
        logger.warning("[%s] deep-interior values exceed the tube maximum", run_id)
    return scan


class TubeTooSmall(NumericError):
    """eps0 is too small for the finite-difference stencil."""

    pass
