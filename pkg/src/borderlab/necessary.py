"""Local Lipschitz-like necessary condition for invariance of the interior.

For a field b and a domain K the outward speed b+(x) = max(<b(x), nu(pi x)>, 0)
is compared with its value at the boundary foot pi(x):

    zeta(eps) = inf { |b+(x) - b+(pi x)| / delta_K(x) : 0 < delta_K(x) <= eps }

A bounded zeta is the classical Lipschitz-like condition. When zeta blows up,
the growth of its generalized inverse decides whether invariance of the interior
is still possible; dichotomy_classify turns that into a resolution-qualified
verdict.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import optimize
from scipy.interpolate import PchipInterpolator

from borderlab.base import NumericError, gen_run_id
from borderlab.dynamics.flow import OutOfRange, VectorField
from borderlab.geometry import BadTube, SmoothDomain

logger = logging.getLogger(__name__)

# Verdicts, weakest first
ZETA_BOUNDED = "zeta_bounded"
INCONCLUSIVE = "inconclusive"
ASSETA_HOLDS = "asseta_holds"
INVARIANCE_EXCLUDED = "invariance_excluded"
VERDICT_STRENGTH = {ZETA_BOUNDED: 0, INCONCLUSIVE: 1, ASSETA_HOLDS: 2, INVARIANCE_EXCLUDED: 3}

# Distance levels span [eps * DEPTH_SPAN, eps] at every grid level
DEPTH_SPAN = 1e-2

# Incumbent minimisers refined per level
REFINE_ROUNDS = 3

# Raw infima above the envelope by more than this trigger a density warning
ENVELOPE_WARN = 0.10

# Relative growth of zeta over the last decade below which zeta counts as bounded
BOUNDED_GROWTH = 0.01

# Slope thresholds for the dichotomy
SLOPE_THRESHOLD = 0.05

# Interior offset for the Richardson foot value
FOOT_ETA = 1e-7

DEFAULT_BETAS = (1.25, 1.5, 2.0, 3.0)
DEFAULT_DELTAS = tuple(np.logspace(-1, -12, 45))

Array = np.ndarray


def _outward_speed(field: VectorField, x: Array, normals: Array) -> Array:
    v = np.asarray(field(x), dtype=float)
    return np.maximum(np.einsum("mn,mn->m", v, normals), 0.0)


def _foot_speed(field: VectorField, feet: Array, normals: Array) -> Array:
    """b+ at boundary feet, falling back to the interior-side Richardson limit."""
    with np.errstate(all="ignore"):
        values = _outward_speed(field, feet, normals)
    bad = ~np.isfinite(values)
    if np.any(bad):
        near = _outward_speed(field, feet[bad] - FOOT_ETA * normals[bad], normals[bad])
        far = _outward_speed(field, feet[bad] - 2 * FOOT_ETA * normals[bad], normals[bad])
        values[bad] = np.maximum(2 * near - far, 0.0)
    return values


def b_plus(field: VectorField, domain: SmoothDomain, x: Any) -> float:
    """Outward speed max(<b(x), nu(pi x)>, 0) at a tube point.

    Raises:
        OutsideTube: If x is farther than eps0 from the boundary.
    """
    frame = domain.boundary_frame(x, require_tube=True)
    v = np.asarray(field(np.atleast_1d(np.asarray(x, dtype=float))[None, :]), dtype=float)[0]
    return max(float(v @ frame.normal), 0.0)


@dataclass
class ZetaProfile:
    """Sampled zeta profile of one boundary component, with its dichotomy verdict."""

    eps_grid: Array
    zeta_values: Array
    zeta_eps0: float
    verdict: str
    beta_grid: tuple[float, ...] = DEFAULT_BETAS
    delta_grid: tuple[float, ...] = DEFAULT_DELTAS
    component: int = 0
    raw_values: Array | None = None
    sup_values: Array | None = None
    resolution: dict[str, Any] = dataclasses.field(default_factory=dict)
    dichotomy_slopes: dict[float, float] = dataclasses.field(default_factory=dict)
    components: list[ZetaProfile] = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "component": self.component,
            "verdict": self.verdict,
            "zeta_eps0": self.zeta_eps0,
            "eps": self.eps_grid.tolist(),
            "zeta": self.zeta_values.tolist(),
            "beta_grid": list(self.beta_grid),
            "dichotomy_slopes": {str(k): v for k, v in self.dichotomy_slopes.items()},
            "resolution": self.resolution,
            "components": [
                {"component": c.component, "verdict": c.verdict, "zeta_eps0": c.zeta_eps0}
                for c in self.components
            ],
        }


@dataclass
class RatioEnvelopes:
    """Per-level inf and sup of |b+(x) - b+(pi x)| / delta_K(x) over the same samples."""

    eps_grid: Array
    inf_values: Array
    sup_values: Array


def _levels(domain: SmoothDomain, eps_grid: Sequence[float]) -> Array:
    eps = np.asarray(sorted({float(e) for e in eps_grid}, reverse=True))
    if eps.size == 0 or eps[-1] <= 0:
        raise EmptyTube("eps grid must contain positive levels")
    if eps[0] > domain.eps0 * (1 + 1e-12):
        raise EmptyTube(f"eps grid exceeds eps0 = {domain.eps0:.6g}")
    return eps


def _split_samples(domain: SmoothDomain, samples_per_level: int) -> tuple[int, int]:
    if samples_per_level < 1:
        raise EmptyTube(f"samples_per_level must be positive, got {samples_per_level}")
    if domain.dimension == 1:
        return 1, samples_per_level
    n_depth = max(4, int(math.sqrt(samples_per_level)))
    return max(1, samples_per_level // n_depth), n_depth


def _component_ratios(
    field: VectorField,
    feet: Array,
    normals: Array,
    eps: Array,
    n_depth: int,
) -> tuple[Array, Array, list[tuple[float, int]]]:
    """Raw inf, sup and the incumbent (depth, foot index) at each level."""
    foot_value = _foot_speed(field, feet, normals)
    infs = np.empty(eps.size)
    sups = np.empty(eps.size)
    best: list[tuple[float, int]] = []
    for i, e in enumerate(eps):
        depths = np.unique(np.append(np.geomspace(e * DEPTH_SPAN, e, n_depth), e))
        pts = (feet[None, :, :] - depths[:, None, None] * normals[None, :, :]).reshape(-1, feet.shape[1])
        nrm = np.broadcast_to(normals, (depths.size,) + normals.shape).reshape(-1, feet.shape[1])
        speed = _outward_speed(field, pts, nrm)
        d = np.repeat(depths, len(feet))
        ratio = np.abs(speed - np.tile(foot_value, depths.size)) / d
        if not np.all(np.isfinite(ratio)):
            raise NumericError(f"{field.name}: non-finite outward speed in the tube at eps = {e:.3g}")
        k = int(np.argmin(ratio))
        infs[i] = ratio[k]
        sups[i] = float(np.max(ratio))
        best.append((float(d[k]), k % len(feet)))
    return infs, sups, best


def _refine(
    field: VectorField,
    foot: Array,
    normal: Array,
    foot_value: float,
    eps: float,
) -> float:
    """Bounded 1-D minimisation of the ratio over ln(depth) in [ln(eps * DEPTH_SPAN), ln eps]."""

    def ratio(log_d: float) -> float:
        d = math.exp(log_d)
        x = (foot - d * normal)[None, :]
        return float(abs(_outward_speed(field, x, normal[None, :])[0] - foot_value) / d)

    result = optimize.minimize_scalar(
        ratio, bounds=(math.log(eps * DEPTH_SPAN), math.log(eps)), method="bounded"
    )
    return float(result.fun)


def ratio_envelopes(
    field: VectorField,
    domain: SmoothDomain,
    eps_grid: Sequence[float],
    samples_per_level: int,
) -> list[RatioEnvelopes]:
    """Sampled inf and sup of the zeta ratio per level, one record per boundary component."""
    eps = _levels(domain, eps_grid)
    n_boundary, n_depth = _split_samples(domain, samples_per_level)
    out = []
    for feet, normals in domain.boundary_samples(n_boundary):
        infs, sups, _ = _component_ratios(field, feet, normals, eps, n_depth)
        out.append(RatioEnvelopes(eps, infs, sups))
    return out


def zeta_profile(
    field: VectorField,
    domain: SmoothDomain,
    eps_grid: Sequence[float],
    samples_per_level: int,
    *,
    beta_grid: Sequence[float] = DEFAULT_BETAS,
    delta_grid: Sequence[float] = DEFAULT_DELTAS,
    run_id: str | None = None,
) -> ZetaProfile:
    """Sample zeta(eps) per boundary component and classify each profile.

    Each level combines boundary samples with log-spaced depths in
    [eps * 1e-2, eps], then refines the best samples with a bounded scalar
    minimisation. The reported profile is the component with the strongest verdict.

    Raises:
        EmptyTube: If the grid or the sample count is empty.
    """
    run_id = run_id or gen_run_id()
    eps = _levels(domain, eps_grid)
    if eps[0] < domain.eps0 * (1 - 1e-12):
        eps = np.concatenate([[domain.eps0], eps])
    n_boundary, n_depth = _split_samples(domain, samples_per_level)
    logger.info(
        "[%s] zeta %s: %d levels, %d boundary x %d depth samples/level",
        run_id,
        field.name,
        eps.size,
        n_boundary,
        n_depth,
    )

    profiles = []
    for comp, (feet, normals) in enumerate(domain.boundary_samples(n_boundary)):
        raw, sups, best = _component_ratios(field, feet, normals, eps, n_depth)
        foot_value = _foot_speed(field, feet, normals)
        for i, e in enumerate(eps):
            # Refine around the incumbent and its neighbours
            _, j = best[i]
            candidates = sorted({j, (j - 1) % len(feet), (j + 1) % len(feet)})[:REFINE_ROUNDS]
            for k in candidates:
                raw[i] = min(raw[i], _refine(field, feet[k], normals[k], float(foot_value[k]), e))

        envelope = np.minimum.accumulate(raw[::-1])[::-1]
        excess = raw > envelope * (1 + ENVELOPE_WARN) + 1e-300
        if np.any(excess):
            logger.warning(
                "[%s] zeta %s component %d: %d raw infima exceed the monotone envelope by >10%%; "
                "increase samples_per_level",
                run_id,
                field.name,
                comp,
                int(np.sum(excess)),
            )
        profile = ZetaProfile(
            eps_grid=eps,
            zeta_values=envelope,
            zeta_eps0=float(envelope[0]),
            verdict=INCONCLUSIVE,
            beta_grid=tuple(beta_grid),
            delta_grid=tuple(delta_grid),
            component=comp,
            raw_values=raw,
            sup_values=sups,
            resolution={
                "boundary_samples": int(len(feet)),
                "depth_samples": n_depth,
                "depth_span": DEPTH_SPAN,
                "eps_min": float(eps[-1]),
            },
        )
        profile.verdict, profile.dichotomy_slopes = _classify(profile, beta_grid, delta_grid, run_id)
        profiles.append(profile)

    strongest = max(profiles, key=lambda p: VERDICT_STRENGTH[p.verdict])
    strongest.components = profiles
    logger.info(
        "[%s] zeta %s: verdict %s from component %d (zeta(eps0) = %.6g)",
        run_id,
        field.name,
        strongest.verdict,
        strongest.component,
        strongest.zeta_eps0,
    )
    return strongest


def _inverse_nodes(profile: ZetaProfile) -> tuple[Array, Array]:
    """Strictly increasing (ln zeta, ln eps) nodes; plateaus keep their largest eps."""
    log_zeta: list[float] = []
    log_eps: list[float] = []
    for e, z in zip(profile.eps_grid, profile.zeta_values, strict=True):
        if z <= 0:
            continue
        lz = math.log(z)
        if log_zeta and lz <= log_zeta[-1]:
            continue
        log_zeta.append(lz)
        log_eps.append(math.log(e))
    return np.asarray(log_zeta), np.asarray(log_eps)


def _eps_at_level(profile: ZetaProfile, target: float, *, cap: bool = True) -> float:
    """sup { eps : zeta(eps) >= target } by monotone interpolation of the profile."""
    lz, le = _inverse_nodes(profile)
    if lz.size == 0 or target <= math.exp(lz[0]):
        return float(profile.eps_grid[0])
    if target > math.exp(lz[-1]):
        if not cap:
            raise OutOfRange(
                f"level {target:.6g} exceeds the resolved zeta range (max {math.exp(lz[-1]):.6g})"
            )
        return float(math.exp(le[-1]))
    if lz.size == 1:
        return float(math.exp(le[0]))
    return float(math.exp(PchipInterpolator(lz, le)(math.log(target))))


def f_zeta_inverse(profile: ZetaProfile, p: float, *, cap: bool = True) -> float:
    """Generalized inverse inf { r >= 1/eps0 : 1 - zeta(eps0) / zeta(1/r) >= p }.

    Raises:
        BoundedZeta: If the profile is numerically bounded.
        OutOfRange: If p is outside [0, 1), or beyond the resolved range when cap is False.
    """
    if profile.verdict == ZETA_BOUNDED:
        raise BoundedZeta("zeta is bounded; F_zeta is degenerate")
    if not 0 <= p < 1:
        raise OutOfRange(f"p must lie in [0, 1), got {p}")
    return _inverse(profile, p, cap=cap)


def _inverse(profile: ZetaProfile, p: float, *, cap: bool = True) -> float:
    return 1.0 / _eps_at_level(profile, profile.zeta_eps0 / (1.0 - p), cap=cap)


def _resolvable_deltas(profile: ZetaProfile, delta_grid: Sequence[float]) -> Array:
    deltas = np.asarray(sorted(delta_grid, reverse=True), dtype=float)
    deltas = deltas[(deltas > 0) & (deltas < 1)]
    z_max = float(np.max(profile.zeta_values))
    if profile.zeta_eps0 > 0 and z_max > 0:
        deltas = deltas[deltas >= profile.zeta_eps0 / z_max]
    return deltas


def dichotomy_values(
    profile: ZetaProfile, beta: float, delta_grid: Sequence[float]
) -> tuple[Array, Array]:
    """P(beta, delta) = delta (-ln delta)^beta ln F_zeta^{-1}(1 - delta) on the resolvable deltas.

    Deltas whose level zeta(eps0) / delta lies beyond the sampled profile, or where
    ln F_zeta^{-1} is not positive, are dropped.
    """
    deltas = _resolvable_deltas(profile, delta_grid)
    values = np.array(
        [d * (-math.log(d)) ** beta * math.log(_inverse(profile, 1.0 - d)) for d in deltas]
    )
    keep = values > 0
    return deltas[keep], values[keep]


def _is_bounded(profile: ZetaProfile) -> bool:
    eps, zeta = profile.eps_grid, profile.zeta_values
    if float(zeta[-1]) <= 0:
        return True
    target = float(eps[-1]) * 10
    if target >= float(eps[0]):
        reference = float(zeta[0])
    else:
        reference = float(np.interp(math.log(target), np.log(eps[::-1]), zeta[::-1]))
    if reference <= 0:
        return False
    return float(zeta[-1]) / reference - 1.0 < BOUNDED_GROWTH


def _classify(
    profile: ZetaProfile,
    beta_grid: Sequence[float],
    delta_grid: Sequence[float],
    run_id: str,
) -> tuple[str, dict[float, float]]:
    if _is_bounded(profile):
        return ZETA_BOUNDED, {}
    slopes: dict[float, float] = {}
    for beta in beta_grid:
        deltas, values = dichotomy_values(profile, beta, delta_grid)
        if deltas.size < len(delta_grid):
            logger.debug(
                "[%s] dichotomy beta=%g uses %d of %d deltas", run_id, beta, deltas.size, len(delta_grid)
            )
        if deltas.size < 3:
            logger.warning(
                "[%s] dichotomy beta=%g: only %d resolvable deltas; verdict inconclusive",
                run_id,
                beta,
                deltas.size,
            )
            return INCONCLUSIVE, slopes
        x = np.log(-np.log(deltas))
        y = np.log(values)
        # Last resolvable decade of delta
        tail = deltas <= deltas[-1] * 10
        if np.sum(tail) < 3:
            tail = np.arange(deltas.size) >= deltas.size - 3
        slopes[float(beta)] = float(np.polyfit(x[tail], y[tail], 1)[0])

    if all(s > SLOPE_THRESHOLD for s in slopes.values()):
        return ASSETA_HOLDS, slopes
    if any(s < -SLOPE_THRESHOLD for s in slopes.values()):
        return INVARIANCE_EXCLUDED, slopes
    return INCONCLUSIVE, slopes


def dichotomy_classify(
    profile: ZetaProfile,
    beta_grid: Sequence[float] = DEFAULT_BETAS,
    delta_grid: Sequence[float] = DEFAULT_DELTAS,
) -> str:
    """Verdict for one profile: zeta_bounded, asseta_holds, invariance_excluded or inconclusive.

    zeta is bounded when it grows by less than 1% over the last eps decade. Otherwise
    the slope of ln P(beta, delta) against ln ln(1/delta) over the last resolvable
    delta decade decides: above +0.05 for every beta means P diverges;
    below -0.05 for some beta means it stays bounded and invariance is excluded.
    """
    verdict, slopes = _classify(profile, beta_grid, delta_grid, gen_run_id())
    profile.dichotomy_slopes = slopes
    return verdict


@dataclass
class EscapeSchedule:
    """Levels eps^j of the escape recursion and the partial times t_k."""

    indices: Array
    levels: Array
    times: Array

    @property
    def total_time(self) -> float:
        return float(self.times[-1]) if self.times.size else 0.0


def escape_schedule(profile: ZetaProfile, n: int, levels: int) -> EscapeSchedule:
    """eps^j = sup { eps : zeta(eps) >= max(j, j zeta(eps0)) } for j = n .. n + levels.

    t_k = sum_{j=n}^{k} (ln eps^j - ln eps^{j+1}) / j. The recursion stops where the
    level leaves the sampled range of the profile.
    """
    if n < 1 or levels < 1:
        raise OutOfRange(f"escape_schedule needs n >= 1 and levels >= 1, got {n}, {levels}")
    z_max = float(np.max(profile.zeta_values))
    indices = []
    eps_levels = []
    for j in range(n, n + levels + 1):
        target = max(j, j * profile.zeta_eps0)
        if target > z_max:
            break
        indices.append(j)
        eps_levels.append(_eps_at_level(profile, target))
    if len(eps_levels) < 2:
        raise OutOfRange(f"zeta never reaches level {max(n, n * profile.zeta_eps0):.6g} on the grid")
    lv = np.asarray(eps_levels)
    idx = np.asarray(indices)
    increments = (np.log(lv[:-1]) - np.log(lv[1:])) / idx[:-1]
    return EscapeSchedule(indices=idx, levels=lv, times=np.cumsum(increments))


def profile_field(kind: str, parameter: float) -> VectorField:
    """One-dimensional fields with a closed-form zeta near 0 on K = [0, 1].

    "hoelder": b(x) = -x^kappa, so b+ = delta^kappa and zeta(eps) = eps^(kappa - 1).
    "log_modulus": b(x) = -x (ln 1/x)^alpha, so zeta(eps) = (ln 1/eps)^alpha.
    """
    if kind == "hoelder":
        kappa = parameter
        if not 0 < kappa:
            raise OutOfRange(f"kappa must be positive, got {kappa}")

        def hoelder(p: Array) -> Array:
            return -np.maximum(p, 0.0) ** kappa

        return VectorField(hoelder, f"hoelder_{kappa:g}", 1, "hoelder")
    if kind == "log_modulus":
        alpha = parameter

        def log_modulus(p: Array) -> Array:
            x = np.clip(p, 0.0, 1.0)
            safe = np.where((x > 0) & (x < 1), x, 0.5)
            return np.where((x > 0) & (x < 1), -safe * np.log(1.0 / safe) ** alpha, 0.0)

        return VectorField(log_modulus, f"log_modulus_{alpha:g}", 1, "log-modulus")
    raise OutOfRange(f"Unknown profile field '{kind}', expected 'hoelder' or 'log_modulus'")


class EmptyTube(BadTube):
    """No admissible tube level to sample."""

    pass


class BoundedZeta(NumericError):
    """zeta is bounded, so F_zeta and its inverse are degenerate."""

    pass
