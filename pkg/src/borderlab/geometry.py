"""Compact smooth domains and their boundary geometry.

Signed distance, unique boundary projection, outward normal, tube radius and a
C2 cutoff for intervals, balls, annuli and implicit level-set domains.
Sign convention: the signed distance is positive inside K and negative outside.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import optimize
from scipy.spatial.distance import pdist
from scipy.stats import norm, qmc

from borderlab.base import NumericError, as_points

logger = logging.getLogger(__name__)

# Fraction of the reach used as the default tube radius
REACH_SAFETY = 0.9

# Implicit projection controls
PROJECTION_TOL = 1e-10
PROJECTION_MAXIT = 200

# Relative gap below which two candidate feet count as tied
TIE_TOL = 1e-12

# Implicit feet: equal distances up to FOOT_TIE_TOL, distinct beyond FOOT_GAP_TOL of the box
FOOT_TIE_TOL = 1e-8
FOOT_GAP_TOL = 1e-6

# Central-difference stencil for implicit Hessians
HESSIAN_STENCIL = 1e-5

Array = np.ndarray
ScalarField = Callable[[Array], float]
VectorMap = Callable[[Array], Array]


@dataclass(frozen=True)
class BoundaryFrame:
    """Foot point, outward unit normal at the foot, and signed distance."""

    foot: Array
    normal: Array
    distance: float


@dataclass
class Projection:
    """Vectorised projection of a batch of points onto the boundary."""

    foot: Array
    normal: Array
    distance: Array
    component: Array
    ambiguous: Array


class SmoothDomain:
    """Compact C^{2,1} domain K with tube radius eps0 below the boundary reach."""

    kind = "abstract"
    n_components = 1

    def __init__(self, dimension: int, reach: float, eps0: float | None = None) -> None:
        if dimension < 1:
            raise BadDomain(f"Dimension must be positive, got {dimension}")
        if not math.isfinite(reach) or reach <= 0:
            raise BadDomain(f"Reach must be positive and finite, got {reach}")
        if eps0 is None:
            eps0 = REACH_SAFETY * reach
        if not 0 < eps0 < reach:
            raise BadDomain(f"eps0 must lie in (0, reach={reach:.6g}), got {eps0}")
        self.dimension = dimension
        self.reach = float(reach)
        self.eps0 = float(eps0)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dimension={self.dimension}, eps0={self.eps0:.6g})"

    # Subclass hooks

    def _project(self, pts: Array) -> Projection:
        raise NotImplementedError

    def _signed_distance(self, pts: Array) -> Array:
        return self._project(pts).distance

    def _hessian(self, pts: Array, proj: Projection) -> Array:
        raise NotImplementedError

    def boundary_samples(self, n: int) -> list[tuple[Array, Array]]:
        """Boundary points and outward normals, one (points, normals) pair per component."""
        raise NotImplementedError

    def diameter(self) -> float:
        raise NotImplementedError

    # Public operations

    def signed_distance(self, x: Any) -> Any:
        """Signed distance: d(x, boundary) inside K, minus it outside."""
        pts, single = as_points(x, self.dimension)
        if not np.all(np.isfinite(pts)):
            raise NumericError("signed_distance requires finite points")
        d = self._signed_distance(pts)
        return float(d[0]) if single else d

    def contains(self, x: Any) -> Any:
        d = self.signed_distance(x)
        return d >= 0 if np.ndim(d) else bool(d >= 0)

    def project(self, x: Any, *, require_tube: bool = False, strict: bool = True) -> Projection:
        """Project a batch of points, rejecting tied projections unless strict is False.

        Raises:
            OutsideTube: If require_tube and some |distance| exceeds eps0.
            NonUniqueProjection: If some point has more than one nearest boundary point.
        """
        pts, _ = as_points(x, self.dimension)
        proj = self._project(pts)
        if require_tube:
            outside = np.abs(proj.distance) > self.eps0 * (1 + 1e-12)
            if np.any(outside):
                worst = float(np.max(np.abs(proj.distance)))
                raise OutsideTube(f"|distance| {worst:.6g} exceeds eps0 {self.eps0:.6g}")
        if strict and np.any(proj.ambiguous):
            idx = int(np.argmax(proj.ambiguous))
            raise NonUniqueProjection(f"Projection of {pts[idx]} is not a single point")
        return proj

    def boundary_frame(self, x: Any, *, require_tube: bool = False) -> BoundaryFrame:
        """Foot, outward normal and signed distance of a single point."""
        proj = self.project(x, require_tube=require_tube)
        return BoundaryFrame(
            foot=proj.foot[0].copy(),
            normal=proj.normal[0].copy(),
            distance=float(proj.distance[0]),
        )

    def gradient(self, x: Any) -> Array:
        """D delta_K, equal to minus the outward normal at the foot."""
        pts, single = as_points(x, self.dimension)
        grad = -self.project(pts).normal
        return grad[0] if single else grad

    def hessian(self, x: Any) -> Array:
        """Second derivative of the signed distance, shape (N, N) or (M, N, N)."""
        pts, single = as_points(x, self.dimension)
        proj = self.project(pts)
        hess = self._hessian(pts, proj)
        return hess[0] if single else hess


class IntervalDomain(SmoothDomain):
    """K = [alpha, beta] on the line; component 0 is alpha, component 1 is beta."""

    kind = "interval"
    n_components = 2

    def __init__(self, alpha: float, beta: float, eps0: float | None = None) -> None:
        if not alpha < beta:
            raise BadDomain(f"Interval requires alpha < beta, got [{alpha}, {beta}]")
        self.alpha = float(alpha)
        self.beta = float(beta)
        super().__init__(1, (self.beta - self.alpha) / 2, eps0)

    def _signed_distance(self, pts: Array) -> Array:
        x = pts[:, 0]
        return np.minimum(x - self.alpha, self.beta - x)

    def _project(self, pts: Array) -> Projection:
        x = pts[:, 0]
        d_lo = x - self.alpha
        d_hi = self.beta - x
        upper = d_hi < d_lo
        return Projection(
            foot=np.where(upper, self.beta, self.alpha)[:, None],
            normal=np.where(upper, 1.0, -1.0)[:, None],
            distance=np.minimum(d_lo, d_hi),
            component=upper.astype(int),
            ambiguous=np.abs(d_lo - d_hi) <= TIE_TOL * (self.beta - self.alpha),
        )

    def _hessian(self, pts: Array, proj: Projection) -> Array:
        return np.zeros((pts.shape[0], 1, 1))

    def boundary_samples(self, n: int) -> list[tuple[Array, Array]]:
        return [
            (np.array([[self.alpha]]), np.array([[-1.0]])),
            (np.array([[self.beta]]), np.array([[1.0]])),
        ]

    def diameter(self) -> float:
        return self.beta - self.alpha


class BallDomain(SmoothDomain):
    """Closed Euclidean ball."""

    kind = "ball"

    def __init__(self, center: Any, radius: float, eps0: float | None = None) -> None:
        if radius <= 0:
            raise BadDomain(f"Ball requires radius > 0, got {radius}")
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        super().__init__(self.center.size, self.radius, eps0)

    def _signed_distance(self, pts: Array) -> Array:
        return self.radius - np.linalg.norm(pts - self.center, axis=1)

    def _project(self, pts: Array) -> Projection:
        u, r, tied = _radial(pts, self.center, self.radius)
        return Projection(
            foot=self.center + self.radius * u,
            normal=u,
            distance=self.radius - r,
            component=np.zeros(len(pts), dtype=int),
            ambiguous=tied,
        )

    def _hessian(self, pts: Array, proj: Projection) -> Array:
        r = np.linalg.norm(pts - self.center, axis=1)
        return -_tangent_projector(proj.normal) / r[:, None, None]

    def boundary_samples(self, n: int) -> list[tuple[Array, Array]]:
        u = sphere_points(n, self.dimension)
        return [(self.center + self.radius * u, u)]

    def diameter(self) -> float:
        return 2 * self.radius


class AnnulusDomain(SmoothDomain):
    """Spherical shell r_inner <= |x - center| <= r_outer.

    Component 0 is the inner sphere, component 1 the outer one.
    """

    kind = "annulus"
    n_components = 2

    def __init__(
        self,
        r_inner: float,
        r_outer: float,
        center: Any = (0.0, 0.0),
        eps0: float | None = None,
    ) -> None:
        if not 0 < r_inner < r_outer:
            raise BadDomain(f"Annulus requires 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
        self.r_inner = float(r_inner)
        self.r_outer = float(r_outer)
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        if self.center.size < 2:
            raise BadDomain("Annulus requires dimension >= 2")
        # The hole side of the inner sphere has reach r_inner
        reach = min((self.r_outer - self.r_inner) / 2, self.r_inner)
        super().__init__(self.center.size, reach, eps0)

    def _signed_distance(self, pts: Array) -> Array:
        r = np.linalg.norm(pts - self.center, axis=1)
        return np.minimum(r - self.r_inner, self.r_outer - r)

    def _project(self, pts: Array) -> Projection:
        u, r, at_center = _radial(pts, self.center, self.r_outer)
        d_in = r - self.r_inner
        d_out = self.r_outer - r
        outer = d_out < d_in
        tied = at_center | (np.abs(d_in - d_out) <= TIE_TOL * self.r_outer)
        return Projection(
            foot=self.center + np.where(outer, self.r_outer, self.r_inner)[:, None] * u,
            normal=np.where(outer[:, None], u, -u),
            distance=np.minimum(d_in, d_out),
            component=outer.astype(int),
            ambiguous=tied,
        )

    def _hessian(self, pts: Array, proj: Projection) -> Array:
        r = np.linalg.norm(pts - self.center, axis=1)
        sign = np.where(proj.component == 1, -1.0, 1.0)
        return sign[:, None, None] * _tangent_projector(proj.normal) / r[:, None, None]

    def boundary_samples(self, n: int) -> list[tuple[Array, Array]]:
        u = sphere_points(n, self.dimension)
        return [
            (self.center + self.r_inner * u, -u),
            (self.center + self.r_outer * u, u),
        ]

    def diameter(self) -> float:
        return 2 * self.r_outer


class ImplicitDomain(SmoothDomain):
    """K = {phi <= 0} inside a bounding box, with a single boundary component.

    The reach is estimated from the largest principal curvature over projected
    boundary samples; bottlenecks between distant boundary pieces are not detected.

    Points farther than eps0 from the boundary are also projected from starts
    offset along each axis, and two distinct feet at the same distance mark the
    projection as tied (medial-axis points such as an ellipse's major axis). A
    tie whose second foot none of those starts reaches goes unnoticed.
    """

    kind = "implicit"

    def __init__(
        self,
        phi: ScalarField,
        grad_phi: VectorMap,
        bounding_box: Any,
        *,
        hess_phi: Callable[[Array], Array] | None = None,
        eps0: float | None = None,
        g_min: float = 1e-6,
        n_curvature_samples: int = 256,
        name: str = "implicit",
    ) -> None:
        box = np.asarray(bounding_box, dtype=float)
        if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
            raise BadDomain("bounding_box must be a list of (low, high) pairs")
        self.phi = phi
        self.grad_phi = grad_phi
        self.hess_phi = hess_phi
        self.box = box
        self.g_min = g_min
        self.name = name
        self.dimension = box.shape[0]
        self.eps0 = math.inf

        feet, normals = self._sample_boundary(n_curvature_samples)
        kappa = max(self._principal_curvature(y) for y in feet)
        half_diag = 0.5 * float(np.linalg.norm(box[:, 1] - box[:, 0]))
        reach = 1.0 / kappa if kappa > 0 else half_diag
        super().__init__(self.dimension, reach, eps0)
        self._samples = (feet, normals)
        self._check_gradient(feet, normals)
        logger.debug("%s: estimated reach %.6g, eps0 %.6g", name, reach, self.eps0)

    def _hess(self, y: Array) -> Array:
        if self.hess_phi is not None:
            return np.asarray(self.hess_phi(y), dtype=float)
        n = y.size
        h = HESSIAN_STENCIL
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            cols.append((np.asarray(self.grad_phi(y + e)) - np.asarray(self.grad_phi(y - e))) / (2 * h))
        hess = np.column_stack(cols)
        return 0.5 * (hess + hess.T)

    def _principal_curvature(self, y: Array) -> float:
        g = np.asarray(self.grad_phi(y), dtype=float)
        gnorm = float(np.linalg.norm(g))
        n = g / gnorm
        proj = np.eye(y.size) - np.outer(n, n)
        shape = proj @ self._hess(y) @ proj / gnorm
        return float(np.max(np.abs(np.linalg.eigvalsh(shape))))

    def _lagrange_residual(self, x: Array, y: Array, mu: float) -> Array:
        g = np.asarray(self.grad_phi(y), dtype=float)
        return np.concatenate([y - x + mu * g, [float(self.phi(y))]])

    def _newton(self, x: Array, y: Array) -> tuple[Array, bool]:
        n = x.size
        g = np.asarray(self.grad_phi(y), dtype=float)
        mu = float((x - y) @ g / (g @ g))
        res = self._lagrange_residual(x, y, mu)
        for _ in range(PROJECTION_MAXIT):
            res_norm = float(np.linalg.norm(res))
            if res_norm < PROJECTION_TOL:
                return y, True
            g = np.asarray(self.grad_phi(y), dtype=float)
            jac = np.zeros((n + 1, n + 1))
            jac[:n, :n] = np.eye(n) + mu * self._hess(y)
            jac[:n, n] = g
            jac[n, :n] = g
            try:
                delta = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                return y, False
            t = 1.0
            while t > 1e-10:
                y_new = y + t * delta[:n]
                mu_new = mu + t * delta[n]
                res_new = self._lagrange_residual(x, y_new, mu_new)
                if np.linalg.norm(res_new) < res_norm:
                    break
                t *= 0.5
            else:
                return y, False
            y, mu, res = y_new, mu_new, res_new
        return y, float(np.linalg.norm(res)) < PROJECTION_TOL

    def _project_point(self, x: Array, start: Array | None = None) -> Array:
        # Gradient steps onto the level set give the Newton start
        y = x.copy() if start is None else start.copy()
        for _ in range(PROJECTION_MAXIT):
            value = float(self.phi(y))
            if abs(value) < PROJECTION_TOL:
                break
            g = np.asarray(self.grad_phi(y), dtype=float)
            gg = float(g @ g)
            if gg == 0:
                break
            y = y - value * g / gg

        y, ok = self._newton(x, y)
        if ok:
            return y

        result = optimize.minimize(
            lambda z: float(np.sum((z - x) ** 2)),
            y,
            jac=lambda z: 2 * (z - x),
            constraints=[{"type": "eq", "fun": self.phi, "jac": self.grad_phi}],
            method="SLSQP",
            options={"maxiter": PROJECTION_MAXIT, "ftol": 1e-15},
        )
        y, ok = self._newton(x, np.asarray(result.x, dtype=float))
        if not ok:
            raise NonConvergence(f"Projection of {x} did not converge in {PROJECTION_MAXIT} iterations")
        return y

    def _project(self, pts: Array) -> Projection:
        low, high = self.box[:, 0], self.box[:, 1]
        if np.any((pts < low) | (pts > high)):
            raise OutsideDomain("Point lies outside the bounding box of the implicit domain")
        m = len(pts)
        feet = np.empty_like(pts)
        normals = np.empty_like(pts)
        dist = np.empty(m)
        tied = np.zeros(m, dtype=bool)
        for i, x in enumerate(pts):
            critical = float(np.linalg.norm(self.grad_phi(x))) < 1e-12
            if critical:
                # Start from nudged copies and keep the nearest foot
                nudges = np.concatenate([np.eye(x.size), -np.eye(x.size)]) * 1e-6
                candidates = [self._project_point(x, x + e) for e in nudges]
            else:
                candidates = [self._project_point(x)]
                reach_out = float(np.linalg.norm(x - candidates[0]))
                if reach_out > self.eps0:
                    # Past the reach a second foot can sit at the same distance
                    steps = np.concatenate([np.eye(x.size), -np.eye(x.size)]) * reach_out
                    candidates += self._extra_feet(x, x + steps)
            y, several = self._nearest_foot(x, candidates)
            g = np.asarray(self.grad_phi(y), dtype=float)
            feet[i] = y
            normals[i] = g / np.linalg.norm(g)
            sign = 1.0 if float(self.phi(x)) <= 0 else -1.0
            dist[i] = sign * float(np.linalg.norm(x - y))
            tied[i] = several or (critical and abs(dist[i]) > self.eps0)
        return Projection(feet, normals, dist, np.zeros(m, dtype=int), tied)

    def _extra_feet(self, x: Array, starts: Array) -> list[Array]:
        feet = []
        for start in starts:
            try:
                feet.append(self._project_point(x, start))
            except NonConvergence:
                continue
        return feet

    def _nearest_foot(self, x: Array, candidates: list[Array]) -> tuple[Array, bool]:
        """Nearest candidate, and whether a distinct candidate is equally near."""
        dists = np.array([np.linalg.norm(x - c) for c in candidates])
        best = int(np.argmin(dists))
        gap = FOOT_GAP_TOL * float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))
        several = any(
            abs(d - dists[best]) <= FOOT_TIE_TOL * max(1.0, float(dists[best]))
            and float(np.linalg.norm(c - candidates[best])) > gap
            for c, d in zip(candidates, dists, strict=True)
        )
        return candidates[best], several

    def _hessian(self, pts: Array, proj: Projection) -> Array:
        h = HESSIAN_STENCIL
        n = self.dimension
        out = np.empty((len(pts), n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            plus = -self._project(pts + e).normal
            minus = -self._project(pts - e).normal
            out[:, :, k] = (plus - minus) / (2 * h)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def _sample_boundary(self, n: int) -> tuple[Array, Array]:
        sampler = qmc.Halton(d=self.dimension, scramble=True, seed=0)
        raw = qmc.scale(sampler.random(n), self.box[:, 0], self.box[:, 1])
        feet = np.empty_like(raw)
        normals = np.empty_like(raw)
        for i, x in enumerate(raw):
            y = self._project_point(x)
            g = np.asarray(self.grad_phi(y), dtype=float)
            feet[i] = y
            normals[i] = g / np.linalg.norm(g)
        return feet, normals

    def _check_gradient(self, feet: Array, normals: Array) -> None:
        for offset in (0.0, self.eps0, -self.eps0):
            for y in feet + offset * normals:
                if float(np.linalg.norm(self.grad_phi(y))) < self.g_min:
                    raise BadDomain(
                        f"{self.name}: |grad phi| below g_min={self.g_min} in the tube near {y}"
                    )

    def boundary_samples(self, n: int) -> list[tuple[Array, Array]]:
        feet, normals = self._sample_boundary(n)
        return [(feet, normals)]

    def diameter(self) -> float:
        return float(np.max(pdist(self._samples[0])))


def ellipse_domain(center: Any, semi_axes: Any, eps0: float | None = None) -> ImplicitDomain:
    """Axis-aligned ellipsoid sum(((y - c) / a)^2) <= 1 as an implicit domain."""
    c = np.asarray(center, dtype=float)
    a = np.asarray(semi_axes, dtype=float)
    if c.shape != a.shape or np.any(a <= 0):
        raise BadDomain("ellipse needs matching center and positive semi_axes")
    inv_sq = 1.0 / a**2
    box = np.column_stack([c - 2 * a, c + 2 * a])
    return ImplicitDomain(
        phi=lambda y: float(np.sum((y - c) ** 2 * inv_sq) - 1.0),
        grad_phi=lambda y: 2 * (y - c) * inv_sq,
        bounding_box=box,
        hess_phi=lambda y: np.diag(2 * inv_sq),
        eps0=eps0,
        name="ellipse",
    )


def sphere_points(n: int, dimension: int) -> Array:
    """Quasi-uniform unit vectors: equal angles in 2-D, Gaussian-mapped Halton above."""
    if dimension == 1:
        return np.array([[-1.0], [1.0]])
    if dimension == 2:
        angles = 2 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(angles), np.sin(angles)])
    sampler = qmc.Halton(d=dimension, scramble=True, seed=0)
    g = norm.ppf(np.clip(sampler.random(n), 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def cutoff_g(domain: SmoothDomain, x: Any) -> Any:
    """C2 cutoff equal to delta_K on the tube and saturating below 1 deeper inside.

    With t = delta_K(x): g = t for t <= eps0, then a quintic blend
    eps0 + w (tau - tau^3 + tau^4 / 2), tau = (t - eps0) / w, up to the plateau
    eps0 + w / 2 <= 1 reached at t = eps0 + w.

    Raises:
        OutsideDomain: If x is outside K.
        BadTube: If eps0 >= 1, where no cutoff below 1 can match delta_K on the tube.
    """
    eps0 = domain.eps0
    if eps0 >= 1:
        raise BadTube(f"cutoff_g needs eps0 < 1, got {eps0}")
    t = np.asarray(domain.signed_distance(x), dtype=float)
    if np.any(t < -1e-12):
        raise OutsideDomain("cutoff_g is defined on K only")
    t = np.maximum(t, 0.0)
    width = min(eps0, 1.0 - eps0)
    tau = np.clip((t - eps0) / width, 0.0, 1.0)
    blend = eps0 + width * (tau - tau**3 + 0.5 * tau**4)
    g = np.where(t <= eps0, t, blend)
    return float(g) if g.ndim == 0 else g


def _level_points(feet: Array, normals: Array, depths: Array) -> Array:
    """Points at each signed distance in `depths` behind the boundary samples, level by level."""
    return (feet[None, :, :] - depths[:, None, None] * normals[None, :, :]).reshape(-1, feet.shape[1])


def tube_grid(domain: SmoothDomain, eps: float, n_points: int) -> Array:
    """Quasi-uniform points of the inner tube {x in K : 0 < delta_K(x) <= eps}.

    Boundary samples times equally spaced distance levels, split evenly across
    boundary components.

    Raises:
        BadTube: If eps is not in (0, eps0].
    """
    if not 0 < eps <= domain.eps0 * (1 + 1e-12):
        raise BadTube(f"eps must lie in (0, eps0={domain.eps0:.6g}], got {eps}")
    if n_points < 1:
        raise BadTube(f"n_points must be positive, got {n_points}")

    per_component = -(-n_points // domain.n_components)
    levels = max(1, math.ceil(math.sqrt(per_component)))
    n_boundary = -(-per_component // levels)

    chunks = []
    for feet, normals in domain.boundary_samples(n_boundary):
        levels_here = levels if len(feet) >= n_boundary else -(-per_component // len(feet))
        depths = eps * np.arange(1, levels_here + 1) / levels_here
        chunks.append(_level_points(feet, normals, depths)[:per_component])
    return np.concatenate(chunks)[:n_points]


def _radial(pts: Array, center: Array, scale: float) -> tuple[Array, Array, Array]:
    v = pts - center
    r = np.linalg.norm(v, axis=1)
    tied = r <= TIE_TOL * scale
    u = v / np.where(tied, 1.0, r)[:, None]
    if np.any(tied):
        u[tied] = np.eye(pts.shape[1])[0]
    return u, r, tied


def _tangent_projector(normals: Array) -> Array:
    n = normals.shape[1]
    return np.eye(n)[None, :, :] - normals[:, :, None] * normals[:, None, :]


class NonConvergence(NumericError):
    """Implicit boundary projection exceeded its iteration cap."""

    pass


class NonUniqueProjection(NumericError):
    """The nearest boundary point is not unique."""

    pass


class OutsideTube(NumericError):
    """Point lies farther than eps0 from the boundary."""

    pass


class OutsideDomain(NumericError):
    """Point lies outside K (or outside an implicit domain's bounding box)."""

    pass


class BadTube(NumericError):
    """Tube width is not admissible for this domain."""

    pass


class BadDomain(NumericError):
    """Domain parameters violate their invariants."""

    pass
