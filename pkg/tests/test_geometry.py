"""Tests for domain geometry."""

import numpy as np
import pytest

from borderlab.geometry import (
    AnnulusDomain,
    BadDomain,
    BadTube,
    BallDomain,
    IntervalDomain,
    NonUniqueProjection,
    OutsideDomain,
    OutsideTube,
    cutoff_g,
    ellipse_domain,
    tube_grid,
)


@pytest.fixture
def unit_interval():
    return IntervalDomain(0.0, 1.0, eps0=0.2)


@pytest.fixture
def unit_disc():
    return BallDomain([0.0, 0.0], 1.0)


@pytest.fixture
def phage_annulus():
    return AnnulusDomain(np.sqrt(0.1), 1.0)


class TestDomainConstruction:
    """Tests for domain invariants."""

    def test_interval_requires_order(self):
        """Should reject alpha >= beta."""
        with pytest.raises(BadDomain, match="alpha < beta"):
            IntervalDomain(1.0, 0.0)

    def test_ball_requires_positive_radius(self):
        """Should reject a non-positive radius."""
        with pytest.raises(BadDomain):
            BallDomain([0.0, 0.0], 0.0)

    def test_annulus_requires_ordered_radii(self):
        """Should reject r_inner >= r_outer."""
        with pytest.raises(BadDomain):
            AnnulusDomain(1.0, 0.5)

    def test_eps0_below_reach(self):
        """Should reject eps0 at or above the reach."""
        with pytest.raises(BadDomain, match="eps0"):
            IntervalDomain(0.0, 1.0, eps0=0.5)

    def test_default_eps0(self):
        """Should default eps0 to 0.9 times the closed-form reach."""
        assert IntervalDomain(0.0, 2.0).eps0 == pytest.approx(0.9)
        assert BallDomain([0.0, 0.0, 0.0], 2.0).eps0 == pytest.approx(1.8)
        assert AnnulusDomain(0.5, 1.5).eps0 == pytest.approx(0.45)


class TestSignedDistance:
    """Tests for signed_distance."""

    def test_ball_center(self, unit_disc):
        """Should return the radius at the center."""
        assert unit_disc.signed_distance([0.0, 0.0]) == pytest.approx(1.0)

    def test_interval_inside(self, unit_interval):
        """Should measure to the nearest endpoint."""
        assert unit_interval.signed_distance(0.3) == pytest.approx(0.3)

    def test_interval_outside_negative(self, unit_interval):
        """Should be negative outside K."""
        assert unit_interval.signed_distance(1.5) == pytest.approx(-0.5)

    def test_batch_shape(self, unit_disc):
        """Should vectorise over a batch of points."""
        d = unit_disc.signed_distance(np.array([[0.5, 0.0], [0.0, 2.0]]))
        assert d.shape == (2,)
        np.testing.assert_allclose(d, [0.5, -1.0])

    def test_annulus_hole_negative(self, phage_annulus):
        """Should be negative inside the hole."""
        assert phage_annulus.signed_distance([0.1, 0.0]) < 0

    def test_one_lipschitz(self, phage_annulus):
        """Should satisfy |d(x) - d(y)| <= |x - y| on random pairs."""
        rng = np.random.default_rng(1)
        x = rng.uniform(-1.2, 1.2, size=(1000, 2))
        y = rng.uniform(-1.2, 1.2, size=(1000, 2))
        lhs = np.abs(phage_annulus.signed_distance(x) - phage_annulus.signed_distance(y))
        assert np.all(lhs <= np.linalg.norm(x - y, axis=1) + 1e-12)


class TestBoundaryFrame:
    """Tests for boundary_frame."""

    def test_interval_upper_foot(self, unit_interval):
        """Should project to the nearer endpoint with outward normal."""
        frame = unit_interval.boundary_frame(0.9)
        assert frame.foot[0] == pytest.approx(1.0)
        assert frame.normal[0] == pytest.approx(1.0)
        assert frame.distance == pytest.approx(0.1)

    def test_ball_radial(self, unit_disc):
        """Should project radially."""
        frame = unit_disc.boundary_frame([0.5, 0.0])
        np.testing.assert_allclose(frame.foot, [1.0, 0.0])
        np.testing.assert_allclose(frame.normal, [1.0, 0.0])
        assert frame.distance == pytest.approx(0.5)

    def test_ball_center_not_unique(self, unit_disc):
        """Should refuse to pick a foot at the center."""
        with pytest.raises(NonUniqueProjection):
            unit_disc.boundary_frame([0.0, 0.0])

    def test_interval_midpoint_not_unique(self, unit_interval):
        """Should refuse to break ties at the midpoint."""
        with pytest.raises(NonUniqueProjection):
            unit_interval.boundary_frame(0.5)

    def test_require_tube(self, unit_disc):
        """Should raise OutsideTube beyond eps0 when the tube is required."""
        with pytest.raises(OutsideTube):
            unit_disc.boundary_frame([0.05, 0.0], require_tube=True)

    def test_annulus_inner_normal_points_to_hole(self, phage_annulus):
        """Should give the inner circle a normal pointing toward the center."""
        frame = phage_annulus.boundary_frame([0.4, 0.0])
        np.testing.assert_allclose(frame.normal, [-1.0, 0.0])
        assert frame.foot[0] == pytest.approx(np.sqrt(0.1))

    def test_reconstruction(self, phage_annulus):
        """Should rebuild x = foot - distance * normal on random tube points."""
        pts = tube_grid(phage_annulus, phage_annulus.eps0, 1000)
        proj = phage_annulus.project(pts)
        rebuilt = proj.foot - proj.distance[:, None] * proj.normal
        np.testing.assert_allclose(rebuilt, pts, atol=1e-8)
        np.testing.assert_allclose(np.linalg.norm(proj.normal, axis=1), 1.0, atol=1e-10)

    def test_eikonal(self, unit_disc):
        """Should have a unit-norm finite-difference gradient equal to minus the normal."""
        pts = tube_grid(unit_disc, 0.5, 50)
        h = 1e-6
        for x in pts:
            fd = np.array([
                (unit_disc.signed_distance(x + h * e) - unit_disc.signed_distance(x - h * e)) / (2 * h)
                for e in np.eye(2)
            ])
            assert np.linalg.norm(fd) == pytest.approx(1.0, abs=1e-4)
            np.testing.assert_allclose(fd, -unit_disc.boundary_frame(x).normal, atol=1e-4)

    def test_hessian_matches_finite_difference(self, phage_annulus):
        """Should match central differences of the gradient."""
        x = np.array([0.5, 0.3])
        h = 1e-5
        fd = np.column_stack([
            (phage_annulus.gradient(x + h * e) - phage_annulus.gradient(x - h * e)) / (2 * h)
            for e in np.eye(2)
        ])
        np.testing.assert_allclose(phage_annulus.hessian(x), fd, atol=1e-6)


class TestImplicitDomain:
    """Tests for level-set domains."""

    def test_circle_matches_ball(self, unit_disc):
        """Should reproduce the closed-form distances of the unit disc."""
        circle = ellipse_domain([0.0, 0.0], [1.0, 1.0])
        pts = np.array([[0.5, 0.1], [0.2, -0.9], [1.3, 0.4]])
        np.testing.assert_allclose(
            circle.signed_distance(pts), unit_disc.signed_distance(pts), atol=1e-9
        )

    def test_reach_from_curvature(self):
        """Should estimate the reach as the smallest curvature radius."""
        ellipse = ellipse_domain([0.0, 0.0], [2.0, 1.0])
        # Max curvature a / b^2 = 2 at the ends of the long axis
        assert ellipse.reach == pytest.approx(0.5, rel=0.1)

    def test_ellipse_frame(self):
        """Should satisfy the frame identities on an ellipse."""
        ellipse = ellipse_domain([0.0, 0.0], [2.0, 1.0])
        x = np.array([1.2, 0.5])
        frame = ellipse.boundary_frame(x)
        foot = frame.foot
        assert (foot[0] / 2) ** 2 + foot[1] ** 2 == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(x, foot - frame.distance * frame.normal, atol=1e-8)
        assert frame.distance > 0

    def test_center_not_unique(self):
        """Should flag the ellipse center as having two nearest points."""
        ellipse = ellipse_domain([0.0, 0.0], [2.0, 1.0])
        with pytest.raises(NonUniqueProjection):
            ellipse.boundary_frame([0.0, 0.0])

    def test_major_axis_not_unique(self):
        """Should flag a non-critical point on the major axis with two mirrored feet."""
        ellipse = ellipse_domain([0.0, 0.0], [2.0, 1.0])
        with pytest.raises(NonUniqueProjection):
            ellipse.boundary_frame([0.5, 0.0])
        proj = ellipse.project([[0.5, 0.0]], strict=False)
        assert proj.ambiguous[0]
        assert abs(proj.foot[0, 1]) > 0.5

    def test_off_axis_deep_point_unique(self):
        """Should keep a single foot for a deep point off the medial axis."""
        ellipse = ellipse_domain([0.0, 0.0], [2.0, 1.0])
        frame = ellipse.boundary_frame([0.5, 0.3])
        assert frame.foot[1] > 0
        assert frame.distance > ellipse.eps0

    def test_outside_box(self):
        """Should reject points outside the bounding box."""
        ellipse = ellipse_domain([0.0, 0.0], [2.0, 1.0])
        with pytest.raises(OutsideDomain):
            ellipse.signed_distance([10.0, 0.0])


class TestCutoff:
    """Tests for cutoff_g."""

    def test_equals_distance_in_tube(self, unit_interval):
        """Should equal delta_K on the tube."""
        assert cutoff_g(unit_interval, 0.1) == pytest.approx(0.1)

    def test_bounded_deep_inside(self, unit_interval):
        """Should lie in (0, 1] away from the boundary."""
        value = cutoff_g(unit_interval, 0.5)
        assert 0 < value <= 1

    def test_zero_on_boundary(self, unit_disc):
        """Should vanish on the boundary."""
        assert cutoff_g(unit_disc, [0.0, 1.0]) == pytest.approx(0.0, abs=1e-15)

    def test_outside_rejected(self, unit_interval):
        """Should reject points outside K."""
        with pytest.raises(OutsideDomain):
            cutoff_g(unit_interval, 1.2)

    def test_continuous_transition(self, unit_interval):
        """Should be continuous and C1 across eps0 and the plateau start."""
        eps0 = unit_interval.eps0
        for t in (eps0, 2 * eps0):
            left = cutoff_g(unit_interval, t - 1e-9)
            right = cutoff_g(unit_interval, t + 1e-9)
            assert abs(left - right) < 1e-6

    def test_monotone(self, unit_interval):
        """Should be non-decreasing in delta_K."""
        xs = np.linspace(0.0, 0.5, 200)
        values = cutoff_g(unit_interval, xs[:, None])
        assert np.all(np.diff(values) >= -1e-15)


class TestTubeGrid:
    """Tests for tube_grid."""

    def test_interval(self, unit_interval):
        """Should place points near both endpoints."""
        pts = tube_grid(unit_interval, 0.1, 4)
        assert pts.shape == (4, 1)
        x = pts[:, 0]
        assert np.all(((x > 0) & (x <= 0.1 + 1e-15)) | ((x >= 0.9 - 1e-15) & (x < 1)))
        assert np.any(x < 0.5) and np.any(x > 0.5)

    def test_ball(self, unit_disc):
        """Should stay in the shell 0.9 <= |x| < 1."""
        r = np.linalg.norm(tube_grid(unit_disc, 0.1, 300), axis=1)
        assert np.all((r >= 0.9 - 1e-12) & (r < 1))

    def test_annulus_two_components(self, phage_annulus):
        """Should sample near both circles."""
        r = np.linalg.norm(tube_grid(phage_annulus, 0.05, 200), axis=1)
        assert np.any(r < 0.5) and np.any(r > 0.9)

    def test_rejects_wide_tube(self, unit_interval):
        """Should raise BadTube when eps exceeds eps0."""
        with pytest.raises(BadTube):
            tube_grid(unit_interval, 0.3, 10)

    def test_equally_spaced_levels(self, unit_disc):
        """Should fill one depth level at a time, from eps / levels down to eps."""
        pts = tube_grid(unit_disc, 0.25, 16)
        depths = unit_disc.signed_distance(pts).reshape(4, 4)
        np.testing.assert_allclose(depths, np.repeat([[0.0625], [0.125], [0.1875], [0.25]], 4, axis=1))
