"""Tests for near-viability value estimates."""

import math

import numpy as np
import pytest

from borderlab.dynamics.flow import OutOfRange, VectorField, example_field
from borderlab.dynamics.sde import (
    ControlledCoefficients,
    ControlPolicy,
    from_field,
    normal_steering_policy,
)
from borderlab.geometry import BallDomain, IntervalDomain
from borderlab.value import (
    LambdaThreshold,
    TubeTooSmall,
    ValueConfig,
    boundary_constants,
    default_policy_family,
    discounted_occupation,
    estimate_value,
    exterior_indicator,
    f_n_eval,
    interior_complement_indicator,
    lambda_threshold,
    near_viability_certificate,
    tube_value_scan,
)


@pytest.fixture
def unit_interval():
    return IntervalDomain(0.0, 1.0)


@pytest.fixture
def inner_interval():
    return IntervalDomain(0.1, 0.9)


@pytest.fixture
def ex31_coeffs():
    return from_field(example_field("ex31"))


@pytest.fixture
def ex32_coeffs():
    return from_field(example_field("ex32"))


def still_field():
    return VectorField(lambda p: np.zeros_like(p), "still", 1)


def uncontrolled(coeffs, domain, **kwargs):
    return ValueConfig(policy_family=default_policy_family(coeffs, domain), **kwargs)


def speed_controlled(dimension, grid, sigma):
    identity = np.eye(dimension)
    return ControlledCoefficients(
        drift=lambda x, u: np.asarray(u, dtype=float) * np.ones_like(x),
        diffusion=lambda x, u: np.broadcast_to(sigma * identity, (len(x), dimension, dimension)),
        dimension=dimension,
        noise_dimension=dimension,
        control_grid=grid,
        name="speed",
    )


class TestApproximatingFunctions:
    """Tests for f_n and the indicators."""

    def test_outside_is_one(self, unit_interval):
        """Should equal 1 outside the interior."""
        assert f_n_eval(unit_interval, 5, [1.5]) == 1.0
        assert f_n_eval(unit_interval, 5, [1.0]) == 1.0

    def test_clamped_at_inverse_n(self, unit_interval):
        """Should vanish at delta_K = 1/n."""
        assert f_n_eval(unit_interval, 4, [0.25]) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_n(self, unit_interval):
        """Should decrease with n everywhere."""
        x = np.linspace(-0.5, 1.5, 201)[:, None]
        for n in range(1, 10):
            assert np.all(f_n_eval(unit_interval, n + 1, x) <= f_n_eval(unit_interval, n, x))

    def test_rejects_zero_n(self, unit_interval):
        """Should reject n < 1."""
        with pytest.raises(OutOfRange):
            f_n_eval(unit_interval, 0, [0.5])

    def test_indicators_differ_on_boundary(self, unit_interval):
        """Should count boundary points in the interior complement only."""
        x = np.array([[0.0], [0.5], [-0.1]])
        np.testing.assert_array_equal(interior_complement_indicator(unit_interval)(x), [1, 0, 1])
        np.testing.assert_array_equal(exterior_indicator(unit_interval)(x), [0, 0, 1])


class TestValueConfig:
    """Tests for ValueConfig validation."""

    def test_truncation_bound(self):
        """Should equal e^{-lam T} / lam."""
        config = ValueConfig(lam=2.0, horizon_cut=3.0)
        assert config.truncation_bound == pytest.approx(math.exp(-6.0) / 2.0)

    def test_tolerance(self):
        """Should reject a horizon whose tail exceeds the tolerance."""
        with pytest.raises(OutOfRange, match="truncation"):
            ValueConfig(lam=1.0, horizon_cut=2.0, tolerance=1e-3)

    def test_positive_lambda(self):
        """Should reject a non-positive discount."""
        with pytest.raises(OutOfRange, match="lambda"):
            ValueConfig(lam=0.0)

    def test_enforced_threshold(self):
        """Should reject lambda below lambda_min."""
        threshold = LambdaThreshold(5.0, 0.0, 0.0, 1.0, 1.0, 1.0, None, True, True)
        with pytest.raises(OutOfRange, match="lambda_min"):
            ValueConfig(lam=1.0).check_threshold(threshold)

    def test_threshold_met_at_lambda_min(self):
        """Should accept lambda equal to lambda_min."""
        threshold = LambdaThreshold(5.0, 0.0, 0.0, 1.0, 1.0, 1.0, None, True, True)
        ValueConfig(lam=5.0).check_threshold(threshold)


class TestDiscountedOccupation:
    """Tests for discounted_occupation."""

    def test_invariant_interior_is_zero(self, ex32_coeffs, inner_interval):
        """Should see no exterior occupation from an interior start of ex32."""
        config = uncontrolled(ex32_coeffs, inner_interval, n_paths=4)
        estimate = discounted_occupation(
            ex32_coeffs,
            config.policy_family[0],
            [0.3],
            1.0,
            interior_complement_indicator(inner_interval),
            config,
        )
        assert estimate.mean == 0.0
        assert estimate.upper <= estimate.lam * estimate.truncation_bound + 1e-15

    def test_ex31_closed_form(self, ex31_coeffs, unit_interval):
        """Should give e^{-lambda} after the hit at t = 1."""
        config = uncontrolled(ex31_coeffs, unit_interval, n_paths=1, step=1e-3)
        estimate = discounted_occupation(
            ex31_coeffs,
            config.policy_family[0],
            [0.75],
            1.0,
            interior_complement_indicator(unit_interval),
            config,
        )
        assert estimate.mean == pytest.approx(math.exp(-1.0), abs=5e-3)

    @pytest.mark.slow
    def test_ex31_closed_form_fine(self, ex31_coeffs, unit_interval):
        """Should match e^{-lambda} within 1e-4 plus the truncated tail."""
        config = uncontrolled(ex31_coeffs, unit_interval, n_paths=1, step=2e-5)
        estimate = discounted_occupation(
            ex31_coeffs,
            config.policy_family[0],
            [0.75],
            1.0,
            interior_complement_indicator(unit_interval),
            config,
        )
        tolerance = 1e-4 + estimate.lam * estimate.truncation_bound
        assert abs(estimate.mean - math.exp(-1.0)) <= tolerance

    def test_outside_start(self, unit_interval):
        """Should give normalized value 1 for a frozen start outside K."""
        coeffs = from_field(still_field())
        config = uncontrolled(coeffs, unit_interval, n_paths=2)
        estimate = discounted_occupation(
            coeffs,
            config.policy_family[0],
            [1.5],
            1.0,
            interior_complement_indicator(unit_interval),
            config,
        )
        assert estimate.mean == pytest.approx(1.0, abs=estimate.truncation_bound + 1e-4)

    def test_normalized_range(self, unit_interval):
        """Should keep normalized estimates in [0, 1] and scale by lambda."""
        coeffs = from_field(still_field(), sigma=1.0)
        config = uncontrolled(coeffs, unit_interval, n_paths=200, horizon_cut=5.0)
        indicator = interior_complement_indicator(unit_interval)
        policy = config.policy_family[0]
        normalized = discounted_occupation(coeffs, policy, [0.5], 2.0, indicator, config)
        raw = discounted_occupation(coeffs, policy, [0.5], 2.0, indicator, config, normalized=False)
        assert 0.0 < normalized.mean <= 1.0
        assert normalized.mean == pytest.approx(2.0 * raw.mean)


class TestEstimateValue:
    """Tests for estimate_value."""

    def test_monotone_in_n(self, unit_interval):
        """Should not increase with n at a fixed seed, and stay above the sharp value."""
        coeffs = from_field(example_field("ex31"), sigma=0.1)
        family = default_policy_family(coeffs, unit_interval)
        sharp = estimate_value(
            coeffs, unit_interval, [0.75], ValueConfig(policy_family=family, n_paths=200)
        )
        values = [
            estimate_value(
                coeffs,
                unit_interval,
                [0.75],
                ValueConfig(policy_family=family, n_paths=200, n_approx=n),
            ).mean
            for n in (1, 2, 4, 8)
        ]
        assert all(a >= b for a, b in zip(values, values[1:], strict=False))
        assert values[-1] >= sharp.mean - 1e-12

    def test_invariant_configuration(self, ex32_coeffs, inner_interval):
        """Should give zero for every policy."""
        config = uncontrolled(ex32_coeffs, inner_interval, n_paths=4)
        value = estimate_value(ex32_coeffs, inner_interval, [0.3], config)
        assert value.mean == 0.0
        assert all(c.mean == 0.0 for c in value.candidates)

    def test_larger_family_never_worse(self, unit_interval):
        """Should not increase the reported minimum when policies are added."""
        coeffs = speed_controlled(1, [[-1.0], [0.0], [1.0]], 0.2)
        small = [ControlPolicy.constant([1.0])]
        large = small + [ControlPolicy.constant([-1.0])]
        common = {"n_paths": 100, "horizon_cut": 5.0}
        a = estimate_value(coeffs, unit_interval, [0.8], ValueConfig(policy_family=small, **common))
        b = estimate_value(coeffs, unit_interval, [0.8], ValueConfig(policy_family=large, **common))
        assert b.mean <= a.mean
        assert b.policy == "constant[-1.0]"

    @pytest.mark.parametrize("field_id", ["ex31", "ex32"])
    def test_exterior_value_below_interior_complement(self, unit_interval, field_id):
        """Should give V_K <= V + 2 SE at every start on matched seeds."""
        coeffs = from_field(example_field(field_id), sigma=0.1)
        family = default_policy_family(coeffs, unit_interval)
        common = {"policy_family": family, "n_paths": 200, "horizon_cut": 5.0, "seed": 17}
        for start in ([0.1], [0.5], [0.9]):
            v_k = estimate_value(
                coeffs, unit_interval, start, ValueConfig(exterior=True, **common)
            )
            v = estimate_value(coeffs, unit_interval, start, ValueConfig(**common))
            assert v_k.mean <= v.mean + 2 * v.std_error
            assert v_k.mean <= v.mean + 1e-12

    def test_exterior_rejects_approximation(self):
        """Should not combine the exterior indicator with f_n."""
        with pytest.raises(OutOfRange, match="n_approx"):
            ValueConfig(exterior=True, n_approx=4)

    def test_empty_family(self, ex32_coeffs, inner_interval):
        """Should reject an empty policy family."""
        with pytest.raises(OutOfRange, match="policy_family"):
            estimate_value(ex32_coeffs, inner_interval, [0.3], ValueConfig())


class TestLambdaThreshold:
    """Tests for the discount threshold."""

    def test_deterministic(self, ex32_coeffs, inner_interval):
        """Should give c_sigma = 0 and a threshold strictly above its parts."""
        threshold = lambda_threshold(ex32_coeffs, inner_interval, 200)
        assert threshold.c_sigma == 0.0
        base = 2 * threshold.lambda0_fit + threshold.c_sigma**2 + threshold.c_L
        assert threshold.lambda_min > base
        assert math.isfinite(threshold.t_star)
        assert set(threshold.to_dict()) >= {"lambda_min", "c_sigma", "c_L", "lambda0_fit", "t_star"}

    def test_ball_curvature_constant(self):
        """Should match the closed-form c_L = sigma^2 / (2 (1 - eps0)) for constant drift."""
        disc = BallDomain([0.0, 0.0], 1.0)
        sigma = 0.5
        coeffs = ControlledCoefficients(
            drift=lambda x, u: np.broadcast_to([1.0, 0.0], x.shape),
            diffusion=lambda x, u: np.broadcast_to(sigma * np.eye(2), (len(x), 2, 2)),
            dimension=2,
            noise_dimension=2,
            control_grid=np.zeros((1, 1)),
        )
        c_sigma, c_l = boundary_constants(coeffs, disc, 2000)
        assert c_sigma == pytest.approx(0.0, abs=1e-12)
        assert c_l == pytest.approx(0.5 * sigma**2 / (1 - disc.eps0), rel=0.10)

    def test_tube_too_small(self, ex32_coeffs):
        """Should refuse a tube thinner than the stencil."""
        with pytest.raises(TubeTooSmall):
            boundary_constants(ex32_coeffs, IntervalDomain(0.0, 1.0, eps0=1e-5), 10)


class TestCertificate:
    """Tests for near_viability_certificate."""

    def test_invariant_configuration(self, ex32_coeffs, inner_interval):
        """Should certify ex32 at any epsilon above the truncation floor."""
        config = uncontrolled(ex32_coeffs, inner_interval, n_paths=4)
        certificate = near_viability_certificate(ex32_coeffs, inner_interval, [0.3], 1e-3, config)
        assert certificate.achieved
        assert certificate.to_dict()["achieved"] is True

    def test_inward_steering(self):
        """Should certify the disc under normal steering."""
        disc = BallDomain([0.0, 0.0], 1.0)
        angles = 2 * np.pi * np.arange(8) / 8
        grid = np.column_stack([np.cos(angles), np.sin(angles)])
        coeffs = speed_controlled(2, grid, 0.05)
        config = ValueConfig(
            policy_family=[normal_steering_policy(coeffs, disc)],
            n_paths=200,
            horizon_cut=5.0,
        )
        certificate = near_viability_certificate(coeffs, disc, [0.5, 0.0], 0.05, config)
        assert certificate.achieved
        assert certificate.policy == "normal_steering"

    def test_escaping_field(self, ex31_coeffs, unit_interval):
        """Should fail for ex31 from 0.75 at epsilon = e^{-1} / 2."""
        config = uncontrolled(ex31_coeffs, unit_interval, n_paths=1, step=1e-3)
        certificate = near_viability_certificate(
            ex31_coeffs, unit_interval, [0.75], math.exp(-1.0) / 2, config
        )
        assert not certificate.achieved
        assert certificate.policy is None
        assert certificate.estimate.mean == pytest.approx(math.exp(-1.0), abs=5e-3)


class TestTubeValueScan:
    """Tests for tube_value_scan."""

    def test_invariant_configuration(self, ex32_coeffs, inner_interval):
        """Should give zero everywhere on an invariant configuration."""
        config = uncontrolled(ex32_coeffs, inner_interval, n_paths=4, horizon_cut=5.0)
        scan = tube_value_scan(ex32_coeffs, inner_interval, config, 4, 2)
        assert len(scan.tube_points) == 4
        assert len(scan.deep_points) == 2
        assert all(np.asarray(inner_interval.signed_distance(scan.deep_points)) > 0.18)
        assert scan.max_tube.mean == 0.0
        assert scan.consistent

    def test_deep_starts_below_tube_maximum(self, unit_interval):
        """Should keep deep-interior values below the tube maximum."""
        coeffs = from_field(still_field(), sigma=0.3)
        config = uncontrolled(coeffs, unit_interval, n_paths=200, horizon_cut=3.0)
        scan = tube_value_scan(coeffs, unit_interval, config, 6, 3)
        assert scan.consistent
        assert scan.max_deep.mean <= scan.max_tube.mean
