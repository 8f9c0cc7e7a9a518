import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irsd2d.channel import (
    TWO_PI,
    DomainError,
    PathLossParams,
    PhaseShiftVector,
    Position3,
    distance,
    effective_channel,
    optimal_single_element_phase,
    sample_direct_channel,
    sample_reflective_channel,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
complex_st = st.builds(complex, finite, finite)


class TestDistance:
    @pytest.mark.parametrize(
        "a, b, expected",
        [((3, 4, 0), (0, 0, 0), 5.0), ((0, 0, 0), (0, 0, 10), 10.0), ((1, 2, 2), (0, 0, 0), 3.0)],
    )
    def test_examples(self, a, b, expected):
        assert distance(Position3(*a), Position3(*b)) == pytest.approx(expected, abs=1e-15)

    def test_broadcasts_over_arrays(self):
        pts = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 10.0]])
        np.testing.assert_allclose(distance(pts, np.zeros(3)), [5.0, 10.0])

    def test_non_finite_position_rejected(self):
        with pytest.raises(DomainError):
            Position3(float("nan"), 0.0)


class TestPathLossParams:
    def test_table_defaults(self):
        p = PathLossParams()
        assert p.beta0 == pytest.approx(10 ** (-30 / 10))
        assert (p.kappa0, p.kappa1, p.rician_beta1) == (2.5, 3.6, 4.0)

    @pytest.mark.parametrize(
        "kwargs", [{"beta0": 0.0}, {"kappa0": -1.0}, {"kappa1": 0.0}, {"rician_beta1": -0.1}, {"nakagami_m": 0.4}]
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(DomainError):
            PathLossParams(**kwargs)

    def test_rician_weights_for_k_factor_4(self):
        p = PathLossParams(rician_beta1=4.0)
        assert p.los_weight**2 == pytest.approx(0.8)
        assert p.nlos_weight**2 == pytest.approx(0.2)


class TestDirectChannel:
    def test_reference_distance_gain(self):
        h = sample_direct_channel(1.0, PathLossParams(beta0=1e-3), fading=False)
        assert abs(h) ** 2 == pytest.approx(1e-3, rel=1e-12)

    def test_power_law_at_10m(self):
        h = sample_direct_channel(10.0, PathLossParams(beta0=1e-3, kappa0=2.5), fading=False)
        assert abs(h) ** 2 == pytest.approx(1e-3 * math.pow(10.0, -2.5), rel=1e-12)
        assert abs(h) ** 2 == pytest.approx(3.1623e-6, rel=1e-4)

    def test_monte_carlo_mean_power(self):
        rng = np.random.default_rng(1)
        h = sample_direct_channel(np.ones(10**6), PathLossParams(beta0=1.0), rng)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=0.01)

    def test_phase_is_uniform(self):
        rng = np.random.default_rng(2)
        h = sample_direct_channel(np.ones(10**5), PathLossParams(beta0=1.0), rng)
        # first circular moment of a uniform phase vanishes
        assert abs(np.mean(np.exp(1j * np.angle(h)))) < 0.01

    def test_pinned_phase(self):
        rng = np.random.default_rng(3)
        h = sample_direct_channel(np.full(50, 2.0), PathLossParams(), rng, phase=1.25)
        np.testing.assert_allclose(np.angle(h), 1.25)

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_nonpositive_distance(self, d):
        with pytest.raises(DomainError):
            sample_direct_channel(d, PathLossParams(), np.random.default_rng(0))


class TestReflectiveChannel:
    def test_los_part_closed_form(self):
        # a huge NLoS exponent leaves only the LoS term
        p = PathLossParams(beta0=1e-3, kappa0=2.5, kappa1=200.0, rician_beta1=4.0)
        h = sample_reflective_channel(10.0, 10.0, p, np.random.default_rng(0), n_elements=16)
        np.testing.assert_allclose(np.abs(h) ** 2, 0.8 * 1e-3 * 100.0**-2.5, rtol=1e-12)
        np.testing.assert_allclose(np.abs(h) ** 2, 8e-9, rtol=1e-12)

    def test_zero_k_factor_is_pure_nlos(self):
        p = PathLossParams(rician_beta1=0.0)
        a = sample_reflective_channel(5.0, 7.0, p, np.random.default_rng(4), n_elements=8, los_phase=0.0)
        b = sample_reflective_channel(5.0, 7.0, p, np.random.default_rng(4), n_elements=8, los_phase=2.0)
        np.testing.assert_array_equal(a, b)

    def test_independent_elements(self):
        h = sample_reflective_channel(5.0, 5.0, PathLossParams(), np.random.default_rng(5), n_elements=4)
        assert h.shape == (4,)
        assert len(set(np.round(h, 20))) == 4

    def test_fixed_los_phase_enters_with_negative_sign(self):
        p = PathLossParams(kappa1=200.0)
        h = sample_reflective_channel(3.0, 4.0, p, np.random.default_rng(6), los_phase=0.7)
        assert np.angle(h) == pytest.approx(-0.7)

    def test_nonpositive_distance(self):
        with pytest.raises(DomainError):
            sample_reflective_channel(0.0, 1.0, PathLossParams(), np.random.default_rng(0))


class TestEffectiveChannel:
    def test_constructive(self):
        g = effective_channel(1 + 0j, np.array([1 + 0j]), PhaseShiftVector([0.0]))
        assert g == pytest.approx(2 + 0j)
        assert abs(g) ** 2 == pytest.approx(4.0)

    def test_destructive(self):
        g = effective_channel(1 + 0j, np.array([1 + 0j]), PhaseShiftVector([math.pi]))
        assert abs(g) == pytest.approx(0.0, abs=1e-15)

    def test_null_channel(self):
        assert effective_channel(0j, np.zeros(3, dtype=complex), np.zeros(3)) == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            effective_channel(0j, np.zeros(3, dtype=complex), np.zeros(2))

    def test_matrix_form(self):
        rng = np.random.default_rng(7)
        direct = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        refl = rng.standard_normal((2, 2, 3)) + 1j * rng.standard_normal((2, 2, 3))
        theta = rng.uniform(0, TWO_PI, 3)
        g = effective_channel(direct, refl, theta)
        for m in range(2):
            for n in range(2):
                expected = direct[m, n] + sum(refl[m, n, k] * np.exp(1j * theta[k]) for k in range(3))
                assert g[m, n] == pytest.approx(expected, rel=1e-13)

    def test_phase_vector_validation(self):
        with pytest.raises(DomainError):
            PhaseShiftVector([-0.1])
        with pytest.raises(DomainError):
            PhaseShiftVector([TWO_PI + 1e-9])
        np.testing.assert_array_equal(PhaseShiftVector([0.0, 1.0]).eta, [1.0, 1.0])

    @given(direct=complex_st, thetas=st.lists(st.floats(0, TWO_PI), min_size=0, max_size=6))
    def test_zero_reflection_is_direct(self, direct, thetas):
        refl = np.zeros(len(thetas), dtype=complex)
        assert effective_channel(direct, refl, np.array(thetas)) == direct

    @given(element=complex_st, theta=st.floats(0, TWO_PI))
    def test_single_element_magnitude_invariant(self, element, theta):
        g = effective_channel(0j, np.array([element]), np.array([theta]))
        assert abs(g) == pytest.approx(abs(element), rel=1e-12, abs=1e-300)

    @settings(max_examples=50)
    @given(direct=complex_st, element=complex_st)
    def test_grid_search_max_matches_alignment(self, direct, element):
        grid = np.arange(360) * TWO_PI / 360
        powers = np.abs(direct + element * np.exp(1j * grid)) ** 2
        best = (abs(direct) + abs(element)) ** 2
        # a 1-degree grid misses the optimum by at most cos(0.5 deg)
        assert powers.max() <= best * (1 + 1e-12) + 1e-300
        assert powers.max() >= best * math.cos(math.radians(0.5)) ** 2 - 1e-9
        theta = optimal_single_element_phase(direct, element)
        aligned = abs(direct + element * np.exp(1j * theta)) ** 2
        assert aligned == pytest.approx(best, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("m", [0.5, 1.0, 2.0, 5.0])
def test_direct_mean_power_for_any_severity(m):
    p = PathLossParams(beta0=1e-3, nakagami_m=m)
    d = 7.0
    h = sample_direct_channel(np.full(10**5, d), p, np.random.default_rng(int(m * 10)))
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1e-3 * d**-2.5, rel=0.02)
