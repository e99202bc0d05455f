#!/usr/bin/env python3
"""
Tests for the signal model: kernels, steering vectors, slot geometry,
matched-filter closed form against the time-domain oracle, and echo noise.
"""

import math

import numpy as np
import pytest
from scipy.constants import c as SPEED_OF_LIGHT

from src.errors import ConfigError, InvalidInputError
from src.signal_core import (
    ScenarioConfig,
    Trajectory,
    VehicleState,
    array_factor,
    channel_gains,
    compensated_echo,
    derive_seed,
    echo_noise,
    echo_synth_oracle,
    g_factor,
    h_factor,
    matched_filter_closed,
    noise_variance,
    perfect_echo,
    sinc,
    steering,
    substream,
)


class TestKernels:
    """sinc, array factor and steering vectors"""

    def test_sinc_limits(self):
        assert sinc(0.0) == 1.0
        assert sinc(0.5) == pytest.approx(2 / math.pi)
        assert sinc(1.0) == pytest.approx(0.0, abs=1e-15)

    def test_array_factor_at_poles(self):
        assert array_factor(4, 0.0) == 1.0
        assert array_factor(4, math.pi) == -1.0
        assert array_factor(3, math.pi) == 1.0
        assert array_factor(2, math.pi / 4) == pytest.approx(1 / math.sqrt(2))

    def test_array_factor_rejects_empty_array(self):
        with pytest.raises(InvalidInputError):
            array_factor(0, 0.3)

    def test_steering_vector_values(self):
        a = steering(math.pi / 3, 2)
        np.testing.assert_allclose(a, np.array([1, -1j]) / math.sqrt(2), atol=1e-12)
        assert np.linalg.norm(steering(1.1, 32)) == pytest.approx(1.0)

    def test_steering_rejects_endfire(self):
        with pytest.raises(InvalidInputError):
            steering(0.0, 8)
        with pytest.raises(InvalidInputError):
            steering(1.0, 8, side="both")

    @pytest.mark.parametrize("theta1, theta2", [(1.2, 1.4), (0.3, 2.9), (1.5, 1.5)])
    def test_h_factor_matches_inner_product(self, theta1, theta2):
        n = 16
        expected = np.vdot(steering(theta1, n), steering(theta2, n))
        assert complex(h_factor(n, theta1, theta2)) == pytest.approx(complex(expected), abs=1e-12)

    def test_g_factor_per_receive_antenna(self):
        g = g_factor(8, 4, 1.2, 1.5)
        expected = 2.0 * steering(1.5, 4, "rx") * h_factor(8, 1.5, 1.2)
        np.testing.assert_allclose(g, expected, atol=1e-12)
        np.testing.assert_allclose(np.abs(g), abs(complex(h_factor(8, 1.5, 1.2))), atol=1e-12)


class TestGeometry:
    """Slot geometry, Doppler and path gain"""

    def test_reference_vehicle_geometry(self, scenario, vehicle_geometry):
        assert math.degrees(vehicle_geometry.aod) == pytest.approx(81.87, abs=0.01)
        assert vehicle_geometry.distance == pytest.approx(math.hypot(3, 21))
        assert vehicle_geometry.delay == pytest.approx(2 * math.hypot(3, 21) / SPEED_OF_LIGHT)
        assert vehicle_geometry.doppler == pytest.approx(132.08, abs=0.01)

    def test_path_gain_magnitude(self, scenario, vehicle_geometry):
        d = vehicle_geometry.distance
        expected = math.sqrt(scenario.wavelength ** 2 * scenario.vehicle_rcs / (64 * math.pi ** 3 * d ** 4))
        assert abs(vehicle_geometry.gain) == pytest.approx(expected)

    def test_ris_geometry(self, ris):
        assert math.degrees(ris.aod) == pytest.approx(71.57, abs=0.01)
        assert ris.doppler is None

    def test_ris_gain_is_per_element(self, scenario, ris):
        whole_surface = scenario.wavelength ** 2 * scenario.ris_rcs / (64 * math.pi ** 3 * ris.distance ** 4)
        assert scenario.ris_elements ** 2 * abs(ris.gain) ** 2 == pytest.approx(whole_surface)
        assert scenario.ris_rcs == pytest.approx(4 * math.pi * 0.8 * (0.45 * 0.05) ** 2 / scenario.wavelength ** 2)

    def test_vehicle_behind_array_rejected(self):
        with pytest.raises(InvalidInputError):
            VehicleState(0.0, -1.0, 10.0)

    def test_trajectory_shape_validated(self):
        with pytest.raises(InvalidInputError):
            Trajectory(np.zeros((5, 2)))
        assert len(Trajectory(np.ones((4, 3)))) == 4


class TestScenario:
    """Scenario validation and hashing"""

    def test_slot_must_be_multiple_of_update_interval(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(phase_update_interval=0.003)

    @pytest.mark.parametrize("efficiency", [0.0, 1.5])
    def test_aperture_efficiency_range(self, efficiency):
        with pytest.raises(ConfigError):
            ScenarioConfig(ris_aperture_efficiency=efficiency)

    def test_derived_quantities(self, scenario):
        assert scenario.n_phase_updates == 10
        assert scenario.wrap_period == pytest.approx(1000.0)
        assert scenario.array_gain == pytest.approx(32.0)

    def test_hash_tracks_physical_parameters_only(self, scenario):
        assert ScenarioConfig(rng_seed=99).scenario_hash() == scenario.scenario_hash()
        assert ScenarioConfig(carrier_freq=30e9).scenario_hash() != scenario.scenario_hash()


class TestRandomStreams:
    """Named sub-streams"""

    def test_streams_are_reproducible(self):
        a = substream(7, "noise", 1, 2).normal(size=5)
        b = substream(7, "noise", 1, 2).normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ_by_name_and_index(self):
        base = substream(7, "noise", 1).normal(size=5)
        assert not np.array_equal(base, substream(7, "datagen", 1).normal(size=5))
        assert not np.array_equal(base, substream(7, "noise", 2).normal(size=5))

    def test_derived_seed_range(self):
        seed = derive_seed(7, "kmeans", 0)
        assert 0 <= seed < 2 ** 31 - 1
        assert seed == derive_seed(7, "kmeans", 0)


class TestMatchedFilter:
    """Closed-form matched filter against the time-domain oracle"""

    def test_closed_form_matches_oracle_pointwise(self, scenario, vehicle_geometry, ris, beam_85):
        grid = np.arange(1.0, 1001.0)
        closed = matched_filter_closed(scenario, vehicle_geometry, ris, beam_85, 800.0, grid)
        oracle = echo_synth_oracle(scenario, vehicle_geometry, ris, beam_85, 800.0, grid)
        error = np.abs(closed.magnitudes - oracle.magnitudes) / oracle.magnitudes
        assert np.max(error) <= 1e-3

    def test_closed_form_without_ris_peaks_at_vehicle_doppler(self, scenario, vehicle_geometry, beam_85):
        grid = np.arange(1.0, 1001.0)
        curve = matched_filter_closed(scenario, vehicle_geometry, None, beam_85, 800.0, grid)
        assert curve.peak_freq == pytest.approx(vehicle_geometry.doppler, abs=1.0)

    def test_feasible_spoof_moves_the_peak(self, scenario, vehicle_geometry, ris, beam_85):
        grid = np.arange(1.0, 1001.0)
        curve = matched_filter_closed(scenario, vehicle_geometry, ris, beam_85, 300.0, grid)
        # the sinc(mu dT) envelope pulls the peak a few Hz below the spoofing frequency
        assert curve.peak_freq == pytest.approx(300.0, abs=10.0)

    def test_infeasible_spoof_leaves_the_peak_at_vehicle_doppler(self, scenario, vehicle_geometry, ris, beam_85):
        grid = np.arange(1.0, 1001.0)
        curve = matched_filter_closed(scenario, vehicle_geometry, ris, beam_85, 800.0, grid)
        assert curve.peak_freq == pytest.approx(vehicle_geometry.doppler, abs=5.0)

    def test_unknown_mode_rejected(self, scenario, vehicle_geometry, ris, beam_85):
        with pytest.raises(InvalidInputError):
            matched_filter_closed(scenario, vehicle_geometry, ris, beam_85, 800.0, [100.0], mode="fast")

    def test_empty_grid_rejected(self, scenario, vehicle_geometry, ris, beam_85):
        with pytest.raises(InvalidInputError):
            matched_filter_closed(scenario, vehicle_geometry, ris, beam_85, 800.0, [])


class TestEcho:
    """Compensated echo and its noise"""

    def test_noise_variance_formula(self, scenario):
        expected = scenario.noise_power * scenario.slot_duration / (scenario.transmit_power * 32 * 32)
        assert noise_variance(scenario) == pytest.approx(expected)

    def test_noise_statistics(self, scenario):
        rng = substream(1, "noise")
        draws = np.concatenate([echo_noise(scenario, rng) for _ in range(400)])
        assert np.mean(np.abs(draws) ** 2) == pytest.approx(noise_variance(scenario), rel=0.05)

    def test_noiseless_perfect_echo(self, scenario, vehicle_geometry):
        echo = perfect_echo(scenario, vehicle_geometry, vehicle_geometry.aod)
        expected = scenario.slot_duration * abs(vehicle_geometry.gain)
        assert np.linalg.norm(echo) == pytest.approx(expected)

    def test_compensation_at_vehicle_doppler_without_ris(self, scenario, vehicle_geometry, beam_85):
        echo = compensated_echo(scenario, vehicle_geometry, None, beam_85, vehicle_geometry.doppler)
        np.testing.assert_allclose(echo, perfect_echo(scenario, vehicle_geometry, beam_85), atol=1e-20)

    def test_ris_term_changes_echo(self, scenario, vehicle_geometry, ris, beam_85):
        clean = compensated_echo(scenario, vehicle_geometry, None, beam_85, 800.0)
        spoofed = compensated_echo(scenario, vehicle_geometry, ris, beam_85, 800.0)
        assert np.linalg.norm(spoofed - clean) > 0

    @pytest.mark.parametrize("freq", [0.0, -5.0, 1500.0])
    def test_spoof_frequency_outside_period(self, scenario, vehicle_geometry, ris, beam_85, freq):
        with pytest.raises(InvalidInputError):
            compensated_echo(scenario, vehicle_geometry, ris, beam_85, freq)
