#!/usr/bin/env python3
"""
Tests for slot-level spoofing analysis: delay window, RIS size threshold,
frequency wrapping, the feasible set, echo perturbation and the AoD estimator.
"""

import math

import numpy as np
import pytest

from src.attack_planner import ActionGrid
from src.errors import InvalidInputError
from src.signal_core import (ScenarioConfig, VehicleState, channel_gains, compensated_echo, echo_synth_oracle,
                             matched_filter_closed, perfect_echo, ris_geometry, substream)
from src.spoof_analysis import (
    aod_grid,
    aod_mle,
    delta_y,
    feasible_set,
    mle_objective,
    resolvable_from_doppler,
    ris_size_threshold,
    spoofed_objective_terms,
    spoofed_velocity,
    spoofing_range_check,
    spoofing_window,
    state_estimate,
    wrap_frequency,
)


class TestDelayWindow:
    """Reachable distance window of the RIS delay line"""

    def test_window_width(self):
        assert spoofing_window(0.32e-6) == pytest.approx(47.97, abs=0.01)

    def test_range_check(self, ris):
        assert spoofing_range_check(math.hypot(3, 21), ris.distance, 0.32e-6)
        assert not spoofing_range_check(80.0, ris.distance, 0.32e-6)
        assert not spoofing_range_check(5.0, ris.distance, 0.32e-6)

    def test_range_check_rejects_non_positive_distance(self):
        with pytest.raises(InvalidInputError):
            spoofing_range_check(0.0, 10.0, 0.32e-6)


class TestSizeThreshold:
    """Element-count threshold M*"""

    def test_default_ris_is_large_enough_at_85_degrees(self, scenario, vehicle_geometry, ris, beam_85):
        threshold = ris_size_threshold(scenario, beam_85, vehicle_geometry.aod, ris.aod)
        assert 10 * threshold <= scenario.ris_elements

    def test_swapping_angles_inverts_the_ratio(self, scenario, vehicle_geometry, ris, beam_85):
        forward = ris_size_threshold(scenario, beam_85, vehicle_geometry.aod, ris.aod)
        backward = ris_size_threshold(scenario, beam_85, ris.aod, vehicle_geometry.aod)
        prefactor = math.sqrt(scenario.vehicle_rcs / (4 * math.pi * scenario.ris_efficiency)) \
            * scenario.wavelength / scenario.ris_effective_area
        assert forward * backward == pytest.approx(prefactor ** 2)


class TestWrapFrequency:
    """Wrapping into (0, 1/Delta T]"""

    @pytest.mark.parametrize("freq, expected", [(2600.0, 600.0), (1000.0, 1000.0), (2000.0, 1000.0), (1.0, 1.0)])
    def test_wrap(self, freq, expected):
        assert wrap_frequency(freq, 1e-3) == pytest.approx(expected)

    def test_non_positive_rejected(self):
        with pytest.raises(InvalidInputError):
            wrap_frequency(0.0, 1e-3)


class TestFeasibleSet:
    """Feasibility inequality"""

    def test_vehicle_doppler_zeroes_lhs_but_is_unresolved(self, scenario, vehicle_geometry, ris, beam_85):
        result = feasible_set(scenario, vehicle_geometry, ris, beam_85, [vehicle_geometry.doppler])
        assert result.lhs_values[0] == 0.0
        assert not result.resolved[0]
        assert not result.mask[0]

    def test_frequencies_within_a_doppler_bin_are_never_feasible(self, scenario, vehicle_geometry, ris, beam_85):
        freqs = vehicle_geometry.doppler + np.array([-60.0, -20.0, 20.0, 60.0])
        result = feasible_set(scenario, vehicle_geometry, ris, beam_85, freqs)
        assert not np.any(result.mask)
        assert np.any(result.lhs_values >= 0)

    def test_resolution_band_wraps_around_the_period(self, scenario):
        resolved = resolvable_from_doppler([132.0, 182.0, 232.0, 1000.0], 132.0, scenario)
        assert resolved.tolist() == [False, False, True, True]
        assert resolvable_from_doppler([20.0, 80.0], 970.0, scenario).tolist() == [False, True]

    def test_lhs_equals_peak_difference_of_the_approximate_curve(self, scenario, vehicle_geometry, ris, beam_85):
        freqs = np.array([200.0, 500.0, 800.0, 950.0])
        result = feasible_set(scenario, vehicle_geometry, ris, beam_85, freqs)
        scale = scenario.transmit_power * scenario.array_gain ** 2 * scenario.slot_duration ** 2
        differences = []
        for freq in freqs:
            curve = matched_filter_closed(scenario, vehicle_geometry, ris, beam_85, freq,
                                          [freq, vehicle_geometry.doppler], mode="approx")
            differences.append((curve.magnitudes[0] - curve.magnitudes[1]) / scale)
        np.testing.assert_allclose(differences, result.lhs_values, rtol=1e-6,
                                   atol=1e-9 * np.max(np.abs(result.lhs_values)))

    def test_spoofing_feasible_at_85_degrees(self, scenario, vehicle_geometry, ris, beam_85):
        result = feasible_set(scenario, vehicle_geometry, ris, beam_85, [400.0, 800.0])
        assert result.mask.tolist() == [True, False]
        assert not result.low_confidence
        assert result.feasible_freqs.tolist() == [400.0]

    def test_beam_on_the_vehicle_leaves_no_feasible_frequency(self, scenario, vehicle_geometry, ris):
        result = feasible_set(scenario, vehicle_geometry, ris, math.radians(82.0))
        assert result.is_empty

    def test_grid_outside_wrap_period_rejected(self, scenario, vehicle_geometry, ris, beam_85):
        with pytest.raises(InvalidInputError):
            feasible_set(scenario, vehicle_geometry, ris, beam_85, [1200.0])
        with pytest.raises(InvalidInputError):
            feasible_set(scenario, vehicle_geometry, ris, beam_85, [])

    def test_default_grid_is_one_hertz(self, scenario, vehicle_geometry, ris, beam_85):
        result = feasible_set(scenario, vehicle_geometry, ris, beam_85)
        assert result.grid_freqs.size == 1000
        assert result.grid_freqs[0] == 1.0


class TestEchoPerturbation:
    """delta_y and the spoofed objective"""

    def test_delta_y_is_spoofed_minus_perfect(self, scenario, vehicle_geometry, ris, beam_85):
        spoofed = compensated_echo(scenario, vehicle_geometry, ris, beam_85, 800.0)
        perfect = perfect_echo(scenario, vehicle_geometry, beam_85)
        np.testing.assert_allclose(delta_y(scenario, vehicle_geometry, ris, beam_85, 800.0),
                                   spoofed - perfect, rtol=1e-9, atol=1e-12 * np.max(np.abs(spoofed)))

    def test_spoofed_terms_differ_by_a_constant(self, scenario, vehicle_geometry, ris, beam_85):
        perfect = perfect_echo(scenario, vehicle_geometry, beam_85)
        perturbation = delta_y(scenario, vehicle_geometry, ris, beam_85, 800.0)
        thetas = np.radians([60.0, 70.0, 80.0, 90.0])
        direct = mle_objective(perfect + perturbation, scenario, vehicle_geometry.gain, beam_85, thetas)
        split = spoofed_objective_terms(perfect, perturbation, scenario, vehicle_geometry.gain, beam_85, thetas)
        offset = direct - split
        np.testing.assert_allclose(offset, offset[0], rtol=1e-8, atol=1e-10 * np.max(np.abs(direct)))


class TestAodEstimation:
    """Maximum-likelihood AoD"""

    def test_grid_excludes_endfire(self):
        grid = aod_grid(math.radians(0.1))
        assert grid[0] > 0 and grid[-1] < math.pi
        assert grid.size == 1799

    def test_noiseless_estimate_is_exact(self, scenario, vehicle_geometry, beam_85):
        echo = perfect_echo(scenario, vehicle_geometry, beam_85)
        estimate = aod_mle(echo, scenario, beam_85, vehicle_geometry.gain, mode="perfect")
        assert math.degrees(abs(estimate - vehicle_geometry.aod)) <= 0.01

    def test_estimate_deterministic_with_noise(self, scenario, vehicle_geometry, ris, beam_85):
        first = aod_mle(compensated_echo(scenario, vehicle_geometry, ris, beam_85, 800.0, substream(7, "noise", 0)),
                        scenario, beam_85, vehicle_geometry.gain)
        second = aod_mle(compensated_echo(scenario, vehicle_geometry, ris, beam_85, 800.0, substream(7, "noise", 0)),
                         scenario, beam_85, vehicle_geometry.gain)
        assert first == second
        assert 0 < first < math.pi

    def test_both_echo_sources_share_one_estimator(self, scenario, vehicle_geometry, ris, beam_85):
        echo = compensated_echo(scenario, vehicle_geometry, ris, beam_85, 400.0, substream(3, "noise", 1))
        spoofed = aod_mle(echo, scenario, beam_85, vehicle_geometry.gain, mode="spoofed")
        perfect = aod_mle(echo, scenario, beam_85, vehicle_geometry.gain, mode="perfect")
        assert spoofed == perfect

    @pytest.mark.parametrize("freq", [600.0, 700.0, 800.0, 900.0, 950.0])
    def test_forced_spoof_pulls_the_estimate_toward_the_ris(self, scenario, vehicle_geometry, ris, beam_85, freq):
        # 1000 Hz sits on a zero of the RIS sinc envelope
        echo = compensated_echo(scenario, vehicle_geometry, ris, beam_85, freq)
        bias = math.degrees(aod_mle(echo, scenario, beam_85, vehicle_geometry.gain) - vehicle_geometry.aod)
        assert bias <= -8.0

    def test_invalid_inputs(self, scenario, vehicle_geometry, beam_85):
        with pytest.raises(InvalidInputError):
            aod_mle(np.zeros(scenario.n_rx), scenario, beam_85, vehicle_geometry.gain)
        with pytest.raises(InvalidInputError):
            aod_mle(np.ones(3), scenario, beam_85, vehicle_geometry.gain)
        with pytest.raises(InvalidInputError):
            aod_mle(np.ones(scenario.n_rx), scenario, beam_85, vehicle_geometry.gain, mode="robust")


class TestStateEstimate:
    """Sensed state assembly"""

    def test_exact_inputs_recover_the_vehicle(self, scenario, vehicle_geometry):
        sensed = state_estimate(vehicle_geometry.delay, vehicle_geometry.doppler, vehicle_geometry.aod, scenario)
        assert sensed.x == pytest.approx(3.0)
        assert sensed.y == pytest.approx(21.0)
        assert sensed.v == pytest.approx(10.0)
        assert sensed.range == pytest.approx(math.hypot(3, 21))

    def test_spoofed_velocity(self, scenario, vehicle_geometry):
        assert float(spoofed_velocity(vehicle_geometry.doppler, vehicle_geometry.aod, scenario)) == pytest.approx(10.0)
        with pytest.raises(InvalidInputError):
            spoofed_velocity(100.0, math.pi / 2, scenario)

    def test_literal_convention_doubles_range(self, vehicle_geometry):
        literal = ScenarioConfig(position_convention="literal")
        geometry = channel_gains(VehicleState(3.0, 21.0, 10.0), literal)
        sensed = state_estimate(geometry.delay, geometry.doppler, geometry.aod, literal)
        assert sensed.range == pytest.approx(2 * math.hypot(3, 21))


def _ris_dominant_scenarios(count: int, seed: int = 11):
    """Large RIS on the far side of the array normal, beam on the RIS, vehicle in a sidelobe."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        elements = int(rng.choice([128, 256]))
        scenario = ScenarioConfig(ris_position=(float(rng.uniform(-8.0, -4.0)), float(rng.uniform(12.0, 16.0))),
                                  ris_elements=elements, ris_area=0.05 * elements / 32)
        vehicle = channel_gains(VehicleState(float(rng.uniform(2.0, 6.0)), float(rng.uniform(18.0, 24.0)),
                                             float(rng.uniform(5.0, 25.0))), scenario)
        ris = ris_geometry(scenario)
        beam = ris.aod + math.radians(float(rng.uniform(-1.0, 1.0)))
        cases.append((scenario, vehicle, ris, beam, rng))
    return cases


@pytest.mark.slow
class TestPeakDominance:
    """Time-domain echo synthesis on random RIS-dominant scenarios"""

    @pytest.fixture(scope="class")
    def cases(self):
        return _ris_dominant_scenarios(10)

    def test_ris_exceeds_the_size_threshold(self, cases):
        for scenario, vehicle, ris, beam, _ in cases:
            assert scenario.ris_elements >= 10 * ris_size_threshold(scenario, beam, vehicle.aod, ris.aod)

    @pytest.mark.parametrize("alias", [1, 2])
    def test_aliases_of_the_vehicle_doppler_do_not_win(self, cases, alias):
        for scenario, vehicle, ris, beam, _ in cases:
            spoof = vehicle.doppler + alias * scenario.wrap_period
            curve = echo_synth_oracle(scenario, vehicle, ris, beam, spoof, [vehicle.doppler, spoof])
            assert curve.magnitudes[0] > curve.magnitudes[1]

    def test_peak_lands_on_the_wrapped_spoofing_frequency(self, cases):
        grid = 10.0 * np.arange(1, 301)
        for scenario, vehicle, ris, beam, rng in cases:
            while True:
                base = float(rng.uniform(60.0, 400.0))
                offset = (base - vehicle.doppler) % scenario.wrap_period
                if min(offset, scenario.wrap_period - offset) >= 100.0:
                    break
            for alias in (0, 1, 2):
                spoof = base + alias * scenario.wrap_period
                curve = echo_synth_oracle(scenario, vehicle, ris, beam, spoof, grid)
                assert abs(curve.peak_freq - base) <= 10.0


@pytest.mark.slow
class TestFeasibilityAgainstExactCurve:
    """The inequality predicts which peak the per-antenna matched filter prefers"""

    def test_sign_agreement_across_beams(self, scenario, vehicle_geometry, ris):
        freqs = ActionGrid.from_scenario(scenario, 200).freqs
        checked = violations = 0
        for beam_deg in np.arange(70.0, 95.0 + 1e-9, 0.5):
            beam = math.radians(float(beam_deg))
            result = feasible_set(scenario, vehicle_geometry, ris, beam, freqs)
            for freq, lhs, resolved in zip(freqs, result.lhs_values, result.resolved):
                if not resolved:
                    continue
                curve = matched_filter_closed(scenario, vehicle_geometry, ris, beam, float(freq),
                                              [freq, vehicle_geometry.doppler], mode="exact")
                spoofed_peak, true_peak = curve.magnitudes
                checked += 1
                if abs(spoofed_peak - true_peak) <= 0.01 * max(spoofed_peak, true_peak):
                    continue
                if (lhs >= 0) != (spoofed_peak >= true_peak):
                    violations += 1
        assert checked > 0
        assert violations / checked <= 0.01
