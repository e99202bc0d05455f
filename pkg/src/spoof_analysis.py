"""
Slot-level spoofing analysis: delay-range check, RIS size threshold, wrapped
spoofing frequency, feasible spoofing set, echo perturbation, AoD maximum
likelihood estimation and sensed-state assembly.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT
from scipy.optimize import minimize_scalar

from src.errors import InvalidInputError
from src.signal_core import (
    ScenarioConfig,
    SlotGeometry,
    array_factor,
    default_doppler_grid,
    echo_power_coefficients,
    h_factor,
    sinc,
    steering,
    steering_matrix,
)

logger = logging.getLogger(__name__)

MLE_GRID_STEP = math.radians(0.1)
MLE_REFINE_TOL = math.radians(0.01)


@dataclass
class FeasibleSet:
    """Spoofing frequencies whose injected peak dominates the true Doppler peak."""
    grid_freqs: np.ndarray
    mask: np.ndarray
    lhs_values: np.ndarray
    c_vehicle: float
    c_ris: float
    size_threshold: float
    low_confidence: bool = False
    resolved: Optional[np.ndarray] = None

    @property
    def is_empty(self) -> bool:
        return not bool(np.any(self.mask))

    @property
    def feasible_freqs(self) -> np.ndarray:
        return self.grid_freqs[self.mask]


@dataclass(frozen=True)
class SensedState:
    """RSU-side estimate of one slot: position, velocity, AoD, Doppler and delay."""
    x: float
    y: float
    v: float
    aod: float
    doppler: float
    delay: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v], dtype=float)

    @property
    def range(self) -> float:
        return math.hypot(self.x, self.y)


def spoofing_window(max_delay: float) -> float:
    """Width of the distance window reachable by the RIS delay line, Delta_max c / 2."""
    return max_delay * SPEED_OF_LIGHT / 2


def spoofing_range_check(d_vehicle: float, d_ris: float, max_delay: float) -> bool:
    """True iff d_R <= d_k <= d_R + Delta_max c / 2."""
    if d_vehicle <= 0 or d_ris <= 0:
        raise InvalidInputError(f"distances must be positive, got d_k={d_vehicle}, d_R={d_ris}")
    return d_ris <= d_vehicle <= d_ris + spoofing_window(max_delay)


def ris_size_threshold(scenario: ScenarioConfig, theta0: float, theta_k: float, theta_r: float) -> float:
    """
    Element count M* above which the infeasible frequencies cannot win the peak.

    M* = sqrt(kappa_V / (4 pi eta)) (lambda / (epsilon S)) |f(N_t, u_k) / f(N_t, u_R)|, with
    u = pi/2 (cos theta0 - cos theta). Returns inf when the RIS sits in a beam null.
    """
    prefactor = math.sqrt(scenario.vehicle_rcs / (4 * math.pi * scenario.ris_efficiency)) \
        * scenario.wavelength / scenario.ris_effective_area
    numerator = array_factor(scenario.n_tx, math.pi / 2 * (math.cos(theta0) - math.cos(theta_k)))
    denominator = array_factor(scenario.n_tx, math.pi / 2 * (math.cos(theta0) - math.cos(theta_r)))
    if abs(denominator) < 1e-15:
        return math.inf
    return prefactor * abs(numerator / denominator)


def wrap_frequency(spoof_freq: float, phase_update_interval: float) -> float:
    """Map a spoofing frequency into (0, 1/Delta T]; exact multiples map to 1/Delta T."""
    if spoof_freq <= 0:
        raise InvalidInputError(f"spoofing frequency must be positive, got {spoof_freq}")
    period = 1.0 / phase_update_interval
    if abs(period - round(period)) < 1e-9:
        period = float(round(period))
    wrapped = spoof_freq % period
    if wrapped <= 1e-9 * period:
        return period
    return wrapped


def resolvable_from_doppler(freqs, mu_k: float, scenario: ScenarioConfig) -> np.ndarray:
    """True where a wrapped frequency sits at least one Doppler bin 1/T from every alias of mu_k."""
    period = scenario.wrap_period
    offset = np.mod(np.asarray(freqs, dtype=float) - mu_k, period)
    distance = np.minimum(offset, period - offset)
    return distance >= (1.0 - 1e-9) / scenario.slot_duration


def feasible_set(scenario: ScenarioConfig, vehicle: SlotGeometry, ris: SlotGeometry, theta0: float,
                 grid: Optional[np.ndarray] = None) -> FeasibleSet:
    """
    Evaluate the feasibility inequality at every grid frequency.

    lhs = M^2 C_R [sinc^2(dmu dT) - sinc^2(mu_k dT) f^2(N_sub, pi dT (mu_k - dmu))]
          - C_V [1 - sinc^2(T (mu_k - dmu))]

    The inequality ignores the vehicle-RIS cross terms, which only vanish once the spoof
    is resolvable from the true Doppler. Frequencies within 1/T of mu_k + n/Delta T
    (wrapped) are therefore never feasible; lhs_values still carry the raw inequality.

    Args:
        scenario: Scenario configuration
        vehicle: Vehicle geometry of the slot
        ris: RIS geometry
        theta0: Transmit beam direction (rad)
        grid: Candidate wrapped frequencies in (0, 1/Delta T]; defaults to the 1 Hz grid

    Returns:
        FeasibleSet, flagged low_confidence when M < margin * M*
    """
    if vehicle.doppler is None:
        raise InvalidInputError("vehicle geometry carries no Doppler shift")
    freqs = default_doppler_grid(scenario) if grid is None else np.asarray(grid, dtype=float).ravel()
    if freqs.size == 0:
        raise InvalidInputError("frequency grid is empty")
    period = scenario.wrap_period
    if np.any(freqs <= 0) or np.any(freqs > period * (1 + 1e-12)):
        raise InvalidInputError(f"grid frequencies must lie in (0, {period}] Hz")

    T = scenario.slot_duration
    dT = scenario.phase_update_interval
    mu_k = vehicle.doppler
    m_count = scenario.ris_elements
    c_vehicle, c_ris = echo_power_coefficients(scenario, vehicle, ris, theta0)

    staircase = array_factor(scenario.n_phase_updates, np.pi * dT * (mu_k - freqs))
    spoof_gain = sinc(freqs * dT) ** 2 - sinc(mu_k * dT) ** 2 * staircase ** 2
    vehicle_loss = 1.0 - sinc(T * (mu_k - freqs)) ** 2
    lhs = m_count ** 2 * c_ris * spoof_gain - c_vehicle * vehicle_loss

    threshold = ris_size_threshold(scenario, theta0, vehicle.aod, ris.aod)
    low_confidence = m_count < scenario.ris_size_margin * threshold
    if low_confidence:
        logger.warning(f"RIS size M={m_count} below {scenario.ris_size_margin:g} x M*={threshold:.3g} "
                       f"at beam {math.degrees(theta0):.2f} deg; feasible set is low-confidence")

    resolved = resolvable_from_doppler(freqs, mu_k, scenario)
    mask = np.asarray((lhs >= 0) & resolved)
    logger.debug(f"Feasible set at beam {math.degrees(theta0):.2f} deg: {int(mask.sum())}/{freqs.size}")
    return FeasibleSet(
        grid_freqs=freqs,
        mask=mask,
        lhs_values=np.asarray(lhs, dtype=float),
        c_vehicle=c_vehicle,
        c_ris=c_ris,
        size_threshold=threshold,
        low_confidence=bool(low_confidence),
        resolved=resolved,
    )


def spoofed_velocity(spoof_freq, aod: float, scenario: ScenarioConfig):
    """Velocity the RSU reports when it locks onto spoof_freq at angle aod."""
    cos_aod = math.cos(aod)
    if abs(cos_aod) < 1e-12:
        raise InvalidInputError("velocity undefined at an AoD of 90 degrees")
    return np.asarray(spoof_freq) * SPEED_OF_LIGHT / (scenario.carrier_freq * cos_aod)


def delta_y(scenario: ScenarioConfig, vehicle: SlotGeometry, ris: Optional[SlotGeometry],
            theta0: float, spoof_freq: float) -> np.ndarray:
    """Perturbation of the compensated echo caused by the spoof (spoofed minus perfect echo)."""
    period = scenario.wrap_period
    if not 0 < spoof_freq <= period * (1 + 1e-12):
        raise InvalidInputError(f"spoofing frequency must lie in (0, {period}] Hz, got {spoof_freq}")
    T = scenario.slot_duration
    offset = spoof_freq - vehicle.doppler
    attenuation = np.exp(-1j * np.pi * offset * T) * sinc(T * offset) - 1.0
    result = (T * vehicle.gain * steering(vehicle.aod, scenario.n_rx, "rx")
              * h_factor(scenario.n_tx, vehicle.aod, theta0) * attenuation)
    if ris is not None:
        dT = scenario.phase_update_interval
        result = result + (scenario.ris_elements * T * ris.gain * steering(ris.aod, scenario.n_rx, "rx")
                           * h_factor(scenario.n_tx, ris.aod, theta0)
                           * np.exp(1j * np.pi * spoof_freq * dT) * sinc(spoof_freq * dT))
    return result


def aod_grid(step: float = MLE_GRID_STEP) -> np.ndarray:
    """Candidate AoDs from one step above 0 to one step below pi."""
    count = int(round(math.pi / step))
    return step * np.arange(1, count)


def echo_model(scenario: ScenarioConfig, gain: complex, theta0: float, thetas: np.ndarray) -> np.ndarray:
    """Noise-free vehicle echo T beta_V b(theta) h(theta, theta0) for each theta, shape (n_rx, G)."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    return (scenario.slot_duration * gain * steering_matrix(thetas, scenario.n_rx)
            * h_factor(scenario.n_tx, thetas, theta0)[None, :])


@lru_cache(maxsize=8)
def _grid_steering(grid_step: float, n_rx: int):
    thetas = aod_grid(grid_step)
    matrix = steering_matrix(thetas, n_rx)
    thetas.flags.writeable = False
    matrix.flags.writeable = False
    return thetas, matrix


def mle_objective(echo: np.ndarray, scenario: ScenarioConfig, gain: complex, theta0: float,
                  thetas: np.ndarray) -> np.ndarray:
    """||y - T beta_V b(theta) h(theta, theta0)||^2 for each theta."""
    residual = np.asarray(echo)[:, None] - echo_model(scenario, gain, theta0, thetas)
    return np.sum(np.abs(residual) ** 2, axis=0)


def spoofed_objective_terms(perfect: np.ndarray, perturbation: np.ndarray, scenario: ScenarioConfig,
                            gain: complex, theta0: float, thetas: np.ndarray) -> np.ndarray:
    """
    Spoofed-MLE objective written as the perfect-echo residual plus the cross term
    with the perturbation: ||y_perfect - m||^2 - 2 Re<m, dy>.

    Differs from mle_objective(y_perfect + dy) only by a constant in theta.
    """
    model = echo_model(scenario, gain, theta0, thetas)
    residual = np.sum(np.abs(np.asarray(perfect)[:, None] - model) ** 2, axis=0)
    cross = 2 * np.real(np.conj(model).T @ np.asarray(perturbation))
    return residual - cross


def aod_mle(echo: np.ndarray, scenario: ScenarioConfig, theta0: float, gain: complex,
            mode: str = "spoofed", grid_step: float = MLE_GRID_STEP,
            refine_tol: float = MLE_REFINE_TOL) -> float:
    """
    Maximum-likelihood AoD from a compensated echo.

    Exhaustive grid search followed by golden-section refinement inside the
    neighbouring grid cells. Ties on the grid resolve to the smaller angle.

    The RSU cannot tell a spoofed echo from a clean one, so both modes minimise the
    same residual ||y - T beta_V b(theta) h(theta, theta0)||^2 and return the same
    estimate. The mode only labels the echo source in logs.

    Args:
        echo: Compensated echo (length n_rx)
        scenario: Scenario configuration
        theta0: Beam direction used for the slot (rad)
        gain: Vehicle path gain beta_V known to the RSU from the delay
        mode: 'spoofed' or 'perfect', the echo source
        grid_step: Grid spacing (rad)
        refine_tol: Refinement tolerance (rad)

    Returns:
        Estimated AoD in (0, pi)

    Raises:
        InvalidInputError: If the echo is all zeros or the mode is unknown
    """
    if mode not in ("spoofed", "perfect"):
        raise InvalidInputError(f"mode must be 'spoofed' or 'perfect', got {mode!r}")
    echo = np.asarray(echo, dtype=complex).ravel()
    if echo.size != scenario.n_rx:
        raise InvalidInputError(f"echo must have {scenario.n_rx} elements, got {echo.size}")
    if not np.any(echo):
        raise InvalidInputError("echo is all zeros")

    thetas, steering_grid = _grid_steering(float(grid_step), scenario.n_rx)
    # ||y - c b||^2 with unit-norm b expands to ||y||^2 - 2 Re(conj(c) b^H y) + |c|^2
    amplitude = scenario.slot_duration * gain * h_factor(scenario.n_tx, thetas, theta0)
    projection = steering_grid.conj().T @ echo
    objective = (np.vdot(echo, echo).real - 2 * np.real(np.conj(amplitude) * projection)
                 + np.abs(amplitude) ** 2)
    best = int(np.argmin(objective))
    estimate = float(thetas[best])
    logger.debug(f"AoD MLE on {mode} echo: grid estimate {math.degrees(estimate):.2f} deg")
    if best == 0 or best == thetas.size - 1:
        return estimate

    def scalar_objective(theta):
        return float(mle_objective(echo, scenario, gain, theta0, np.array([theta]))[0])

    bracket = (float(thetas[best - 1]), estimate, float(thetas[best + 1]))
    try:
        result = minimize_scalar(scalar_objective, bracket=bracket, method="golden",
                                 tol=refine_tol / (2 * estimate))
    except ValueError:
        # flat neighbourhood; the grid point stands
        return estimate
    refined = float(result.x)
    if bracket[0] <= refined <= bracket[2] and scalar_objective(refined) <= scalar_objective(estimate):
        return refined
    return estimate


def state_estimate(delay: float, doppler: float, aod: float, scenario: ScenarioConfig) -> SensedState:
    """
    Assemble the sensed state from delay, Doppler and AoD estimates.

    Position uses range c tau / 2 ('half_delay') or c tau ('literal'), per the
    scenario's position convention; velocity is mu c / (f_c cos theta).
    """
    cos_aod = math.cos(aod)
    if abs(cos_aod) < 1e-12:
        raise InvalidInputError("velocity undefined at an AoD of 90 degrees")
    distance = SPEED_OF_LIGHT * delay
    if scenario.position_convention == "half_delay":
        distance /= 2
    velocity = doppler * SPEED_OF_LIGHT / (scenario.carrier_freq * cos_aod)
    return SensedState(
        x=distance * cos_aod,
        y=distance * math.sin(aod),
        v=float(velocity),
        aod=float(aod),
        doppler=float(doppler),
        delay=float(delay),
    )
