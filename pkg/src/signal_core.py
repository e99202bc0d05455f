"""
Signal model for the RIS spoofing simulator.

Array-factor kernels, steering vectors, per-slot channel geometry, the closed-form
matched-filter response of the composite echo (vehicle + RIS), the brute-force
time-domain echo oracle, and the compensated echo used by the AoD estimator.

All quantities are SI (W, Hz, m, rad); unit conversion happens in the config loader.
"""

import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, asdict
from typing import Optional, Tuple, Union

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from src.errors import ConfigError, InvalidInputError

logger = logging.getLogger(__name__)

# |x - pole| below this is treated as sitting on the removable singularity
POLE_GUARD = 1e-9

ArrayLike = Union[float, np.ndarray]


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """
    Named random sub-stream derived from the root seed.

    Args:
        seed: Root seed of the run
        name: Stream name ('datagen', 'noise', 'ppo', 'kmeans', 'tlinet', 'attack')
        *index: Optional integers (trial, episode, sample) folded into the stream

    Returns:
        Independent numpy Generator; identical arguments give identical streams
    """
    entropy = [int(seed) % (2 ** 63), zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, name: str, *index: int) -> int:
    """Integer seed (for torch / sklearn) taken from a named sub-stream."""
    return int(substream(seed, name, *index).integers(0, 2 ** 31 - 1))


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical constants, geometry and knobs of one ISAC scenario (SI units)."""
    transmit_power: float = 1.0            # P, 30 dBm
    noise_power: float = 1e-13             # sigma^2, -100 dBm
    carrier_freq: float = 28e9
    n_tx: int = 32
    n_rx: int = 32
    slot_duration: float = 0.01            # T
    phase_update_interval: float = 0.001   # Delta T
    ris_position: Tuple[float, float] = (5.0, 15.0)
    ris_elements: int = 32                 # M
    ris_efficiency: float = 0.8            # eta
    ris_area: float = 0.05                 # S = 0.5 m x 0.1 m
    ris_aperture_efficiency: float = 0.45  # epsilon: share of S reradiating coherently
    ris_max_delay: float = 0.32e-6
    vehicle_rcs: float = 10 ** 0.7         # 7 dBsm
    rng_seed: int = 7
    position_convention: str = "half_delay"
    ris_size_margin: float = 10.0

    def __post_init__(self):
        positive = {
            "transmit_power": self.transmit_power,
            "noise_power": self.noise_power,
            "carrier_freq": self.carrier_freq,
            "slot_duration": self.slot_duration,
            "phase_update_interval": self.phase_update_interval,
            "ris_area": self.ris_area,
            "ris_max_delay": self.ris_max_delay,
            "vehicle_rcs": self.vehicle_rcs,
            "ris_size_margin": self.ris_size_margin,
        }
        for name, value in positive.items():
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"must be a positive finite number, got {value!r}", field=f"scenario.{name}")
        for name in ("n_tx", "n_rx", "ris_elements"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be a positive count", field=f"scenario.{name}")
        if not 0 < self.ris_efficiency <= 1:
            raise ConfigError("must lie in (0, 1]", field="scenario.ris_efficiency")
        if not 0 < self.ris_aperture_efficiency <= 1:
            raise ConfigError("must lie in (0, 1]", field="scenario.ris_aperture_efficiency")
        ratio = self.slot_duration / self.phase_update_interval
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError("slot_duration must be an integer multiple of phase_update_interval",
                              field="scenario.phase_update_interval")
        if self.position_convention not in ("half_delay", "literal"):
            raise ConfigError("must be 'half_delay' or 'literal'", field="sensing.position_convention")
        if len(self.ris_position) != 2:
            raise ConfigError("must be an (x, y) pair", field="scenario.ris.position_m")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def n_phase_updates(self) -> int:
        """N_sub: number of RIS phase updates per slot."""
        return int(round(self.slot_duration / self.phase_update_interval))

    @property
    def ris_effective_area(self) -> float:
        """epsilon S: frame area that reradiates coherently toward the array."""
        return self.ris_aperture_efficiency * self.ris_area

    @property
    def ris_rcs(self) -> float:
        """kappa_R = 4 pi eta (epsilon S)^2 / lambda^2, the whole-surface RCS."""
        return 4 * math.pi * self.ris_efficiency * self.ris_effective_area ** 2 / self.wavelength ** 2

    @property
    def ris_element_rcs(self) -> float:
        """
        Per-element RCS kappa_R / M^2.

        The echo models sum M element returns coherently, so beta_R is built on this value
        and M^2 |beta_R|^2 recovers the whole-surface return.
        """
        return self.ris_rcs / self.ris_elements ** 2

    @property
    def array_gain(self) -> float:
        """gamma_B = sqrt(N_t N_r)."""
        return math.sqrt(self.n_tx * self.n_rx)

    @property
    def wrap_period(self) -> float:
        """1 / Delta T: period of the RIS spoofing frequency."""
        return 1.0 / self.phase_update_interval

    def physical_parameters(self) -> dict:
        params = asdict(self)
        for knob in ("rng_seed", "position_convention", "ris_size_margin"):
            params.pop(knob)
        params["ris_position"] = list(self.ris_position)
        return params

    def scenario_hash(self) -> str:
        """SHA-256 over the canonical JSON of every physical parameter."""
        canonical = json.dumps(self.physical_parameters(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class VehicleState:
    """Kinematic state s_k = (x, y, v); v is the x-axis velocity component."""
    x: float
    y: float
    v: float

    def __post_init__(self):
        if not all(math.isfinite(value) for value in (self.x, self.y, self.v)):
            raise InvalidInputError(f"vehicle state must be finite: {self}")
        if self.y <= 0:
            raise InvalidInputError(f"vehicle must have y > 0, got y={self.y}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v], dtype=float)


@dataclass
class Trajectory:
    """Length-K sequence of (x, y, v) states, true or sensed."""
    states: np.ndarray
    pattern: Optional[str] = None
    sample_id: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 3:
            raise InvalidInputError(f"trajectory must have shape (K, 3), got {self.states.shape}")

    def __len__(self) -> int:
        return self.states.shape[0]

    def state(self, k: int) -> VehicleState:
        x, y, v = self.states[k]
        return VehicleState(float(x), float(y), float(v))


@dataclass(frozen=True)
class SlotGeometry:
    """Per-slot path quantities of one reflector (vehicle or RIS)."""
    distance: float
    aod: float
    delay: float
    doppler: Optional[float]
    gain: complex


@dataclass
class MatchedFilterCurve:
    """Matched-filter magnitude C(tau_hat, mu) over a Doppler grid."""
    freqs: np.ndarray
    magnitudes: np.ndarray

    @property
    def peak_freq(self) -> float:
        return float(self.freqs[int(np.argmax(self.magnitudes))])

    @property
    def grid(self):
        return list(zip(self.freqs.tolist(), self.magnitudes.tolist()))


def _as_output(value: np.ndarray) -> ArrayLike:
    return value.item() if np.ndim(value) == 0 else value


def sinc(x: ArrayLike) -> ArrayLike:
    """Normalised sinc sin(pi x)/(pi x), equal to 1 at 0."""
    x = np.asarray(x, dtype=float)
    return _as_output(np.where(np.abs(x) < POLE_GUARD, 1.0, np.sinc(x)))


def array_factor(n: int, x: ArrayLike) -> ArrayLike:
    """
    f(n, x) = sin(n x) / (n sin x), with the limit (-1)^(m(n-1)) at x = m*pi.

    Args:
        n: Number of elements (>= 1)
        x: Phase argument, scalar or array

    Returns:
        Array factor, same shape as x
    """
    if n < 1:
        raise InvalidInputError(f"array factor needs n >= 1, got {n}")
    x = np.asarray(x, dtype=float)
    pole = np.round(x / np.pi)
    on_pole = np.abs(x - pole * np.pi) < POLE_GUARD
    denominator = np.where(on_pole, 1.0, n * np.sin(x))
    limit = np.where(np.mod(pole * (n - 1), 2) == 0, 1.0, -1.0)
    return _as_output(np.where(on_pole, limit, np.sin(n * x) / denominator))


def steering(theta: float, n: int, side: str = "tx") -> np.ndarray:
    """
    Half-wavelength ULA steering vector, element i = exp(-j pi i cos(theta)) / sqrt(n).

    Transmit and receive arrays differ only in their element count.
    """
    if side not in ("tx", "rx"):
        raise InvalidInputError(f"side must be 'tx' or 'rx', got {side!r}")
    if not 0 < theta < np.pi:
        raise InvalidInputError(f"steering angle must lie in (0, pi), got {theta}")
    if n < 1:
        raise InvalidInputError(f"array size must be >= 1, got {n}")
    return np.exp(-1j * np.pi * np.arange(n) * np.cos(theta)) / np.sqrt(n)


def steering_matrix(thetas: np.ndarray, n: int) -> np.ndarray:
    """Steering vectors for a grid of angles, shape (n, len(thetas))."""
    thetas = np.asarray(thetas, dtype=float)
    return np.exp(-1j * np.pi * np.arange(n)[:, None] * np.cos(thetas)[None, :]) / np.sqrt(n)


def h_factor(n: int, theta1: ArrayLike, theta2: ArrayLike) -> ArrayLike:
    """h(theta1, theta2) = a(theta1)^H a(theta2) in closed form."""
    u = np.cos(np.asarray(theta1, dtype=float)) - np.cos(np.asarray(theta2, dtype=float))
    return _as_output(np.exp(1j * np.pi * (n - 1) * u / 2) * array_factor(n, np.pi * u / 2))


def g_factor(n_tx: int, n_rx: int, theta1: float, theta2: float) -> np.ndarray:
    """g_{n_r}(theta1, theta2) for n_r = 1..n_rx, i.e. sqrt(N_r) b_{n_r}(theta2) h(theta2, theta1)."""
    index = np.arange(n_rx)
    return np.exp(-1j * np.pi * index * np.cos(theta2)) * h_factor(n_tx, theta2, theta1)


def channel_gains(target: Optional[VehicleState], scenario: ScenarioConfig) -> SlotGeometry:
    """
    Slot geometry of the vehicle (target given) or of the RIS (target None).

    Args:
        target: Vehicle state, or None for the static RIS reflector
        scenario: Scenario configuration

    Returns:
        SlotGeometry with beta = sqrt(lambda^2 kappa / (64 pi^3 d^4)) exp(j 4 pi d / lambda)

    Raises:
        InvalidInputError: If the position sits at the array origin or behind the array
    """
    if target is None:
        x, y = (float(v) for v in scenario.ris_position)
        rcs, velocity = scenario.ris_element_rcs, None
    else:
        x, y, velocity = target.x, target.y, target.v
        rcs = scenario.vehicle_rcs

    distance = math.hypot(x, y)
    if distance < 1e-12:
        raise InvalidInputError("reflector position coincides with the array origin")
    if y <= 0:
        raise InvalidInputError(f"reflector must lie on the road side y > 0, got y={y}")

    wavelength = scenario.wavelength
    aod = math.atan2(y, x)
    magnitude = math.sqrt(wavelength ** 2 * rcs / (64 * math.pi ** 3 * distance ** 4))
    gain = magnitude * np.exp(1j * 4 * math.pi * distance / wavelength)
    doppler = None
    if velocity is not None:
        doppler = velocity * scenario.carrier_freq * math.cos(aod) / SPEED_OF_LIGHT
    return SlotGeometry(
        distance=distance,
        aod=aod,
        delay=2 * distance / SPEED_OF_LIGHT,
        doppler=doppler,
        gain=complex(gain),
    )


def ris_geometry(scenario: ScenarioConfig) -> SlotGeometry:
    return channel_gains(None, scenario)


def _check_grid(mu_grid) -> np.ndarray:
    grid = np.asarray(mu_grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidInputError("Doppler grid is empty")
    if not np.all(np.isfinite(grid)):
        raise InvalidInputError("Doppler grid contains non-finite values")
    return grid


def default_doppler_grid(scenario: ScenarioConfig, step: float = 1.0) -> np.ndarray:
    """1 Hz grid over (0, 1/Delta T]."""
    count = int(round(scenario.wrap_period / step))
    return step * np.arange(1, count + 1)


def echo_power_coefficients(scenario: ScenarioConfig, vehicle: SlotGeometry,
                            ris: SlotGeometry, theta0: float) -> Tuple[float, float]:
    """C_V = |beta_V|^2 f^2(N_t, .) and C_R = |beta_R|^2 f^2(N_t, .) for beam theta0."""
    n_tx = scenario.n_tx
    c_vehicle = abs(vehicle.gain) ** 2 * array_factor(n_tx, np.pi / 2 * (math.cos(theta0) - math.cos(vehicle.aod))) ** 2
    c_ris = abs(ris.gain) ** 2 * array_factor(n_tx, np.pi / 2 * (math.cos(theta0) - math.cos(ris.aod))) ** 2
    return float(c_vehicle), float(c_ris)


def _vehicle_doppler_response(scenario: ScenarioConfig, vehicle: SlotGeometry, mu: np.ndarray) -> np.ndarray:
    T = scenario.slot_duration
    offset = mu - vehicle.doppler
    return T * np.exp(-1j * np.pi * offset * T) * np.sinc(T * offset)


def _ris_doppler_response(scenario: ScenarioConfig, spoof_freq: float, mu: np.ndarray) -> np.ndarray:
    """Fourier response of the staircase RIS phase law, summed over the M elements."""
    T = scenario.slot_duration
    dT = scenario.phase_update_interval
    staircase = array_factor(scenario.n_phase_updates, np.pi * dT * (mu - spoof_freq))
    return (scenario.ris_elements * T * np.sinc(mu * dT) * staircase
            * np.exp(1j * np.pi * spoof_freq * dT) * np.exp(-1j * np.pi * (mu - spoof_freq) * T))


def matched_filter_closed(scenario: ScenarioConfig, vehicle: SlotGeometry, ris: Optional[SlotGeometry],
                          theta0: float, spoof_freq: float, mu_grid, mode: str = "exact") -> MatchedFilterCurve:
    """
    Closed-form matched-filter output C(tau_hat, mu) at the true delay.

    Args:
        scenario: Scenario configuration
        vehicle: Vehicle slot geometry
        ris: RIS geometry, or None to suppress the spoofing term
        theta0: Transmit beam direction (rad)
        spoof_freq: RIS spoofing frequency mu_tilde (Hz)
        mu_grid: Doppler grid (Hz)
        mode: 'exact' (per-antenna coherent sum) or 'approx' (cross terms dropped)

    Returns:
        MatchedFilterCurve over the grid
    """
    grid = _check_grid(mu_grid)
    prefactor = scenario.transmit_power * scenario.array_gain ** 2
    vehicle_time = _vehicle_doppler_response(scenario, vehicle, grid)

    if mode == "exact":
        n_rx = scenario.n_rx
        field = np.outer(vehicle.gain * g_factor(scenario.n_tx, n_rx, theta0, vehicle.aod), vehicle_time)
        if ris is not None:
            ris_time = _ris_doppler_response(scenario, spoof_freq, grid)
            field = field + np.outer(ris.gain * g_factor(scenario.n_tx, n_rx, theta0, ris.aod), ris_time)
        magnitudes = prefactor / n_rx * np.sum(np.abs(field) ** 2, axis=0)
    elif mode == "approx":
        T = scenario.slot_duration
        dT = scenario.phase_update_interval
        c_vehicle = abs(vehicle.gain) ** 2 * array_factor(
            scenario.n_tx, np.pi / 2 * (math.cos(theta0) - math.cos(vehicle.aod))) ** 2
        magnitudes = c_vehicle * np.sinc(T * (grid - vehicle.doppler)) ** 2
        if ris is not None:
            _, c_ris = echo_power_coefficients(scenario, vehicle, ris, theta0)
            staircase = array_factor(scenario.n_phase_updates, np.pi * dT * (grid - spoof_freq))
            magnitudes = magnitudes + scenario.ris_elements ** 2 * c_ris * np.sinc(grid * dT) ** 2 * staircase ** 2
        magnitudes = prefactor * T ** 2 * magnitudes
    else:
        raise InvalidInputError(f"mode must be 'exact' or 'approx', got {mode!r}")

    return MatchedFilterCurve(freqs=grid, magnitudes=np.asarray(magnitudes, dtype=float))


def echo_synth_oracle(scenario: ScenarioConfig, vehicle: SlotGeometry, ris: Optional[SlotGeometry],
                      theta0: float, spoof_freq: float, mu_grid, n_samples: int = 10_000,
                      chunk: int = 128) -> MatchedFilterCurve:
    """
    Matched filter by direct midpoint integration of the time-domain composite echo.

    The RIS phases follow the staircase law phi(t) = 2 pi mu_tilde ceil(t / Delta T) Delta T,
    identical on every element; the unit symbol is q(t) = 1 and the delay axis sits at
    the true vehicle delay.
    """
    grid = _check_grid(mu_grid)
    n_sub = scenario.n_phase_updates
    if n_samples < 10 * n_sub:
        raise InvalidInputError(f"n_samples must be >= {10 * n_sub}, got {n_samples}")

    T = scenario.slot_duration
    dT = scenario.phase_update_interval
    dt = T / n_samples
    t = (np.arange(n_samples) + 0.5) * dt

    beam = steering(theta0, scenario.n_tx, "tx")
    amplitude = math.sqrt(scenario.transmit_power) * scenario.array_gain

    vehicle_wave = np.exp(1j * 2 * np.pi * vehicle.doppler * t)
    vehicle_spatial = (vehicle.gain * np.vdot(steering(vehicle.aod, scenario.n_tx, "tx"), beam)
                       * steering(vehicle.aod, scenario.n_rx, "rx"))

    ris_wave = None
    if ris is not None:
        step_index = np.floor(t / dT) + 1
        phases = np.mod(2 * np.pi * spoof_freq * step_index * dT, 2 * np.pi)
        element_phases = np.broadcast_to(phases, (scenario.ris_elements, n_samples))
        ris_wave = np.exp(1j * element_phases).sum(axis=0)
        ris_spatial = (ris.gain * np.vdot(steering(ris.aod, scenario.n_tx, "tx"), beam)
                       * steering(ris.aod, scenario.n_rx, "rx"))

    magnitudes = np.empty(grid.size)
    for start in range(0, grid.size, chunk):
        mu = grid[start:start + chunk]
        kernel = np.exp(-1j * 2 * np.pi * mu[:, None] * t[None, :]) * dt
        field = np.outer(kernel @ vehicle_wave, vehicle_spatial)
        if ris_wave is not None:
            field = field + np.outer(kernel @ ris_wave, ris_spatial)
        magnitudes[start:start + chunk] = amplitude ** 2 * np.sum(np.abs(field) ** 2, axis=1)

    return MatchedFilterCurve(freqs=grid, magnitudes=magnitudes)


def noise_variance(scenario: ScenarioConfig) -> float:
    """Per-element variance of the compensated-echo noise, sigma^2 T / (P gamma_B^2)."""
    return scenario.noise_power * scenario.slot_duration / (scenario.transmit_power * scenario.array_gain ** 2)


def echo_noise(scenario: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric complex Gaussian noise vector of length n_rx."""
    scale = math.sqrt(noise_variance(scenario) / 2)
    draws = rng.normal(0.0, scale, size=(scenario.n_rx, 2))
    return draws[:, 0] + 1j * draws[:, 1]


def perfect_echo(scenario: ScenarioConfig, vehicle: SlotGeometry, theta0: float,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Compensated echo without spoofing: T beta_V b(theta_k) h(theta_k, theta0) (+ noise)."""
    echo = (scenario.slot_duration * vehicle.gain * steering(vehicle.aod, scenario.n_rx, "rx")
            * h_factor(scenario.n_tx, vehicle.aod, theta0))
    if rng is not None:
        echo = echo + echo_noise(scenario, rng)
    return echo


def compensated_echo(scenario: ScenarioConfig, vehicle: SlotGeometry, ris: Optional[SlotGeometry],
                     theta0: float, spoof_freq: float, rng: Optional[np.random.Generator] = None,
                     compensation_freq: Optional[float] = None) -> np.ndarray:
    """
    Doppler-compensated, normalised echo at the receive array.

    Args:
        scenario: Scenario configuration
        vehicle: Vehicle geometry
        ris: RIS geometry, or None to suppress the spoofing term
        theta0: Transmit beam direction (rad)
        spoof_freq: Wrapped spoofing frequency in (0, 1/Delta T] (Hz)
        rng: Noise generator; None gives the noiseless echo
        compensation_freq: Doppler the receiver compensates; defaults to spoof_freq
            (successful spoof). Passing mu_k models a failed spoof.

    Returns:
        Complex vector of length n_rx
    """
    period = scenario.wrap_period
    if not 0 < spoof_freq <= period * (1 + 1e-12):
        raise InvalidInputError(f"spoofing frequency must lie in (0, {period}] Hz, got {spoof_freq}")
    mu = spoof_freq if compensation_freq is None else compensation_freq

    T = scenario.slot_duration
    offset = mu - vehicle.doppler
    echo = (T * vehicle.gain * steering(vehicle.aod, scenario.n_rx, "rx")
            * h_factor(scenario.n_tx, vehicle.aod, theta0)
            * np.exp(-1j * np.pi * offset * T) * sinc(T * offset))
    if ris is not None:
        response = _ris_doppler_response(scenario, spoof_freq, np.array([mu]))[0]
        echo = echo + (ris.gain * steering(ris.aod, scenario.n_rx, "rx")
                       * h_factor(scenario.n_tx, ris.aod, theta0) * response)
    if rng is not None:
        echo = echo + echo_noise(scenario, rng)
    return echo
