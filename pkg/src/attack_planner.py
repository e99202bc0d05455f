"""
Trajectory-level attack planning.

Ground-truth motion generation, the spatial-temporal consistency check, beam
prediction, the spoofing MDP (as a Gymnasium environment with action masks) and
a greedy / two-step lookahead planning oracle.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces

from src.errors import InvalidInputError
from src.signal_core import (
    ScenarioConfig,
    SlotGeometry,
    Trajectory,
    VehicleState,
    channel_gains,
    compensated_echo,
    ris_geometry,
    substream,
)
from src.spoof_analysis import (
    SensedState,
    aod_mle,
    feasible_set,
    spoofing_range_check,
    state_estimate,
)

logger = logging.getLogger(__name__)

PATTERNS = ("straight", "single_lane_change", "double_lane_change")

# Normalisation ranges of the policy features (x_hat, y_hat, v_hat, theta_hat, x, y, v)
FEATURE_BOUNDS = (
    (-60.0, 60.0),
    (0.0, 60.0),
    (-80.0, 80.0),
    (0.0, math.pi),
    (-60.0, 60.0),
    (0.0, 60.0),
    (-80.0, 80.0),
)

LANE_CHANGE_SLOPE = 1.0 / 3.0   # logistic steepness per slot; peak lateral step = width * slope / 4
SPEED_JITTER = 0.02             # m/s per slot


@dataclass(frozen=True)
class ConsistencyParams:
    """Per-slot kinematic limits a plausible sensed trajectory respects."""
    a_max: float = 3.0
    a_min: float = -3.0
    delta_x: float = 1.0
    delta_y: float = 0.3

    def __post_init__(self):
        if not self.a_min < self.a_max:
            raise InvalidInputError(f"a_min ({self.a_min}) must be below a_max ({self.a_max})")
        if self.delta_x <= 0 or self.delta_y <= 0:
            raise InvalidInputError("delta_x and delta_y must be positive")


@dataclass(frozen=True)
class ActionGrid:
    """L discrete spoofing frequencies l * (1 / (Delta T L)), l = 1..L."""
    size: int
    step: float

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig, size: int = 200) -> "ActionGrid":
        if size < 1:
            raise InvalidInputError(f"action grid needs at least one action, got {size}")
        return cls(size=size, step=scenario.wrap_period / size)

    @property
    def freqs(self) -> np.ndarray:
        return self.step * np.arange(1, self.size + 1)

    def index_of(self, freq: float) -> int:
        position = freq / self.step - 1
        index = int(round(position))
        if abs(position - index) > 1e-6 or not 0 <= index < self.size:
            raise InvalidInputError(f"frequency {freq} Hz is not on the {self.size}-action grid")
        return index


@dataclass(frozen=True)
class MdpState:
    """xi_k = (s_hat_{k-1}, s_k); prev_true is kept for the true-position beam variant."""
    prev_sensed: SensedState
    true_state: VehicleState
    slot: int = 1
    prev_true: Optional[VehicleState] = None


@dataclass
class SlotContext:
    """Beam, vehicle geometry and action mask of one slot."""
    beam: float
    vehicle: SlotGeometry
    mask: np.ndarray
    in_range: bool


@dataclass
class StepOutcome:
    next_state: Optional[MdpState]
    reward: float
    sensed: SensedState
    beam: float
    spoof_freq: Optional[float]
    feasible: bool
    mask_empty: bool
    effective: bool
    consistency: np.ndarray


@dataclass
class SpoofPlan:
    """Per-slot spoofing choices and the realised sensed trajectory of one episode."""
    trajectory: Trajectory
    sensed: List[SensedState]
    freqs: List[Optional[float]] = field(default_factory=list)
    feasible: List[bool] = field(default_factory=list)
    mask_empty: List[bool] = field(default_factory=list)
    effective: List[bool] = field(default_factory=list)
    beams: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards)) if self.rewards else 0.0

    @property
    def clean_rate(self) -> float:
        """Fraction of transitions with zero consistency penalty."""
        if not self.rewards:
            return 1.0
        return float(np.mean(np.asarray(self.rewards) == 0.0))

    @property
    def infeasible_rate(self) -> float:
        chosen = [not f for f, empty in zip(self.feasible, self.mask_empty) if not empty]
        return float(np.mean(chosen)) if chosen else 0.0

    @property
    def attack_effective_reward(self) -> float:
        """Mean reward over slots whose Doppler was actually spoofed (NaN if none)."""
        spoofed = [r for r, e in zip(self.rewards, self.effective) if e]
        return float(np.mean(spoofed)) if spoofed else float("nan")

    def sensed_trajectory(self) -> Trajectory:
        states = np.array([s.as_array() for s in self.sensed])
        return Trajectory(states, pattern=self.trajectory.pattern, sample_id=self.trajectory.sample_id)

    def to_frame(self) -> pd.DataFrame:
        """Episode log: one row per slot, slot 0 being the clean initial sensing."""
        rows = []
        for k, sensed in enumerate(self.sensed):
            x, y, v = self.trajectory.states[k]
            step = k - 1
            rows.append({
                "k": k,
                "x": x, "y": y, "v": v,
                "x_hat": sensed.x, "y_hat": sensed.y, "v_hat": sensed.v,
                "theta0_deg": math.degrees(self.beams[step]) if k > 0 else math.degrees(sensed.aod),
                "spoof_freq_hz": (self.freqs[step] if k > 0 and self.freqs[step] is not None else float("nan")),
                "feasible": bool(self.feasible[step]) if k > 0 else True,
                "reward": self.rewards[step] if k > 0 else 0.0,
            })
        return pd.DataFrame(rows)


def _components(state) -> Tuple[float, float, float]:
    if isinstance(state, (VehicleState, SensedState)):
        return state.x, state.y, state.v
    x, y, v = np.asarray(state, dtype=float)[:3]
    return float(x), float(y), float(v)


def consistency_vector(s_a, s_b, params: ConsistencyParams, slot_duration: float) -> np.ndarray:
    """
    Consistency margins between consecutive states; all entries >= 0 means plausible.

    Returns:
        [a_max T - dv, dv - a_min T, delta_x - |dx - v_a T|, delta_y - |dy|]
    """
    xa, ya, va = _components(s_a)
    xb, yb, vb = _components(s_b)
    dv = vb - va
    return np.array([
        params.a_max * slot_duration - dv,
        dv - params.a_min * slot_duration,
        params.delta_x - abs((xb - xa) - va * slot_duration),
        params.delta_y - abs(yb - ya),
    ])


def consistency_reward(margins: np.ndarray) -> float:
    """Sum of the violated margins (0 when every margin is non-negative)."""
    return float(np.sum(np.minimum(0.0, margins)))


def beam_predict(prev_sensed: SensedState, slot_duration: float,
                 position: Optional[Tuple[float, float]] = None) -> float:
    """
    Beam direction for the next slot from the previous estimate.

    theta_0 = theta_hat - v_hat sin(theta_hat) T / ||p||, with p the sensed
    position unless an explicit (true) position is given.
    """
    x, y = (prev_sensed.x, prev_sensed.y) if position is None else position
    norm = math.hypot(x, y)
    if norm < 1e-12:
        raise InvalidInputError("beam prediction needs a non-zero position")
    return prev_sensed.aod - prev_sensed.v * math.sin(prev_sensed.aod) * slot_duration / norm


def gen_ground_truth(pattern: str, K: int, seed: int = 0, slot_duration: float = 0.01,
                     lanes: Sequence[float] = (18.0, 21.0, 24.0),
                     speed_range: Tuple[float, float] = (8.0, 15.0),
                     lane: Optional[float] = None, speed: Optional[float] = None,
                     rng: Optional[np.random.Generator] = None, sample_id: int = 0) -> Trajectory:
    """
    Generate a kinematically consistent vehicle trajectory.

    Args:
        pattern: 'straight', 'single_lane_change' or 'double_lane_change'
        K: Number of slots (>= 2)
        seed: Root seed, used when rng is not given
        slot_duration: Slot length T (s)
        lanes: Lane centre lines (m)
        speed_range: Initial speed range (m/s)
        lane: Fixed start lane (random otherwise)
        speed: Fixed initial speed (random otherwise)
        rng: Generator to draw from
        sample_id: Identifier stored on the trajectory

    Returns:
        Trajectory of shape (K, 3)

    Example:
        >>> traj = gen_ground_truth("single_lane_change", 67, seed=7)
        >>> traj.states.shape
        (67, 3)
    """
    if pattern not in PATTERNS:
        raise InvalidInputError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if K < 2:
        raise InvalidInputError(f"trajectory length must be >= 2, got {K}")
    rng = rng if rng is not None else substream(seed, "datagen")
    lanes = sorted(lanes)
    width = lanes[1] - lanes[0] if len(lanes) > 1 else 3.0

    if lane is None:
        candidates = lanes if pattern == "straight" or len(lanes) == 1 else lanes[1:]
        lane = float(candidates[rng.integers(len(candidates))])
    direction = -1.0 if lane > lanes[0] else 1.0
    v0 = float(rng.uniform(*speed_range)) if speed is None else float(speed)
    x0 = float(rng.uniform(-15.0, 5.0))

    k = np.arange(K, dtype=float)
    y = np.full(K, lane)
    if pattern == "single_lane_change":
        onset = rng.uniform(0.3 * K, 0.7 * K)
        y = lane + direction * width * _logistic(k - onset)
    elif pattern == "double_lane_change":
        out = rng.uniform(0.2 * K, 0.35 * K)
        back = rng.uniform(0.65 * K, 0.8 * K)
        y = lane + direction * width * (_logistic(k - out) - _logistic(k - back))

    v = np.empty(K)
    v[0] = v0
    steps = rng.uniform(-SPEED_JITTER, SPEED_JITTER, size=K - 1)
    for i in range(1, K):
        v[i] = float(np.clip(v[i - 1] + steps[i - 1], *speed_range)) if speed is None else v0
    x = x0 + np.concatenate([[0.0], np.cumsum(v[:-1] * slot_duration)])

    return Trajectory(np.column_stack([x, y, v]), pattern=pattern, sample_id=sample_id)


def _logistic(offset: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-LANE_CHANGE_SLOPE * offset))


def initial_sensed_state(true_state: VehicleState, scenario: ScenarioConfig) -> SensedState:
    """Accurate initial sensing s_hat_0 = s_0."""
    geometry = channel_gains(true_state, scenario)
    return SensedState(x=true_state.x, y=true_state.y, v=true_state.v, aod=geometry.aod,
                       doppler=geometry.doppler, delay=geometry.delay)


def slot_context(state: MdpState, scenario: ScenarioConfig, action_grid: ActionGrid,
                 beam_denominator: str = "sensed") -> SlotContext:
    """Predict the slot's beam and compute the feasible-action mask there."""
    position = None
    if beam_denominator == "true":
        reference = state.prev_true if state.prev_true is not None else state.true_state
        position = (reference.x, reference.y)
    beam = beam_predict(state.prev_sensed, scenario.slot_duration, position)
    vehicle = channel_gains(state.true_state, scenario)
    ris = ris_geometry(scenario)
    in_range = spoofing_range_check(vehicle.distance, ris.distance, scenario.ris_max_delay)
    if in_range and 0 < beam < math.pi:
        mask = feasible_set(scenario, vehicle, ris, beam, action_grid.freqs).mask
    else:
        mask = np.zeros(action_grid.size, dtype=bool)
    return SlotContext(beam=beam, vehicle=vehicle, mask=mask, in_range=in_range)


def slot_echo(scenario: ScenarioConfig, vehicle: SlotGeometry, beam: float, spoof_freq: Optional[float],
              feasible: bool, mask_empty: bool, noise_rng: Optional[np.random.Generator] = None):
    """
    Compensated echo of one slot and the Doppler the RSU locks onto.

    A feasible frequency spoofs the Doppler; an infeasible one leaves the Doppler at
    mu_k while the RIS echo still perturbs the AoD. With an empty mask (or
    spoof_freq None) the RIS stays idle.

    Returns:
        (echo, sensed Doppler, applied spoof frequency or None)
    """
    if spoof_freq is None or mask_empty:
        echo = compensated_echo(scenario, vehicle, None, beam, vehicle_freq(vehicle, scenario),
                                noise_rng, compensation_freq=vehicle.doppler)
        return echo, vehicle.doppler, None
    compensation = spoof_freq if feasible else vehicle.doppler
    echo = compensated_echo(scenario, vehicle, ris_geometry(scenario), beam, spoof_freq,
                            noise_rng, compensation_freq=compensation)
    return echo, compensation, spoof_freq


def env_step(state: MdpState, spoof_freq: Optional[float], next_true: Optional[VehicleState],
             scenario: ScenarioConfig, consistency: ConsistencyParams, action_grid: ActionGrid,
             noise_rng: Optional[np.random.Generator], beam_denominator: str = "sensed",
             context: Optional[SlotContext] = None) -> StepOutcome:
    """
    Sense one slot under the chosen spoofing frequency and score its consistency.

    Args:
        state: Current MDP state (s_hat_{k-1}, s_k)
        spoof_freq: Chosen frequency on the action grid, or None for no spoof
        next_true: s_{k+1}, or None at the last slot
        scenario: Scenario configuration
        consistency: Consistency limits
        action_grid: Discrete action grid
        noise_rng: Generator for the echo noise (None = noiseless)
        beam_denominator: 'sensed' or 'true' position in the beam prediction
        context: Precomputed slot context (beam and mask)

    Returns:
        StepOutcome with the next state, reward and sensed state
    """
    context = context or slot_context(state, scenario, action_grid, beam_denominator)
    vehicle = context.vehicle
    mask_empty = not bool(np.any(context.mask))

    if spoof_freq is not None:
        feasible = bool(context.mask[action_grid.index_of(spoof_freq)])
    else:
        feasible = False

    echo, doppler, applied = slot_echo(scenario, vehicle, context.beam, spoof_freq, feasible, mask_empty, noise_rng)

    aod = aod_mle(echo, scenario, context.beam, vehicle.gain, mode="spoofed")
    sensed = state_estimate(vehicle.delay, doppler, aod, scenario)
    margins = consistency_vector(state.prev_sensed, sensed, consistency, scenario.slot_duration)
    reward = consistency_reward(margins)

    next_state = None
    if next_true is not None:
        next_state = MdpState(prev_sensed=sensed, true_state=next_true, slot=state.slot + 1,
                              prev_true=state.true_state)
    return StepOutcome(
        next_state=next_state,
        reward=reward,
        sensed=sensed,
        beam=context.beam,
        spoof_freq=applied,
        feasible=feasible and not mask_empty,
        mask_empty=mask_empty,
        effective=applied is not None and feasible,
        consistency=margins,
    )


def vehicle_freq(vehicle: SlotGeometry, scenario: ScenarioConfig) -> float:
    """Vehicle Doppler wrapped into (0, 1/Delta T], a valid placeholder spoof frequency."""
    period = scenario.wrap_period
    wrapped = vehicle.doppler % period
    return wrapped if wrapped > 0 else period


def policy_features(state: MdpState) -> np.ndarray:
    """Policy input (x_hat, y_hat, v_hat, theta_hat, x, y, v) scaled to [-1, 1]."""
    s_hat = state.prev_sensed
    raw = np.array([s_hat.x, s_hat.y, s_hat.v, s_hat.aod,
                    state.true_state.x, state.true_state.y, state.true_state.v])
    lows = np.array([b[0] for b in FEATURE_BOUNDS])
    highs = np.array([b[1] for b in FEATURE_BOUNDS])
    return np.clip(2 * (raw - lows) / (highs - lows) - 1, -1.0, 1.0).astype(np.float32)


class SpoofingEnv(gym.Env):
    """
    Spoofing MDP over one ground-truth trajectory per episode.

    Observations are the normalised policy features; actions index the spoofing
    frequency grid; action_masks() exposes the feasible set of the current slot.
    Each episode runs K-1 steps starting from an exact initial sensing.
    """

    metadata = {"render_modes": []}

    def __init__(self, scenario: ScenarioConfig, consistency: ConsistencyParams, n_actions: int = 200,
                 trajectory_length: int = 67, beam_denominator: str = "sensed",
                 trajectory_sampler: Optional[Callable[[np.random.Generator], Trajectory]] = None,
                 seed: Optional[int] = None, noisy: bool = True):
        super().__init__()
        self.scenario = scenario
        self.consistency = consistency
        self.action_grid = ActionGrid.from_scenario(scenario, n_actions)
        self.trajectory_length = trajectory_length
        self.beam_denominator = beam_denominator
        self.noisy = noisy
        self.root_seed = scenario.rng_seed if seed is None else seed
        self.trajectory_sampler = trajectory_sampler or self._default_sampler

        self.observation_space = spaces.Box(low=-1.0, high=1.0, shape=(len(FEATURE_BOUNDS),), dtype=np.float32)
        self.action_space = spaces.Discrete(n_actions)

        self._episode = -1
        self._sampler_rng = substream(self.root_seed, "datagen", 0)
        self.trajectory: Optional[Trajectory] = None
        self.state: Optional[MdpState] = None
        self._context: Optional[SlotContext] = None
        self.plan: Optional[SpoofPlan] = None

    def _default_sampler(self, rng: np.random.Generator) -> Trajectory:
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        return gen_ground_truth(pattern, self.trajectory_length, slot_duration=self.scenario.slot_duration,
                                rng=rng)

    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict] = None):
        super().reset(seed=seed)
        if seed is not None:
            self.root_seed = seed
            self._sampler_rng = substream(seed, "datagen", 0)
        self._episode += 1
        options = options or {}
        trajectory = options.get("trajectory")
        if trajectory is None:
            trajectory = self.trajectory_sampler(self._sampler_rng)
        if len(trajectory) < 2:
            raise InvalidInputError("episodes need trajectories of at least two slots")
        self.trajectory = trajectory

        first = initial_sensed_state(trajectory.state(0), self.scenario)
        self.state = MdpState(prev_sensed=first, true_state=trajectory.state(1), slot=1,
                              prev_true=trajectory.state(0))
        self._context = None
        self.plan = SpoofPlan(trajectory=trajectory, sensed=[first])
        return policy_features(self.state), {"slot": 1}

    def context(self) -> SlotContext:
        if self._context is None:
            self._context = slot_context(self.state, self.scenario, self.action_grid, self.beam_denominator)
        return self._context

    def action_masks(self) -> np.ndarray:
        return self.context().mask.copy()

    def noise_rng(self, slot: int) -> Optional[np.random.Generator]:
        if not self.noisy:
            return None
        return substream(self.root_seed, "noise", self._episode, slot)

    def step(self, action):
        if self.state is None:
            raise InvalidInputError("call reset() before step()")
        index = int(action)
        if not 0 <= index < self.action_grid.size:
            raise InvalidInputError(f"action {index} outside the {self.action_grid.size}-action grid")
        context = self.context()
        slot = self.state.slot
        next_true = self.trajectory.state(slot + 1) if slot + 1 < len(self.trajectory) else None
        outcome = env_step(self.state, float(self.action_grid.freqs[index]), next_true, self.scenario,
                           self.consistency, self.action_grid, self.noise_rng(slot),
                           self.beam_denominator, context)
        _record(self.plan, outcome)

        terminated = next_true is None
        info = {
            "slot": slot,
            "sensed": outcome.sensed,
            "feasible": outcome.feasible,
            "mask_empty": outcome.mask_empty,
            "effective": outcome.effective,
            "consistency": outcome.consistency,
        }
        if terminated:
            observation = policy_features(MdpState(outcome.sensed, self.state.true_state, slot))
        else:
            self.state = outcome.next_state
            self._context = None
            observation = policy_features(self.state)
        return observation, outcome.reward, terminated, False, info


def _record(plan: SpoofPlan, outcome: StepOutcome):
    plan.sensed.append(outcome.sensed)
    plan.freqs.append(outcome.spoof_freq)
    plan.feasible.append(outcome.feasible)
    plan.mask_empty.append(outcome.mask_empty)
    plan.effective.append(outcome.effective)
    plan.beams.append(outcome.beam)
    plan.rewards.append(outcome.reward)


def _warn_empty_masks(plan: SpoofPlan):
    empty = sum(plan.mask_empty)
    if empty:
        logger.warning(f"Sample {plan.trajectory.sample_id}: {empty} slot(s) without a feasible frequency, RIS idle")


def run_episode(env: SpoofingEnv, trajectory: Trajectory,
                choose_action: Callable[[np.ndarray, np.ndarray], int]) -> SpoofPlan:
    """Roll one episode with a (observation, mask) -> action callable."""
    observation, _ = env.reset(options={"trajectory": trajectory})
    terminated = False
    while not terminated:
        action = choose_action(observation, env.action_masks())
        observation, _, terminated, _, _ = env.step(action)
    _warn_empty_masks(env.plan)
    return env.plan


def no_attack_plan(scenario: ScenarioConfig, consistency: ConsistencyParams, trajectory: Trajectory,
                   action_grid: ActionGrid, seed: int = 0, noisy: bool = True,
                   beam_denominator: str = "sensed") -> SpoofPlan:
    """Beam-tracking rollout with the RIS idle."""
    state = MdpState(initial_sensed_state(trajectory.state(0), scenario), trajectory.state(1), 1,
                     trajectory.state(0))
    plan = SpoofPlan(trajectory=trajectory, sensed=[state.prev_sensed])
    for slot in range(1, len(trajectory)):
        next_true = trajectory.state(slot + 1) if slot + 1 < len(trajectory) else None
        rng = substream(seed, "noise", trajectory.sample_id, slot) if noisy else None
        outcome = env_step(state, None, next_true, scenario, consistency, action_grid, rng, beam_denominator)
        _record(plan, outcome)
        state = outcome.next_state
    return plan


def _best_action(state: MdpState, next_true, env: SpoofingEnv, noise_seed, horizon: int,
                 future_true=None) -> Tuple[Optional[int], Optional[StepOutcome], float]:
    """Highest-value masked action at one slot; ties resolve to the lowest frequency."""
    context = slot_context(state, env.scenario, env.action_grid, env.beam_denominator)
    candidates = np.flatnonzero(context.mask)
    if candidates.size == 0:
        return None, None, -math.inf

    def evaluate(index):
        rng = substream(*noise_seed) if env.noisy else None
        return env_step(state, float(env.action_grid.freqs[index]), next_true, env.scenario, env.consistency,
                        env.action_grid, rng, env.beam_denominator, context)

    outcomes = {}
    rewards = np.full(candidates.size, -math.inf)
    for position, index in enumerate(candidates):
        outcomes[index] = evaluate(index)
        rewards[position] = outcomes[index].reward
        if horizon == 1 and rewards[position] == 0.0:
            break   # reward is non-positive: first zero is the lowest-frequency optimum

    if horizon >= 2 and next_true is not None:
        shortlist = candidates[np.argsort(-rewards, kind="stable")[:10]]
        totals = np.full(candidates.size, -math.inf)
        for index in shortlist:
            outcome = outcomes[index]
            follow_seed = (noise_seed[0], noise_seed[1], noise_seed[2], noise_seed[3] + 1)
            _, _, follow = _best_action(outcome.next_state, future_true, env, follow_seed, 1)
            follow = 0.0 if follow == -math.inf else follow
            totals[int(np.searchsorted(candidates, index))] = outcome.reward + follow
        rewards = totals

    best = int(np.argmax(rewards))
    index = int(candidates[best])
    return index, outcomes[index], float(rewards[best])


def oracle_plan(env: SpoofingEnv, trajectory: Trajectory, horizon: int = 1, seed: int = 0) -> SpoofPlan:
    """
    Exhaustive masked search per slot.

    Every feasible action is scored with the same noise draw; the best reward wins,
    ties going to the lowest frequency. With horizon 2 the ten best first-step
    actions are re-ranked by adding the best follow-up reward. Slots with an empty
    mask are recorded as no-spoof.

    Args:
        env: Environment supplying scenario, consistency and action grid
        trajectory: Ground-truth trajectory to attack
        horizon: 1 (greedy) or 2 (two-step lookahead)
        seed: Root seed of the noise draws

    Returns:
        SpoofPlan of the episode
    """
    if horizon < 1:
        raise InvalidInputError(f"horizon must be >= 1, got {horizon}")
    state = MdpState(initial_sensed_state(trajectory.state(0), env.scenario), trajectory.state(1), 1,
                     trajectory.state(0))
    plan = SpoofPlan(trajectory=trajectory, sensed=[state.prev_sensed])
    K = len(trajectory)
    for slot in range(1, K):
        next_true = trajectory.state(slot + 1) if slot + 1 < K else None
        future_true = trajectory.state(slot + 2) if slot + 2 < K else None
        noise_seed = (seed, "noise", trajectory.sample_id, slot)
        index, outcome, _ = _best_action(state, next_true, env, noise_seed, horizon, future_true)
        if outcome is None:
            rng = substream(*noise_seed) if env.noisy else None
            outcome = env_step(state, None, next_true, env.scenario, env.consistency, env.action_grid,
                               rng, env.beam_denominator)
        _record(plan, outcome)
        if next_true is not None:
            state = outcome.next_state
    _warn_empty_masks(plan)
    logger.info(f"Oracle plan (h={horizon}) for sample {trajectory.sample_id}: "
                f"reward {plan.total_reward:.4f}, clean rate {plan.clean_rate:.2%}")
    return plan
