"""
Experiments behind the CLI verbs: feasibility sweep, spoof-slot Monte Carlo,
masked/unmasked PPO comparison, beam tracking with an achievable-rate model,
dataset generation, clustering and formula reports, detector evaluation, and the
staged end-to-end pipeline.

Every function writes CSV/JSON under an output directory and returns an
ExperimentResult; all randomness comes from named sub-streams of the run seed.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.attack_planner import (PATTERNS, ActionGrid, SpoofingEnv, gen_ground_truth, no_attack_plan,
                                oracle_plan, run_episode, slot_echo)
from src.detect_learn import (ClusterModel, DetectorBundle, PseudoLabeledSet, benchmark_detect, cluster_purity,
                              detect_many, dtcr_train, train_detector)
from src.errors import InvalidInputError, PipelineStageError
from src.masked_ppo import greedy_actor, ppo_train, rollout_summary
from src.signal_core import (ScenarioConfig, Trajectory, VehicleState, channel_gains, h_factor,
                             ris_geometry, substream)
from src.spoof_analysis import aod_mle, feasible_set, spoofed_velocity, spoofing_range_check
from src.stl_engine import format_formula
from utils.artifact_io import (load_bundle, load_cluster_model, load_policy, read_dataset, save_bundle,
                               save_cluster_model, save_policy, write_dataset, write_manifest)

logger = logging.getLogger(__name__)

ATTACKERS = ("none", "ppo", "ppo-unmasked", "oracle")
CLEAN, SPOOFED = 0, 1


@dataclass
class ExperimentResult:
    """Outputs of one experiment run."""
    name: str
    parameters: Dict
    outputs: Dict[str, Path] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def write_summary(self, directory: Path) -> Path:
        path = Path(directory) / f"{self.name}_summary.json"
        path.write_text(json.dumps({
            "name": self.name,
            "seed": self.seed,
            "parameters": self.parameters,
            "outputs": {k: Path(v).name for k, v in self.outputs.items()},
            "metrics": self.metrics,
        }, indent=2, sort_keys=True, default=str), encoding="utf-8")
        return path


def _out(directory, name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory / name


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format="%.10g")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def reference_vehicle(config) -> VehicleState:
    return VehicleState(*config.experiments.reference_vehicle)


def velocity_angle(config, vehicle_aod: float, beam: float) -> float:
    return vehicle_aod if config.sensing.velocity_angle == "vehicle" else beam


# --------------------------------------------------------------------------- feasibility sweep

def feasible_sweep(config) -> pd.DataFrame:
    """
    Feasibility and spoofed velocity on the action grid for every beam of the sweep.

    Columns: theta0_deg, freq_hz, lhs, feasible, spoofed_velocity_mps.
    """
    scenario = config.scenario
    settings = config.experiments
    grid = ActionGrid.from_scenario(scenario, config.attack.n_actions)
    vehicle = channel_gains(reference_vehicle(config), scenario)
    ris = ris_geometry(scenario)
    beams = np.arange(settings.sweep_start_deg, settings.sweep_stop_deg + settings.sweep_step_deg / 2,
                      settings.sweep_step_deg)

    frames = []
    for beam_deg in beams:
        beam = math.radians(beam_deg)
        feasible = feasible_set(scenario, vehicle, ris, beam, grid.freqs)
        try:
            velocity = spoofed_velocity(grid.freqs, velocity_angle(config, vehicle.aod, beam), scenario)
        except InvalidInputError:
            velocity = np.full(grid.size, np.nan)
        frames.append(pd.DataFrame({
            "theta0_deg": np.full(grid.size, round(float(beam_deg), 6)),
            "freq_hz": grid.freqs,
            "lhs": feasible.lhs_values,
            "feasible": feasible.mask,
            "spoofed_velocity_mps": velocity,
        }))
    return pd.concat(frames, ignore_index=True)


def run_feasible_sweep(config, out_dir) -> ExperimentResult:
    frame = feasible_sweep(config)
    path = _write_csv(frame, _out(out_dir, "feasible_set.csv"))
    per_beam = frame.groupby("theta0_deg")["feasible"].sum()
    feasible_rows = frame[frame["feasible"]]
    metrics = {
        "rows": int(len(frame)),
        "beams": int(per_beam.size),
        "empty_beams": int((per_beam == 0).sum()),
        "max_spoofed_velocity_mps": (float(feasible_rows["spoofed_velocity_mps"].max())
                                     if len(feasible_rows) else math.nan),
    }
    logger.info(f"Feasibility sweep: {metrics['empty_beams']}/{metrics['beams']} beams without a feasible frequency")
    return ExperimentResult("feasible_set", {"experiments": config.snapshot()["experiments"]},
                            {"feasible_set": path}, metrics, config.seed)


# --------------------------------------------------------------------------- spoof-slot Monte Carlo

def _spoof_slot_cell(scenario: ScenarioConfig, vehicle, beam: float, freq: float, feasible: bool,
                     mask_empty: bool, trials: int, seed: int, beam_index: int, freq_index: int,
                     sensing) -> np.ndarray:
    estimates = np.empty(trials)
    for trial in range(trials):
        rng = substream(seed, "noise", beam_index, freq_index, trial)
        echo, _, _ = slot_echo(scenario, vehicle, beam, freq, feasible, mask_empty, rng)
        estimates[trial] = aod_mle(echo, scenario, beam, vehicle.gain, mode="spoofed",
                                   grid_step=sensing.mle_grid_step, refine_tol=sensing.mle_refine_tol)
    return estimates


def spoof_slot(config, trials: Optional[int] = None, workers: Optional[int] = None) -> pd.DataFrame:
    """
    AoD estimates under spoofing at every (beam, frequency) cell.

    Each cell runs noisy maximum-likelihood estimates on the compensated echo the
    slot would produce; a beam without feasible frequencies leaves the RIS idle.

    Columns: theta0_deg, spoof_freq_hz, feasible, mean_aod_deg, bias_deg, std_aod_deg.
    """
    scenario = config.scenario
    settings = config.experiments
    trials = settings.spoof_slot_trials if trials is None else trials
    workers = settings.workers if workers is None else workers
    step = settings.spoof_slot_freq_step_hz
    freqs = step * np.arange(1, int(math.floor(scenario.wrap_period / step + 1e-9)) + 1)
    vehicle = channel_gains(reference_vehicle(config), scenario)
    ris = ris_geometry(scenario)
    in_range = spoofing_range_check(vehicle.distance, ris.distance, scenario.ris_max_delay)

    cells = []
    for beam_index, beam_deg in enumerate(settings.spoof_slot_beams_deg):
        beam = math.radians(beam_deg)
        mask = feasible_set(scenario, vehicle, ris, beam, freqs).mask if in_range else np.zeros(freqs.size, bool)
        mask_empty = not bool(np.any(mask))
        for freq_index, freq in enumerate(freqs):
            cells.append((beam_deg, beam, float(freq), bool(mask[freq_index]), mask_empty, beam_index, freq_index))

    def run(cell):
        beam_deg, beam, freq, feasible, mask_empty, beam_index, freq_index = cell
        return _spoof_slot_cell(scenario, vehicle, beam, freq, feasible, mask_empty, trials, config.seed,
                                beam_index, freq_index, config.sensing)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        estimates = list(pool.map(run, cells))

    true_deg = math.degrees(vehicle.aod)
    rows = []
    for cell, values in zip(cells, estimates):
        degrees = np.degrees(values)
        rows.append({
            "theta0_deg": cell[0],
            "spoof_freq_hz": cell[2],
            "feasible": cell[3],
            "mean_aod_deg": float(degrees.mean()),
            "bias_deg": float(degrees.mean() - true_deg),
            "std_aod_deg": float(degrees.std()),
        })
    return pd.DataFrame(rows)


def run_spoof_slot(config, out_dir, trials: Optional[int] = None) -> ExperimentResult:
    frame = spoof_slot(config, trials)
    path = _write_csv(frame, _out(out_dir, "spoof_slot.csv"))
    metrics = {}
    for beam_deg, group in frame.groupby("theta0_deg"):
        metrics[f"max_abs_bias_deg@{beam_deg:g}"] = float(group["bias_deg"].abs().max())
        metrics[f"feasible_count@{beam_deg:g}"] = int(group["feasible"].sum())
    return ExperimentResult("spoof_slot", {"trials": trials or config.experiments.spoof_slot_trials},
                            {"spoof_slot": path}, metrics, config.seed)


# --------------------------------------------------------------------------- trajectories

def draw_patterns(config, count: int, rng: np.random.Generator) -> List[str]:
    mix = config.dataset.mix_dict()
    names = [p for p in PATTERNS if p in mix]
    weights = np.array([mix[p] for p in names])
    return [names[i] for i in rng.choice(len(names), size=count, p=weights / weights.sum())]


def generate_trajectories(config, count: int, stream: str, first_id: int = 0) -> List[Trajectory]:
    """Ground-truth trajectories drawn with the configured pattern mix."""
    dataset = config.dataset
    patterns = draw_patterns(config, count, substream(config.seed, stream, 0))
    return [gen_ground_truth(pattern, dataset.trajectory_length, slot_duration=config.scenario.slot_duration,
                             lanes=dataset.lanes, speed_range=dataset.speed_range,
                             rng=substream(config.seed, stream, 1, i), sample_id=first_id + i)
            for i, pattern in enumerate(patterns)]


def trajectory_sampler(config):
    """Episode sampler for the spoofing environment using the dataset settings."""
    dataset = config.dataset

    def sample(rng: np.random.Generator) -> Trajectory:
        pattern = draw_patterns(config, 1, rng)[0]
        return gen_ground_truth(pattern, config.attack.trajectory_length,
                                slot_duration=config.scenario.slot_duration, lanes=dataset.lanes,
                                speed_range=dataset.speed_range, rng=rng)

    return sample


def make_env(config, seed: Optional[int] = None, noisy: bool = True) -> SpoofingEnv:
    return SpoofingEnv(config.scenario, config.consistency, n_actions=config.attack.n_actions,
                       trajectory_length=config.attack.trajectory_length,
                       beam_denominator=config.sensing.beam_denominator,
                       trajectory_sampler=trajectory_sampler(config),
                       seed=config.seed if seed is None else seed, noisy=noisy)


def run_gen_data(config, out_dir) -> ExperimentResult:
    """Training set, clean test set and manifest."""
    dataset = config.dataset
    train = generate_trajectories(config, dataset.n_train, "datagen")
    test = generate_trajectories(config, dataset.n_test_clean, "datagen_test", first_id=dataset.n_train)
    train_path = write_dataset(_out(out_dir, "dataset.csv"), train)
    test_path = write_dataset(_out(out_dir, "test_clean.csv"), test, labels=[CLEAN] * len(test))
    manifest_path = write_manifest(_out(out_dir, "manifest.json"), config.seed, dataset.mix_dict(), len(train),
                                   dataset.trajectory_length, config.scenario.scenario_hash(),
                                   n_test_clean=len(test))
    counts = pd.Series([t.pattern for t in train]).value_counts()
    return ExperimentResult("gen_data", {"dataset": config.snapshot()["dataset"]},
                            {"dataset": train_path, "test_clean": test_path, "manifest": manifest_path},
                            {f"count_{p}": int(counts.get(p, 0)) for p in PATTERNS}, config.seed)


# --------------------------------------------------------------------------- attack planning

def run_plan_attack(config, out_dir, episodes: Optional[int] = None,
                    include_oracle: bool = False) -> ExperimentResult:
    """
    Train the masked and the unmasked policy with one seed and compare them.

    Writes reward_curve.csv (both variants), the greedy episode log of each
    variant on a common evaluation trajectory, and both policies.
    """
    evaluation = generate_trajectories(config, 1, "attack", first_id=0)[0]
    curves, outputs, metrics = [], {}, {}
    window = config.attack.reward_curve_window
    for masked in (True, False):
        env = make_env(config)
        result = ppo_train(env, config.attack.ppo, config.attack.mask_floor, masked=masked, seed=config.seed,
                           episodes=episodes)
        curves.append(result.curve)
        policy_path = save_policy(result, _out(out_dir, f"policy_{result.variant}.pt"))
        plan = run_episode(make_env(config), evaluation, greedy_actor(result.policy, config.attack.mask_floor, masked))
        log_path = _write_csv(plan.to_frame(), _out(out_dir, f"episode_{result.variant}.csv"))
        outputs.update({f"policy_{result.variant}": policy_path, f"episode_{result.variant}": log_path})
        tail = result.curve.tail(window)
        metrics[f"{result.variant}_final_mean_reward"] = float(tail["mean_reward"].mean())
        metrics[f"{result.variant}_final_infeasible_rate"] = float(tail["infeasible_rate"].mean())
        metrics.update({f"{result.variant}_rollout_{k}": v for k, v in rollout_summary(plan).items()})

    if include_oracle:
        plan = oracle_plan(make_env(config), evaluation, horizon=config.attack.lookahead, seed=config.seed)
        outputs["episode_oracle"] = _write_csv(plan.to_frame(), _out(out_dir, "episode_oracle.csv"))
        metrics.update({f"oracle_rollout_{k}": v for k, v in rollout_summary(plan).items()})

    outputs["reward_curve"] = _write_csv(pd.concat(curves, ignore_index=True), _out(out_dir, "reward_curve.csv"))
    return ExperimentResult("plan_attack", {"attack": config.snapshot()["attack"], "episodes": episodes},
                            outputs, metrics, config.seed)


def attacker_actor(config, attacker: str, out_dir):
    """Greedy action callable of a saved policy ('ppo' or 'ppo-unmasked')."""
    variant = "masked" if attacker == "ppo" else "unmasked"
    policy, metadata = load_policy(Path(out_dir) / f"policy_{variant}.pt")
    if metadata.get("n_actions") != config.attack.n_actions:
        raise InvalidInputError(f"policy was trained for {metadata.get('n_actions')} actions, "
                                f"config has {config.attack.n_actions}")
    return greedy_actor(policy, metadata.get("mask_floor", config.attack.mask_floor), variant == "masked")


def attack_plans(config, trajectories: Sequence[Trajectory], attacker: str, out_dir=None, actor=None):
    """Sensed episodes of every trajectory under the given attacker."""
    if attacker not in ATTACKERS:
        raise InvalidInputError(f"unknown attacker {attacker!r}; expected one of {ATTACKERS}")
    env = make_env(config)
    if attacker == "none":
        grid = ActionGrid.from_scenario(config.scenario, config.attack.n_actions)
        return [no_attack_plan(config.scenario, config.consistency, t, grid, seed=config.seed,
                               beam_denominator=config.sensing.beam_denominator) for t in trajectories]
    if attacker == "oracle":
        return [oracle_plan(env, t, horizon=config.attack.lookahead, seed=config.seed) for t in trajectories]
    actor = actor or attacker_actor(config, attacker, out_dir)
    return [run_episode(env, t, actor) for t in trajectories]


# --------------------------------------------------------------------------- beam tracking

def achievable_rate(scenario: ScenarioConfig, vehicle: VehicleState, beam: float) -> float:
    """log2(1 + P N_t |h(theta, theta_0)|^2 (lambda / (4 pi d))^2 / sigma^2)."""
    geometry = channel_gains(vehicle, scenario)
    alignment = abs(complex(h_factor(scenario.n_tx, geometry.aod, beam))) ** 2
    path_loss = (scenario.wavelength / (4 * math.pi * geometry.distance)) ** 2
    snr = scenario.transmit_power * scenario.n_tx * alignment * path_loss / scenario.noise_power
    return math.log2(1 + snr)


def tracking_trajectory(config) -> Trajectory:
    """Straight drive from the configured start state."""
    x0, y0, v0 = config.experiments.track_start
    K = config.experiments.track_slots
    T = config.scenario.slot_duration
    k = np.arange(K)
    return Trajectory(np.column_stack([x0 + v0 * T * k, np.full(K, y0), np.full(K, v0)]),
                      pattern="straight", sample_id=0)


def beam_tracking(config, attacker: str = "none", out_dir=None, actor=None) -> pd.DataFrame:
    """
    Closed-loop tracking with and without the attacker.

    Columns: k, true_aod_deg, perfect_aod_deg, spoofed_aod_deg, aod_error_rad,
    perfect_rate, spoofed_rate, relative_loss.
    """
    scenario = config.scenario
    trajectory = tracking_trajectory(config)
    grid = ActionGrid.from_scenario(scenario, config.attack.n_actions)
    perfect = no_attack_plan(scenario, config.consistency, trajectory, grid, seed=config.seed,
                             beam_denominator=config.sensing.beam_denominator)
    spoofed = perfect if attacker == "none" else attack_plans(config, [trajectory], attacker, out_dir, actor)[0]

    rows = []
    for k in range(1, len(trajectory)):
        vehicle = trajectory.state(k)
        true_aod = channel_gains(vehicle, scenario).aod
        perfect_rate = achievable_rate(scenario, vehicle, perfect.beams[k - 1])
        spoofed_rate = achievable_rate(scenario, vehicle, spoofed.beams[k - 1])
        rows.append({
            "k": k,
            "true_aod_deg": math.degrees(true_aod),
            "perfect_aod_deg": math.degrees(perfect.sensed[k].aod),
            "spoofed_aod_deg": math.degrees(spoofed.sensed[k].aod),
            "aod_error_rad": abs(spoofed.sensed[k].aod - true_aod),
            "perfect_rate": perfect_rate,
            "spoofed_rate": spoofed_rate,
            "relative_loss": (perfect_rate - spoofed_rate) / perfect_rate if perfect_rate > 0 else 0.0,
        })
    return pd.DataFrame(rows)


def run_track(config, out_dir, attacker: str = "none") -> ExperimentResult:
    frame = beam_tracking(config, attacker, out_dir)
    path = _write_csv(frame, _out(out_dir, f"track_{attacker}.csv"))
    near = frame[frame["k"] <= config.experiments.near_ris_slots]
    after = frame[frame["k"] > config.experiments.near_ris_slots]
    metrics = {
        "max_aod_error_rad_near": float(near["aod_error_rad"].max()),
        "max_relative_loss_near": float(near["relative_loss"].max()),
        "mean_relative_loss_near": float(near["relative_loss"].mean()),
        "min_relative_loss_after": float(after["relative_loss"].min()) if len(after) else math.nan,
        "max_relative_loss_after": float(after["relative_loss"].max()) if len(after) else math.nan,
    }
    logger.info(f"Tracking ({attacker}): max relative rate loss near the RIS {metrics['max_relative_loss_near']:.3f}")
    return ExperimentResult(f"track_{attacker}", {"attacker": attacker}, {"track": path}, metrics, config.seed)


# --------------------------------------------------------------------------- detection

def run_cluster(config, out_dir, trajectories: Sequence[Trajectory],
                iterations: Optional[int] = None) -> Tuple[ExperimentResult, ClusterModel, List[PseudoLabeledSet]]:
    """Cluster the training set; writes clusters.csv, cluster_summary.csv and the cluster model."""
    detection = config.detection
    cluster_model, datasets = dtcr_train(trajectories, detection.n_clusters, detection.dtcr, seed=config.seed,
                                         iterations=iterations)
    distances = cluster_model.distances(cluster_model.train_latents)
    assignments = cluster_model.assignments
    patterns = [t.pattern or "" for t in trajectories]
    frame = pd.DataFrame({
        "sample_id": [t.sample_id for t in trajectories],
        "cluster": assignments,
        "pattern": patterns,
        "distance_to_center": distances[np.arange(len(assignments)), assignments],
    })
    summary = []
    for p in range(cluster_model.n_clusters):
        members = frame[frame["cluster"] == p]
        counts = members["pattern"].value_counts()
        summary.append({
            "cluster": p,
            "size": int(len(members)),
            "dominant_pattern": counts.index[0] if len(counts) else "",
            "purity": float(counts.iloc[0] / len(members)) if len(members) else math.nan,
        })
    outputs = {
        "clusters": _write_csv(frame, _out(out_dir, "clusters.csv")),
        "cluster_summary": _write_csv(pd.DataFrame(summary), _out(out_dir, "cluster_summary.csv")),
        "cluster_model": save_cluster_model(cluster_model, _out(out_dir, "cluster_model")),
    }
    metrics = {"purity": cluster_purity(assignments, patterns)}
    result = ExperimentResult("cluster", {"detection": config.snapshot()["detection"]}, outputs, metrics,
                              config.seed)
    return result, cluster_model, datasets


def run_learn_stl(config, out_dir, cluster_model: ClusterModel, trajectories: Sequence[Trajectory],
                  epochs: Optional[int] = None) -> Tuple[ExperimentResult, DetectorBundle]:
    """One formula per cluster; writes formulas.txt, formulas.csv and the detector bundle."""
    bundle, results = train_detector(trajectories, config.detection, seed=config.seed, tlinet_epochs=epochs,
                                     cluster_model=cluster_model,
                                     metadata={"scenario_hash": config.scenario.scenario_hash()})
    frame = pd.DataFrame([{
        "cluster": r.cluster,
        "formula": format_formula(r.formula),
        "train_misclassification": r.train_misclassification,
        "val_misclassification": r.val_misclassification,
        "active_predicates": r.active_predicates,
    } for r in results])
    text_path = _out(out_dir, "formulas.txt")
    text_path.write_text("".join(f"{format_formula(r.formula)}\n" for r in results), encoding="utf-8")
    outputs = {
        "formulas_txt": text_path,
        "formulas_csv": _write_csv(frame, _out(out_dir, "formulas.csv")),
        "bundle": save_bundle(bundle, _out(out_dir, "bundle")),
    }
    metrics = {"mean_val_misclassification": float(frame["val_misclassification"].mean())}
    return ExperimentResult("learn_stl", {"tlinet": config.snapshot()["detection"]["tlinet"]}, outputs, metrics,
                            config.seed), bundle


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with the normal (clean) trajectory as the positive class."""
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_predictions(cls, truth_spoofed: Sequence[bool], predicted_spoofed: Sequence[bool]) -> "ConfusionMatrix":
        truth = np.asarray(truth_spoofed, dtype=bool)
        predicted = np.asarray(predicted_spoofed, dtype=bool)
        if truth.shape != predicted.shape:
            raise InvalidInputError("truth and predictions differ in length")
        return cls(tp=int(np.sum(~truth & ~predicted)), fp=int(np.sum(truth & ~predicted)),
                   tn=int(np.sum(truth & predicted)), fn=int(np.sum(~truth & predicted)))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan

    def to_dict(self) -> Dict[str, float]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "accuracy": self.accuracy}


def evaluate_detectors(bundle: DetectorBundle, clean: Sequence[Trajectory],
                       spoofed: Sequence[Trajectory]) -> Dict[str, ConfusionMatrix]:
    """STL and distance-benchmark confusion matrices on a mixed test set."""
    trajectories = list(clean) + list(spoofed)
    truth = np.array([False] * len(clean) + [True] * len(spoofed))
    stl = np.array([d.spoofed for d in detect_many(trajectories, bundle)])
    benchmark = benchmark_detect(trajectories, bundle.cluster_model, bundle.thresholds)
    return {"stl": ConfusionMatrix.from_predictions(truth, stl),
            "benchmark": ConfusionMatrix.from_predictions(truth, benchmark)}


def detection_frame(bundle: DetectorBundle, trajectories: Sequence[Trajectory]) -> pd.DataFrame:
    detections = detect_many(trajectories, bundle)
    benchmark = benchmark_detect(trajectories, bundle.cluster_model, bundle.thresholds)
    return pd.DataFrame({
        "sample_id": [t.sample_id for t in trajectories],
        "cluster": [d.cluster for d in detections],
        "robustness": [d.robustness for d in detections],
        "stl_spoofed": [d.spoofed for d in detections],
        "benchmark_spoofed": benchmark,
    })


def run_detect(config, out_dir, input_path) -> ExperimentResult:
    bundle = load_bundle(Path(out_dir) / "bundle")
    trajectories, _ = read_dataset(input_path)
    frame = detection_frame(bundle, trajectories)
    path = _write_csv(frame, _out(out_dir, "detections.csv"))
    return ExperimentResult("detect", {"input": str(input_path)}, {"detections": path},
                            {"stl_spoofed_rate": float(frame["stl_spoofed"].mean()),
                             "benchmark_spoofed_rate": float(frame["benchmark_spoofed"].mean())}, config.seed)


def spoofed_test_set(config, attacker: str, out_dir, first_id: int, actor=None) -> List[Trajectory]:
    """Sensed trajectories of fresh ground truths under the attacker."""
    truths = generate_trajectories(config, config.dataset.n_test_spoofed, "datagen_spoofed", first_id=first_id)
    plans = attack_plans(config, truths, attacker, out_dir, actor)
    return [plan.sensed_trajectory() for plan in plans]


def run_eval(config, out_dir, attackers: Sequence[str], bundle: Optional[DetectorBundle] = None,
             clean: Optional[Sequence[Trajectory]] = None, actors: Optional[Dict] = None) -> ExperimentResult:
    """Confusion matrices of both detectors against every attacker's spoofed test set."""
    out_dir = Path(out_dir)
    bundle = bundle or load_bundle(out_dir / "bundle")
    if clean is None:
        clean, _ = read_dataset(out_dir / "test_clean.csv")
    rows, outputs, metrics = [], {}, {}
    first_id = config.dataset.n_train + config.dataset.n_test_clean
    for attacker in attackers:
        spoofed = spoofed_test_set(config, attacker, out_dir, first_id, (actors or {}).get(attacker))
        outputs[f"test_spoofed_{attacker}"] = write_dataset(_out(out_dir, f"test_spoofed_{attacker}.csv"), spoofed,
                                                            labels=[SPOOFED] * len(spoofed))
        for detector, matrix in evaluate_detectors(bundle, clean, spoofed).items():
            rows.append({"detector": detector, "attacker": attacker, **matrix.to_dict()})
            metrics[f"{detector}_accuracy_{attacker}"] = matrix.accuracy
            logger.info(f"{detector} detector vs {attacker}: accuracy {matrix.accuracy:.4f} "
                        f"(tp={matrix.tp}, fp={matrix.fp}, tn={matrix.tn}, fn={matrix.fn})")
    outputs["confusion"] = _write_csv(pd.DataFrame(rows), _out(out_dir, "confusion.csv"))
    return ExperimentResult("eval", {"attackers": list(attackers)}, outputs, metrics, config.seed)


def evaluated_attackers(attacker: str) -> List[str]:
    """The oracle run also evaluates the trained policy."""
    return ["ppo", "oracle"] if attacker == "oracle" else [attacker]


class DetectionPipeline:
    """
    End-to-end run: data, attacker training, clustering, formula learning,
    detection and evaluation. Failures are re-raised with the stage label.
    """

    def __init__(self, config, out_dir, attacker: str = "ppo", episodes: Optional[int] = None,
                 dtcr_iterations: Optional[int] = None, tlinet_epochs: Optional[int] = None):
        if attacker not in ATTACKERS:
            raise InvalidInputError(f"unknown attacker {attacker!r}; expected one of {ATTACKERS}")
        self.config = config
        self.out_dir = Path(out_dir)
        self.attacker = attacker
        self.episodes = episodes
        self.dtcr_iterations = dtcr_iterations
        self.tlinet_epochs = tlinet_epochs
        self.results: List[ExperimentResult] = []

    @contextmanager
    def stage(self, name: str):
        logger.info(f"Pipeline stage '{name}' started")
        try:
            yield
        except PipelineStageError:
            raise
        except Exception as e:
            logger.error(f"Pipeline stage '{name}' failed: {e}")
            raise PipelineStageError(name, e) from e
        logger.info(f"Pipeline stage '{name}' finished")

    def run(self) -> ExperimentResult:
        config, out = self.config, self.out_dir
        attackers = evaluated_attackers(self.attacker)

        with self.stage("gen-data"):
            self.results.append(run_gen_data(config, out))
            train, _ = read_dataset(out / "dataset.csv")
            clean, _ = read_dataset(out / "test_clean.csv")

        actors = {}
        with self.stage("attack"):
            for attacker in attackers:
                if attacker in ("ppo", "ppo-unmasked"):
                    masked = attacker == "ppo"
                    result = ppo_train(make_env(config), config.attack.ppo, config.attack.mask_floor, masked=masked,
                                       seed=config.seed, episodes=self.episodes)
                    save_policy(result, _out(out, f"policy_{result.variant}.pt"))
                    _write_csv(result.curve, _out(out, f"reward_curve_{result.variant}.csv"))
                    actors[attacker] = greedy_actor(result.policy, config.attack.mask_floor, masked)

        with self.stage("cluster"):
            clustering, _, _ = run_cluster(config, out, train, self.dtcr_iterations)
            self.results.append(clustering)

        with self.stage("learn-stl"):
            result, bundle = run_learn_stl(config, out, load_cluster_model(out / "cluster_model"), train,
                                           self.tlinet_epochs)
            self.results.append(result)

        with self.stage("detect"):
            bundle = load_bundle(out / "bundle")
            resubstitution = detection_frame(bundle, train)
            clean_rate = float(1.0 - resubstitution["stl_spoofed"].mean())

        with self.stage("eval"):
            evaluation = run_eval(config, out, attackers, bundle=bundle, clean=clean, actors=actors)
            self.results.append(evaluation)

        metrics = dict(evaluation.metrics)
        metrics["train_clean_rate"] = clean_rate
        metrics["cluster_purity"] = clustering.metrics["purity"]
        summary = ExperimentResult("pipeline", {"attacker": self.attacker, "episodes": self.episodes},
                                   evaluation.outputs, metrics, config.seed)
        summary.write_summary(out)
        return summary
