"""
Centralized configuration loader for the RIS spoofing simulator.

Loads the scenario YAML (physics, sensing knobs, attack, dataset, detection and
experiment settings), applies environment overrides from .env files, converts
boundary units (dBm, dBsm, degrees) once, and validates every field.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv

from src.attack_planner import ConsistencyParams
from src.errors import ConfigError
from src.signal_core import ScenarioConfig

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "scenario.yaml"

PATTERNS = ("straight", "single_lane_change", "double_lane_change")


def dbm_to_watts(dbm: float) -> float:
    return 10 ** ((dbm - 30) / 10)


def db_to_linear(db: float) -> float:
    return 10 ** (db / 10)


@dataclass(frozen=True)
class SensingSettings:
    oracle_samples: int = 10_000
    mle_grid_step: float = math.radians(0.1)
    mle_refine_tol: float = math.radians(0.01)
    beam_denominator: str = "sensed"
    velocity_angle: str = "vehicle"


@dataclass(frozen=True)
class PpoSettings:
    episodes: int = 600
    episodes_per_update: int = 32
    epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    hidden_width: int = 64
    minibatch_size: int = 256


@dataclass(frozen=True)
class AttackSettings:
    n_actions: int = 200
    mask_floor: float = 0.01
    trajectory_length: int = 67
    lookahead: int = 1
    ppo: PpoSettings = field(default_factory=PpoSettings)
    reward_curve_window: int = 10


@dataclass(frozen=True)
class DatasetSettings:
    n_train: int = 480
    n_test_clean: int = 120
    n_test_spoofed: int = 120
    trajectory_length: int = 67
    lanes: Tuple[float, ...] = (18.0, 21.0, 24.0)
    speed_range: Tuple[float, float] = (8.0, 15.0)
    pattern_mix: Tuple[Tuple[str, float], ...] = (
        ("straight", 0.5), ("single_lane_change", 0.3), ("double_lane_change", 0.2))

    def mix_dict(self) -> Dict[str, float]:
        return dict(self.pattern_mix)


@dataclass(frozen=True)
class DtcrSettings:
    iterations: int = 50
    indicator_interval: int = 5
    lambda0: float = 50.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    hidden_size: int = 64
    latent_dim: int = 16
    kmeans_restarts: int = 10


@dataclass(frozen=True)
class TlinetSettings:
    n_predicates: int = 4
    beta: float = 10.0
    eta: float = 0.1
    epochs: int = 300
    learning_rate: float = 0.05
    validation_fraction: float = 0.2
    label_convention: str = "signed"
    class_lambdas: Tuple[Tuple[float, float, float], ...] = (
        (4e-2, 5.0, 5.0), (1e-3, 5.0, 5.0), (1e-1, 10.0, 10.0),
        (1e-3, 5.0, 5.0), (2e-2, 5.0, 5.0), (2e-2, 5.0, 5.0))

    def lambdas_for(self, cluster: int) -> Tuple[float, float, float]:
        """Regularizer weights (lambda1, lambda2, lambda3) for a cluster; last row repeats."""
        if not self.class_lambdas:
            return (1e-2, 5.0, 5.0)
        return self.class_lambdas[min(cluster, len(self.class_lambdas) - 1)]


@dataclass(frozen=True)
class DetectionSettings:
    n_clusters: int = 6
    dtcr: DtcrSettings = field(default_factory=DtcrSettings)
    tlinet: TlinetSettings = field(default_factory=TlinetSettings)
    benchmark_percentile: float = 95.0


@dataclass(frozen=True)
class ExperimentSettings:
    sweep_start_deg: float = 70.0
    sweep_stop_deg: float = 95.0
    sweep_step_deg: float = 0.5
    reference_vehicle: Tuple[float, float, float] = (3.0, 21.0, 10.0)
    spoof_slot_beams_deg: Tuple[float, ...] = (75.0, 82.0, 85.0, 95.0)
    spoof_slot_trials: int = 200
    spoof_slot_freq_step_hz: float = 25.0
    track_slots: int = 60
    near_ris_slots: int = 25
    track_start: Tuple[float, float, float] = (-5.0, 20.0, 10.0)
    workers: int = 4


@dataclass(frozen=True)
class SimulationConfig:
    """Fully validated run configuration."""
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sensing: SensingSettings = field(default_factory=SensingSettings)
    consistency: ConsistencyParams = field(default_factory=ConsistencyParams)
    attack: AttackSettings = field(default_factory=AttackSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    detection: DetectionSettings = field(default_factory=DetectionSettings)
    experiments: ExperimentSettings = field(default_factory=ExperimentSettings)
    source: Optional[str] = None

    @property
    def seed(self) -> int:
        return self.scenario.rng_seed

    def with_seed(self, seed: int) -> "SimulationConfig":
        return replace(self, scenario=replace(self.scenario, rng_seed=int(seed)))

    def snapshot(self) -> Dict[str, Any]:
        """Plain-dict view recorded next to experiment outputs."""
        return asdict(self)


class _SectionReader:
    """Typed field access on one YAML mapping, reporting dotted paths and source lines."""

    def __init__(self, data: Any, path: str, lines: Dict[str, int]):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("section must be a mapping", field=path, line=lines.get(path))
        self.data = data
        self.path = path
        self.lines = lines

    def _dotted(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def fail(self, key: str, message: str):
        dotted = self._dotted(key)
        raise ConfigError(message, field=dotted, line=self.lines.get(dotted))

    def section(self, key: str) -> "_SectionReader":
        return _SectionReader(self.data.get(key), self._dotted(key), self.lines)

    def number(self, key: str, default: float, positive: bool = False) -> float:
        value = self.data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(key, f"must be a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            self.fail(key, "must be finite")
        if positive and value <= 0:
            self.fail(key, f"must be positive, got {value}")
        return value

    def integer(self, key: str, default: int, minimum: int = 1) -> int:
        value = self.data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(key, f"must be an integer, got {value!r}")
        if value < minimum:
            self.fail(key, f"must be >= {minimum}, got {value}")
        return int(value)

    def choice(self, key: str, default: str, options: Tuple[str, ...]) -> str:
        value = self.data.get(key, default)
        if value not in options:
            self.fail(key, f"must be one of {', '.join(options)}, got {value!r}")
        return value

    def numbers(self, key: str, default, length: Optional[int] = None) -> Tuple[float, ...]:
        value = self.data.get(key, default)
        if not isinstance(value, (list, tuple)) or not value:
            self.fail(key, f"must be a non-empty list, got {value!r}")
        if length is not None and len(value) != length:
            self.fail(key, f"must have {length} entries, got {len(value)}")
        try:
            result = tuple(float(v) for v in value)
        except (TypeError, ValueError):
            self.fail(key, f"entries must be numbers, got {value!r}")
        if not all(math.isfinite(v) for v in result):
            self.fail(key, "entries must be finite")
        return result


def _line_index(text: str) -> Dict[str, int]:
    """Map dotted key paths to 1-based YAML line numbers."""
    lines: Dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if not isinstance(node, yaml.MappingNode):
            return
        for key_node, value_node in node.value:
            dotted = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            lines[dotted] = key_node.start_mark.line + 1
            walk(value_node, dotted)

    walk(root, "")
    return lines


class ConfigLoader:
    """Scenario configuration management: .env discovery, YAML parsing, validation."""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self._load_environment_files()
        self.config_path = self.resolve_config_path(config_path)

    def _load_environment_files(self):
        """Load .env files from the usual locations without overriding the process environment."""
        env_locations = [
            PROJECT_ROOT / "config" / ".env",
            PROJECT_ROOT / ".env",
        ]
        for env_path in env_locations:
            if env_path.exists():
                logger.info(f"Loading environment from: {env_path}")
                load_dotenv(env_path, override=False)
            else:
                logger.debug(f"Environment file not found: {env_path}")

    @staticmethod
    def resolve_config_path(config_path: Optional[Union[str, Path]] = None) -> Path:
        if config_path:
            return Path(config_path)
        from_env = os.getenv("RIS_SPOOF_CONFIG")
        if from_env:
            return Path(from_env)
        return DEFAULT_CONFIG_PATH

    def get_seed_override(self) -> Optional[int]:
        raw = os.getenv("RIS_SPOOF_SEED")
        if raw is None or raw == "":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"RIS_SPOOF_SEED must be an integer, got {raw!r}", field="RIS_SPOOF_SEED")

    def get_out_dir(self) -> Path:
        return Path(os.getenv("RIS_SPOOF_OUT_DIR", "out"))

    def get_log_level(self) -> str:
        level = os.getenv("RIS_SPOOF_LOG_LEVEL", "INFO").upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            logger.warning(f"Invalid RIS_SPOOF_LOG_LEVEL '{level}', defaulting to 'INFO'")
            return "INFO"
        return level

    def get_workers(self, default: int) -> int:
        raw = os.getenv("RIS_SPOOF_WORKERS")
        if not raw:
            return default
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"RIS_SPOOF_WORKERS must be an integer, got {raw!r}", field="RIS_SPOOF_WORKERS")
        if workers < 1:
            raise ConfigError("RIS_SPOOF_WORKERS must be >= 1", field="RIS_SPOOF_WORKERS")
        return workers

    def load(self) -> SimulationConfig:
        """
        Parse and validate the configuration file.

        Returns:
            SimulationConfig with SI units and environment overrides applied

        Raises:
            ConfigError: If the file is missing, malformed or holds an invalid field
        """
        path = self.config_path
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            text = path.read_text(encoding="utf-8")
        except (IOError, OSError) as e:
            raise ConfigError(f"Failed to read config file {path}: {e}")
        config = parse_config_text(text, source=str(path))

        seed = self.get_seed_override()
        if seed is not None:
            config = config.with_seed(seed)
        workers = self.get_workers(config.experiments.workers)
        if workers != config.experiments.workers:
            config = replace(config, experiments=replace(config.experiments, workers=workers))
        logger.info(f"Loaded configuration from {path} (seed={config.seed})")
        return config


def parse_config_text(text: str, source: Optional[str] = None) -> SimulationConfig:
    """
    Build a SimulationConfig from YAML text.

    Args:
        text: YAML document
        source: Optional origin recorded on the config

    Returns:
        Validated SimulationConfig

    Raises:
        ConfigError: On YAML syntax errors (with line) or invalid fields (with dotted path)
    """
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"Failed to parse YAML: {getattr(e, 'problem', e)}", line=line)

    lines = _line_index(text)
    root = _SectionReader(raw, "", lines)

    sensing_raw = root.section("sensing")
    scenario = _parse_scenario(root.section("scenario"), sensing_raw)
    sensing = SensingSettings(
        oracle_samples=sensing_raw.integer("oracle_samples", 10_000),
        mle_grid_step=math.radians(sensing_raw.number("mle_grid_step_deg", 0.1, positive=True)),
        mle_refine_tol=math.radians(sensing_raw.number("mle_refine_tol_deg", 0.01, positive=True)),
        beam_denominator=sensing_raw.choice("beam_denominator", "sensed", ("sensed", "true")),
        velocity_angle=sensing_raw.choice("velocity_angle", "vehicle", ("vehicle", "beam")),
    )
    if sensing.oracle_samples < 10 * scenario.n_phase_updates:
        sensing_raw.fail("oracle_samples", f"must be >= {10 * scenario.n_phase_updates}")

    return SimulationConfig(
        scenario=scenario,
        sensing=sensing,
        consistency=_parse_consistency(root.section("consistency")),
        attack=_parse_attack(root.section("attack")),
        dataset=_parse_dataset(root.section("dataset")),
        detection=_parse_detection(root.section("detection")),
        experiments=_parse_experiments(root.section("experiments")),
        source=source,
    )


def _parse_scenario(section: _SectionReader, sensing: _SectionReader) -> ScenarioConfig:
    ris = section.section("ris")
    position = ris.numbers("position_m", [5.0, 15.0], length=2)
    if position[1] <= 0:
        ris.fail("position_m", "RIS must sit on the road side (y > 0)")
    seed = section.data.get("rng_seed", 7)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        section.fail("rng_seed", f"must be a non-negative integer, got {seed!r}")
    values = dict(
        transmit_power=dbm_to_watts(section.number("transmit_power_dbm", 30.0)),
        noise_power=dbm_to_watts(section.number("noise_power_dbm", -100.0)),
        carrier_freq=section.number("carrier_freq_hz", 28e9, positive=True),
        n_tx=section.integer("n_tx", 32),
        n_rx=section.integer("n_rx", 32),
        slot_duration=section.number("slot_duration_s", 0.01, positive=True),
        phase_update_interval=section.number("phase_update_interval_s", 0.001, positive=True),
        ris_position=position,
        ris_elements=ris.integer("elements", 32),
        ris_efficiency=ris.number("efficiency", 0.8, positive=True),
        ris_area=ris.number("area_m2", 0.05, positive=True),
        ris_aperture_efficiency=ris.number("aperture_efficiency", 0.45, positive=True),
        ris_max_delay=ris.number("max_delay_s", 3.2e-7, positive=True),
        vehicle_rcs=db_to_linear(section.number("vehicle_rcs_dbsm", 7.0)),
        rng_seed=seed,
        position_convention=sensing.choice("position_convention", "half_delay", ("half_delay", "literal")),
        ris_size_margin=sensing.number("ris_size_margin", 10.0, positive=True),
    )
    try:
        return ScenarioConfig(**values)
    except ConfigError as e:
        # re-attach the YAML line of the offending field when it is known
        if e.line is None and e.field:
            raise ConfigError(str(e).split(" [")[0], field=e.field, line=section.lines.get(e.field))
        raise


def _parse_consistency(section: _SectionReader) -> ConsistencyParams:
    a_max = section.number("a_max", 3.0)
    a_min = section.number("a_min", -3.0)
    if a_min >= a_max:
        section.fail("a_min", f"must be below a_max ({a_max}), got {a_min}")
    return ConsistencyParams(
        a_max=a_max,
        a_min=a_min,
        delta_x=section.number("delta_x", 1.0, positive=True),
        delta_y=section.number("delta_y", 0.3, positive=True),
    )


def _parse_attack(section: _SectionReader) -> AttackSettings:
    ppo = section.section("ppo")
    mask_floor = section.number("mask_floor", 0.01, positive=True)
    if mask_floor >= 1:
        section.fail("mask_floor", "must lie in (0, 1)")
    gamma = ppo.number("gamma", 0.99, positive=True)
    if gamma > 1:
        ppo.fail("gamma", "must lie in (0, 1]")
    lookahead = section.integer("lookahead", 1)
    if lookahead > 2:
        section.fail("lookahead", "must be 1 (greedy) or 2")
    return AttackSettings(
        n_actions=section.integer("n_actions", 200),
        mask_floor=mask_floor,
        trajectory_length=section.integer("trajectory_length", 67, minimum=2),
        lookahead=lookahead,
        ppo=PpoSettings(
            episodes=ppo.integer("episodes", 600),
            episodes_per_update=ppo.integer("episodes_per_update", 32),
            epochs=ppo.integer("epochs", 10),
            gamma=gamma,
            gae_lambda=ppo.number("gae_lambda", 0.95, positive=True),
            clip=ppo.number("clip", 0.2, positive=True),
            learning_rate=ppo.number("learning_rate", 3e-4, positive=True),
            entropy_coef=ppo.number("entropy_coef", 0.01),
            value_coef=ppo.number("value_coef", 0.5, positive=True),
            hidden_width=ppo.integer("hidden_width", 64),
            minibatch_size=ppo.integer("minibatch_size", 256),
        ),
        reward_curve_window=section.integer("reward_curve_window", 10),
    )


def _parse_dataset(section: _SectionReader) -> DatasetSettings:
    lanes = section.numbers("lanes_m", [18.0, 21.0, 24.0])
    if any(lane <= 0 for lane in lanes):
        section.fail("lanes_m", "lanes must have y > 0")
    speed_range = section.numbers("speed_range_mps", [8.0, 15.0], length=2)
    if not 0 <= speed_range[0] <= speed_range[1]:
        section.fail("speed_range_mps", f"must be an increasing non-negative pair, got {speed_range}")

    mix_raw = section.data.get("pattern_mix", {"straight": 0.5, "single_lane_change": 0.3,
                                               "double_lane_change": 0.2})
    if not isinstance(mix_raw, dict) or not mix_raw:
        section.fail("pattern_mix", "must be a mapping of pattern to weight")
    unknown = set(mix_raw) - set(PATTERNS)
    if unknown:
        section.fail("pattern_mix", f"unknown patterns: {sorted(unknown)}")
    mix_reader = section.section("pattern_mix")
    weights = {name: mix_reader.number(name, 0.0) for name in PATTERNS if name in mix_raw}
    if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
        section.fail("pattern_mix", "weights must be non-negative with a positive sum")
    total = sum(weights.values())

    return DatasetSettings(
        n_train=section.integer("n_train", 480),
        n_test_clean=section.integer("n_test_clean", 120, minimum=0),
        n_test_spoofed=section.integer("n_test_spoofed", 120, minimum=0),
        trajectory_length=section.integer("trajectory_length", 67, minimum=2),
        lanes=lanes,
        speed_range=speed_range,
        pattern_mix=tuple((name, w / total) for name, w in weights.items()),
    )


def _parse_detection(section: _SectionReader) -> DetectionSettings:
    dtcr = section.section("dtcr")
    tlinet = section.section("tlinet")

    rows = tlinet.data.get("class_lambdas", [list(r) for r in TlinetSettings.class_lambdas])
    if not isinstance(rows, list) or not rows:
        tlinet.fail("class_lambdas", "must be a non-empty list of [lambda1, lambda2, lambda3] rows")
    class_lambdas = []
    for index, row in enumerate(rows):
        if not isinstance(row, (list, tuple)) or len(row) != 3:
            tlinet.fail("class_lambdas", f"row {index} must have three entries")
        try:
            parsed = tuple(float(v) for v in row)
        except (TypeError, ValueError):
            tlinet.fail("class_lambdas", f"row {index} must hold numbers")
        if any(v < 0 or not math.isfinite(v) for v in parsed):
            tlinet.fail("class_lambdas", f"row {index} must be finite and non-negative")
        class_lambdas.append(parsed)

    n_clusters = section.integer("n_clusters", 6)
    validation_fraction = tlinet.number("validation_fraction", 0.2)
    if not 0 <= validation_fraction < 1:
        tlinet.fail("validation_fraction", "must lie in [0, 1)")
    percentile = section.number("benchmark_percentile", 95.0, positive=True)
    if percentile > 100:
        section.fail("benchmark_percentile", "must lie in (0, 100]")

    return DetectionSettings(
        n_clusters=n_clusters,
        dtcr=DtcrSettings(
            iterations=dtcr.integer("iterations", 50),
            indicator_interval=dtcr.integer("indicator_interval", 5),
            lambda0=dtcr.number("lambda0", 50.0),
            learning_rate=dtcr.number("learning_rate", 1e-3, positive=True),
            batch_size=dtcr.integer("batch_size", 64),
            hidden_size=section.integer("hidden_size", 64),
            latent_dim=section.integer("latent_dim", 16),
            kmeans_restarts=section.integer("kmeans_restarts", 10),
        ),
        tlinet=TlinetSettings(
            n_predicates=tlinet.integer("n_predicates", 4),
            beta=tlinet.number("beta", 10.0, positive=True),
            eta=tlinet.number("eta", 0.1, positive=True),
            epochs=tlinet.integer("epochs", 300),
            learning_rate=tlinet.number("learning_rate", 0.05, positive=True),
            validation_fraction=validation_fraction,
            label_convention=tlinet.choice("label_convention", "signed", ("signed", "literal")),
            class_lambdas=tuple(class_lambdas),
        ),
        benchmark_percentile=percentile,
    )


def _parse_experiments(section: _SectionReader) -> ExperimentSettings:
    sweep = section.section("sweep")
    spoof_slot = section.section("spoof_slot")
    track = section.section("track")

    start = sweep.number("start_deg", 70.0)
    stop = sweep.number("stop_deg", 95.0)
    if not 0 < start <= stop < 180:
        sweep.fail("stop_deg", f"sweep must satisfy 0 < start <= stop < 180, got [{start}, {stop}]")
    beams = spoof_slot.numbers("beams_deg", [75.0, 82.0, 85.0, 95.0])
    if any(not 0 < b < 180 for b in beams):
        spoof_slot.fail("beams_deg", "beam directions must lie in (0, 180) degrees")
    reference = sweep.numbers("vehicle_state", [3.0, 21.0, 10.0], length=3)
    if reference[1] <= 0:
        sweep.fail("vehicle_state", "vehicle must have y > 0")
    start_state = track.numbers("start_state", [-5.0, 20.0, 10.0], length=3)
    if start_state[1] <= 0:
        track.fail("start_state", "vehicle must start with y > 0")
    slots = track.integer("slots", 60, minimum=2)
    near = track.integer("near_ris_slots", 25)
    if near > slots:
        track.fail("near_ris_slots", f"must not exceed slots ({slots})")

    return ExperimentSettings(
        sweep_start_deg=start,
        sweep_stop_deg=stop,
        sweep_step_deg=sweep.number("step_deg", 0.5, positive=True),
        reference_vehicle=reference,
        spoof_slot_beams_deg=beams,
        spoof_slot_trials=spoof_slot.integer("trials", 200),
        spoof_slot_freq_step_hz=spoof_slot.number("freq_step_hz", 25.0, positive=True),
        track_slots=slots,
        near_ris_slots=near,
        track_start=start_state,
        workers=section.integer("workers", 4),
    )


# Global instance
_simulation_config = None


def get_simulation_config(config_path: Optional[Union[str, Path]] = None) -> SimulationConfig:
    """Get the process-wide configuration, loading it on first use (or when a path is given)."""
    global _simulation_config
    if _simulation_config is None or config_path is not None:
        _simulation_config = ConfigLoader(config_path).load()
    return _simulation_config


def reset_simulation_config():
    """Drop the cached configuration."""
    global _simulation_config
    _simulation_config = None
