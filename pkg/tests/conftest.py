"""
Shared fixtures for the RIS spoofing simulator test suite.
"""

import math
import sys
from pathlib import Path

import pytest

# Add project root to path for imports
current_dir = Path(__file__).parent
project_root = current_dir.parent if current_dir.name == 'tests' else current_dir
sys.path.insert(0, str(project_root))

from config.env_config import ConfigLoader, reset_simulation_config
from src.signal_core import ScenarioConfig, VehicleState, channel_gains, ris_geometry


@pytest.fixture(scope="session")
def scenario():
    """Default scenario (30 dBm, 28 GHz, 32x32 arrays, RIS at (5, 15) m)."""
    return ScenarioConfig()


@pytest.fixture(scope="session")
def reference_vehicle():
    return VehicleState(3.0, 21.0, 10.0)


@pytest.fixture(scope="session")
def vehicle_geometry(scenario, reference_vehicle):
    return channel_gains(reference_vehicle, scenario)


@pytest.fixture(scope="session")
def ris(scenario):
    return ris_geometry(scenario)


@pytest.fixture(scope="session")
def beam_85():
    return math.radians(85.0)


@pytest.fixture(scope="session")
def default_config():
    """Configuration parsed from config/scenario.yaml."""
    reset_simulation_config()
    return ConfigLoader(project_root / "config" / "scenario.yaml").load()
