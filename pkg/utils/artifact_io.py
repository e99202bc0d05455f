"""
Artifact persistence for the spoofing simulator.

Datasets are CSV files with one row per (sample, slot) and a JSON manifest;
detector bundles are a directory holding the formulas in the STL grammar, a JSON
file with centers, thresholds and normalisation, and the encoder parameters as a
flat float64 file with a JSON shape manifest; policies are torch state dicts
with a JSON sidecar.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.detect_learn import ClusterModel, DetectorBundle, FeatureScaler, GruAutoencoder
from src.errors import ArtifactLoaderError
from src.masked_ppo import PolicyNetwork, PpoResult
from src.signal_core import Trajectory
from src.stl_engine import format_formula, parse_formula

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ("sample_id", "k", "x", "y", "v")
FORMULAS_FILE = "formulas.txt"
BUNDLE_FILE = "bundle.json"
ENCODER_FILE = "encoder.bin"
ENCODER_SHAPES_FILE = "encoder_shapes.json"
CLUSTER_FILE = "cluster.json"


def _existing_file(filepath: Union[str, Path]) -> Path:
    """
    Resolve a file that must exist.

    Raises:
        ArtifactLoaderError: If the path is missing or not a regular file
    """
    path = Path(filepath)
    if not path.exists():
        raise ArtifactLoaderError(f"File not found: {filepath}")
    if not path.is_file():
        raise ArtifactLoaderError(f"Path is not a file: {filepath}")
    return path


def _read_json(filepath: Union[str, Path]) -> Dict[str, Any]:
    path = _existing_file(filepath)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactLoaderError(f"Failed to read JSON {filepath}: {e}")


def _write_json(filepath: Union[str, Path], data: Dict[str, Any]) -> Path:
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    return path


# --------------------------------------------------------------------------- datasets

def dataset_frame(trajectories: Sequence[Trajectory], labels: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Long-format frame: sample_id, k, x, y, v[, label][, pattern]."""
    if labels is not None and len(labels) != len(trajectories):
        raise ArtifactLoaderError("labels and trajectories differ in length")
    frames = []
    for index, trajectory in enumerate(trajectories):
        K = len(trajectory)
        frame = pd.DataFrame({
            "sample_id": np.full(K, trajectory.sample_id, dtype=int),
            "k": np.arange(K),
            "x": trajectory.states[:, 0],
            "y": trajectory.states[:, 1],
            "v": trajectory.states[:, 2],
        })
        if labels is not None:
            frame["label"] = int(labels[index])
        if trajectory.pattern:
            frame["pattern"] = trajectory.pattern
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=list(DATASET_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def write_dataset(filepath: Union[str, Path], trajectories: Sequence[Trajectory],
                  labels: Optional[Sequence[int]] = None) -> Path:
    """Write trajectories at full float precision."""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(trajectories, labels).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(trajectories)} trajectories to {path}")
    return path


def read_dataset(filepath: Union[str, Path]) -> Tuple[List[Trajectory], Optional[np.ndarray]]:
    """
    Load a dataset CSV.

    Args:
        filepath: CSV with columns sample_id, k, x, y, v and optionally label, pattern

    Returns:
        (trajectories in file order, labels or None)

    Raises:
        ArtifactLoaderError: Missing columns, NaN fields, or slots that are not 0..K-1

    Example:
        >>> trajectories, labels = read_dataset('out/dataset.csv')
        >>> trajectories[0].states.shape
        (67, 3)
    """
    path = _existing_file(filepath)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactLoaderError(f"Failed to read dataset {filepath}: {e}")

    missing = [c for c in DATASET_COLUMNS if c not in frame.columns]
    if missing:
        raise ArtifactLoaderError(f"Dataset {filepath} is missing columns {missing}")
    required = list(DATASET_COLUMNS) + (["label"] if "label" in frame.columns else [])
    if frame[required].isna().any().any():
        bad = frame[required].isna().any()
        raise ArtifactLoaderError(f"Dataset {filepath} has NaN fields in {list(bad[bad].index)}")

    trajectories, labels = [], []
    for sample_id, group in frame.groupby("sample_id", sort=False):
        group = group.sort_values("k")
        if not np.array_equal(group["k"].to_numpy(), np.arange(len(group))):
            raise ArtifactLoaderError(f"Sample {sample_id} in {filepath} does not have slots 0..K-1")
        pattern = str(group["pattern"].iloc[0]) if "pattern" in group.columns else None
        trajectories.append(Trajectory(group[["x", "y", "v"]].to_numpy(dtype=float), pattern=pattern,
                                       sample_id=int(sample_id)))
        if "label" in group.columns:
            labels.append(int(group["label"].iloc[0]))
    return trajectories, (np.asarray(labels, dtype=int) if "label" in frame.columns else None)


def write_manifest(filepath: Union[str, Path], seed: int, pattern_mix: Dict[str, float], n_samples: int,
                   trajectory_length: int, scenario_hash: str, created_by: str = "ris-spoof gen-data",
                   **extra) -> Path:
    manifest = {
        "seed": int(seed),
        "pattern_mix": dict(pattern_mix),
        "n_samples": int(n_samples),
        "K": int(trajectory_length),
        "scenario_hash": scenario_hash,
        "created_by": created_by,
    }
    manifest.update(extra)
    return _write_json(filepath, manifest)


def read_manifest(filepath: Union[str, Path]) -> Dict[str, Any]:
    manifest = _read_json(filepath)
    missing = [k for k in ("seed", "pattern_mix", "n_samples", "K", "scenario_hash") if k not in manifest]
    if missing:
        raise ArtifactLoaderError(f"Manifest {filepath} is missing {missing}")
    return manifest


# --------------------------------------------------------------------------- cluster model and bundle

def save_cluster_model(cluster_model: ClusterModel, directory: Union[str, Path]) -> Path:
    """Encoder as a flat float64 file with its shape manifest, the rest as JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = cluster_model.model.state_dict()
    shapes = [{"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()]
    flat = np.concatenate([tensor.detach().cpu().numpy().astype(np.float64).ravel() for tensor in state.values()])
    flat.tofile(directory / ENCODER_FILE)
    _write_json(directory / ENCODER_SHAPES_FILE, {
        "dtype": "float64",
        "n_features": cluster_model.model.n_features,
        "hidden_size": cluster_model.model.hidden_size,
        "latent_dim": cluster_model.model.latent_dim,
        "tensors": shapes,
    })
    _write_json(directory / CLUSTER_FILE, {
        "centers": cluster_model.centers.tolist(),
        "scaler": cluster_model.scaler.to_dict(),
        "assignments": cluster_model.assignments.tolist(),
        "train_latents": cluster_model.train_latents.tolist(),
        "indicator": cluster_model.indicator.tolist(),
    })
    return directory


def _load_encoder(directory: Path) -> GruAutoencoder:
    manifest = _read_json(directory / ENCODER_SHAPES_FILE)
    flat = np.fromfile(_existing_file(directory / ENCODER_FILE), dtype=np.float64)
    expected = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    if flat.size != expected:
        raise ArtifactLoaderError(f"Encoder file holds {flat.size} values, shape manifest expects {expected}")
    model = GruAutoencoder(manifest["n_features"], manifest["hidden_size"], manifest["latent_dim"])
    reference = model.state_dict()
    state, offset = {}, 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in reference or tuple(reference[name].shape) != shape:
            raise ArtifactLoaderError(f"Encoder tensor {name} {shape} does not match the architecture")
        size = int(np.prod(shape))
        state[name] = torch.as_tensor(flat[offset:offset + size].reshape(shape), dtype=reference[name].dtype)
        offset += size
    model.load_state_dict(state)
    model.eval()
    return model


def load_cluster_model(directory: Union[str, Path]) -> ClusterModel:
    """
    Load a cluster model written by save_cluster_model.

    Raises:
        ArtifactLoaderError: Missing files or an encoder that does not match its manifest
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ArtifactLoaderError(f"Model directory not found: {directory}")
    data = _read_json(directory / CLUSTER_FILE)
    try:
        return ClusterModel(
            model=_load_encoder(directory),
            scaler=FeatureScaler.from_dict(data["scaler"]),
            indicator=np.asarray(data["indicator"], dtype=float),
            centers=np.asarray(data["centers"], dtype=float),
            assignments=np.asarray(data["assignments"], dtype=int),
            train_latents=np.asarray(data["train_latents"], dtype=float),
        )
    except KeyError as e:
        raise ArtifactLoaderError(f"Cluster model in {directory} is missing {e}")


def save_bundle(bundle: DetectorBundle, directory: Union[str, Path]) -> Path:
    """Cluster model, formulas in the STL grammar (one per line) and thresholds."""
    directory = save_cluster_model(bundle.cluster_model, directory)
    (directory / FORMULAS_FILE).write_text(
        "".join(format_formula(phi) + "\n" for phi in bundle.formulas), encoding="utf-8")
    _write_json(directory / BUNDLE_FILE, {
        "thresholds": bundle.thresholds.tolist(),
        "metadata": bundle.metadata,
    })
    logger.info(f"Saved detector bundle with {len(bundle.formulas)} formulas to {directory}")
    return directory


def load_bundle(directory: Union[str, Path]) -> DetectorBundle:
    """
    Load a bundle written by save_bundle.

    Raises:
        ArtifactLoaderError: Missing files, unparsable formulas or inconsistent shapes
    """
    directory = Path(directory)
    cluster_model = load_cluster_model(directory)
    data = _read_json(directory / BUNDLE_FILE)
    lines = _existing_file(directory / FORMULAS_FILE).read_text(encoding="utf-8").splitlines()
    try:
        formulas = [parse_formula(line) for line in lines if line.strip()]
    except Exception as e:
        raise ArtifactLoaderError(f"Failed to parse formulas in {directory / FORMULAS_FILE}: {e}")
    try:
        return DetectorBundle(cluster_model=cluster_model, formulas=formulas,
                              thresholds=np.asarray(data["thresholds"], dtype=float),
                              metadata=data.get("metadata", {}))
    except Exception as e:
        raise ArtifactLoaderError(f"Inconsistent bundle in {directory}: {e}")


# --------------------------------------------------------------------------- policies

def save_policy(result: PpoResult, filepath: Union[str, Path]) -> Path:
    """State dict via torch.save plus a JSON sidecar with the network layout."""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(result.policy.state_dict(), path)
    _write_json(path.with_suffix(".json"), {
        **result.metadata,
        "n_features": result.policy.n_features,
        "n_actions": result.policy.n_actions,
    })
    logger.info(f"Saved {result.variant} policy to {path}")
    return path


def load_policy(filepath: Union[str, Path]) -> Tuple[PolicyNetwork, Dict[str, Any]]:
    """
    Load a policy saved by save_policy.

    Raises:
        ArtifactLoaderError: If the weights or the sidecar are missing or do not match
    """
    path = _existing_file(filepath)
    metadata = _read_json(path.with_suffix(".json"))
    try:
        policy = PolicyNetwork(metadata["n_features"], metadata["n_actions"], metadata["hidden_width"])
        policy.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except (KeyError, RuntimeError, OSError) as e:
        raise ArtifactLoaderError(f"Failed to load policy {filepath}: {e}")
    policy.eval()
    return policy, metadata
