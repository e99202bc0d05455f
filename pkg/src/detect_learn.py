"""
Defender side: one-class clustering of clean trajectories, per-cluster STL
formula learning, and the two detectors (STL robustness and latent distance).

Clustering follows the joint autoencoder / spectral relaxation scheme: a GRU
autoencoder is trained on reconstruction plus a cluster loss
Tr(H^T H) - Tr(F^T H^T H F), the orthonormal indicator F being refreshed from
the top singular vectors of the latent matrix H every few iterations. K-means on
the rows of F gives the clusters.

Formula learning uses a fixed predicate -> temporal -> Boolean network whose
selectors are drawn by maximum likelihood with straight-through gradients.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.cluster import KMeans
from torch import nn

from src.errors import InvalidInputError, NumericalFailure
from src.signal_core import Trajectory, derive_seed, substream
from src.stl_engine import (Always, Eventually, Formula, Predicate, boolean_unit, conjunction,
                            disjunction, misclassification_rate, predicates, robustness,
                            temporal_unit)

logger = logging.getLogger(__name__)

MIN_FEATURE_SCALE = 1.0     # m and m/s
KMEANS_RESEEDS = 10
LOSS_RETRIES = 3
TASK_EXPONENT_CAP = 30.0


def stack_states(trajectories: Sequence) -> np.ndarray:
    """(N, K, 3) array from trajectories or arrays of a common length."""
    if len(trajectories) == 0:
        raise InvalidInputError("empty trajectory set")
    arrays = [t.states if isinstance(t, Trajectory) else np.asarray(t, dtype=float) for t in trajectories]
    lengths = {a.shape for a in arrays}
    if len(lengths) != 1:
        raise InvalidInputError(f"trajectories must share one shape, got {sorted(lengths)}")
    states = np.stack(arrays).astype(float)
    if states.ndim != 3 or states.shape[2] != 3:
        raise InvalidInputError(f"expected (N, K, 3) states, got {states.shape}")
    if not np.all(np.isfinite(states)):
        raise InvalidInputError("trajectories contain non-finite values")
    return states


def encoder_features(states: np.ndarray) -> np.ndarray:
    """Road progress x - x_0 in place of x, so clusters do not depend on the start position."""
    features = np.array(states, dtype=float, copy=True)
    features[..., 0] -= features[..., :1, 0]
    return features


@dataclass
class FeatureScaler:
    """Per-feature z-scoring over every sample and slot."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureScaler":
        flat = features.reshape(-1, features.shape[-1])
        return cls(mean=flat.mean(axis=0), std=np.maximum(flat.std(axis=0), MIN_FEATURE_SCALE))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureScaler":
        return cls(mean=np.asarray(data["mean"], dtype=float), std=np.asarray(data["std"], dtype=float))


# --------------------------------------------------------------------------- clustering

class GruAutoencoder(nn.Module):
    """
    Bidirectional GRU encoder to an m-dimensional latent, GRU decoder back to (K, 3).

    The latent reads the time-averaged encoder outputs together with both final
    states, so the whole sequence shapes it and not only its end.
    """

    def __init__(self, n_features: int = 3, hidden_size: int = 64, latent_dim: int = 16):
        super().__init__()
        self.n_features = n_features
        self.hidden_size = hidden_size
        self.latent_dim = latent_dim
        self.encoder = nn.GRU(n_features, hidden_size, batch_first=True, bidirectional=True)
        self.to_latent = nn.Linear(4 * hidden_size, latent_dim)
        self.decoder = nn.GRU(latent_dim, hidden_size, batch_first=True)
        self.output = nn.Linear(hidden_size, n_features)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        outputs, final = self.encoder(x)
        pooled = outputs.mean(dim=1)
        return self.to_latent(torch.cat([pooled, final[0], final[1]], dim=-1))

    def decode(self, latent: torch.Tensor, length: int) -> torch.Tensor:
        repeated = latent.unsqueeze(1).expand(-1, length, -1)
        outputs, _ = self.decoder(repeated)
        return self.output(outputs)

    def forward(self, x: torch.Tensor):
        latent = self.encode(x)
        return latent, self.decode(latent, x.shape[1])


def cluster_loss(H: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
    """Tr(H^T H) - Tr(F^T H^T H F) for H of shape (m, D) and F of shape (D, P)."""
    projected = H @ F
    return (H * H).sum() - (projected * projected).sum()


def dtcr_losses(batch: torch.Tensor, model: GruAutoencoder, F_batch: torch.Tensor, lambda0: float):
    """
    Reconstruction, cluster and joint losses of one mini-batch.

    Args:
        batch: (B, K, d) scaled trajectories
        model: Autoencoder
        F_batch: (B, P) rows of the indicator matrix belonging to the batch
        lambda0: Cluster-loss weight

    Returns:
        (L_re, L_cl, L_joint) tensors
    """
    if batch.shape[0] == 0:
        raise InvalidInputError("empty batch")
    latent, reconstruction = model(batch)
    loss_re = torch.mean((reconstruction - batch) ** 2)
    loss_cl = cluster_loss(latent.T, F_batch.to(latent.dtype))
    return loss_re, loss_cl, loss_re + lambda0 * loss_cl


def indicator_update(H: np.ndarray, n_clusters: int) -> Tuple[np.ndarray, bool]:
    """
    Relaxed cluster indicator: the top-P right singular vectors of H.

    Args:
        H: (m, D) latent matrix, one column per sample
        n_clusters: P

    Returns:
        (F, rank_deficient) with F of shape (D, P) and F^T F = I. When rank(H) < P
        the trailing columns are an arbitrary orthonormal completion.

    Raises:
        InvalidInputError: If D < P
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise InvalidInputError(f"latent matrix must be 2-D, got shape {H.shape}")
    D = H.shape[1]
    if D < n_clusters:
        raise InvalidInputError(f"{D} samples cannot form {n_clusters} clusters")
    _, singular, vt = np.linalg.svd(H, full_matrices=True)
    F = vt[:n_clusters].T.copy()
    # fix each column's sign so repeated updates are reproducible
    for j in range(n_clusters):
        pivot = int(np.argmax(np.abs(F[:, j])))
        if F[pivot, j] < 0:
            F[:, j] = -F[:, j]
    tolerance = singular.max(initial=0.0) * max(H.shape) * np.finfo(float).eps
    rank = int(np.sum(singular > tolerance))
    deficient = rank < n_clusters
    if deficient:
        logger.warning(f"latent matrix has rank {rank} < {n_clusters}; indicator padded with an orthonormal completion")
    return F, deficient


@dataclass
class PseudoLabeledSet:
    """One-vs-rest dataset of one cluster: label 1 in-class, 0 otherwise."""
    cluster: int
    trajectories: List[Trajectory]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_in_class(self) -> int:
        return int(np.sum(self.labels))


@dataclass
class ClusterModel:
    """Trained autoencoder with its scaler, indicator matrix and latent centers."""
    model: GruAutoencoder
    scaler: FeatureScaler
    indicator: np.ndarray
    centers: np.ndarray
    assignments: np.ndarray
    train_latents: np.ndarray
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    def encode(self, trajectories: Sequence) -> np.ndarray:
        """(N, m) latent codes."""
        features = self.scaler.transform(encoder_features(stack_states(trajectories)))
        self.model.eval()
        with torch.no_grad():
            latent = self.model.encode(torch.as_tensor(features, dtype=torch.float32))
        return latent.numpy().astype(float)

    def distances(self, latents: np.ndarray) -> np.ndarray:
        """(N, P) Euclidean distances of latents to every center."""
        return np.linalg.norm(latents[:, None, :] - self.centers[None, :, :], axis=-1)

    def assign(self, trajectories: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest center and its distance for every trajectory."""
        distances = self.distances(self.encode(trajectories))
        nearest = np.argmin(distances, axis=1)
        return nearest, distances[np.arange(len(nearest)), nearest]


def _encode_tensor(model: GruAutoencoder, data: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return model.encode(data).numpy().astype(float)


def _kmeans_rows(F: np.ndarray, n_clusters: int, restarts: int, seed: int) -> np.ndarray:
    for attempt in range(KMEANS_RESEEDS):
        kmeans = KMeans(n_clusters=n_clusters, n_init=restarts, tol=1e-6,
                        random_state=derive_seed(seed, "kmeans", attempt))
        labels = kmeans.fit_predict(F)
        sizes = np.bincount(labels, minlength=n_clusters)
        if np.all(sizes > 0):
            return labels
        logger.warning(f"K-means left an empty cluster (sizes {sizes.tolist()}); re-seeding (attempt {attempt + 1})")
    logger.error(f"K-means produced an empty cluster after {KMEANS_RESEEDS} seeds")
    raise NumericalFailure(f"K-means could not fill all {n_clusters} clusters")


def dtcr_train(trajectories: Sequence[Trajectory], n_clusters: int, settings, seed: int = 0,
               iterations: Optional[int] = None, lambda0: Optional[float] = None
               ) -> Tuple[ClusterModel, List[PseudoLabeledSet]]:
    """
    Cluster a one-class dataset and build the one-vs-rest pseudo-labeled sets.

    Each iteration runs one pass of mini-batch updates of the autoencoder on the
    joint loss with F fixed; every indicator_interval iterations F is recomputed
    from the latents. K-means on the rows of the final F assigns the clusters.

    Args:
        trajectories: Clean training trajectories of one length
        n_clusters: P
        settings: DtcrSettings
        seed: Root seed
        iterations: Override of settings.iterations
        lambda0: Override of settings.lambda0

    Returns:
        (ClusterModel, [D_1, ..., D_P])

    Raises:
        InvalidInputError: Fewer trajectories than clusters
        NumericalFailure: Non-finite loss, or K-means leaving a cluster empty
    """
    trajectories = list(trajectories)
    if len(trajectories) < n_clusters:
        raise InvalidInputError(f"{len(trajectories)} trajectories cannot form {n_clusters} clusters")
    iterations = settings.iterations if iterations is None else iterations
    lambda0 = settings.lambda0 if lambda0 is None else lambda0

    features = encoder_features(stack_states(trajectories))
    scaler = FeatureScaler.fit(features)
    data = torch.as_tensor(scaler.transform(features), dtype=torch.float32)
    D = data.shape[0]

    torch_seed = derive_seed(seed, "dtcr")
    torch.manual_seed(torch_seed)
    generator = torch.Generator().manual_seed(torch_seed)
    model = GruAutoencoder(data.shape[2], settings.hidden_size, settings.latent_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.learning_rate)

    F, _ = indicator_update(_encode_tensor(model, data).T, n_clusters)
    history = []
    for iteration in range(1, iterations + 1):
        model.train()
        indicator = torch.as_tensor(F, dtype=torch.float32)
        order = torch.randperm(D, generator=generator)
        totals = np.zeros(3)
        for start in range(0, D, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            loss_re, loss_cl, loss = dtcr_losses(data[idx], model, indicator[idx], lambda0)
            if not torch.isfinite(loss):
                logger.error(f"clustering loss became non-finite at iteration {iteration}")
                raise NumericalFailure("clustering loss diverged")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            totals += len(idx) * np.array([float(loss_re), float(loss_cl), float(loss)])
        totals /= D

        updated = iteration % settings.indicator_interval == 0
        if updated:
            F, _ = indicator_update(_encode_tensor(model, data).T, n_clusters)
            logger.info(f"clustering iteration {iteration}/{iterations}: reconstruction {totals[0]:.5f}, "
                        f"cluster {totals[1]:.5f}")
        history.append({"iteration": iteration, "reconstruction": totals[0], "cluster": totals[1],
                        "joint": totals[2], "indicator_updated": updated})

    model.eval()
    latents = _encode_tensor(model, data)
    F, _ = indicator_update(latents.T, n_clusters)
    assignments = _kmeans_rows(F, n_clusters, settings.kmeans_restarts, seed)
    centers = np.stack([latents[assignments == p].mean(axis=0) for p in range(n_clusters)])
    logger.info(f"clustered {D} trajectories into sizes {np.bincount(assignments, minlength=n_clusters).tolist()}")

    cluster_model = ClusterModel(model=model, scaler=scaler, indicator=F, centers=centers,
                                 assignments=assignments, train_latents=latents, history=history)
    return cluster_model, pseudo_labeled_sets(cluster_model, trajectories)


def pseudo_labeled_sets(cluster_model: ClusterModel, trajectories: Sequence[Trajectory]) -> List[PseudoLabeledSet]:
    """One-vs-rest sets: label 1 for members of cluster p, 0 for everyone else."""
    return [PseudoLabeledSet(cluster=p, trajectories=list(trajectories),
                             labels=(cluster_model.assignments == p).astype(int))
            for p in range(cluster_model.n_clusters)]


def cluster_purity(assignments: Sequence[int], truth: Sequence) -> float:
    """Fraction of samples carrying their cluster's majority ground-truth label."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    if assignments.size == 0 or assignments.shape != truth.shape:
        raise InvalidInputError("purity needs equally sized, non-empty label arrays")
    agreeing = 0
    for cluster in np.unique(assignments):
        _, counts = np.unique(truth[assignments == cluster], return_counts=True)
        agreeing += int(counts.max())
    return agreeing / assignments.size


# --------------------------------------------------------------------------- formula learning

class TlinetModel(nn.Module):
    """
    Predicate layer -> temporal layer -> one Boolean unit, evaluated at slot 0.

    Predicate i reads a_i^T z - b_i on z-scored (x, y, v); temporal unit i wraps
    predicate i with window [k1_i, k2_i] and selector p_rho_i (1 = eventually);
    the Boolean unit takes p_kappa (1 = disjunction) and inclusion selectors p_w.
    """

    def __init__(self, scaler: FeatureScaler, length: int, n_predicates: int = 4, eta: float = 0.1,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        if length < 1:
            raise InvalidInputError(f"trajectory length must be positive, got {length}")
        self.scaler = scaler
        self.length = length
        self.eta = eta
        rng = substream(seed, "tlinet_init")

        directions = rng.normal(size=(n_predicates, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        span = length - 1
        starts = np.floor(rng.uniform(0.0, 0.6, size=n_predicates) * span)
        stops = np.minimum(span, starts + np.floor(0.3 * span))

        self.a = nn.Parameter(torch.tensor(directions, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(n_predicates, dtype=dtype))
        self.windows = nn.Parameter(torch.tensor(np.column_stack([starts, stops]), dtype=dtype))
        self.p_rho = nn.Parameter(torch.tensor(rng.uniform(0.3, 0.7, size=n_predicates), dtype=dtype))
        self.p_kappa = nn.Parameter(torch.tensor(0.3, dtype=dtype))
        self.p_w = nn.Parameter(torch.full((n_predicates,), 0.8, dtype=dtype))

    @property
    def n_predicates(self) -> int:
        return self.a.shape[0]

    def scale(self, trajectories: Sequence) -> torch.Tensor:
        states = stack_states(trajectories)
        if states.shape[1] != self.length:
            raise InvalidInputError(f"model expects length {self.length}, got {states.shape[1]}")
        return torch.as_tensor(self.scaler.transform(states), dtype=self.a.dtype)

    def forward(self, states: torch.Tensor, beta: float, mode: str = "straight_through") -> torch.Tensor:
        """Smooth robustness at slot 0 for (B, K, 3) scaled states."""
        traces = torch.einsum("bkd,pd->bpk", states, self.a) - self.b[None, :, None]
        temporal = torch.stack([
            temporal_unit(traces[:, i, :], self.windows[i, 0], self.windows[i, 1], self.eta, beta,
                          self.p_rho[i], k=0, mode=mode)
            for i in range(self.n_predicates)], dim=-1)
        return boolean_unit(temporal, beta, self.p_kappa, self.p_w, mode)

    def clamp_(self):
        """Project selectors onto [0, 1] and windows onto 0 <= k1 <= k2 <= K - 1."""
        with torch.no_grad():
            for p in (self.p_rho, self.p_kappa, self.p_w):
                p.clamp_(0.0, 1.0)
            self.windows[:, 0].clamp_(0.0, self.length - 1)
            self.windows[:, 1].copy_(torch.maximum(self.windows[:, 1], self.windows[:, 0]).clamp(max=self.length - 1))

    def active(self) -> List[int]:
        """Predicates the Boolean unit includes; never empty."""
        included = [i for i in range(self.n_predicates) if float(self.p_w[i]) >= 0.5]
        return included or [int(torch.argmax(self.p_w.detach()))]

    def extract(self) -> Formula:
        """Discrete formula in raw units by maximum-likelihood draw and rounded windows."""
        mean, std = self.scaler.mean, self.scaler.std
        children = []
        for i in self.active():
            a = self.a[i].detach().numpy()
            b = float(self.b[i])
            predicate = Predicate(tuple(a / std), b + float(np.sum(a * mean / std)))
            k1, k2 = (int(round(float(w))) for w in self.windows[i])
            k1 = min(max(k1, 0), self.length - 1)
            k2 = min(max(k2, k1), self.length - 1)
            temporal = Eventually if float(self.p_rho[i]) >= 0.5 else Always
            children.append(temporal(k1, k2, predicate))
        if float(self.p_kappa) >= 0.5:
            return disjunction(*children)
        return conjunction(*children)


def task_labels(labels: np.ndarray, convention: str = "signed") -> np.ndarray:
    """Per-sample c in exp(-c r): +-1 ('signed') or the raw 0/1 label ('literal')."""
    labels = np.asarray(labels, dtype=float)
    if convention == "signed":
        return 2.0 * labels - 1.0
    if convention == "literal":
        return labels
    raise InvalidInputError(f"label convention must be 'signed' or 'literal', got {convention!r}")


def tlinet_loss(model: TlinetModel, states: torch.Tensor, signs: torch.Tensor, sample_weights: torch.Tensor,
                lambdas: Tuple[float, float, float], beta: float) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L_task + l1 L_s + l2 L_avm + l3 L_kavm."""
    r = model(states, beta)
    exponent = torch.clamp(-signs * r, max=TASK_EXPONENT_CAP)
    loss_task = torch.sum(sample_weights * torch.exp(exponent))
    loss_s = model.a.abs().sum()
    loss_avm = torch.sum(model.p_w * (1 - model.p_w))
    loss_kavm = model.p_kappa * (1 - model.p_kappa) + torch.sum(model.p_rho * (1 - model.p_rho))
    l1, l2, l3 = lambdas
    total = loss_task + l1 * loss_s + l2 * loss_avm + l3 * loss_kavm
    return total, {"task": float(loss_task), "sparsity": float(loss_s), "selection": float(loss_avm),
                   "operator": float(loss_kavm)}


def _balanced_weights(labels: np.ndarray) -> np.ndarray:
    """Each class carries half the task loss."""
    weights = np.zeros(len(labels))
    for value in (0, 1):
        members = labels == value
        if np.any(members):
            weights[members] = 1.0 / np.sum(members)
    return weights / weights.sum()


@dataclass
class TlinetResult:
    cluster: int
    formula: Formula
    model: TlinetModel
    train_misclassification: float
    val_misclassification: float
    active_predicates: int
    history: List[Dict[str, float]] = field(default_factory=list)


def _split(n: int, fraction: float, seed: int, cluster: int) -> Tuple[np.ndarray, np.ndarray]:
    order = substream(seed, "tlinet", cluster).permutation(n)
    n_val = int(round(fraction * n))
    if n - n_val < 1:
        n_val = n - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def tlinet_train(dataset: PseudoLabeledSet, settings, lambdas: Optional[Tuple[float, float, float]] = None,
                 seed: int = 0, epochs: Optional[int] = None, scaler: Optional[FeatureScaler] = None
                 ) -> TlinetResult:
    """
    Learn the formula of one cluster from its pseudo-labeled set.

    Full-batch Adam on the composite loss; selectors and windows are projected
    back onto their domains after every step. A non-finite loss restores the
    previous parameters and halves the learning rate, at most three times.

    Args:
        dataset: One-vs-rest set D_p
        settings: TlinetSettings
        lambdas: (lambda1, lambda2, lambda3); defaults to the cluster's configured row
        seed: Root seed
        epochs: Override of settings.epochs
        scaler: Input normalisation; fitted on the dataset when omitted

    Returns:
        TlinetResult with the extracted formula and its train/validation misclassification

    Raises:
        NumericalFailure: If the loss stays non-finite after the retries
    """
    if len(dataset) < 2:
        raise InvalidInputError("formula learning needs at least two trajectories")
    lambdas = settings.lambdas_for(dataset.cluster) if lambdas is None else lambdas
    epochs = settings.epochs if epochs is None else epochs
    labels = np.asarray(dataset.labels, dtype=int)
    states = stack_states(dataset.trajectories)
    scaler = scaler or FeatureScaler.fit(states)

    train_idx, val_idx = _split(len(dataset), settings.validation_fraction, seed, dataset.cluster)
    torch.manual_seed(derive_seed(seed, "tlinet", dataset.cluster))
    model = TlinetModel(scaler, states.shape[1], settings.n_predicates, settings.eta,
                        seed=derive_seed(seed, "tlinet", dataset.cluster))
    x_train = torch.as_tensor(scaler.transform(states[train_idx]), dtype=torch.float64)
    signs = torch.as_tensor(task_labels(labels[train_idx], settings.label_convention), dtype=torch.float64)
    weights = torch.as_tensor(_balanced_weights(labels[train_idx]), dtype=torch.float64)

    learning_rate = settings.learning_rate
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    retries = 0
    history = []
    epoch = 0
    while epoch < epochs:
        snapshot = copy.deepcopy(model.state_dict())
        loss, parts = tlinet_loss(model, x_train, signs, weights, lambdas, settings.beta)
        finite = bool(torch.isfinite(loss))
        if finite:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.clamp_()
            finite = all(bool(torch.all(torch.isfinite(p))) for p in model.parameters())
        if not finite:
            if retries >= LOSS_RETRIES:
                logger.error(f"formula loss of cluster {dataset.cluster} non-finite after {retries} retries")
                raise NumericalFailure(f"formula learning diverged for cluster {dataset.cluster}")
            retries += 1
            learning_rate /= 2
            model.load_state_dict(snapshot)
            optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
            logger.warning(f"non-finite formula loss for cluster {dataset.cluster}; "
                           f"learning rate halved to {learning_rate:g}")
            continue
        history.append({"epoch": epoch, "loss": float(loss), **parts})
        if (epoch + 1) % 50 == 0:
            logger.info(f"formula cluster {dataset.cluster} epoch {epoch + 1}/{epochs}: loss {float(loss):.4f}")
        epoch += 1

    formula = model.extract()
    trajectories = dataset.trajectories
    train_error = misclassification_rate([trajectories[i] for i in train_idx], labels[train_idx], formula)
    val_error = (misclassification_rate([trajectories[i] for i in val_idx], labels[val_idx], formula)
                 if len(val_idx) else math.nan)
    logger.info(f"cluster {dataset.cluster}: train misclassification {train_error:.3f}, "
                f"validation {val_error:.3f}, {len(predicates(formula))} active predicates")
    return TlinetResult(cluster=dataset.cluster, formula=formula, model=model,
                        train_misclassification=train_error, val_misclassification=val_error,
                        active_predicates=len(predicates(formula)), history=history)


# --------------------------------------------------------------------------- detection

@dataclass
class DetectorBundle:
    """Cluster model, one formula per cluster and one distance threshold per cluster."""
    cluster_model: ClusterModel
    formulas: List[Formula]
    thresholds: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        P = self.cluster_model.n_clusters
        if len(self.formulas) != P or self.thresholds.shape != (P,):
            raise InvalidInputError(
                f"bundle needs {P} formulas and thresholds, got {len(self.formulas)} and {self.thresholds.shape}")


@dataclass(frozen=True)
class Detection:
    spoofed: bool
    cluster: int
    robustness: float


def detect(trajectory, bundle: DetectorBundle) -> Detection:
    """
    STL detector: nearest cluster by latent distance, then the robustness of that
    cluster's formula at slot 0. Negative robustness means spoofed; zero is clean.
    """
    nearest, _ = bundle.cluster_model.assign([trajectory])
    cluster = int(nearest[0])
    r0 = robustness(trajectory, bundle.formulas[cluster], 0)
    return Detection(spoofed=r0 < 0, cluster=cluster, robustness=r0)


def detect_many(trajectories: Sequence, bundle: DetectorBundle) -> List[Detection]:
    nearest, _ = bundle.cluster_model.assign(trajectories)
    results = []
    for trajectory, cluster in zip(trajectories, nearest):
        r0 = robustness(trajectory, bundle.formulas[int(cluster)], 0)
        results.append(Detection(spoofed=r0 < 0, cluster=int(cluster), robustness=r0))
    return results


def benchmark_thresholds(cluster_model: ClusterModel, percentile: float = 95.0) -> np.ndarray:
    """Per-cluster distance threshold: a percentile of the members' distances to their center."""
    if not 0 < percentile <= 100:
        raise InvalidInputError(f"percentile must lie in (0, 100], got {percentile}")
    distances = cluster_model.distances(cluster_model.train_latents)
    thresholds = np.zeros(cluster_model.n_clusters)
    for p in range(cluster_model.n_clusters):
        members = cluster_model.assignments == p
        if np.any(members):
            thresholds[p] = np.percentile(distances[members, p], percentile)
    return thresholds


def benchmark_detect(trajectories: Sequence, cluster_model: ClusterModel, thresholds: np.ndarray) -> np.ndarray:
    """Spoofed iff the distance to the nearest center exceeds that cluster's threshold."""
    nearest, distance = cluster_model.assign(trajectories)
    return distance > np.asarray(thresholds, dtype=float)[nearest]


def train_detector(trajectories: Sequence[Trajectory], detection_settings, seed: int = 0,
                   dtcr_iterations: Optional[int] = None, tlinet_epochs: Optional[int] = None,
                   cluster_model: Optional[ClusterModel] = None, metadata: Optional[dict] = None
                   ) -> Tuple[DetectorBundle, List[TlinetResult]]:
    """
    Cluster, learn one formula per cluster, and calibrate the distance benchmark.

    A cluster_model trained earlier on the same trajectories skips the clustering step.
    """
    if cluster_model is None:
        cluster_model, datasets = dtcr_train(trajectories, detection_settings.n_clusters, detection_settings.dtcr,
                                             seed=seed, iterations=dtcr_iterations)
    else:
        if len(cluster_model.assignments) != len(trajectories):
            raise InvalidInputError(f"cluster model holds {len(cluster_model.assignments)} assignments "
                                    f"for {len(trajectories)} trajectories")
        datasets = pseudo_labeled_sets(cluster_model, trajectories)
    scaler = FeatureScaler.fit(stack_states(trajectories))
    results = [tlinet_train(d, detection_settings.tlinet, seed=seed, epochs=tlinet_epochs, scaler=scaler)
               for d in datasets]
    thresholds = benchmark_thresholds(cluster_model, detection_settings.benchmark_percentile)
    bundle = DetectorBundle(cluster_model=cluster_model, formulas=[r.formula for r in results],
                            thresholds=thresholds, metadata={"seed": seed, **(metadata or {})})
    return bundle, results
