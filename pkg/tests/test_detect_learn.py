#!/usr/bin/env python3
"""
Tests for the defender: cluster loss and indicator updates, pseudo-labeled sets,
the formula-learning network and both detectors.
"""

import numpy as np
import pytest
import torch

from config.env_config import DetectionSettings, DtcrSettings, TlinetSettings
from src.attack_planner import PATTERNS, gen_ground_truth
from src.detect_learn import (
    ClusterModel,
    DetectorBundle,
    FeatureScaler,
    GruAutoencoder,
    PseudoLabeledSet,
    TlinetModel,
    benchmark_detect,
    benchmark_thresholds,
    cluster_loss,
    cluster_purity,
    detect,
    detect_many,
    dtcr_losses,
    dtcr_train,
    encoder_features,
    indicator_update,
    pseudo_labeled_sets,
    stack_states,
    task_labels,
    tlinet_train,
    train_detector,
)
from src.errors import InvalidInputError
from src.signal_core import Trajectory, substream
from src.stl_engine import Predicate, robustness

SMALL_DTCR = DtcrSettings(iterations=2, indicator_interval=1, batch_size=8, hidden_size=16, latent_dim=4,
                          kmeans_restarts=3)
SMALL_TLINET = TlinetSettings(epochs=20, validation_fraction=0.25)


def lane_trajectory(y, x0=0.0, length=6):
    k = np.arange(length)
    return Trajectory(np.column_stack([x0 + 0.125 * k, np.full(length, y), np.full(length, 12.5)]))


def mixed_trajectories(count, length=20, seed=1):
    return [gen_ground_truth(PATTERNS[i % 3], length, rng=substream(seed, "test", i), sample_id=i)
            for i in range(count)]


class TestClusterLoss:
    """Spectral relaxation of K-means"""

    @pytest.fixture(scope="class")
    def latent_matrix(self):
        return np.random.default_rng(0).normal(size=(5, 12))

    def test_loss_equals_discarded_spectrum(self, latent_matrix):
        F, deficient = indicator_update(latent_matrix, 3)
        singular = np.linalg.svd(latent_matrix, compute_uv=False)
        loss = cluster_loss(torch.as_tensor(latent_matrix), torch.as_tensor(F))
        assert float(loss) == pytest.approx(np.sum(singular[3:] ** 2))
        assert not deficient

    def test_indicator_is_orthonormal(self, latent_matrix):
        F, _ = indicator_update(latent_matrix, 4)
        np.testing.assert_allclose(F.T @ F, np.eye(4), atol=1e-10)

    def test_one_cluster_per_sample_has_zero_loss(self):
        H = np.random.default_rng(1).normal(size=(4, 4))
        F, _ = indicator_update(H, 4)
        assert float(cluster_loss(torch.as_tensor(H), torch.as_tensor(F))) == pytest.approx(0.0, abs=1e-10)

    def test_rank_deficiency_flagged(self):
        H = np.outer(np.ones(3), np.arange(1.0, 7.0))
        F, deficient = indicator_update(H, 3)
        assert deficient
        np.testing.assert_allclose(F.T @ F, np.eye(3), atol=1e-10)

    def test_too_few_samples(self):
        with pytest.raises(InvalidInputError):
            indicator_update(np.ones((3, 2)), 3)

    def test_joint_loss_weights_cluster_term(self):
        torch.manual_seed(3)
        model = GruAutoencoder(3, 8, 4)
        batch = torch.randn(5, 6, 3)
        F, _ = indicator_update(np.random.default_rng(2).normal(size=(4, 5)), 2)
        loss_re, loss_cl, joint = dtcr_losses(batch, model, torch.as_tensor(F), 0.5)
        assert float(joint) == pytest.approx(float(loss_re) + 0.5 * float(loss_cl), rel=1e-5)
        assert float(loss_cl) >= -1e-5
        plain_re, _, plain = dtcr_losses(batch, model, torch.as_tensor(F), 0.0)
        assert float(plain) == pytest.approx(float(plain_re))

    def test_empty_batch(self):
        with pytest.raises(InvalidInputError):
            dtcr_losses(torch.zeros((0, 6, 3)), GruAutoencoder(3, 8, 4), torch.zeros((0, 2)), 1.0)


class TestDatasets:
    """Stacking, scaling and pseudo labels"""

    def test_stack_requires_common_length(self):
        with pytest.raises(InvalidInputError):
            stack_states([lane_trajectory(18.0, length=5), lane_trajectory(18.0, length=6)])
        with pytest.raises(InvalidInputError):
            stack_states([])

    def test_encoder_features_drop_start_position(self):
        features = encoder_features(stack_states([lane_trajectory(18.0, x0=-7.0)]))
        assert features[0, 0, 0] == 0.0
        assert features[0, -1, 0] == 0.625

    def test_scaler_floor(self):
        scaler = FeatureScaler.fit(stack_states([lane_trajectory(18.0), lane_trajectory(18.0)]))
        assert np.all(scaler.std >= 1.0)
        restored = FeatureScaler.from_dict(scaler.to_dict())
        np.testing.assert_array_equal(restored.mean, scaler.mean)

    def test_one_vs_rest_sets(self):
        model = ClusterModel(model=None, scaler=None, indicator=np.eye(5, 3), centers=np.zeros((3, 2)),
                             assignments=np.array([0, 1, 2, 1, 1]), train_latents=np.zeros((5, 2)))
        trajectories = [lane_trajectory(18.0 + i) for i in range(5)]
        sets = pseudo_labeled_sets(model, trajectories)
        assert [s.cluster for s in sets] == [0, 1, 2]
        assert [s.n_in_class for s in sets] == [1, 3, 1]
        assert all(len(s) == 5 for s in sets)
        assert sets[1].labels.tolist() == [0, 1, 0, 1, 1]

    def test_purity(self):
        assert cluster_purity([0, 0, 1, 1], ["a", "a", "a", "b"]) == pytest.approx(0.75)
        with pytest.raises(InvalidInputError):
            cluster_purity([0, 1], ["a"])

    @pytest.mark.parametrize("convention, expected", [("signed", [-1.0, 1.0]), ("literal", [0.0, 1.0])])
    def test_task_labels(self, convention, expected):
        assert task_labels(np.array([0, 1]), convention).tolist() == expected

    def test_unknown_label_convention(self):
        with pytest.raises(InvalidInputError):
            task_labels(np.array([0, 1]), "boolean")


class TestTlinetModel:
    """Predicate -> temporal -> Boolean network"""

    @pytest.fixture
    def model(self):
        scaler = FeatureScaler(mean=np.array([1.0, 2.0, 3.0]), std=np.array([2.0, 2.0, 2.0]))
        model = TlinetModel(scaler, length=6, n_predicates=2, eta=0.1)
        with torch.no_grad():
            model.a.copy_(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64))
            model.b.copy_(torch.tensor([0.5, -0.2], dtype=torch.float64))
            model.windows.copy_(torch.tensor([[0.0, 2.0], [1.0, 3.0]], dtype=torch.float64))
            model.p_rho.copy_(torch.tensor([1.0, 0.0], dtype=torch.float64))
            model.p_kappa.fill_(0.0)
            model.p_w.fill_(1.0)
        return model

    @pytest.fixture
    def trajectory(self):
        return Trajectory(np.column_stack([np.arange(6.0), [3.0, 1.0, 2.0, 5.0, 4.0, 0.0], np.full(6, 10.0)]))

    def test_extracted_formula_in_raw_units(self, model):
        formula = model.extract()
        first, second = formula.children
        assert first.k1 == 0 and first.k2 == 2
        assert first.child == Predicate((0.5, 0.0, 0.0), 1.0)
        assert (second.k1, second.k2) == (1, 3)

    def test_forward_matches_extracted_formula(self, model, trajectory):
        smooth = model(model.scale([trajectory]), beta=1000.0)
        assert float(smooth[0]) == pytest.approx(robustness(trajectory, model.extract(), 0), abs=1e-9)

    def test_zero_width_window_ignores_operator(self, model, trajectory):
        with torch.no_grad():
            model.windows.copy_(torch.tensor([[2.0, 2.0], [2.0, 2.0]], dtype=torch.float64))
        states = model.scale([trajectory])
        eventually = float(model(states, beta=50.0)[0])
        with torch.no_grad():
            model.p_rho.fill_(0.0)
        always = float(model(states, beta=50.0)[0])
        assert eventually == pytest.approx(always, abs=1e-12)

    def test_clamp_restores_domains(self, model):
        with torch.no_grad():
            model.windows.copy_(torch.tensor([[4.0, 1.0], [-2.0, 9.0]], dtype=torch.float64))
            model.p_w.copy_(torch.tensor([1.7, -0.3], dtype=torch.float64))
        model.clamp_()
        windows = model.windows.detach().numpy()
        assert np.all(windows[:, 0] <= windows[:, 1])
        assert windows.min() >= 0.0 and windows.max() <= 5.0
        assert model.p_w.detach().tolist() == [1.0, 0.0]
        assert model.active() == [0]

    def test_length_mismatch(self, model):
        with pytest.raises(InvalidInputError):
            model.scale([lane_trajectory(18.0, length=7)])


class TestFormulaLearning:
    """Training one formula"""

    @pytest.fixture(scope="class")
    def dataset(self):
        trajectories = [lane_trajectory(24.0, x0=float(i)) for i in range(6)] \
            + [lane_trajectory(18.0, x0=float(i)) for i in range(6)]
        return PseudoLabeledSet(cluster=0, trajectories=trajectories, labels=np.array([1] * 6 + [0] * 6))

    def test_training_run(self, dataset):
        result = tlinet_train(dataset, SMALL_TLINET, seed=3)
        assert len(result.history) == SMALL_TLINET.epochs
        assert 0.0 <= result.train_misclassification <= 1.0
        assert 1 <= result.active_predicates <= SMALL_TLINET.n_predicates

    def test_reproducible(self, dataset):
        first = tlinet_train(dataset, SMALL_TLINET, seed=3, epochs=5)
        second = tlinet_train(dataset, SMALL_TLINET, seed=3, epochs=5)
        assert first.formula == second.formula

    def test_needs_two_samples(self, dataset):
        single = PseudoLabeledSet(cluster=0, trajectories=dataset.trajectories[:1], labels=np.array([1]))
        with pytest.raises(InvalidInputError):
            tlinet_train(single, SMALL_TLINET)


class TestDetectors:
    """STL detector and the latent-distance benchmark"""

    @pytest.fixture(scope="class")
    def cluster_model(self):
        torch.manual_seed(0)
        upper, lower = lane_trajectory(24.0), lane_trajectory(18.0)
        train = [upper, lane_trajectory(24.0, x0=3.0), lower]
        scaler = FeatureScaler.fit(encoder_features(stack_states(train)))
        model = ClusterModel(model=GruAutoencoder(3, 8, 4), scaler=scaler, indicator=np.eye(3, 2),
                             centers=np.zeros((2, 4)), assignments=np.array([0, 0, 1]),
                             train_latents=np.zeros((3, 4)))
        latents = model.encode(train)
        model.train_latents = latents
        model.centers = np.stack([latents[:2].mean(axis=0), latents[2]])
        return model

    def bundle(self, cluster_model, formulas):
        return DetectorBundle(cluster_model=cluster_model, formulas=formulas,
                              thresholds=benchmark_thresholds(cluster_model, 100.0))

    def test_nearest_cluster_formula_decides(self, cluster_model):
        above = Predicate((0.0, 1.0, 0.0), 20.0)
        below = Predicate((0.0, -1.0, 0.0), -20.0)
        result = detect(lane_trajectory(24.0), self.bundle(cluster_model, [above, below]))
        assert result.cluster == 0
        assert not result.spoofed
        assert result.robustness == pytest.approx(4.0)
        swapped = detect_many([lane_trajectory(24.0), lane_trajectory(18.0)], self.bundle(cluster_model, [below, above]))
        assert [d.spoofed for d in swapped] == [True, True]
        assert [d.cluster for d in swapped] == [0, 1]

    def test_zero_robustness_is_clean(self, cluster_model):
        boundary = Predicate((0.0, 1.0, 0.0), 24.0)
        result = detect(lane_trajectory(24.0), self.bundle(cluster_model, [boundary, boundary]))
        assert result.robustness == 0.0
        assert not result.spoofed

    def test_benchmark_accepts_training_members(self, cluster_model):
        thresholds = benchmark_thresholds(cluster_model, 100.0)
        flagged = benchmark_detect([lane_trajectory(24.0, x0=9.0), lane_trajectory(18.0)], cluster_model, thresholds)
        assert flagged.tolist() == [False, False]
        with pytest.raises(InvalidInputError):
            benchmark_thresholds(cluster_model, 0.0)

    def test_bundle_shape_checked(self, cluster_model):
        with pytest.raises(InvalidInputError):
            DetectorBundle(cluster_model=cluster_model, formulas=[Predicate((0.0, 1.0, 0.0), 0.0)],
                           thresholds=[1.0, 1.0])


@pytest.mark.slow
class TestTraining:
    """End-to-end clustering and detector training on small sets"""

    @pytest.fixture(scope="class")
    def trajectories(self):
        return mixed_trajectories(24)

    @pytest.fixture(scope="class")
    def clustering(self, trajectories):
        return dtcr_train(trajectories, 3, SMALL_DTCR, seed=5)

    def test_clusters_are_filled(self, clustering):
        model, sets = clustering
        sizes = np.bincount(model.assignments, minlength=3)
        assert np.all(sizes > 0) and sizes.sum() == 24
        assert model.centers.shape == (3, 4)
        assert len(model.history) == 2
        assert [s.n_in_class for s in sets] == sizes.tolist()
        np.testing.assert_allclose(model.indicator.T @ model.indicator, np.eye(3), atol=1e-8)

    def test_reproducible(self, trajectories, clustering):
        again, _ = dtcr_train(trajectories, 3, SMALL_DTCR, seed=5)
        np.testing.assert_array_equal(again.assignments, clustering[0].assignments)

    def test_too_few_trajectories(self, trajectories):
        with pytest.raises(InvalidInputError):
            dtcr_train(trajectories[:2], 3, SMALL_DTCR)

    def test_train_detector(self, trajectories):
        settings = DetectionSettings(n_clusters=3, dtcr=SMALL_DTCR, tlinet=SMALL_TLINET)
        bundle, results = train_detector(trajectories, settings, seed=5, tlinet_epochs=5)
        assert len(bundle.formulas) == 3 and len(results) == 3
        assert bundle.thresholds.shape == (3,)
        detections = detect_many(trajectories[:4], bundle)
        assert all(0 <= d.cluster < 3 for d in detections)

    def test_train_detector_reuses_a_cluster_model(self, trajectories, clustering):
        model, _ = clustering
        settings = DetectionSettings(n_clusters=3, dtcr=SMALL_DTCR, tlinet=SMALL_TLINET)
        bundle, results = train_detector(trajectories, settings, seed=5, tlinet_epochs=2, cluster_model=model,
                                         metadata={"scenario_hash": "abc"})
        assert bundle.cluster_model is model
        assert [r.cluster for r in results] == [0, 1, 2]
        assert bundle.metadata == {"seed": 5, "scenario_hash": "abc"}
        with pytest.raises(InvalidInputError):
            train_detector(trajectories[:5], settings, cluster_model=model)


def manoeuvre_trajectories(per_pattern=8, length=20, seed=3):
    """Straight drives, single and double lane changes with jittered timing; lane 21 m, speed 12 m/s."""
    rng = np.random.default_rng(seed)
    k = np.arange(length)

    def logistic(offset):
        return 1.0 / (1.0 + np.exp(-offset))

    trajectories, labels = [], []
    for i in range(per_pattern):
        jitter = rng.uniform(-1.0, 1.0)
        lanes = {
            "straight": np.full(length, 21.0),
            "single": 21.0 - 3.0 * logistic(k - length / 2 + jitter),
            "double": 21.0 - 3.0 * (logistic(k - length / 4 + jitter) - logistic(k - 3 * length / 4 + jitter)),
        }
        for label, y in lanes.items():
            trajectories.append(Trajectory(np.column_stack([0.6 * k, y, np.full(length, 12.0)])))
            labels.append(label)
    return trajectories, labels


@pytest.mark.slow
class TestClusterPurity:
    """Clusters follow the manoeuvre"""

    def test_manoeuvres_separate(self):
        trajectories, labels = manoeuvre_trajectories()
        model, _ = dtcr_train(trajectories, 3, SMALL_DTCR, seed=5)
        assert cluster_purity(model.assignments, labels) >= 0.8
