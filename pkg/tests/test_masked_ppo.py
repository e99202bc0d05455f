#!/usr/bin/env python3
"""
Tests for masked PPO: the soft mask, advantage estimation and a short training run.
"""

import numpy as np
import pytest
import torch

from config.env_config import PpoSettings
from src.attack_planner import ConsistencyParams, SpoofingEnv, run_episode
from src.errors import InvalidInputError
from src.masked_ppo import (
    PolicyNetwork,
    compute_gae,
    greedy_actor,
    masked_logits,
    masked_policy,
    ppo_train,
    rollout_summary,
)

SHORT_RUN = PpoSettings(episodes=4, episodes_per_update=2, epochs=1, hidden_width=16, minibatch_size=8)


def short_env(scenario, seed=9):
    return SpoofingEnv(scenario, ConsistencyParams(), n_actions=200, trajectory_length=5, seed=seed)


class TestMaskedPolicy:
    """Soft-masked softmax"""

    def test_two_action_example(self):
        np.testing.assert_allclose(masked_policy([0.0, 0.0], [1, 0], 0.01), [0.99009901, 0.00990099], atol=1e-8)

    def test_feasible_actions_keep_their_logits(self):
        logits = torch.tensor([0.5, -1.0, 2.0])
        shifted = masked_logits(logits, torch.tensor([1, 1, 0]), 0.1)
        assert torch.allclose(shifted[:2], logits[:2])
        assert float(shifted[2]) == pytest.approx(2.0 + np.log(0.1))

    def test_probabilities_sum_to_one(self):
        probs = masked_policy(np.linspace(-2, 2, 7), [0, 1, 0, 1, 1, 0, 0], 0.05)
        assert probs.sum() == pytest.approx(1.0)
        assert np.all(probs > 0)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5])
    def test_floor_out_of_range(self, alpha):
        with pytest.raises(InvalidInputError):
            masked_policy([0.0, 0.0], [1, 0], alpha)

    def test_empty_mask_rejected(self):
        with pytest.raises(InvalidInputError):
            masked_policy([0.0, 0.0], [0, 0], 0.01)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            masked_policy([0.0, 0.0, 0.0], [1, 0], 0.01)


class TestAdvantages:
    """Generalised advantage estimation"""

    def test_undiscounted_returns(self):
        advantages, returns = compute_gae(np.array([1.0, 1.0]), np.array([0.0, 0.0]), 1.0, 1.0)
        np.testing.assert_allclose(advantages, [2.0, 1.0])
        np.testing.assert_allclose(returns, [2.0, 1.0])

    def test_perfect_critic_has_zero_advantage(self):
        rewards = np.array([-0.1, -0.2, 0.0])
        values = np.array([-0.3, -0.2, 0.0])
        advantages, returns = compute_gae(rewards, values, 1.0, 0.95)
        np.testing.assert_allclose(advantages, 0.0, atol=1e-12)
        np.testing.assert_allclose(returns, values)


class TestPolicyNetwork:
    """Network shapes and greedy selection"""

    def test_heads(self):
        network = PolicyNetwork(7, 200, hidden_width=16)
        logits, value = network(torch.zeros((3, 7)))
        assert logits.shape == (3, 200)
        assert value.shape == (3,)

    def test_greedy_actor_respects_mask(self):
        torch.manual_seed(0)
        network = PolicyNetwork(7, 5, hidden_width=8)
        choose = greedy_actor(network, 1e-6)
        mask = np.array([False, False, True, False, False])
        assert choose(np.zeros(7, dtype=np.float32), mask) == 2


@pytest.mark.slow
class TestTraining:
    """Short PPO runs on five-slot episodes"""

    @pytest.fixture(scope="class")
    def masked_run(self, scenario):
        return ppo_train(short_env(scenario), SHORT_RUN, mask_floor=0.01, masked=True, seed=4)

    def test_reward_curve(self, masked_run):
        curve = masked_run.curve
        assert list(curve.columns) == ["episode", "variant", "mean_reward", "attack_effective_reward",
                                       "infeasible_rate"]
        assert curve["episode"].tolist() == [0, 1, 2, 3]
        assert (curve["variant"] == "masked").all()
        assert (curve["mean_reward"] <= 0).all()

    def test_metadata(self, masked_run):
        assert masked_run.variant == "masked"
        assert masked_run.metadata["n_actions"] == 200
        assert masked_run.metadata["mask_floor"] == 0.01
        assert masked_run.metadata["hidden_width"] == 16

    def test_reproducible_under_seed(self, scenario, masked_run):
        again = ppo_train(short_env(scenario), SHORT_RUN, mask_floor=0.01, masked=True, seed=4)
        assert again.curve["mean_reward"].tolist() == masked_run.curve["mean_reward"].tolist()

    def test_unmasked_variant(self, scenario):
        result = ppo_train(short_env(scenario), SHORT_RUN, masked=False, seed=4, episodes=2)
        assert result.variant == "unmasked"
        assert len(result.curve) == 2

    def test_greedy_rollout_summary(self, scenario, masked_run):
        env = short_env(scenario, seed=12)
        env.reset()
        trajectory = env.trajectory
        plan = run_episode(env, trajectory, greedy_actor(masked_run.policy, 0.01))
        summary = rollout_summary(plan)
        assert set(summary) == {"total_reward", "clean_rate", "infeasible_rate", "median_velocity_error"}
        assert 0.0 <= summary["clean_rate"] <= 1.0
        assert summary["total_reward"] <= 0.0

    def test_invalid_floor(self, scenario):
        with pytest.raises(InvalidInputError):
            ppo_train(short_env(scenario), SHORT_RUN, mask_floor=1.5)
