"""
Masked proximal policy optimisation for the spoofing MDP.

The policy is a small tanh MLP with a logits head over the spoofing-frequency grid
and a scalar value head. Infeasible actions are not removed but floored: the
logits are shifted by log(alpha + (1 - alpha) m), which keeps the masked softmax
differentiable everywhere.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from torch import nn

from src.attack_planner import FEATURE_BOUNDS, SpoofPlan, SpoofingEnv
from src.errors import InvalidInputError, NumericalFailure
from src.signal_core import derive_seed

logger = logging.getLogger(__name__)


def masked_logits(logits: torch.Tensor, mask: torch.Tensor, alpha: float) -> torch.Tensor:
    """z + log(alpha + (1 - alpha) m)."""
    return logits + torch.log(alpha + (1.0 - alpha) * mask.to(logits.dtype))


def masked_policy(logits, mask, alpha: float) -> np.ndarray:
    """
    Action probabilities of the soft-masked softmax.

    Args:
        logits: Policy logits z (length L)
        mask: Binary feasibility mask (length L)
        alpha: Mask floor in (0, 1)

    Returns:
        Probability vector summing to 1

    Raises:
        InvalidInputError: If alpha is out of range or no action is feasible

    Example:
        >>> masked_policy([0.0, 0.0], [1, 0], 0.01)
        array([0.99009901, 0.00990099])
    """
    if not 0 < alpha < 1:
        raise InvalidInputError(f"mask floor must lie in (0, 1), got {alpha}")
    z = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    m = torch.as_tensor(np.asarray(mask, dtype=np.float64))
    if z.shape != m.shape:
        raise InvalidInputError(f"logits {tuple(z.shape)} and mask {tuple(m.shape)} differ in shape")
    if not bool(torch.any(m > 0)):
        raise InvalidInputError("no feasible action in the mask")
    return torch.softmax(masked_logits(z, m, alpha), dim=-1).numpy()


class PolicyNetwork(nn.Module):
    """Shared two-layer tanh body with logits and value heads."""

    def __init__(self, n_features: int, n_actions: int, hidden_width: int = 64):
        super().__init__()
        self.n_features = n_features
        self.n_actions = n_actions
        self.hidden_width = hidden_width
        self.body = nn.Sequential(
            nn.Linear(n_features, hidden_width),
            nn.Tanh(),
            nn.Linear(hidden_width, hidden_width),
            nn.Tanh(),
        )
        self.logits_head = nn.Linear(hidden_width, n_actions)
        self.value_head = nn.Linear(hidden_width, 1)

    def forward(self, features: torch.Tensor):
        hidden = self.body(features)
        return self.logits_head(hidden), self.value_head(hidden).squeeze(-1)


@dataclass
class EpisodeBuffer:
    observations: List[np.ndarray] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)


@dataclass
class PpoResult:
    policy: PolicyNetwork
    curve: pd.DataFrame
    variant: str
    metadata: Dict


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float):
    """Generalised advantage estimates and returns for one terminated episode."""
    advantages = np.zeros(len(rewards))
    running = 0.0
    for t in reversed(range(len(rewards))):
        next_value = values[t + 1] if t + 1 < len(rewards) else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
    return advantages, advantages + np.asarray(values)


class PpoTrainer:
    """Clipped-surrogate PPO over a SpoofingEnv, with or without the action mask."""

    def __init__(self, env: SpoofingEnv, settings, mask_floor: float = 0.01, masked: bool = True,
                 seed: int = 0):
        if not 0 < mask_floor < 1:
            raise InvalidInputError(f"mask floor must lie in (0, 1), got {mask_floor}")
        self.env = env
        self.settings = settings
        self.mask_floor = mask_floor
        self.masked = masked
        self.variant = "masked" if masked else "unmasked"
        self.seed = seed

        torch_seed = derive_seed(seed, "ppo")
        torch.manual_seed(torch_seed)
        self.generator = torch.Generator().manual_seed(torch_seed)
        self.policy = PolicyNetwork(len(FEATURE_BOUNDS), env.action_grid.size, settings.hidden_width)
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=settings.learning_rate)

    def _distribution_logits(self, logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        if self.masked:
            return masked_logits(logits, masks, self.mask_floor)
        return logits

    def collect_episode(self):
        buffer = EpisodeBuffer()
        observation, _ = self.env.reset()
        terminated = False
        while not terminated:
            mask = self.env.action_masks()
            with torch.no_grad():
                logits, value = self.policy(torch.as_tensor(observation).unsqueeze(0))
                log_probs = torch.log_softmax(
                    self._distribution_logits(logits, torch.as_tensor(mask).unsqueeze(0)), dim=-1)
                action = int(torch.multinomial(log_probs.exp(), 1, generator=self.generator).item())
            buffer.observations.append(observation)
            buffer.masks.append(mask)
            buffer.actions.append(action)
            buffer.log_probs.append(float(log_probs[0, action]))
            buffer.values.append(float(value[0]))
            observation, reward, terminated, _, _ = self.env.step(action)
            buffer.rewards.append(float(reward))
        return buffer, self.env.plan

    def update(self, buffers: List[EpisodeBuffer]) -> float:
        s = self.settings
        advantages, returns = [], []
        for buffer in buffers:
            adv, ret = compute_gae(np.asarray(buffer.rewards), np.asarray(buffer.values), s.gamma, s.gae_lambda)
            advantages.append(adv)
            returns.append(ret)

        observations = torch.as_tensor(np.concatenate([b.observations for b in buffers]), dtype=torch.float32)
        masks = torch.as_tensor(np.concatenate([b.masks for b in buffers]), dtype=torch.float32)
        actions = torch.as_tensor(np.concatenate([b.actions for b in buffers]), dtype=torch.long)
        old_log_probs = torch.as_tensor(np.concatenate([b.log_probs for b in buffers]), dtype=torch.float32)
        advantages = torch.as_tensor(np.concatenate(advantages), dtype=torch.float32)
        returns = torch.as_tensor(np.concatenate(returns), dtype=torch.float32)
        if advantages.numel() > 1 and float(advantages.std()) > 1e-8:
            advantages = (advantages - advantages.mean()) / advantages.std()

        n = observations.shape[0]
        last_loss = 0.0
        for _ in range(s.epochs):
            order = torch.randperm(n, generator=self.generator)
            for start in range(0, n, s.minibatch_size):
                idx = order[start:start + s.minibatch_size]
                logits, values = self.policy(observations[idx])
                log_probs_all = torch.log_softmax(self._distribution_logits(logits, masks[idx]), dim=-1)
                log_probs = log_probs_all.gather(1, actions[idx].unsqueeze(1)).squeeze(1)
                ratio = torch.exp(log_probs - old_log_probs[idx])
                surrogate = torch.min(ratio * advantages[idx],
                                      torch.clamp(ratio, 1 - s.clip, 1 + s.clip) * advantages[idx])
                entropy = -(log_probs_all.exp() * log_probs_all).sum(dim=-1).mean()
                value_loss = ((values - returns[idx]) ** 2).mean()
                loss = -surrogate.mean() + s.value_coef * value_loss - s.entropy_coef * entropy
                if not torch.isfinite(loss):
                    logger.error(f"PPO loss became non-finite ({self.variant}): value_loss={float(value_loss)}")
                    raise NumericalFailure(f"PPO loss diverged for the {self.variant} policy")
                self.optimizer.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(self.policy.parameters(), 0.5)
                self.optimizer.step()
                last_loss = float(loss)
        return last_loss

    def train(self, episodes: Optional[int] = None) -> PpoResult:
        """
        Run PPO for the given number of episodes.

        Returns:
            PpoResult with the trained network and the per-episode reward curve
            (episode, variant, mean_reward, attack_effective_reward, infeasible_rate)
        """
        total = self.settings.episodes if episodes is None else episodes
        rows = []
        episode = 0
        while episode < total:
            wave = min(self.settings.episodes_per_update, total - episode)
            buffers = []
            for _ in range(wave):
                buffer, plan = self.collect_episode()
                buffers.append(buffer)
                rows.append({
                    "episode": episode,
                    "variant": self.variant,
                    "mean_reward": float(np.mean(buffer.rewards)),
                    "attack_effective_reward": plan.attack_effective_reward,
                    "infeasible_rate": plan.infeasible_rate,
                })
                episode += 1
            loss = self.update(buffers)
            recent = np.mean([r["mean_reward"] for r in rows[-wave:]])
            logger.info(f"PPO[{self.variant}] episodes {episode}/{total}: mean reward {recent:.4f}, loss {loss:.4f}")

        metadata = {
            "variant": self.variant,
            "n_actions": self.env.action_grid.size,
            "mask_floor": self.mask_floor,
            "masked": self.masked,
            "hidden_width": self.policy.hidden_width,
            "feature_bounds": [list(b) for b in FEATURE_BOUNDS],
            "episodes": total,
            "seed": self.seed,
        }
        return PpoResult(policy=self.policy, curve=pd.DataFrame(rows), variant=self.variant, metadata=metadata)


def ppo_train(env: SpoofingEnv, settings, mask_floor: float = 0.01, masked: bool = True, seed: int = 0,
              episodes: Optional[int] = None) -> PpoResult:
    return PpoTrainer(env, settings, mask_floor, masked, seed).train(episodes)


def greedy_actor(policy: PolicyNetwork, mask_floor: float, masked: bool = True) -> Callable[[np.ndarray, np.ndarray], int]:
    """Deterministic action selection: argmax of the (masked) logits."""

    def choose(observation: np.ndarray, mask: np.ndarray) -> int:
        with torch.no_grad():
            logits, _ = policy(torch.as_tensor(observation, dtype=torch.float32).unsqueeze(0))
            if masked:
                logits = masked_logits(logits, torch.as_tensor(mask).unsqueeze(0), mask_floor)
        return int(torch.argmax(logits[0]).item())

    return choose


def rollout_summary(plan: SpoofPlan) -> Dict[str, float]:
    """Plausibility and effectiveness statistics of one attacked episode."""
    sensed = np.array([s.v for s in plan.sensed[1:]])
    true = plan.trajectory.states[1:, 2]
    velocity_error = np.abs(sensed - true)
    return {
        "total_reward": plan.total_reward,
        "clean_rate": plan.clean_rate,
        "infeasible_rate": plan.infeasible_rate,
        "median_velocity_error": float(np.median(velocity_error)) if velocity_error.size else math.nan,
    }
