"""PPO training loop and greedy evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..env import SELL, DiscreteAction, StepResult, encode_action
from ..nn.layers import Params, softmax
from ..nn.optim import AdamState, NonFiniteGradient, adam_step
from .losses import LossDiverged, PpoBatch, approx_kl, combined_loss
from .policy import PolicyNet
from .rollout import RolloutBuffer, collect_rollout, fill_advantages, normalize_advantages

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "mean_reward", "policy_loss", "value_loss", "entropy", "approx_kl", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Params, iteration: int):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_epsilon: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    horizon: int = 512
    epochs_per_update: int = 4
    minibatch_size: int = 128
    chunk_length: int = 16
    learning_rate: float = 1e-3
    total_iterations: int = 100
    kl_stop_threshold: float = 0.03
    normalize_advantages: bool = True
    reward_scale: float = 0.01
    max_grad_norm: float = 0.5
    hidden: int = 50
    layers: int = 1

    def __post_init__(self) -> None:
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if not 0 < self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("gamma must lie in (0, 1] and lam in [0, 1]")
        if min(self.c1, self.c2, self.kl_stop_threshold) < 0:
            raise ValueError("loss coefficients and KL threshold must be non-negative")
        if self.chunk_length < 1 or self.minibatch_size < self.chunk_length:
            raise ValueError("minibatch_size must hold at least one chunk")


@dataclass
class IterationLog:
    iteration: int
    mean_reward: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    lr: float


def make_chunks(buffer: RolloutBuffer, chunk_length: int) -> list[np.ndarray]:
    T = len(buffer)
    return [np.arange(s, min(s + chunk_length, T)) for s in range(0, T, chunk_length)]


def chunk_batch(buffer: RolloutBuffer, chunks: Sequence[np.ndarray], advantages: np.ndarray) -> PpoBatch:
    """Stack equal-length chunks into a ``(B, L)`` batch with their entry states."""
    idx = np.stack(chunks)
    return PpoBatch(
        observations=buffer.observations[idx],
        actions=buffer.actions[idx],
        log_probs_old=buffer.log_probs[idx],
        probs_old=buffer.probs[idx],
        advantages=advantages[idx],
        returns=buffer.returns[idx],
        resets=buffer.starts[idx],
        state0=buffer.state_at(idx[:, 0]),
    )


def _grouped(chunks: list[np.ndarray]) -> dict[int, list[np.ndarray]]:
    groups: dict[int, list[np.ndarray]] = {}
    for c in chunks:
        groups.setdefault(len(c), []).append(c)
    return groups


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def ppo_update(net: PolicyNet, buffer: RolloutBuffer, config: PpoConfig, adam: AdamState,
               rng: np.random.Generator) -> dict:
    """Minibatch Adam passes over one rollout, stopping early on large KL."""
    adv = buffer.advantages
    if config.normalize_advantages:
        adv = normalize_advantages(adv)
    chunks = make_chunks(buffer, config.chunk_length)
    per_batch = max(1, config.minibatch_size // config.chunk_length)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": 0.0}
    for _ in range(config.epochs_per_update):
        order = rng.permutation(len(chunks))
        for start in range(0, len(order), per_batch):
            selected = [chunks[i] for i in order[start:start + per_batch]]
            for group in _grouped(selected).values():
                batch = chunk_batch(buffer, group, adv)
                _, comps, grads = combined_loss(batch, net, config.clip_epsilon, config.c1, config.c2)
                stats["approx_kl"] = comps.approx_kl
                if comps.approx_kl > config.kl_stop_threshold:
                    return stats
                stats["policy_loss"].append(comps.policy_loss)
                stats["value_loss"].append(comps.value_loss)
                stats["entropy"].append(comps.entropy)
                clip_grad_norm(grads, config.max_grad_norm)
                adam_step(net.params, grads, adam, config.learning_rate)
    return stats


def train_agent(env_factory: Callable[[], object], config: PpoConfig = PpoConfig(), seed: int = 0,
                net: PolicyNet | None = None,
                on_iteration: Callable[[IterationLog], None] | None = None):
    """Collect -> GAE -> clipped-surrogate updates, ``total_iterations`` times.

    Returns ``(net, log)``. Raises :class:`TrainingDiverged` carrying the last
    finite parameters if the loss or parameters stop being finite.
    """
    rng = np.random.default_rng(seed)
    env = env_factory()
    if net is None:
        net = PolicyNet(env.observation_size, env.n_actions, config.hidden, config.layers,
                        seed=int(rng.integers(2**31)))
    adam = AdamState.for_params(net.params)
    log: list[IterationLog] = []
    buffer = None
    for it in range(1, config.total_iterations + 1):
        last_good = {k: v.copy() for k, v in net.params.items()}
        buffer = collect_rollout(env, net, config.horizon, rng, resume=buffer)
        mean_reward = float(np.mean(buffer.rewards))
        buffer.rewards = buffer.rewards * config.reward_scale
        fill_advantages(buffer, config.gamma, config.lam)
        try:
            stats = ppo_update(net, buffer, config, adam, rng)
        except (LossDiverged, NonFiniteGradient) as exc:
            raise TrainingDiverged(str(exc), last_good, it) from exc
        if not all(np.all(np.isfinite(v)) for v in net.params.values()):
            raise TrainingDiverged("non-finite parameters after update", last_good, it)
        row = IterationLog(
            iteration=it,
            mean_reward=mean_reward,
            policy_loss=float(np.mean(stats["policy_loss"])) if stats["policy_loss"] else float("nan"),
            value_loss=float(np.mean(stats["value_loss"])) if stats["value_loss"] else float("nan"),
            entropy=float(np.mean(stats["entropy"])) if stats["entropy"] else float("nan"),
            approx_kl=float(stats["approx_kl"]),
            lr=config.learning_rate,
        )
        log.append(row)
        if on_iteration is not None:
            on_iteration(row)
        logger.info("iter %d reward %.4f pl %.4f vl %.4f ent %.3f kl %.4f", it, row.mean_reward,
                    row.policy_loss, row.value_loss, row.entropy, row.approx_kl)
    return net, log


def write_training_log(log: Sequence[IterationLog], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            d = asdict(row)
            writer.writerow([d["iteration"]] + [repr(float(d[c])) for c in LOG_COLUMNS[1:]])


def read_training_log(path: str | Path) -> list[IterationLog]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            IterationLog(int(r["iteration"]), *(float(r[c]) for c in LOG_COLUMNS[1:]))
            for r in csv.DictReader(fh)
        ]


def greedy_action_probs(net: PolicyNet, observations: np.ndarray) -> np.ndarray:
    """Policy distributions along one episode, state carried from zero."""
    logits, _, _, _ = net.forward(observations[None], net.initial_state())
    return softmax(logits[0])


def evaluate_agent(net: PolicyNet, env, seed: int = 0):
    """One deterministic episode taking the most probable action each step.

    The last step sells all holdings, as the benchmark strategies do.
    Returns ``(trace_rows, profit_rate_percent)``.
    """
    obs = env.reset(seed=seed)
    state = net.initial_state()
    levels = env.config.amount_levels
    liquidate = encode_action(DiscreteAction(SELL, levels), levels)
    last = len(env.closes) - 1
    done = False
    while not done:
        logits, _, state = net.step(obs[None, :], state)
        action = liquidate if env.cursor == last else int(np.argmax(logits[0]))
        result = env.step(action)
        obs, done = result.observation, result.done
    return list(env.trace), env.profit_rate


class TwoStateBanditEnv:
    """Alternates between two observable states; action 0 pays 1, all others 0."""

    def __init__(self, obs_size: int = 12, n_actions: int = 24, episode_length: int = 32):
        self.observation_size = obs_size
        self.n_actions = n_actions
        self.episode_length = episode_length
        self.t = 0

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.observation_size)
        o[self.t % 2] = 1.0
        return o

    def reset(self, seed=None) -> np.ndarray:
        self.t = 0
        return self._obs()

    def step(self, action: int):
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range")
        reward = 1.0 if action == 0 else 0.0
        self.t += 1
        done = self.t >= self.episode_length
        return StepResult(self._obs(), reward, done, {})


BANDIT_CONFIG = PpoConfig(horizon=128, total_iterations=50, learning_rate=3e-3)


def bandit_check(seed: int = 0, config: PpoConfig = BANDIT_CONFIG) -> float:
    """Train on :class:`TwoStateBanditEnv`; mean probability of the paying action
    along one episode afterwards."""
    net, _ = train_agent(TwoStateBanditEnv, config, seed=seed)
    env = TwoStateBanditEnv()
    obs = [env.reset()] + [env.step(0).observation for _ in range(env.episode_length - 1)]
    return float(greedy_action_probs(net, np.stack(obs))[:, 0].mean())
