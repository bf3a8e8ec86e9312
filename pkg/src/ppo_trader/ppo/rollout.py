"""Rollout collection and generalized advantage estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn.layers import LstmState, log_softmax, softmax
from .policy import PolicyNet, RecurrentState


@dataclass
class RolloutBuffer:
    observations: np.ndarray   # (T, obs)
    actions: np.ndarray        # (T,) int
    log_probs: np.ndarray      # (T,) log pi_old(a_t | s_t)
    probs: np.ndarray          # (T, A) full pi_old(. | s_t)
    rewards: np.ndarray        # (T,)
    values: np.ndarray         # (T,) V(s_t)
    dones: np.ndarray          # (T,) episode ended after step t
    starts: np.ndarray         # (T,) recurrent state was reset before step t
    state_m: np.ndarray        # (T, layers, H) recurrent state entering step t
    state_c: np.ndarray
    last_value: float | None   # bootstrap V(s_T)
    next_obs: np.ndarray
    next_state: RecurrentState
    next_start: bool
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def state_at(self, t: int | np.ndarray) -> RecurrentState:
        """Stored recurrent state entering step(s) ``t`` as a batched tuple."""
        idx = np.atleast_1d(t)
        return tuple(
            LstmState(self.state_m[idx, layer], self.state_c[idx, layer])
            for layer in range(self.state_m.shape[1])
        )


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def collect_rollout(env, net: PolicyNet, horizon: int, rng: np.random.Generator,
                    resume: RolloutBuffer | None = None) -> RolloutBuffer:
    """Run the stochastic policy for ``horizon`` steps.

    Continues from ``resume`` (the previous buffer's tail) when given,
    otherwise resets the environment. Finished episodes are reset in place
    and the recurrent state is zeroed.
    """
    if horizon < 2:
        raise ValueError("rollout horizon must be >= 2")
    if resume is None:
        obs = env.reset(seed=int(rng.integers(2**63)))
        state = net.initial_state()
        start = True
    else:
        obs, state, start = resume.next_obs, resume.next_state, resume.next_start

    T, L, H, A = horizon, net.layers, net.hidden, net.n_actions
    buf = dict(
        observations=np.empty((T, net.obs_size)), actions=np.empty(T, dtype=np.int64),
        log_probs=np.empty(T), probs=np.empty((T, A)), rewards=np.empty(T), values=np.empty(T),
        dones=np.zeros(T, dtype=bool), starts=np.zeros(T, dtype=bool),
        state_m=np.empty((T, L, H)), state_c=np.empty((T, L, H)),
    )
    for t in range(T):
        buf["observations"][t] = obs
        buf["starts"][t] = start
        for layer in range(L):
            buf["state_m"][t, layer] = state[layer].m[0]
            buf["state_c"][t, layer] = state[layer].c[0]
        logits, value, state = net.step(obs[None, :], state)
        logp = log_softmax(logits)[0]
        p = softmax(logits)[0]
        a = sample_action(p, rng)
        result = env.step(a)
        buf["actions"][t] = a
        buf["log_probs"][t] = logp[a]
        buf["probs"][t] = p
        buf["values"][t] = value[0]
        buf["rewards"][t] = result.reward
        buf["dones"][t] = result.done
        start = result.done
        if result.done:
            obs = env.reset(seed=int(rng.integers(2**63)))
            state = net.initial_state()
        else:
            obs = result.observation

    _, last_value, _ = net.step(obs[None, :], state)
    return RolloutBuffer(**buf, last_value=float(last_value[0]), next_obs=obs,
                         next_state=state, next_start=start)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                last_value: float | None, gamma: float, lam: float):
    """Backward GAE recursion.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    if last_value is None:
        raise ValueError("GAE needs the bootstrap value V(s_T)")
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    adv = np.empty(T)
    next_value, running = float(last_value), 0.0
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def fill_advantages(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    buffer.advantages, buffer.returns = compute_gae(
        buffer.rewards, buffer.values, buffer.dones, buffer.last_value, gamma, lam)
    return buffer


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    std = float(np.std(adv))
    return (adv - float(np.mean(adv))) / (std + eps)
