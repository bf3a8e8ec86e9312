"""Recurrent actor-critic: shared LSTM backbone, softmax policy head, scalar value head."""

from __future__ import annotations

import numpy as np

from ..nn.layers import (
    LstmState,
    Params,
    dense_backward,
    dense_forward,
    exact_matmul,
    init_dense,
    init_lstm,
    log_softmax,
    lstm_sequence_backward,
    lstm_sequence_forward,
    prefixed,
    softmax,
    subparams,
)

RecurrentState = tuple[LstmState, ...]


class PolicyNet:
    """Both heads read the top LSTM layer's hidden vector at every step.

    Forward passes use a batch-invariant matmul so that a step evaluated
    alone during a rollout and the same step evaluated inside a training
    chunk produce bit-identical log-probabilities.
    """

    def __init__(self, obs_size: int, n_actions: int = 24, hidden: int = 50, layers: int = 1,
                 seed: int = 0, params: Params | None = None):
        self.obs_size = obs_size
        self.n_actions = n_actions
        self.hidden = hidden
        self.layers = layers
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for layer in range(layers):
                in_dim = obs_size if layer == 0 else hidden
                params.update(prefixed(f"lstm{layer}", init_lstm(in_dim, hidden, rng)))
            pi = init_dense(hidden, n_actions, rng)
            pi["W"] *= 0.01  # near-uniform initial policy
            params.update(prefixed("pi", pi))
            params.update(prefixed("v", init_dense(hidden, 1, rng)))
        self.params = params

    @classmethod
    def from_params(cls, params: Params) -> "PolicyNet":
        """Rebuild a network from saved parameters, inferring its shape."""
        layers = sum(1 for k in params if k.startswith("lstm") and k.endswith(".Wx"))
        if layers == 0 or "pi.W" not in params:
            raise ValueError("parameters do not describe a policy network")
        obs_size, four_h = params["lstm0.Wx"].shape
        return cls(obs_size, params["pi.W"].shape[1], four_h // 4, layers, params=params)

    def initial_state(self, batch: int = 1) -> RecurrentState:
        return tuple(LstmState.zeros(batch, self.hidden) for _ in range(self.layers))

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.obs_size, self.n_actions, self.hidden, self.layers,
                         params={k: v.copy() for k, v in self.params.items()})

    def forward(self, obs: np.ndarray, state0: RecurrentState, resets: np.ndarray | None = None):
        """``obs`` of shape ``(B, T, obs_size)``.

        Returns ``(logits (B, T, A), values (B, T), final_state, cache)``.
        """
        if obs.ndim != 3 or obs.shape[-1] != self.obs_size:
            raise ValueError(f"expected observations (B, T, {self.obs_size}), got {obs.shape}")
        h = obs
        finals = []
        layer_caches = []
        for layer in range(self.layers):
            p = subparams(self.params, f"lstm{layer}")
            h, final, caches = lstm_sequence_forward(h, state0[layer], p, resets, matmul=exact_matmul)
            finals.append(final)
            layer_caches.append(caches)
        logits, pi_cache = dense_forward(h, subparams(self.params, "pi"), matmul=exact_matmul)
        values, v_cache = dense_forward(h, subparams(self.params, "v"), matmul=exact_matmul)
        return logits, values[..., 0], tuple(finals), (layer_caches, pi_cache, v_cache)

    def backward(self, dlogits: np.ndarray, dvalues: np.ndarray, cache) -> Params:
        layer_caches, pi_cache, v_cache = cache
        dh_pi, g_pi = dense_backward(dlogits, pi_cache, subparams(self.params, "pi"))
        dh_v, g_v = dense_backward(dvalues[..., None], v_cache, subparams(self.params, "v"))
        grads = {**prefixed("pi", g_pi), **prefixed("v", g_v)}
        dh = dh_pi + dh_v
        for layer in reversed(range(self.layers)):
            dh, g, _ = lstm_sequence_backward(dh, layer_caches[layer], subparams(self.params, f"lstm{layer}"))
            grads.update(prefixed(f"lstm{layer}", g))
        return grads

    def step(self, obs: np.ndarray, state: RecurrentState):
        """Single time step for a batch ``(B, obs_size)``: ``(logits, values, new_state)``."""
        logits, values, final, _ = self.forward(obs[:, None, :], state)
        return logits[:, 0], values[:, 0], final


def policy_forward(observation: np.ndarray, state: RecurrentState | None, net: PolicyNet):
    """Action distribution, value estimate and next recurrent state for one observation."""
    obs = np.asarray(observation, dtype=np.float64).reshape(1, -1)
    if obs.shape[1] != net.obs_size:
        raise ValueError(f"observation has {obs.shape[1]} features, policy expects {net.obs_size}")
    if state is None:
        state = net.initial_state()
    logits, values, new_state = net.step(obs, state)
    return softmax(logits)[0], float(values[0]), new_state


def log_probs(logits: np.ndarray) -> np.ndarray:
    return log_softmax(logits)
