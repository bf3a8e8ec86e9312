"""Adam with bias correction over ``dict[str, ndarray]`` parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Params


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        state.second_moment = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(params: Params, grads: Params, state: AdamState, lr: float):
    """One Adam update, applied to ``params`` in place.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient
    contains NaN or inf. Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    if not state.first_moment:
        state.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        state.second_moment = {k: np.zeros_like(v) for k, v in params.items()}

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step_count
    corr2 = 1.0 - b2 ** state.step_count
    for name, g in grads.items():
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return params, state
