"""PPO objective terms and their gradients with respect to policy logits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..nn.layers import Params, log_softmax, softmax
from .policy import PolicyNet, RecurrentState

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12


class LossDiverged(FloatingPointError):
    pass


def probability_ratio(logp_new, logp_old):
    logp_new = np.asarray(logp_new, dtype=np.float64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    if not (np.all(np.isfinite(logp_new)) and np.all(np.isfinite(logp_old))):
        raise ValueError("log-probabilities must be finite")
    return np.exp(logp_new - logp_old)


def clip(x, lo, hi):
    return np.maximum(np.minimum(x, hi), lo)


def clipped_surrogate(ratio, advantage, epsilon: float):
    """``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`` element-wise."""
    if epsilon <= 0:
        raise ValueError("clip epsilon must be positive")
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def pg_surrogate(logp, advantage):
    """Unclipped policy-gradient objective term ``log pi * A``."""
    return np.asarray(logp, dtype=np.float64) * np.asarray(advantage, dtype=np.float64)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def approx_kl(old_probs: np.ndarray, new_probs: np.ndarray) -> tuple[float, bool]:
    """Mean exact KL(old || new) over a batch of full distributions.

    New probabilities are floored at ``KL_FLOOR`` where the old ones are
    positive; the second return value reports whether that happened.
    """
    p = np.asarray(old_probs, dtype=np.float64)
    q = np.asarray(new_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    clamped = bool(np.any((q < KL_FLOOR) & (p > 0)))
    q = np.maximum(q, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    kl = terms.sum(axis=-1)
    return float(np.mean(np.maximum(kl, 0.0))), clamped


@dataclass
class PpoBatch:
    """Contiguous recurrent chunks: arrays shaped ``(B, L, ...)``."""

    observations: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    probs_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    resets: np.ndarray
    state0: RecurrentState


@dataclass
class LossComponents:
    total: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def combined_loss(batch: PpoBatch, net: PolicyNet, clip_epsilon: float = 0.2,
                  c1: float = 0.5, c2: float = 0.01) -> tuple[float, LossComponents, Params]:
    """``-mean(L_clip) + c1 * mean((V - R)^2) - c2 * mean(entropy)`` and its gradient.

    Minimising this ascends the clipped objective with value loss and
    entropy bonus.
    """
    logits, values, _, cache = net.forward(batch.observations, batch.state0, batch.resets)
    logp_all = log_softmax(logits)
    probs = softmax(logits)
    a = batch.actions[..., None]
    logp = np.take_along_axis(logp_all, a, axis=-1)[..., 0]
    n = logp.size

    adv = batch.advantages
    ratio = probability_ratio(logp, batch.log_probs_old)
    unclipped = ratio * adv
    clipped = clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv
    surr = np.minimum(unclipped, clipped)
    ent = -(probs * logp_all).sum(axis=-1)
    verr = values - batch.returns

    policy_loss = -float(surr.mean())
    value_loss = float(np.mean(verr * verr))
    mean_ent = float(ent.mean())
    total = policy_loss + c1 * value_loss - c2 * mean_ent
    kl, _ = approx_kl(batch.probs_old, probs)
    comps = LossComponents(total, policy_loss, value_loss, mean_ent, kl,
                           float(np.mean(np.abs(ratio - 1.0) > clip_epsilon)))
    if not math.isfinite(total):
        raise LossDiverged(f"non-finite PPO loss: {comps}")

    # d(-surr)/dlogp: the unclipped branch carries ratio * A, the clipped one nothing.
    dlogp = -np.where(unclipped <= clipped, adv * ratio, 0.0) / n
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, a, 1.0, axis=-1)
    dlogits = dlogp[..., None] * (onehot - probs)
    # d(-H)/dz = p * (log p + H)
    dlogits += (c2 / n) * probs * (logp_all + ent[..., None])
    dvalues = (2.0 * c1 / n) * verr
    grads = net.backward(dlogits, dvalues, cache)
    return total, comps, grads
