"""Dense and peephole-LSTM layers with hand-written reverse-mode gradients.

Parameters live in plain ``dict[str, ndarray]`` containers so that the
optimizer and the checkpoint writer can treat every model the same way.
All arrays are float64 and batched along the leading axis.

LSTM gate weights are stored stacked in the order (input, forget, cell,
output): ``Wx`` has shape ``(in, 4H)``, ``Wm`` shape ``(H, 4H)``. Peepholes
``p_i``, ``p_f``, ``p_o`` are element-wise vectors.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

Params = dict[str, np.ndarray]

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid", "softmax")


class ShapeError(ValueError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose rows do not depend on how many rows are batched.

    BLAS kernels change summation order with the batch size, which breaks
    bit-exact replay of single-step evaluations inside a batched pass.
    """
    lead = a.shape[:-1]
    out = np.einsum("bi,ij->bj", a.reshape(-1, a.shape[-1]), b)
    return out.reshape(*lead, b.shape[-1])


def subparams(params: Params, prefix: str) -> Params:
    """View of the entries of ``params`` under ``prefix.`` with the prefix removed."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def prefixed(prefix: str, grads: Params) -> Params:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def init_dense(in_dim: int, out_dim: int, rng: np.random.Generator) -> Params:
    bound = 1.0 / np.sqrt(in_dim)
    return {
        "W": rng.uniform(-bound, bound, size=(in_dim, out_dim)),
        "b": np.zeros(out_dim),
    }


def dense_forward(x: np.ndarray, params: Params, activation: str = "linear", matmul=np.matmul):
    """``activation(x @ W + b)``; returns ``(output, cache)``."""
    W, b = params["W"], params["b"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense input has {x.shape[-1]} features, weights expect {W.shape[0]}")
    z = matmul(x, W) + b
    if activation == "linear":
        y = z
    elif activation == "relu":
        y = np.maximum(z, 0.0)
    elif activation == "tanh":
        y = np.tanh(z)
    elif activation == "sigmoid":
        y = sigmoid(z)
    elif activation == "softmax":
        y = softmax(z)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, (x, z, y, activation)


def dense_backward(dy: np.ndarray, cache, params: Params):
    """Returns ``(dx, grads)``. Works for any number of leading batch axes."""
    x, z, y, activation = cache
    if activation == "linear":
        dz = dy
    elif activation == "relu":
        dz = dy * (z > 0)
    elif activation == "tanh":
        dz = dy * (1.0 - y * y)
    elif activation == "sigmoid":
        dz = dy * y * (1.0 - y)
    else:  # softmax
        dz = y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    x2 = x.reshape(-1, x.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    grads = {"W": x2.T @ dz2, "b": dz2.sum(axis=0)}
    return dz @ params["W"].T, grads


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

class LstmState(NamedTuple):
    m: np.ndarray  # hidden output
    c: np.ndarray  # cell activation

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))


def init_lstm(in_dim: int, hidden: int, rng: np.random.Generator) -> Params:
    bx = 1.0 / np.sqrt(in_dim)
    bh = 1.0 / np.sqrt(hidden)
    return {
        "Wx": rng.uniform(-bx, bx, size=(in_dim, 4 * hidden)),
        "Wm": rng.uniform(-bh, bh, size=(hidden, 4 * hidden)),
        "b": np.zeros(4 * hidden),
        "p_i": rng.uniform(-bh, bh, size=hidden),
        "p_f": rng.uniform(-bh, bh, size=hidden),
        "p_o": rng.uniform(-bh, bh, size=hidden),
    }


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def lstm_cell_forward(x: np.ndarray, prev: LstmState, params: Params, matmul=np.matmul):
    """One step of the peephole LSTM.

    i = sig(x Wix + m Wim + p_i*c_prev + b_i)
    f = sig(x Wfx + m Wfm + p_f*c_prev + b_f)
    c = f*c_prev + i*tanh(x Wcx + m Wcm + b_c)
    o = sig(x Wox + m Wom + p_o*c + b_o)
    m = o*tanh(c)
    """
    Wx, Wm = params["Wx"], params["Wm"]
    H = Wm.shape[0]
    if x.shape[-1] != Wx.shape[0] or prev.m.shape[-1] != H or prev.c.shape[-1] != H:
        raise ShapeError(
            f"lstm shapes: x {x.shape}, m {prev.m.shape}, c {prev.c.shape}, Wx {Wx.shape}"
        )
    m_prev, c_prev = prev
    z = matmul(x, Wx) + matmul(m_prev, Wm) + params["b"]
    i = sigmoid(z[..., :H] + params["p_i"] * c_prev)
    f = sigmoid(z[..., H:2 * H] + params["p_f"] * c_prev)
    g = np.tanh(z[..., 2 * H:3 * H])
    c = f * c_prev + i * g
    o = sigmoid(z[..., 3 * H:] + params["p_o"] * c)
    tc = np.tanh(c)
    m = o * tc
    return LstmState(m, c), (x, m_prev, c_prev, i, f, g, o, c, tc)


def lstm_cell_backward(dm: np.ndarray, dc_next: np.ndarray, cache, params: Params, grads: Params):
    """Backward through one cell; accumulates into ``grads`` in place.

    ``dm`` is the total gradient reaching ``m_t`` and ``dc_next`` the gradient
    reaching ``c_t`` from step t+1. Returns ``(dx, dm_prev, dc_prev)``.
    """
    x, m_prev, c_prev, i, f, g, o, c, tc = cache
    dzo = dm * tc * o * (1.0 - o)
    dc = dc_next + dm * o * (1.0 - tc * tc) + dzo * params["p_o"]
    dzf = dc * c_prev * f * (1.0 - f)
    dzi = dc * g * i * (1.0 - i)
    dzg = dc * i * (1.0 - g * g)
    dc_prev = dc * f + dzi * params["p_i"] + dzf * params["p_f"]
    dz = np.concatenate([dzi, dzf, dzg, dzo], axis=-1)

    grads["Wx"] += x.T @ dz
    grads["Wm"] += m_prev.T @ dz
    grads["b"] += dz.sum(axis=0)
    grads["p_i"] += (dzi * c_prev).sum(axis=0)
    grads["p_f"] += (dzf * c_prev).sum(axis=0)
    grads["p_o"] += (dzo * c).sum(axis=0)
    return dz @ params["Wx"].T, dz @ params["Wm"].T, dc_prev


def lstm_sequence_forward(
    xs: np.ndarray,
    state0: LstmState,
    params: Params,
    resets: np.ndarray | None = None,
    matmul=np.matmul,
):
    """Run the cell over ``xs`` of shape ``(B, T, in)``.

    ``resets[b, t]`` truthy zeroes the incoming state before step ``t``
    (episode boundaries inside a recurrent chunk).
    Returns ``(ms (B, T, H), final_state, caches)``.
    """
    B, T, _ = xs.shape
    H = params["Wm"].shape[0]
    ms = np.empty((B, T, H))
    caches = []
    state = state0
    for t in range(T):
        keep = None
        if resets is not None:
            keep = (1.0 - resets[:, t].astype(np.float64))[:, None]
            state = LstmState(state.m * keep, state.c * keep)
        state, cache = lstm_cell_forward(xs[:, t], state, params, matmul)
        caches.append((cache, keep))
        ms[:, t] = state.m
    return ms, state, caches


def lstm_sequence_backward(
    dms: np.ndarray,
    caches,
    params: Params,
    dfinal: LstmState | None = None,
):
    """Backprop-through-time for :func:`lstm_sequence_forward`.

    Returns ``(dxs, grads, dstate0)``; gradients are summed over steps.
    """
    if len(caches) != dms.shape[1]:
        raise ValueError(f"have {len(caches)} cached steps for {dms.shape[1]} gradient steps")
    grads = zeros_like_params(params)
    B, T, H = dms.shape
    in_dim = params["Wx"].shape[0]
    dxs = np.empty((B, T, in_dim))
    dm_next = np.zeros((B, H)) if dfinal is None else dfinal.m.copy()
    dc_next = np.zeros((B, H)) if dfinal is None else dfinal.c.copy()
    for t in reversed(range(T)):
        cache, keep = caches[t]
        dx, dm_prev, dc_prev = lstm_cell_backward(dms[:, t] + dm_next, dc_next, cache, params, grads)
        if keep is not None:
            dm_prev = dm_prev * keep
            dc_prev = dc_prev * keep
        dxs[:, t] = dx
        dm_next, dc_next = dm_prev, dc_prev
    return dxs, grads, LstmState(dm_next, dc_next)


# ---------------------------------------------------------------------------
# Dropout and loss
# ---------------------------------------------------------------------------

def dropout(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def mse(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError(f"mse shape mismatch {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("mse of empty arrays")
    return float(np.mean((p - a) ** 2))

