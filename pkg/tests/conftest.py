from __future__ import annotations

import numpy as np


def numeric_grads(loss_fn, params: dict, eps: float = 1e-6) -> dict:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params`` (in place)."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    """Largest per-array ``|a - n| / (|a| + |n|)`` in the 2-norm."""
    worst = 0.0
    for name, n in numeric.items():
        a = analytic[name]
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        if denom < 1e-10:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
