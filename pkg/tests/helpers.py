"""Independent oracles: central finite differences and a brute-force c-index."""

import numpy as np

from cmfuse.tensor import Tape, backward

H = 1e-5


def numeric_grad(fn, tensor, coords=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data`` (in place)."""
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + H
        up = fn()
        flat[i] = orig - H
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * H)
    return out.reshape(tensor.shape)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6))


def gradcheck(build, wrt, rng=None, max_coords=40):
    """Max relative error between taped gradients and finite differences.

    ``build()`` returns a 1x1 Tensor. Up to ``max_coords`` entries per tensor
    are probed; the analytic gradient is compared on the same entries.
    """
    with Tape() as tape:
        loss = build()
    backward(tape, loss, wrt)
    worst = 0.0
    for t in wrt:
        analytic = t.grad.copy().reshape(-1)
        coords = np.arange(t.size)
        if rng is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, max_coords, replace=False))
        numeric = numeric_grad(lambda: build().item(), t, coords).reshape(-1)
        worst = max(worst, rel_err(analytic[coords], numeric[coords]))
    return worst


def brute_cindex(risks, times, events):
    """O(n^2) double loop over ordered pairs."""
    num = 0.0
    den = 0
    n = len(risks)
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    return num / den if den else None
