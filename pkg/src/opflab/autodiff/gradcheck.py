import numpy as np

from .tensor import Tape, backward


def numeric_grad(f, param, eps=1e-6, stencil=2):
    """Central finite differences of scalar ``f()`` w.r.t. ``param.data`` (perturbed in place)."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for k in range(flat.size):
        orig = flat[k]
        vals = {}
        offsets = (1, -1) if stencil == 2 else (2, 1, -1, -2)
        for s in offsets:
            flat[k] = orig + s * eps
            vals[s] = float(f().data)
        flat[k] = orig
        if stencil == 2:
            out[k] = (vals[1] - vals[-1]) / (2 * eps)
        else:
            out[k] = (-vals[2] + 8 * vals[1] - 8 * vals[-1] + vals[-2]) / (12 * eps)
    return out.reshape(param.shape)


def grad_check(f, params, eps=1e-6, stencil=2):
    """Max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    ``stencil=4`` switches to the fourth-order central formula.
    """
    with Tape() as tape:
        out = f()
    analytic = backward(tape, out, params)
    worst = 0.0
    for p in params:
        num = numeric_grad(f, p, eps, stencil)
        err = np.abs(analytic[p] - num) / np.maximum(1e-8, np.abs(num))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
