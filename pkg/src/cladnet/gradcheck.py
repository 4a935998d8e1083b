"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import GradTape, Tensor, no_grad


def _scalar(value) -> float:
    out = float(np.asarray(value.data if isinstance(value, Tensor) else value).reshape(()))
    if not np.isfinite(out):
        raise FloatingPointError(f"objective returned non-finite value {out}")
    return out


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, eps: float) -> np.ndarray:
    base = param.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        param.data = bumped.reshape(base.shape)
        with no_grad():
            plus = _scalar(f())
        bumped[i] = flat[i] - eps
        param.data = bumped.reshape(base.shape)
        with no_grad():
            minus = _scalar(f())
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
    param.data = base
    return grad


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    return_details: bool = False,
):
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and must read ``params`` through closure; it is
    re-evaluated ``2 * n`` times so it must be deterministic.
    The per-entry error is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.requires_grad = True
    with GradTape() as tape:
        loss = f()
    _scalar(loss)
    grads = tape.backward(loss)
    worst = 0.0
    details = {}
    for idx, p in enumerate(params):
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        numeric = numeric_gradient(f, p, eps)
        err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
        e = float(err.max()) if err.size else 0.0
        details[p.name or f"param{idx}"] = e
        worst = max(worst, e)
    return (worst, details) if return_details else worst
