"""Central-difference gradient oracle.

The analytic side comes from the tape; the numeric side re-evaluates ``f``
with single elements nudged by +/- eps. Both run in float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from accunet.tensor import ShapeError, Tape, Tensor


# errors this small are already exact to float64 finite-difference precision
_RETRY_BELOW = 1e-7


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {t.shape}")
    return float(t.data.reshape(()))


def _central(f, xt, flat, i, eps) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    fp = _scalar(f(xt))
    flat[i] = orig - eps
    fm = _scalar(f(xt))
    flat[i] = orig
    return (fp - fm) / (2 * eps)


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
               eps: Union[float, Sequence[float]] = 1e-4, *,
               wrt: Sequence[Tensor] = (), max_checks: Optional[int] = None,
               seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor built from ``x`` to a scalar tensor. Gradients are
    checked w.r.t. ``x`` and every tensor in ``wrt`` (typically module
    parameters, which must already be float64). ``max_checks`` caps the
    number of probed elements per tensor; the sample is seeded.

    ``eps`` may be a ladder of step sizes. Elements that disagree at the
    first step are re-probed with the next ones and keep their best
    agreement. This tolerates a step that straddles a ReLU kink or a max
    switch inside a deep program, while a wrong gradient still disagrees at
    every step.
    """
    steps = (eps,) if np.isscalar(eps) else tuple(eps)
    for t in wrt:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check runs in float64; {t!r} is {t.dtype}")
    x64 = np.array(x, dtype=np.float64)
    xt = Tensor(x64, requires_grad=True)
    with Tape() as tape:
        out = f(xt)
        _scalar(out)
    grads = tape.backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in [xt, *wrt]:
        analytic = grads.get(t.id)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError(f"{t!r} is not contiguous; cannot perturb in place")
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        a = analytic.reshape(-1)
        for i in idx:
            err = np.inf
            for step in steps:
                err = min(err, float(rel_error(a[i], _central(f, xt, flat, i, step))))
                if err < _RETRY_BELOW:
                    break
            worst = max(worst, err)
    return worst
