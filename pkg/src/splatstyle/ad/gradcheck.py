"""Central-difference gradient verification.

The numeric side is deliberately independent of the engine: it re-runs
the forward function on perturbed float64 copies and never touches the
recorded graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DomainError
from .tensor import Tensor


def grad_check(f: Callable[..., Tensor], xs: Sequence[np.ndarray] | np.ndarray,
               h: float = 1e-4, n_probes: int = 32, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps Tensor arguments to a scalar Tensor. Inputs are promoted to
    float64; n_probes coordinates are probed per input, chosen by `seed`.
    """
    if isinstance(xs, np.ndarray):
        xs = [xs]
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    leaves = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in xs]
    out = f(*leaves)
    val = float(out.data)
    if not np.isfinite(val):
        raise DomainError(f"function value is not finite: {val}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for xi, leaf in enumerate(leaves):
        x = xs[xi]
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        n = min(n_probes, x.size)
        flat_idx = rng.choice(x.size, size=n, replace=False) if x.size else []
        for j in flat_idx:
            idx = np.unravel_index(j, x.shape)
            args_p = [a.copy() for a in xs]
            args_m = [a.copy() for a in xs]
            args_p[xi][idx] += h
            args_m[xi][idx] -= h
            fp = float(f(*[Tensor(a, dtype=np.float64) for a in args_p]).data)
            fm = float(f(*[Tensor(a, dtype=np.float64) for a in args_m]).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DomainError("perturbed function value is not finite")
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad[idx])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
