"""Finite-difference gradient oracle.

Checks the tape's analytic adjoints against central differences. The
difference path never touches the tape, so the two routes stay independent.
Only double precision is supported: in float32 the finite differences are
dominated by rounding noise.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward

# Denominator floor for the relative error. Central differences on an O(1)
# loss resolve absolute gradient differences down to roughly
# ulp(loss)/(2*eps) ~ 1e-10; the floor turns the relative tolerance into an
# absolute one of tol*floor at tiny-gradient coordinates, which must sit
# above that resolution limit or the check measures rounding noise.
REL_ERR_FLOOR = 1e-6


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar Tensor and be deterministic so it
    can be re-evaluated at perturbed points. Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    if point.data.dtype != np.float64:
        raise ValueError("grad_check: point must be float64")

    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    backward(out, tape)
    analytic = x.grad.reshape(-1).copy()

    base = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    probe = Tensor(base.copy().reshape(x.data.shape), requires_grad=False)
    flat = probe.data.reshape(-1)
    for i in range(base.size):
        orig = base[i]
        flat[i] = orig + eps
        hi = f(probe).item()
        flat[i] = orig - eps
        lo = f(probe).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"grad_check: f not finite at perturbed coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))
