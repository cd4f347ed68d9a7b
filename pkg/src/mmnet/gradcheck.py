"""Central-difference gradient verification.

The function under test maps a ParamSet to ``(scalar_loss, grads)`` where
grads is a dict keyed like the ParamSet.  Checking runs in float64 only;
float32 round-off would drown the signal at the tolerances we care about.

The relative error uses a floored denominator,

    rel = |a - n| / max(|a|, |n|, 1e-4)

so coordinates whose true gradient is essentially zero are compared in
absolute terms at 1e-4 scale instead of blowing up the ratio.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DivergenceError, InputError
from .params import ParamSet
from .rng import Rng


def grad_check(f, params: ParamSet, eps: float = 1e-5,
               coords_per_tensor: int | None = None, seed: int = 2024) -> float:
    """Return the worst relative error between analytic and numeric grads.

    Every coordinate of every tensor is probed unless ``coords_per_tensor``
    caps the per-tensor count, in which case coordinates are subsampled with
    a fixed-seed stream so every tensor still gets coverage.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise ConfigError(
                f"grad_check requires float64 parameters, {name!r} is {t.dtype}"
            )
        if not t.flags.c_contiguous:
            raise InputError(f"parameter {name!r} must be C-contiguous")

    loss0, grads = f(params)
    if not np.isfinite(loss0):
        raise DivergenceError("non-finite loss at the linearisation point")
    for name in params.names():
        if name not in grads:
            raise InputError(f"analytic gradients missing entry for {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite analytic gradient for {name!r}")

    rng = Rng(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.reshape(-1)
        total = flat.size
        if coords_per_tensor is None or total <= coords_per_tensor:
            idxs = range(total)
        else:
            idxs = sorted({rng.randint(total) for _ in range(coords_per_tensor)})
        gflat = np.asarray(grads[name]).reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = f(params)
            flat[i] = orig - eps
            lm, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise DivergenceError(
                    f"non-finite loss while perturbing {name!r}[{i}]"
                )
            num = (lp - lm) / (2.0 * eps)
            ana = float(gflat[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-4)
            if rel > worst:
                worst = rel
    return worst
