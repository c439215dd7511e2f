"""Central finite-difference gradient checking.

The numeric side here is deliberately independent of the tape: it evaluates
the supplied function as a black box on perturbed copies of the input arrays,
so it can be used to validate the autodiff path rather than mirror it.
"""

from __future__ import annotations

import numpy as np


def numeric_grad(f, arrays, index, coords=None, h: float = 1e-5) -> dict:
    """Central differences of scalar ``f(arrays)`` w.r.t. ``arrays[index]``.

    ``coords`` selects flat coordinates to probe (all of them when None).
    Returns ``{flat_coord: derivative}``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    flat = target.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    grads = {}
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = float(f(arrays))
        flat[c] = orig - h
        fm = float(f(arrays))
        flat[c] = orig
        grads[c] = (fp - fm) / (2.0 * h)
    return grads


def rel_error(a: float, b: float, floor: float = 1e-4) -> float:
    """|a-b| scaled by the larger magnitude, floored for near-zero grads."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def max_rel_error(f, arrays, grads, rng=None, coords_per_array: int = 0, h: float = 1e-5) -> float:
    """Worst relative error between autodiff ``grads`` and finite differences.

    ``grads`` is a list aligned with ``arrays`` (entries may be None to skip).
    When ``coords_per_array`` > 0 a random subset of coordinates is probed per
    array, which keeps full-model checks tractable; otherwise every
    coordinate is checked.
    """
    worst = 0.0
    for i, g in enumerate(grads):
        if g is None:
            continue
        flat_g = np.asarray(g).reshape(-1)
        if coords_per_array and flat_g.size > coords_per_array:
            if rng is None:
                raise ValueError("rng required when sampling coordinates")
            coords = rng.choice(flat_g.size, size=coords_per_array, replace=False)
        else:
            coords = range(flat_g.size)
        numeric = numeric_grad(f, arrays, i, coords=coords, h=h)
        for c, fd in numeric.items():
            worst = max(worst, rel_error(float(flat_g[c]), fd))
    return worst
