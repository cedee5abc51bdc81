"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor
from .errors import NonFiniteError


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = 16,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is re-evaluated with each sampled coordinate of each parameter
    perturbed by ``±step`` in place; it must be deterministic. The error per
    coordinate is ``|a - c| / max(|a| + |c|, floor)``. The floor keeps
    gradients that are smaller than the difference quotient's rounding noise
    from being judged relative to that noise. With ``max_coords=None`` every
    coordinate is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.grad = None
        p.requires_grad = True
    out = f()
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            raise NonFiniteError(f"analytic gradient of {p.name or 'parameter'} is not finite")
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            fp = float(f().data)
            flat[idx] = orig - step
            fm = float(f().data)
            flat[idx] = orig
            central = (fp - fm) / (2.0 * step)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - central) / max(abs(a) + abs(central), floor)
            worst = max(worst, err)
    return worst
