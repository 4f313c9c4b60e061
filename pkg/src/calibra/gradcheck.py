"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DiffArray, backward, no_grad


def gradcheck(fn: Callable[[], DiffArray], params: Sequence[DiffArray], n_coords: int = 20,
              step: float = 1e-5, seed: int = 0) -> float:
    """Return the worst relative error over ``n_coords`` random coordinates.

    ``fn`` rebuilds the scalar loss from the current parameter values. The
    error at one coordinate is ``|fd - analytic| / max(1, |analytic|)``.
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.values.size for p in params])
    worst = 0.0
    for _ in range(n_coords):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[which]
        flat = p.values.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        with no_grad():
            flat[i] = orig + step
            up = float(fn().values)
            flat[i] = orig - step
            down = float(fn().values)
        flat[i] = orig
        fd = (up - down) / (2 * step)
        a = float(analytic[which].reshape(-1)[i])
        worst = max(worst, abs(fd - a) / max(1.0, abs(a)))
    return worst
