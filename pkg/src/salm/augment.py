from __future__ import annotations

import numpy as np


def perturb_center(x, r_t, rng: np.random.Generator | None = None, divisor: float = 3.0):
    """Jitter crop centres with isotropic Gaussian noise of per-axis std ``r_t / divisor``.

    ``rng=None`` is the evaluation mode and returns the centres unchanged.
    """
    if r_t <= 0:
        raise ValueError(f"patch radius must be positive, got {r_t}")
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        return x.copy()
    return x + rng.normal(0.0, r_t / divisor, size=x.shape)
