"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .optim import Param, zero_grads
from .rng import SplitRng


def grad_check(
    loss_fn,
    params: dict[str, Param],
    h: float = 1e-5,
    max_coords_per_tensor: int = 256,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and numeric gradients.

    loss_fn() must rebuild the scalar loss from the current parameter values.
    Large tensors are subsampled to max_coords_per_tensor coordinates. Run the
    parameters in float64; float32 round-off swamps the h**2 truncation term.
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for name, p in params.items()}

    rng = SplitRng(seed, ("gradcheck",))
    worst = 0.0
    for name, p in params.items():
        flat = p.tensor.data.reshape(-1)
        n = flat.shape[0]
        coords = np.arange(n) if n <= max_coords_per_tensor else np.sort(
            rng.split(name).choice(n, size=max_coords_per_tensor, replace=False)
        )
        aflat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    zero_grads(params)
    return worst
