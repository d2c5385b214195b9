"""Adam with bias correction over named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Param:
    """Trainable tensor plus its Adam moment buffers and step counter."""

    def __init__(self, value: np.ndarray):
        self.tensor = Tensor(np.asarray(value), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.t = 0

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def adam_step(params: dict[str, Param], cfg: AdamConfig) -> None:
    """One in-place Adam update; parameters that received no gradient are untouched.

    Skipped parameters keep t as well, so a parameter first updated at step k
    follows the same trajectory as one created fresh at step k.
    """
    for p in params.values():
        g = p.tensor.grad
        if g is None or not np.any(g):
            continue
        p.t += 1
        p.m[...] = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g
        p.v[...] = cfg.beta2 * p.v + (1.0 - cfg.beta2) * (g * g)
        mhat = p.m / (1.0 - cfg.beta1 ** p.t)
        vhat = p.v / (1.0 - cfg.beta2 ** p.t)
        p.tensor.data -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def zero_grads(params: dict[str, Param]) -> None:
    for p in params.values():
        p.tensor.grad = None


def params_checksum(params: dict[str, Param]) -> str:
    """Order-independent digest of parameter values, for no-mutation checks."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].tensor.data).tobytes())
    return h.hexdigest()


def params_astype(params: dict[str, Param], dtype) -> dict[str, Param]:
    """Copy a parameter set at a different precision (fresh optimizer state)."""
    return {name: Param(p.tensor.data.astype(dtype)) for name, p in params.items()}
