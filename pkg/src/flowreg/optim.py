"""Adam optimizer and the step-decay learning-rate schedule."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def lr_at(epoch: int, base: float, decay_every: int = 20) -> float:
    """Divide the base rate by 10 every ``decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * (0.1 ** (epoch // decay_every))


class Adam:
    """Adam with bias correction over a named parameter group.

    Moment buffers are keyed by parameter name so the whole state can be
    checkpointed and restored bitwise.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k}")
            m = b1 * self.m[k] + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * (g * g)
            self.m[k] = m
            self.v[k] = v
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_entries(self, prefix: str) -> dict[str, np.ndarray]:
        out = {prefix + ".t": np.array([float(self.t)], dtype=np.float64)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, entries: dict[str, np.ndarray], prefix: str):
        key = prefix + ".t"
        if key not in entries:
            raise KeyError(f"missing optimizer state {key!r}")
        self.t = int(entries[key][0])
        for k in self.params:
            self.m[k] = entries[f"{prefix}.m.{k}"].astype(self.m[k].dtype, copy=True)
            self.v[k] = entries[f"{prefix}.v.{k}"].astype(self.v[k].dtype, copy=True)
