"""AdamW with bias correction and decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class AdamW:
    """Tracks first/second moments per parameter name; decay never passes
    through the gradient (it is applied directly to the weights)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """One update; only parameter names present in `grads` are touched."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / np.asarray(bc1, dtype=p.data.dtype)
            v_hat = v / np.asarray(bc2, dtype=p.data.dtype)
            if self.weight_decay != 0.0:
                p.data -= np.asarray(self.lr * self.weight_decay, dtype=p.data.dtype) * p.data
            p.data -= np.asarray(self.lr, dtype=p.data.dtype) * m_hat / (np.sqrt(v_hat) + np.asarray(self.eps, dtype=p.data.dtype))

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flat view of optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out
