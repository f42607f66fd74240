"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from ..model.params import ParamStore


class AdamW:
    """Moments live in the parameter dtype; the decay term never routes
    through the moment estimates, so a zero-gradient step is exactly
    p <- p * (1 - lr * weight_decay).
    """

    def __init__(
        self,
        params: ParamStore,
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ) -> None:
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def clip_gradients(self, max_norm: float = 1.0) -> float:
        """Scale all gradients so their joint L2 norm is at most max_norm."""
        total = 0.0
        grads = []
        for _, tensor in self.params.items():
            if tensor.grad is None:
                continue
            grads.append(tensor)
            total += float((tensor.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if norm > max_norm and norm > 0.0:
            scale = max_norm / norm
            for tensor in grads:
                tensor.grad *= scale
        return norm

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, tensor in self.params.items():
            grad = tensor.grad
            if grad is None:
                grad = np.zeros_like(tensor.data)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (grad - m)
            v += (1.0 - self.beta2) * (grad * grad - v)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.data -= self.lr * update + self.lr * self.weight_decay * tensor.data

    def state(self) -> dict:
        return {"step_count": self.step_count}

    def load_state(self, raw: dict) -> None:
        self.step_count = int(raw["step_count"])
