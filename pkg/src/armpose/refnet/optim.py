"""Adam with decoupled weight decay and per-group learning-rate scales."""

from __future__ import annotations

import numpy as np

from .layers import Layer


class AdamW:
    """Updates every parameter of ``model`` in place.

    ``lr_scale`` maps a parameter-name prefix (``"keypoint_head"``) to a
    multiplier on the base learning rate; a scale of 0 freezes the group
    exactly. Biases, norms and position tables are exempt from decay.
    """

    def __init__(self, model: Layer, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8, lr_scale=None):
        if lr < 0 or weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p, _ in model.named_parameters()}
        self.v = {name: np.zeros_like(p) for name, p, _ in model.named_parameters()}

    def scale_for(self, name: str) -> float:
        for prefix, s in self.lr_scale.items():
            if name.startswith(prefix):
                return s
        return 1.0

    @staticmethod
    def decays(name: str, p: np.ndarray) -> bool:
        return p.ndim > 1 and not name.endswith("pos")

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p, g in self.model.named_parameters():
            lr = self.lr * self.scale_for(name)
            if lr == 0.0:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and self.decays(name, p):
                p -= (lr * self.weight_decay) * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
