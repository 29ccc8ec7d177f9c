"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Update per step t (bias-corrected moments mhat, vhat):

        p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * p

    The decay term multiplies the pre-update parameter value and never
    touches the moment buffers. Gradients are cleared after each step;
    a parameter with no gradient at step time is an error.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if not params:
            raise ValueError("AdamW needs at least one parameter")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"AdamW.step: missing gradient for parameter(s) {missing}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            g = p.grad
            dt = p.data.dtype
            m = self.m[k]
            v = self.v[k]
            m *= dt.type(b1)
            m += dt.type(1.0 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1.0 - b2) * (g * g)
            mhat = m / dt.type(bc1)
            vhat = v / dt.type(bc2)
            update = self.lr * mhat / (np.sqrt(vhat) + dt.type(self.eps))
            if self.weight_decay:
                update = update + (self.lr * self.weight_decay) * p.data
            p.data -= update.astype(dt, copy=False)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k], dtype=self.m[k].dtype).reshape(self.m[k].shape).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=self.v[k].dtype).reshape(self.v[k].shape).copy()
