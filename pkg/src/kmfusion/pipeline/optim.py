import math

import numpy as np


class RegistryError(ValueError):
    pass


def cosine_lr(t, T, base=1e-4, min_lr=1e-5):
    """Cosine annealing from ``base`` at t=0 to ``min_lr`` at t=T."""
    if not 0 <= t <= T:
        raise ValueError(f"cosine_lr needs 0 <= t <= T, got t={t}, T={T}")
    w = 0.5 * (1.0 + math.cos(math.pi * t / T)) if T else 1.0
    return base * w + min_lr * (1.0 - w)


class Adam:
    """Bias-corrected Adam over a fixed, ordered parameter list.

    Parameters without a gradient are treated as having a zero gradient.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise RegistryError("parameter registry contains duplicates")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise RegistryError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(state, lr=None):
    """Functional alias: one in-place update of ``state.params``."""
    state.step(lr)
    return state
