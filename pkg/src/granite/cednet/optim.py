import numpy as np


class Adam:
    """Adam with bias correction; moments start at zero."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params, grads, lr):
        """Update ``params`` in place and return them."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
        return params


def adam_step(state, params, grads, lr):
    return state.step(params, grads, lr)


def cyclic_lr(epoch, base_lr, max_lr, cycle=200):
    """Triangular schedule: ``base_lr`` at the start of each cycle, ``max_lr`` mid-cycle."""
    half = cycle / 2.0
    x = abs((epoch % cycle) / half - 1.0)
    return base_lr + (max_lr - base_lr) * (1.0 - x)
