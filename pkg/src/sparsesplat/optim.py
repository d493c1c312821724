"""Minimal Adam over numpy arrays, plus the learning-rate schedules used by
the alignment and bundle-adjustment loops."""

import numpy as np

from .errors import InvalidInputError


class Adam:
    """Adam with moment state keyed by parameter name.

    Learning rates are supplied per step rather than at construction, which
    lets callers drive schedules and per-row scaling: ``lr`` may be a scalar
    or any array broadcastable against the parameter (e.g. an (N, 1) column
    of per-point rates).
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise InvalidInputError("betas must lie in [0, 1)")
        if eps <= 0.0:
            raise InvalidInputError("eps must be positive")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, key, param, grad, lr):
        """Update ``param`` in place from ``grad`` and return it.

        State is created lazily on the first step for each key; the caller
        must keep array shapes stable per key.
        """
        grad = np.asarray(grad, dtype=np.float64)
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
            self.t[key] = 0
        self.t[key] += 1
        t = self.t[key]
        m, v = self.m[key], self.v[key]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return param


def cosine_lr(step, total, base, floor):
    """Cosine anneal from ``base`` at step 0 down to ``floor`` at the last step."""
    if total <= 1:
        return base
    phase = np.pi * min(step, total - 1) / (total - 1)
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(phase))


def exponential_lr(step, total, base, final_ratio=0.1):
    """Geometric decay from ``base`` to ``base * final_ratio`` across the run."""
    if total <= 1:
        return base
    frac = min(step, total - 1) / (total - 1)
    return base * final_ratio**frac
