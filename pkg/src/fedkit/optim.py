"""Plain SGD and Adam over parameter sets.

Optimizer state (Adam moments, step counter) lives in the optimizer object
and persists for as long as the caller keeps it around; federated clients
deliberately keep theirs across rounds.
"""
from __future__ import annotations

import numpy as np

from .errors import UnknownStrategyName
from .params import ParameterSet


class SGD:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        params.check_structure(grads)
        lr = self.lr
        return ParameterSet(
            (n, p - p.dtype.type(lr) * g) for (n, p), (_, g) in zip(params.items(), grads.items())
        )


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        params.check_structure(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        out = []
        for (name, p), (_, g) in zip(params.items(), grads.items()):
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            step = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            out.append((name, p - step))
        return ParameterSet(out)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(kind: str, lr: float):
    if kind not in OPTIMIZERS:
        raise UnknownStrategyName(f"unknown optimizer {kind!r}; known: {sorted(OPTIMIZERS)}")
    return OPTIMIZERS[kind](lr)
