import logging
from typing import Dict

import numpy as np

from utils.errors import InvalidParam, NonFiniteLoss
from utils.tensor import Tensor

logger = logging.getLogger(__name__)


class Optimizer:
    """Updates a fixed set of named parameters in place"""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float):
        if not np.isfinite(learning_rate) or learning_rate < 0:
            raise InvalidParam(f"learning rate must be finite and >= 0, got {learning_rate}")
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteLoss(f"non-finite gradient for {name}")
            grads[name] = g
        return grads

    def step(self):
        grads = self._gradients()
        self.step_count += 1
        if self.learning_rate == 0.0:
            return
        for name, g in grads.items():
            self.params[name].data -= self._update(name, g)

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: Dict[str, Tensor], learning_rate: float = 1e-3, momentum: float = 0.0):
        super().__init__(params, learning_rate)
        if not 0.0 <= momentum < 1.0:
            raise InvalidParam(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        if self.momentum == 0.0:
            return self.learning_rate * grad
        v = self.momentum * self.velocity.get(name, np.zeros_like(grad)) + grad
        self.velocity[name] = v
        return self.learning_rate * v


class Adam(Optimizer):
    """Adam with bias-corrected first and second moments"""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        m = self.beta1 * self.m.get(name, np.zeros_like(grad)) + (1.0 - self.beta1) * grad
        v = self.beta2 * self.v.get(name, np.zeros_like(grad)) + (1.0 - self.beta2) * grad * grad
        self.m[name], self.v[name] = m, v
        m_hat = m / (1.0 - self.beta1 ** self.step_count)
        v_hat = v / (1.0 - self.beta2 ** self.step_count)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def build_optimizer(name: str, params: Dict[str, Tensor], learning_rate: float, momentum: float = 0.0) -> Optimizer:
    if name == "adam":
        return Adam(params, learning_rate)
    if name == "sgd":
        return SGD(params, learning_rate, momentum)
    raise InvalidParam(f"unknown optimizer {name!r} (expected adam or sgd)")
