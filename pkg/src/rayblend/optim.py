import numpy as np


class GradientDescent:
    def __init__(self, lr: dict[str, float]):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            params[k] -= self.lr[k] * g


class Adam:
    """Adaptive moment estimation with per-parameter-group learning rates.

    Parameters are updated in place; groups without a gradient this step keep
    their moments untouched.
    """

    def __init__(self, lr: dict[str, float], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / (1.0 - self.beta1 ** t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** t)
            params[k] -= self.lr[k] * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: dict[str, float]):
    if name in ("adam", "adaptive-moment"):
        return Adam(lr)
    if name in ("sgd", "plain-gradient"):
        return GradientDescent(lr)
    raise ValueError(f"unknown optimizer {name!r}")
