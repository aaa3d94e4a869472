"""SGD with Nesterov momentum and l2 weight decay."""
import numpy as np

from engine.errors import TrainingDiverged


def nesterov_step(weight: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float,
                  weight_decay: float = 0.0) -> tuple:
    """
    One in-place Nesterov update; returns (weight, velocity).

        g' = g + weight_decay * w
        v <- momentum * v - lr * g'
        w <- w + momentum * v - lr * g'
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if weight.shape != grad.shape or weight.shape != velocity.shape:
        raise ValueError(f"shape mismatch: weight {weight.shape}, grad {grad.shape}, velocity {velocity.shape}")
    step = grad + weight_decay * weight if weight_decay else grad
    velocity *= momentum
    velocity -= lr * step
    weight += momentum * velocity - lr * step
    return weight, velocity


class NesterovSGD:
    """Keeps one velocity buffer per parameter; decay applies to weights, never to biases."""

    def __init__(self, parameters: list, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {weight_decay}")
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.parameters}

    def step(self):
        for param in self.parameters:
            if not np.all(np.isfinite(param.grad)):
                raise TrainingDiverged(f"non-finite gradient in {param.name} (lr={self.lr:g})")
            decay = self.weight_decay if param.role == "weight" else 0.0
            nesterov_step(param.value, param.grad, self.velocity[param.name], self.lr, self.momentum, decay)

    def zero_grad(self):
        for param in self.parameters:
            param.zero_grad()
