"""Adam, global-norm clipping, plateau LR schedule and early stopping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import Parameter


class Adam:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """(scalar state, moment tensors keyed by 'm.<name>' / 'v.<name>')."""
        tensors = {f"m.{k}": a for k, a in self.m.items()}
        tensors.update({f"v.{k}": a for k, a in self.v.items()})
        return {"lr": self.lr, "step": self.step_count, "betas": [self.b1, self.b2], "eps": self.eps}, tensors

    def load_state(self, meta: dict, tensors: dict[str, np.ndarray]) -> None:
        self.lr = float(meta["lr"])
        self.step_count = int(meta["step"])
        for k in self.params:
            if f"m.{k}" in tensors:
                self.m[k] = np.array(tensors[f"m.{k}"], dtype=self.params[k].dtype)
                self.v[k] = np.array(tensors[f"v.{k}"], dtype=self.params[k].dtype)


def global_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> tuple[float, float]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns (norm before, norm after).
    """
    params = list(params)
    norm = global_norm(params)
    if norm > max_norm and norm > 0:
        # float32 rounding can leave the rescaled norm a hair above the bound
        scale = max_norm / norm * (1.0 - 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
        return norm, global_norm(params)
    return norm, norm


@dataclass
class ReduceLROnPlateau:
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, metric: float, optimizer: Adam) -> bool:
        """Feed a validation loss; returns True when the LR was reduced."""
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            optimizer.lr = max(self.min_lr, optimizer.lr * self.factor)
            self.bad_epochs = 0
            return True
        return False


@dataclass
class EarlyStopping:
    patience: int = 10
    best: float = math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record a validation loss; returns True if it is a new best."""
        if metric < self.best:
            self.best, self.best_epoch, self.epochs_since_best = metric, epoch, 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.patience
