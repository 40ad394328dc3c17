"""Adam and the sine-annealed training loop shared by both graph models."""

from __future__ import annotations

import math

import numpy as np

from .errors import DivergedLoss, StepOutOfRange
from .tensor import Tensor


def sine_lr(step: int, total_steps: int, min_lr: float, max_lr: float) -> float:
    """Sine-annealed learning rate: min at the endpoints, max at mid-run.

        lr(step) = min_lr + (max_lr - min_lr) * sin(pi * step / total_steps)
    """
    if total_steps < 1:
        raise StepOutOfRange("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    return min_lr + (max_lr - min_lr) * math.sin(math.pi * step / total_steps)


class Adam:
    """Adam on a fixed parameter list; ``lr`` may be reassigned per step."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * p.grad
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * np.square(p.grad)
            update = (self._m[i] / bc1) / (np.sqrt(self._v[i] / bc2) + self.eps)
            p.data = p.data - self.lr * update


def train_with_schedule(params, loss_for_indices, n_examples, *, epochs, batch_size,
                        min_lr, max_lr, seed, eval_fn=None) -> dict:
    """Shuffled minibatch training with the sine LR schedule.

    ``loss_for_indices(indices)`` must return a scalar loss Tensor for the
    given example indices. Returns a history dict with the per-step lr
    trace, per-epoch mean training loss, and (if ``eval_fn`` is given)
    full-dataset MAE before and after training.
    """
    rng = np.random.default_rng(seed)
    steps_per_epoch = max(1, math.ceil(n_examples / batch_size))
    total_steps = epochs * steps_per_epoch
    optimizer = Adam(params)
    history: dict = {"lr": [], "epoch_mae": []}
    if eval_fn is not None:
        history["init_mae"] = float(eval_fn())
    step = 0
    for _epoch in range(epochs):
        perm = rng.permutation(n_examples)
        batch_losses = []
        for start in range(0, n_examples, batch_size):
            indices = perm[start : start + batch_size]
            optimizer.lr = sine_lr(step, total_steps, min_lr, max_lr)
            optimizer.zero_grad()
            loss = loss_for_indices(indices)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite loss {value} at step {step}")
            loss.backward()
            optimizer.step()
            history["lr"].append(optimizer.lr)
            batch_losses.append(value)
            step += 1
        history["epoch_mae"].append(float(np.mean(batch_losses)))
    if eval_fn is not None:
        history["final_mae"] = float(eval_fn())
    return history
