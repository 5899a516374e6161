"""Adam optimizer and finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor, backward
from .errors import StateError
from .layers import Parameter


class Adam:
    """Adam with bias correction. Moments live on each :class:`Parameter`."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise StateError(f"parameter {p.name or '?'} has no gradient; run backward first")
        for p in self.params:
            adam_update(p, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_update(p: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    g = p.grad
    p.step_count += 1
    t = p.step_count
    p.adam_m *= beta1
    p.adam_m += (1 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1 - beta2) * (g * g)
    m_hat = p.adam_m / (1 - beta1**t)
    v_hat = p.adam_v / (1 - beta2**t)
    p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.dtype)
    return total


def gradient_check(f: Callable[[], Tensor], params: Sequence[Parameter], epsilon: float = 1e-3,
                   n_coords: int = 32, seed: int = 0, floor: float = 1e-8,
                   switches: Callable[[], np.ndarray] | None = None, oracle_dtype=None,
                   max_shrink: int = 6, return_details: bool = False):
    """Compare tape gradients of ``f`` with central differences.

    ``f`` must rebuild the scalar loss from the current parameter values and be
    deterministic (freeze any sampling noise inside it). For each parameter up
    to ``n_coords`` coordinates are drawn without replacement. The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``; the maximum
    over all checked coordinates is returned.

    ``switches``, if given, returns the branch pattern of the most recent call
    to ``f`` (for example the signs inside an absolute value). A difference
    whose two sides see a different pattern than the unperturbed point straddles
    a kink, so the step is divided by 10 and retried, at most ``max_shrink``
    times. ``oracle_dtype`` evaluates the finite differences with parameters
    cast to a wider float type; analytic gradients keep the original dtype.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape, params)
    tape.free()
    analytic = [p.grad.copy() for p in params]
    base = switches() if switches is not None else None

    saved = [p.data for p in params]
    if oracle_dtype is not None:
        for p in params:
            p.data = p.data.astype(oracle_dtype)

    def central(flat, idx, eps):
        orig = flat[idx]
        flat[idx] = orig + eps
        up = f().data[()]  # numpy scalar; .item() would round a long double to float
        crossed = base is not None and not np.array_equal(switches(), base)
        flat[idx] = orig - eps
        down = f().data[()]
        crossed = crossed or (base is not None and not np.array_equal(switches(), base))
        flat[idx] = orig
        return (up - down) / (2 * eps), crossed

    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    try:
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
            for idx in picks:
                eps = epsilon
                numeric, crossed = central(flat, idx, eps)
                for _ in range(max_shrink if crossed else 0):
                    eps /= 10
                    numeric, crossed = central(flat, idx, eps)
                    if not crossed:
                        break
                a = float(grad.reshape(-1)[idx])
                numeric = float(numeric)
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
                if return_details:
                    details.append((p.name, int(idx), a, numeric, err, eps))
    finally:
        for p, data in zip(params, saved):
            p.data = data
    return (worst, details) if return_details else worst
