"""Gradient-descent plumbing shared by the LSTM, the energy MLP and the Q-network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    bptt_window: int = 24
    seed: int = 0
    init_scale: float = 0.1
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.bptt_window < 1:
            raise ValueError("bptt_window must be positive")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


def sgd_update(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    if lr == 0:
        return
    for p, g in zip(params, grads):
        p -= lr * g


def central_difference(loss: Callable[[], float], params: Iterable[np.ndarray],
                       eps: float = 1e-5) -> list[np.ndarray]:
    """Numerical gradient of ``loss()`` w.r.t. every entry of ``params``.

    Each array is perturbed in place and restored, so ``loss`` must read the
    live arrays.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray],
                       per_entry: bool = False) -> float:
    """Worst |a - n| / max(1e-8, |a| + |n|) over parameter arrays.

    By default |.| is the Euclidean norm of each named parameter array.
    ``per_entry`` applies the ratio elementwise instead; entries whose true
    gradient is ~1e-9 then sit at the float64 roundoff floor of a 1e-5 central
    difference (about 1e-11 absolute) and can exceed 1e-4 on correct code.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        if per_entry:
            rel = float((np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))).max())
        else:
            rel = float(np.linalg.norm(a - n) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(n)))
        worst = max(worst, rel)
    return worst
