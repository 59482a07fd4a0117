"""Adagrad over dictionaries of numpy arrays (shared by model and policy training)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdagradState:
    """Running sum of squared gradients, one accumulator per parameter entry."""

    accum: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdagradState":
        return cls({k: np.zeros_like(v, dtype=float) for k, v in params.items()})

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {f"adagrad.{k}": v for k, v in self.accum.items()}


def global_norm(grad: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grad.values())))


def clip_by_global_norm(grad: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grad
    norm = global_norm(grad)
    if norm <= max_norm or norm == 0.0:
        return grad
    scale = max_norm / norm
    return {k: g * scale for k, g in grad.items()}


def adagrad_update(
    params: dict[str, np.ndarray],
    grad: dict[str, np.ndarray],
    state: AdagradState,
    learning_rate: float,
    epsilon: float = 1e-8,
    clip_norm: float | None = None,
) -> dict[str, np.ndarray]:
    """Return descended parameters; ``state`` accumulators are updated in place.

    ``step = -lr * g / sqrt(accum + eps)`` with ``accum += g * g`` applied
    first.  A non-finite gradient raises before anything is modified.
    """
    if set(grad) != set(params):
        raise KeyError("gradient and parameter names differ")
    for k, g in grad.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k}")
    grad = clip_by_global_norm(grad, clip_norm)
    if not state.accum:
        state.accum = {k: np.zeros_like(v, dtype=float) for k, v in params.items()}
    new = {}
    for k, p in params.items():
        g = grad[k]
        state.accum[k] += g * g
        new[k] = p - learning_rate * g / np.sqrt(state.accum[k] + epsilon)
    state.steps += 1
    return new
