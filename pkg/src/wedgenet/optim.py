"""ADAM optimizer over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    """Moment estimates and step counter for one set of named parameters."""

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        """Fresh zeroed state matching ``params`` (a name -> array mapping)."""
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params, grads, state, lr):
    """Apply one ADAM update in place and advance ``state``.

    ``params`` and ``grads`` are name -> array mappings over the same keys.
    Parameters with an exactly zero gradient are left bit-identical.
    Non-finite gradients raise ``TrainingError`` naming the parameter.
    """
    missing = set(params) - set(grads)
    if missing:
        raise TrainingError(f"missing gradients for parameters: {sorted(missing)}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter '{name}' {w.shape}"
            )
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        w -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
