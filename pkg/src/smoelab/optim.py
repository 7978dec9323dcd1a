"""Adaptive-moment (Adam) optimizer over lists of parameter Tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimizerState:
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_state(params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999,
               epsilon=1e-8) -> OptimizerState:
    return OptimizerState(
        step=0,
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
        learning_rate=lr,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: list[Tensor], state: OptimizerState,
              grads: list[np.ndarray] | None = None) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to the parameters' accumulated ``.grad`` slots; a
    missing gradient is treated as zero.
    """
    if len(state.first_moment) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in params]
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameter list")
    for p, g, m, v in zip(params, grads, state.first_moment,
                          state.second_moment):
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment,
                          state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
