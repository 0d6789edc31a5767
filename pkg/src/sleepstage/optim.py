"""Parameter update rules: Adam with bias correction and a plain
gradient-descent baseline.

Adam keeps per-parameter first/second moment accumulators; each step does

    m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
    m_hat = m/(1-b1^t)          v_hat = v/(1-b2^t)
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)

so for any steady gradient the step magnitude approaches lr.
Defaults: lr=3e-5, beta1=0.9, beta2=0.999, eps=1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch

DEFAULT_LR = 3e-5
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    lr: float = DEFAULT_LR
    eps: float = DEFAULT_EPS

    @classmethod
    def init(
        cls,
        params: list[np.ndarray],
        lr: float = DEFAULT_LR,
        beta1: float = DEFAULT_BETA1,
        beta2: float = DEFAULT_BETA2,
        eps: float = DEFAULT_EPS,
    ) -> "AdamState":
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            t=0,
            beta1=beta1,
            beta2=beta2,
            lr=lr,
            eps=eps,
        )


def _check_shapes(params, grads, state_arrays=None):
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {i} shape {p.shape} != grad shape {g.shape}")
        if state_arrays is not None and state_arrays[i].shape != p.shape:
            raise ShapeMismatch(f"optimizer state {i} does not match param {i}")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One Adam update, in place. Returns (params, state)."""
    _check_shapes(params, grads, state.m)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2_root = np.sqrt(1.0 - state.beta2 ** state.t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        scratch = g * g
        v *= state.beta2
        v += (1.0 - state.beta2) * scratch
        # update = lr * (m/bc1) / (sqrt(v/bc2) + eps), built in place
        np.sqrt(v, out=scratch)
        scratch /= bc2_root
        scratch += state.eps
        np.divide(m, scratch, out=scratch)
        scratch *= state.lr / bc1
        p -= scratch
    return params, state


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float):
    """Plain gradient descent, in place (the no-optimizer baseline)."""
    _check_shapes(params, grads)
    for p, g in zip(params, grads):
        p -= lr * g
    return params
