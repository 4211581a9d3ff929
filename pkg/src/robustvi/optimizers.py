"""Constant-rate stochastic ascent ``lambda <- lambda + eta * gamma_t * g``.

``gamma_t`` is 1 for plain SGD and the usual per-coordinate normalizers for
Adagrad, RMSprop and Adam.  States are immutable; ``step`` returns a new one.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .families import VariationalParams

OPTIMIZER_KINDS = ("sgd", "adagrad", "rmsprop", "adam")
EPS = 1e-8


class DivergenceError(FloatingPointError):
    """Raised when an update would produce non-finite parameters."""


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    eta: float
    first: np.ndarray = field(repr=False)
    second: np.ndarray = field(repr=False)
    t: int = 0
    rmsprop_decay: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    max_grad_norm: float | None = None

    @property
    def dim(self) -> int:
        return self.second.size


def init(kind: str, eta: float, num_params: int, *, rmsprop_decay: float = 0.9,
         betas: tuple[float, float] = (0.9, 0.999),
         max_grad_norm: float | None = None) -> OptimizerState:
    if kind not in OPTIMIZER_KINDS:
        raise ValueError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZER_KINDS}")
    if not eta > 0:
        raise ValueError(f"base step size must be positive, got {eta}")
    if num_params < 1:
        raise ValueError("optimizer needs at least one parameter")
    zeros = np.zeros(num_params)
    return OptimizerState(kind, float(eta), zeros, zeros.copy(), 0, rmsprop_decay,
                          tuple(betas), max_grad_norm)


def direction(kind: str, g: np.ndarray, first: np.ndarray, second: np.ndarray, t: int,
              rmsprop_decay: float = 0.9, betas: tuple[float, float] = (0.9, 0.999)):
    """Normalized ascent direction for step ``t`` (1-based) and the new moment buffers."""
    if kind == "sgd":
        return g, first, second
    if kind == "adagrad":
        second = second + g * g
        return g / np.sqrt(second + EPS), first, second
    if kind == "rmsprop":
        second = rmsprop_decay * second + (1.0 - rmsprop_decay) * g * g
        return g / np.sqrt(second + EPS), first, second
    b1, b2 = betas
    first = b1 * first + (1.0 - b1) * g
    second = b2 * second + (1.0 - b2) * g * g
    m_hat = first / (1.0 - b1**t)
    v_hat = second / (1.0 - b2**t)
    return m_hat / (np.sqrt(v_hat) + EPS), first, second


def step(state: OptimizerState, params, grad):
    """Apply one ascent step; ``params`` may be a flat array or ``VariationalParams``."""
    is_family = isinstance(params, VariationalParams)
    flat = params.flatten() if is_family else np.asarray(params, dtype=float)
    g = np.asarray(grad, dtype=float)
    if g.shape != (state.dim,) or flat.shape != (state.dim,):
        raise ValueError(f"expected vectors of length {state.dim}, got {flat.shape} and {g.shape}")
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient at optimizer step {state.t + 1}")
    if state.max_grad_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > state.max_grad_norm:
            g = g * (state.max_grad_norm / norm)

    t = state.t + 1
    update, first, second = direction(state.kind, g, state.first, state.second, t,
                                      state.rmsprop_decay, state.betas)
    with np.errstate(over="ignore", invalid="ignore"):
        new_flat = flat + state.eta * update
    if not np.all(np.isfinite(new_flat)):
        raise DivergenceError(f"non-finite parameters after optimizer step {t}")
    new_state = replace(state, first=first, second=second, t=t)
    if is_family:
        return new_state, VariationalParams.from_flat(params.kind, params.dim, new_flat)
    return new_state, new_flat
