"""Reparameterization estimators of the ELBO and its gradient.

Each call draws ``M`` standard-normal noise vectors, maps them through
``theta = mu + L z``, evaluates the minibatch-rescaled log-likelihood plus the
log prior at every draw, and adds the Gaussian entropy in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .families import (
    LOG_2PI, VariationalParams, diag_positions, entropy, entropy_gradient, num_params,
    pathwise_gradient, sample, tril_indices,
)
from .models import ModelSpec, minibatch


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    grad: np.ndarray | None
    num_draws: int
    minibatch_indices: np.ndarray
    draw_values: np.ndarray
    finite: bool

    @property
    def std_error(self) -> float:
        """Monte Carlo standard error of ``value`` from the per-draw terms."""
        if self.num_draws < 2:
            return float("nan")
        return float(np.std(self.draw_values, ddof=1) / np.sqrt(self.num_draws))


def _estimate(model: ModelSpec, params: VariationalParams, num_draws: int, indices,
              rng: np.random.Generator | None, noise, with_grad: bool) -> ElboEstimate:
    if model.dim != params.dim:
        raise ValueError(f"model dimension {model.dim} != family dimension {params.dim}")
    if noise is None:
        if num_draws < 1:
            raise ValueError("need at least one Monte Carlo draw")
        if rng is None:
            raise ValueError("either rng or noise must be supplied")
        noise = rng.standard_normal((num_draws, params.dim))
    else:
        noise = np.atleast_2d(np.asarray(noise, dtype=float))
        num_draws = noise.shape[0]
    theta = sample(params, noise)

    if model.data_size > 0:
        idx = model.all_indices if indices is None else np.asarray(indices)
        lik, g_lik = minibatch(model, idx, theta)
    else:
        idx = np.empty(0, dtype=np.intp)
        lik, g_lik = 0.0, 0.0
    terms = lik + model._log_prior(theta)
    value = float(np.mean(terms)) + entropy(params)
    grad = None
    finite = bool(np.isfinite(value))
    if with_grad:
        g_theta = g_lik + model._grad_log_prior(theta)
        grad = pathwise_gradient(params, noise, g_theta) + entropy_gradient(params)
        finite = finite and bool(np.all(np.isfinite(grad)))
    return ElboEstimate(value, grad, num_draws, idx, terms, finite)


def estimate_elbo(model: ModelSpec, params: VariationalParams, num_draws: int = 10,
                  minibatch_indices=None, rng: np.random.Generator | None = None,
                  noise=None) -> ElboEstimate:
    """Unbiased ELBO estimate; ``minibatch_indices=None`` uses the full data.

    Passing ``noise`` (an ``(M, P)`` array) fixes the Monte Carlo draws.
    """
    return _estimate(model, params, num_draws, minibatch_indices, rng, noise, with_grad=False)


def estimate_grad(model: ModelSpec, params: VariationalParams, num_draws: int = 10,
                  minibatch_indices=None, rng: np.random.Generator | None = None,
                  noise=None) -> ElboEstimate:
    """ELBO estimate together with its reparameterization gradient."""
    return _estimate(model, params, num_draws, minibatch_indices, rng, noise, with_grad=True)


class FlatElbo:
    """Allocation-light ELBO and gradient on flat parameter vectors.

    Computes the same quantities as ``estimate_grad`` without building
    ``VariationalParams`` objects; used inside the optimization loop.
    """

    def __init__(self, model: ModelSpec, kind: str):
        self.model = model
        self.kind = kind
        P = self.dim = model.dim
        self.size = num_params(kind, P)
        self.rows, self.cols = tril_indices(P)
        self.dpos = diag_positions(P)
        self.diag = np.arange(P)
        self.const = 0.5 * P * (1.0 + LOG_2PI)

    def __call__(self, flat: np.ndarray, noise: np.ndarray, idx: np.ndarray) -> tuple[float, np.ndarray]:
        P, model = self.dim, self.model
        mu, scale = flat[:P], flat[P:]
        if self.kind == "mean_field":
            sd = np.exp(scale)
            theta = mu + noise * sd
            log_diag = scale
        else:
            L = np.zeros((P, P))
            L[self.rows, self.cols] = scale
            log_diag = scale[self.dpos]
            L[self.diag, self.diag] = np.exp(log_diag)
            theta = mu + noise @ L.T
        terms = model._log_prior(theta)
        g_theta = model._grad_log_prior(theta)
        if model.data_size > 0:
            lik, g_lik = model._lik_and_grad(theta, idx)
            s = model.data_size / idx.size
            terms = terms + s * lik
            g_theta = g_theta + s * g_lik
        M = noise.shape[0]
        value = float(terms.sum() / M) + self.const + float(log_diag.sum())
        grad = np.empty(self.size)
        grad[:P] = g_theta.sum(axis=0) / M
        if self.kind == "mean_field":
            grad[P:] = (g_theta * noise).sum(axis=0) / M * sd + 1.0
        else:
            g_scale = (g_theta.T @ noise)[self.rows, self.cols] / M
            g_scale[self.dpos] = g_scale[self.dpos] * np.exp(log_diag) + 1.0
            grad[P:] = g_scale
        return value, grad
