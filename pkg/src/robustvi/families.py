"""Gaussian variational families in an unconstrained parameterization.

A full-rank member is ``N(mu, L L^T)`` with ``L`` lower triangular; its scale
block stores the row-major lower triangle of ``L`` with the diagonal entries
replaced by their logarithms.  A mean-field member stores only the log
standard deviations.  The flattened parameter vector is always
``[location; scale]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np
from scipy.linalg import solve_triangular

FamilyKind = Literal["mean_field", "full_rank"]
FAMILY_KINDS = ("mean_field", "full_rank")

LOG_2PI = float(np.log(2.0 * np.pi))


@lru_cache(maxsize=None)
def tril_indices(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major lower-triangle indices of a ``dim x dim`` matrix."""
    return np.tril_indices(dim)


@lru_cache(maxsize=None)
def diag_positions(dim: int) -> np.ndarray:
    """Positions of the diagonal entries inside the packed lower triangle."""
    rows, cols = tril_indices(dim)
    return np.flatnonzero(rows == cols)


def num_params(kind: str, dim: int) -> int:
    """Length K of the flattened parameter vector."""
    _check_kind(kind)
    if kind == "mean_field":
        return 2 * dim
    return dim + dim * (dim + 1) // 2


def _check_kind(kind: str) -> None:
    if kind not in FAMILY_KINDS:
        raise ValueError(f"unknown family kind {kind!r}; expected one of {FAMILY_KINDS}")


@dataclass(frozen=True)
class VariationalParams:
    kind: str
    location: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        _check_kind(self.kind)
        loc = np.array(self.location, dtype=float, copy=True).reshape(-1)
        scale = np.array(self.scale, dtype=float, copy=True).reshape(-1)
        dim = loc.size
        expected = dim if self.kind == "mean_field" else dim * (dim + 1) // 2
        if dim < 1 or scale.size != expected:
            raise ValueError(
                f"{self.kind} scale block for dimension {dim} must have length "
                f"{expected}, got {scale.size}"
            )
        loc.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.location.size

    @property
    def num_params(self) -> int:
        return self.location.size + self.scale.size

    @property
    def log_diag(self) -> np.ndarray:
        """Logarithms of the diagonal of the Cholesky factor."""
        if self.kind == "mean_field":
            return self.scale
        return self.scale[diag_positions(self.dim)]

    @property
    def chol(self) -> np.ndarray:
        """Dense lower-triangular Cholesky factor ``L``."""
        if self.kind == "mean_field":
            return np.diag(np.exp(self.scale))
        return chol_from_packed(self.scale, self.dim)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.location, self.scale])

    @classmethod
    def from_flat(cls, kind: str, dim: int, flat) -> "VariationalParams":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.size != num_params(kind, dim):
            raise ValueError(
                f"flat vector of length {flat.size} does not match {kind} family "
                f"of dimension {dim} (K={num_params(kind, dim)})"
            )
        return cls(kind, flat[:dim], flat[dim:])

    @classmethod
    def from_moments(cls, kind: str, mean, cov) -> "VariationalParams":
        """Family member with the given mean and (Cholesky-factorizable) covariance.

        For the mean-field kind only the diagonal of ``cov`` is used.
        """
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if kind == "mean_field":
            return cls(kind, mean, 0.5 * np.log(np.diag(cov)))
        return cls(kind, mean, packed_from_chol(np.linalg.cholesky(cov)))

    @classmethod
    def standard(cls, kind: str, dim: int) -> "VariationalParams":
        """Standard normal member: zero location, identity scale."""
        return cls.from_flat(kind, dim, np.zeros(num_params(kind, dim)))


def chol_from_packed(packed: np.ndarray, dim: int) -> np.ndarray:
    rows, cols = tril_indices(dim)
    L = np.zeros((dim, dim))
    L[rows, cols] = packed
    idx = np.arange(dim)
    L[idx, idx] = np.exp(L[idx, idx])
    return L


def packed_from_chol(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    dim = L.shape[0]
    if np.any(np.diag(L) <= 0):
        raise ValueError("Cholesky factor must have a strictly positive diagonal")
    rows, cols = tril_indices(dim)
    packed = L[rows, cols].copy()
    packed[diag_positions(dim)] = np.log(np.diag(L))
    return packed


def _check_point(params: VariationalParams, x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (params.dim,) or x.ndim > 2:
        raise ValueError(f"{what} must have trailing dimension {params.dim}, got shape {x.shape}")
    return x


def sample(params: VariationalParams, noise) -> np.ndarray:
    """Reparameterized draw ``mu + L @ noise``.

    ``noise`` may be a single vector of length P or an ``(M, P)`` batch.
    """
    z = _check_point(params, noise, "noise")
    if params.kind == "mean_field":
        return params.location + z * np.exp(params.scale)
    return params.location + z @ params.chol.T


def log_density(params: VariationalParams, point) -> np.ndarray | float:
    x = _check_point(params, point, "point")
    r = x - params.location
    if params.kind == "mean_field":
        u = r * np.exp(-params.scale)
    else:
        u = solve_triangular(params.chol, r.T, lower=True).T
    P = params.dim
    return -0.5 * P * LOG_2PI - np.sum(params.log_diag) - 0.5 * np.sum(u * u, axis=-1)


def entropy(params: VariationalParams) -> float:
    return 0.5 * params.dim * (1.0 + LOG_2PI) + float(np.sum(params.log_diag))


def entropy_gradient(params: VariationalParams) -> np.ndarray:
    """Gradient of the entropy with respect to the flattened parameters.

    The entropy depends only on the log-diagonal coordinates, each with slope one.
    """
    grad = np.zeros(params.num_params)
    if params.kind == "mean_field":
        grad[params.dim:] = 1.0
    else:
        grad[params.dim + diag_positions(params.dim)] = 1.0
    return grad


def log_density_gradient(params: VariationalParams, point) -> np.ndarray:
    """Gradient of ``log q(point)`` with respect to the flattened parameters."""
    x = _check_point(params, point, "point")
    if x.ndim != 1:
        raise ValueError("log_density_gradient takes a single point")
    P = params.dim
    r = x - params.location
    if params.kind == "mean_field":
        sd = np.exp(params.scale)
        u = r / sd
        g_loc = u / sd
        g_scale = u * u - 1.0
        return np.concatenate([g_loc, g_scale])
    L = params.chol
    u = solve_triangular(L, r, lower=True)
    g_loc = solve_triangular(L, u, lower=True, trans="T")
    # d/dL of -0.5 |L^-1 r|^2 is L^-T u u^T; log|det L| contributes 1/L_ii on the diagonal
    G = np.outer(g_loc, u)
    rows, cols = tril_indices(P)
    g_scale = G[rows, cols]
    dpos = diag_positions(P)
    g_scale[dpos] = g_scale[dpos] * np.diag(L) - 1.0
    return np.concatenate([g_loc, g_scale])


def pathwise_gradient(params: VariationalParams, noise: np.ndarray, grad_theta: np.ndarray) -> np.ndarray:
    """Chain ``d f / d theta`` through ``theta = mu + L z`` into flattened coordinates.

    ``noise`` and ``grad_theta`` are ``(M, P)`` batches; returns the average over
    the batch of the parameter gradient.
    """
    M = noise.shape[0]
    g_loc = grad_theta.mean(axis=0)
    if params.kind == "mean_field":
        g_scale = np.mean(grad_theta * noise, axis=0) * np.exp(params.scale)
        return np.concatenate([g_loc, g_scale])
    P = params.dim
    G = grad_theta.T @ noise / M
    rows, cols = tril_indices(P)
    g_scale = G[rows, cols]
    dpos = diag_positions(P)
    g_scale[dpos] *= np.exp(params.scale[dpos])
    return np.concatenate([g_loc, g_scale])
