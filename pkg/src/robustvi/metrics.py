"""Distances between variational and reference posterior moments."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .families import VariationalParams


@dataclass(frozen=True)
class MomentDistance:
    d_mu: float
    d_sigma: float

    @property
    def d(self) -> float:
        return math.hypot(self.d_mu, self.d_sigma)


def _symmetric(name: str, a: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-8:
        raise ValueError(f"{name} is not symmetric")
    return a


def moment_distance(mu_hat, sigma_hat, mu_ref, sigma_ref) -> MomentDistance:
    """``D_mu = |mu - mu_ref|_2`` and ``D_sigma = |Sigma - Sigma_ref|_F ** 0.5``."""
    mu_hat = np.asarray(mu_hat, dtype=float).reshape(-1)
    mu_ref = np.asarray(mu_ref, dtype=float).reshape(-1)
    sigma_hat = _symmetric("sigma_hat", sigma_hat)
    sigma_ref = _symmetric("sigma_ref", sigma_ref)
    if mu_hat.shape != mu_ref.shape or sigma_hat.shape != sigma_ref.shape \
            or sigma_hat.shape[0] != mu_hat.size:
        raise ValueError("moment shapes do not conform")
    d_mu = float(np.linalg.norm(mu_hat - mu_ref))
    d_sigma = float(np.sqrt(np.linalg.norm(sigma_hat - sigma_ref, "fro")))
    return MomentDistance(d_mu, d_sigma)


def variational_moments(params: VariationalParams) -> tuple[np.ndarray, np.ndarray]:
    L = params.chol
    return params.location.copy(), L @ L.T


def params_distance(params: VariationalParams, reference) -> MomentDistance:
    mean, cov = variational_moments(params)
    return moment_distance(mean, cov, *reference)


def load_reference_moments(path: str | Path, dim: int | None = None):
    """Read ``{"mean": [...], "covariance": [...]}``; covariance nested or row-major flat."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
    try:
        mean = np.asarray(doc["mean"], dtype=float).reshape(-1)
        cov = np.asarray(doc["covariance"], dtype=float)
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}") from None
    P = mean.size
    if cov.size != P * P:
        raise ValueError(f"{path}: covariance has {cov.size} entries, expected {P * P}")
    cov = cov.reshape(P, P)
    if dim is not None and P != dim:
        raise ValueError(f"{path}: reference dimension {P} does not match model dimension {dim}")
    return mean, _symmetric("reference covariance", cov)


def save_reference_moments(path: str | Path, mean, cov) -> None:
    doc = {"mean": np.asarray(mean).tolist(), "covariance": np.asarray(cov).tolist()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
