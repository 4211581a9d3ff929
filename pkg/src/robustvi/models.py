"""Target posteriors with per-observation likelihood terms and gradients.

Every model evaluates a batch of parameter vectors at once: ``theta`` may be a
single vector of length ``dim`` or an ``(M, dim)`` array, and results carry a
matching leading axis.  Observation terms are addressed by integer index so the
same code serves full-data and minibatch evaluation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_batch(theta, dim: int) -> tuple[np.ndarray, bool]:
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.ndim != 2 or theta.shape[1] != dim:
        raise ValueError(f"theta must have trailing dimension {dim}, got shape {theta.shape}")
    return theta, single


def _unbatch(value: np.ndarray, single: bool):
    if single:
        return value[0] if value.ndim > 1 else float(value[0])
    return value


class ModelSpec:
    """Base class for a log joint ``sum_i log p(y_i | theta) + log p0(theta)``.

    Subclasses implement the four ``_``-prefixed batch methods.  ``analytic_moments``
    holds the exact posterior ``(mean, covariance)`` when it is known.
    """

    name = "model"
    dim: int
    data_size: int = 0
    analytic_moments: tuple[np.ndarray, np.ndarray] | None = None

    def _log_prior(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _grad_log_prior(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _log_lik_terms(self, theta: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """``(M, len(idx))`` array of ``log p(y_i | theta_m)``."""
        return np.zeros((theta.shape[0], 0))

    def _grad_log_lik(self, theta: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """``(M, dim)`` gradient of the summed terms over ``idx``."""
        return np.zeros_like(theta)

    def _lik_and_grad(self, theta: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Summed terms ``(M,)`` and their gradient ``(M, dim)``; override to share work."""
        return self._log_lik_terms(theta, idx).sum(axis=1), self._grad_log_lik(theta, idx)

    def check_indices(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.intp).reshape(-1)
        if idx.size == 0:
            raise ValueError("minibatch index set must be nonempty")
        if idx.min() < 0 or idx.max() >= self.data_size:
            raise IndexError(f"minibatch index out of range [0, {self.data_size})")
        return idx

    @property
    def all_indices(self) -> np.ndarray:
        return np.arange(self.data_size)

    def log_prior(self, theta):
        t, single = _as_batch(theta, self.dim)
        return _unbatch(self._log_prior(t), single)

    def grad_log_prior(self, theta):
        t, single = _as_batch(theta, self.dim)
        return _unbatch(self._grad_log_prior(t), single)

    def log_lik_term(self, theta, i: int):
        t, single = _as_batch(theta, self.dim)
        idx = self.check_indices([i])
        return _unbatch(self._log_lik_terms(t, idx)[:, 0], single)

    def grad_log_lik_term(self, theta, i: int):
        t, single = _as_batch(theta, self.dim)
        return _unbatch(self._grad_log_lik(t, self.check_indices([i])), single)

    def log_lik(self, theta, indices=None):
        """Unscaled sum of likelihood terms over ``indices`` (all data by default)."""
        t, single = _as_batch(theta, self.dim)
        idx = self.all_indices if indices is None else self.check_indices(indices)
        return _unbatch(self._log_lik_terms(t, idx).sum(axis=1), single)

    def grad_log_lik(self, theta, indices=None):
        t, single = _as_batch(theta, self.dim)
        idx = self.all_indices if indices is None else self.check_indices(indices)
        return _unbatch(self._grad_log_lik(t, idx), single)

    def log_joint(self, theta):
        t, single = _as_batch(theta, self.dim)
        val = self._log_prior(t) + self._log_lik_terms(t, self.all_indices).sum(axis=1)
        return _unbatch(val, single)

    def grad_log_joint(self, theta):
        t, single = _as_batch(theta, self.dim)
        val = self._grad_log_prior(t) + self._grad_log_lik(t, self.all_indices)
        return _unbatch(val, single)


def minibatch(model: ModelSpec, indices, theta):
    """Minibatch log-likelihood and gradient rescaled by ``N / |S|``.

    Averaging the result over uniformly drawn index sets of a fixed size
    recovers the full-data log-likelihood and its gradient.
    """
    idx = model.check_indices(indices)
    t, single = _as_batch(theta, model.dim)
    scale = model.data_size / idx.size
    value, grad = model._lik_and_grad(t, idx)
    return _unbatch(scale * value, single), _unbatch(scale * grad, single)


class EpochBatcher:
    """Yields index sets by walking a fresh random permutation each epoch."""

    def __init__(self, data_size: int, batch_size: int | None, rng: np.random.Generator):
        self.data_size = data_size
        self.batch_size = data_size if not batch_size or batch_size >= data_size else batch_size
        self.rng = rng
        self._perm = np.empty(0, dtype=np.intp)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.data_size == 0:
            return np.empty(0, dtype=np.intp)
        if self.batch_size == self.data_size:
            return np.arange(self.data_size)
        if self._pos >= self._perm.size:
            self._perm = self.rng.permutation(self.data_size)
            self._pos = 0
        batch = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


# --------------------------------------------------------------------------
# Gaussian and synthetic targets


class GaussianTarget(ModelSpec):
    """Data-free Gaussian target ``N(mean, cov)``."""

    name = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.dim = self.mean.size
        self.data_size = 0
        self._chol = np.linalg.cholesky(self.cov)
        self._prec = np.linalg.inv(self.cov)
        self._logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        self.analytic_moments = (self.mean.copy(), self.cov.copy())

    def _log_prior(self, theta):
        r = theta - self.mean
        quad = np.einsum("mi,ij,mj->m", r, self._prec, r)
        return -0.5 * (self.dim * LOG_2PI + self._logdet + quad)

    def _grad_log_prior(self, theta):
        return -(theta - self.mean) @ self._prec


class BimodalTarget(ModelSpec):
    """Equal-weight mixture of ``N(m, sd^2)`` components in one dimension."""

    name = "bimodal"

    def __init__(self, modes=(-3.0, 3.0), sd: float = 0.5):
        self.modes = np.asarray(modes, dtype=float)
        self.sd = float(sd)
        self.dim = 1
        self.data_size = 0

    def _component_logpdf(self, theta):
        r = (theta - self.modes[None, :]) / self.sd
        return -0.5 * r * r - np.log(self.sd) - 0.5 * LOG_2PI - np.log(self.modes.size)

    def _log_prior(self, theta):
        return logsumexp(self._component_logpdf(theta), axis=1)

    def _grad_log_prior(self, theta):
        lp = self._component_logpdf(theta)
        w = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        slope = -(theta - self.modes[None, :]) / self.sd**2
        return np.sum(w * slope, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Bayesian linear regression with known noise variance


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class LinRegSpec:
    dim: int
    n: int = 300
    noise_var: float = 0.4
    gamma: float = 0.0
    seed: int = 0


def design_covariance(dim: int, gamma: float) -> np.ndarray:
    """Toeplitz covariance ``K_ij = gamma ** |i - j|``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"design correlation gamma must lie in [0, 1), got {gamma}")
    lag = np.abs(np.subtract.outer(np.arange(dim), np.arange(dim)))
    return gamma ** lag.astype(float)


class LinearRegression(ModelSpec):
    """``y ~ N(X beta, noise_var)``, ``beta ~ N(0, I)``."""

    name = "linreg"

    def __init__(self, X, y, noise_var: float = 0.4):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y must have the same number of rows")
        if noise_var <= 0:
            raise ValueError("noise variance must be positive")
        self.noise_var = float(noise_var)
        self.dim = self.X.shape[1]
        self.data_size = self.y.size
        self.analytic_moments = linreg_posterior_moments(self.X, self.y, self.noise_var)

    def _log_prior(self, theta):
        return -0.5 * (self.dim * LOG_2PI + np.sum(theta * theta, axis=1))

    def _grad_log_prior(self, theta):
        return -theta

    def _log_lik_terms(self, theta, idx):
        resid = self.y[idx][None, :] - theta @ self.X[idx].T
        return -0.5 * (LOG_2PI + np.log(self.noise_var)) - 0.5 * resid * resid / self.noise_var

    def _grad_log_lik(self, theta, idx):
        Xs = self.X[idx]
        resid = self.y[idx][None, :] - theta @ Xs.T
        return resid @ Xs / self.noise_var

    def _lik_and_grad(self, theta, idx):
        Xs = self.X[idx]
        resid = self.y[idx][None, :] - theta @ Xs.T
        value = -0.5 * idx.size * (LOG_2PI + np.log(self.noise_var)) \
            - 0.5 * np.sum(resid * resid, axis=1) / self.noise_var
        return value, resid @ Xs / self.noise_var

    def log_evidence(self) -> float:
        """Exact log marginal likelihood ``log N(y; 0, X X^T + noise_var I)``."""
        cov = self.X @ self.X.T + self.noise_var * np.eye(self.data_size)
        chol = np.linalg.cholesky(cov)
        u = np.linalg.solve(chol, self.y)
        return float(-0.5 * (self.data_size * LOG_2PI + u @ u) - np.sum(np.log(np.diag(chol))))


def linreg_posterior_moments(X, y, noise_var):
    X = np.asarray(X, dtype=float)
    dim = X.shape[1]
    prec = X.T @ X / noise_var + np.eye(dim)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (X.T @ np.asarray(y, dtype=float)) / noise_var
    return mean, cov


def linreg_generate(spec: LinRegSpec) -> tuple[LinearRegression, Dataset]:
    if spec.dim < 1 or spec.n < 1:
        raise ValueError("linear regression needs dim >= 1 and n >= 1")
    K = design_covariance(spec.dim, spec.gamma)
    rng = np.random.default_rng(spec.seed)
    X = rng.standard_normal((spec.n, spec.dim)) @ np.linalg.cholesky(K).T
    beta = rng.standard_normal(spec.dim)
    y = X @ beta + np.sqrt(spec.noise_var) * rng.standard_normal(spec.n)
    data = Dataset(X, y)
    return LinearRegression(X, y, spec.noise_var), data


def linreg_posterior(spec: LinRegSpec, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(dataset.X, dtype=float).reshape(-1, spec.dim)
    return linreg_posterior_moments(X, dataset.y, spec.noise_var)


# --------------------------------------------------------------------------
# Logistic regression


class LogisticRegression(ModelSpec):
    """Bernoulli-logit likelihood with an ``N(0, prior_sd^2 I)`` coefficient prior."""

    name = "logistic"

    def __init__(self, X, y, prior_sd: float = 1.0):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y must have the same number of rows")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("logistic labels must be 0 or 1")
        self.prior_sd = float(prior_sd)
        self.dim = self.X.shape[1]
        self.data_size = self.y.size

    def _log_prior(self, theta):
        s2 = self.prior_sd**2
        return -0.5 * (self.dim * (LOG_2PI + np.log(s2)) + np.sum(theta * theta, axis=1) / s2)

    def _grad_log_prior(self, theta):
        return -theta / self.prior_sd**2

    def _log_lik_terms(self, theta, idx):
        eta = theta @ self.X[idx].T
        return self.y[idx][None, :] * eta - np.logaddexp(0.0, eta)

    def _grad_log_lik(self, theta, idx):
        Xs = self.X[idx]
        return (self.y[idx][None, :] - expit(theta @ Xs.T)) @ Xs

    def _lik_and_grad(self, theta, idx):
        Xs, ys = self.X[idx], self.y[idx][None, :]
        eta = theta @ Xs.T
        value = np.sum(ys * eta - np.logaddexp(0.0, eta), axis=1)
        return value, (ys - expit(eta)) @ Xs


def logistic_model(dataset: Dataset, prior_sd: float = 1.0) -> LogisticRegression:
    return LogisticRegression(dataset.X, dataset.y, prior_sd)


def synthetic_logistic(n: int, dim: int, seed: int = 0) -> Dataset:
    """Standard-normal covariates with labels from a standard-normal coefficient draw."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    beta = rng.standard_normal(dim)
    y = (rng.uniform(size=n) < expit(X @ beta)).astype(float)
    return Dataset(X, y)


# --------------------------------------------------------------------------
# Eight schools


class EightSchools(ModelSpec):
    """Hierarchical normal model over ``[mu, log tau, theta_1..J or z_1..J]``.

    Priors are ``mu ~ N(0, mu_sd^2)`` and ``tau ~ HalfCauchy(tau_scale)``; the log
    transform of ``tau`` carries its Jacobian.  ``CP`` samples ``theta_j ~ N(mu, tau)``
    directly while ``NCP`` samples ``z_j ~ N(0, 1)`` with ``theta_j = mu + tau z_j``.
    """

    def __init__(self, effects, std_errors, parameterization: str = "NCP",
                 mu_sd: float = 5.0, tau_scale: float = 5.0):
        self.y = np.asarray(effects, dtype=float).reshape(-1)
        self.sigma = np.asarray(std_errors, dtype=float).reshape(-1)
        if self.y.size != self.sigma.size:
            raise ValueError("effects and standard errors must have equal length")
        if np.any(self.sigma <= 0):
            raise ValueError("school standard errors must be positive")
        parameterization = parameterization.upper()
        if parameterization not in ("CP", "NCP"):
            raise ValueError(f"parameterization must be CP or NCP, got {parameterization!r}")
        self.parameterization = parameterization
        self.name = f"eight_schools_{parameterization.lower()}"
        self.mu_sd = float(mu_sd)
        self.tau_scale = float(tau_scale)
        self.num_groups = self.y.size
        self.dim = self.num_groups + 2
        self.data_size = self.num_groups

    def _split(self, theta):
        return theta[:, 0], theta[:, 1], theta[:, 2:]

    def _log_prior(self, theta):
        mu, log_tau, rest = self._split(theta)
        tau = np.exp(log_tau)
        s = self.tau_scale
        lp = -0.5 * (LOG_2PI + 2 * np.log(self.mu_sd) + (mu / self.mu_sd) ** 2)
        lp = lp + np.log(2.0 / np.pi) - np.log(s) - np.log1p((tau / s) ** 2) + log_tau
        if self.parameterization == "CP":
            r = (rest - mu[:, None]) / tau[:, None]
            lp = lp + np.sum(-0.5 * LOG_2PI - 0.5 * r * r, axis=1) - self.num_groups * log_tau
        else:
            lp = lp + np.sum(-0.5 * LOG_2PI - 0.5 * rest * rest, axis=1)
        return lp

    def _grad_log_prior(self, theta):
        mu, log_tau, rest = self._split(theta)
        tau = np.exp(log_tau)
        ratio2 = (tau / self.tau_scale) ** 2
        grad = np.zeros_like(theta)
        grad[:, 0] = -mu / self.mu_sd**2
        grad[:, 1] = 1.0 - 2.0 * ratio2 / (1.0 + ratio2)
        if self.parameterization == "CP":
            d = rest - mu[:, None]
            tau2 = (tau * tau)[:, None]
            grad[:, 0] += np.sum(d / tau2, axis=1)
            grad[:, 1] += np.sum(d * d / tau2 - 1.0, axis=1)
            grad[:, 2:] = -d / tau2
        else:
            grad[:, 2:] = -rest
        return grad

    def _effects(self, theta, idx):
        mu, log_tau, rest = self._split(theta)
        if self.parameterization == "CP":
            return rest[:, idx]
        return mu[:, None] + np.exp(log_tau)[:, None] * rest[:, idx]

    def _log_lik_terms(self, theta, idx):
        r = (self.y[idx][None, :] - self._effects(theta, idx)) / self.sigma[idx][None, :]
        return -0.5 * LOG_2PI - np.log(self.sigma[idx])[None, :] - 0.5 * r * r

    def _grad_log_lik(self, theta, idx):
        resid = (self.y[idx][None, :] - self._effects(theta, idx)) / self.sigma[idx][None, :] ** 2
        grad = np.zeros_like(theta)
        if self.parameterization == "CP":
            np.add.at(grad, (slice(None), 2 + idx), resid)
            return grad
        tau = np.exp(theta[:, 1])
        z = theta[:, 2:][:, idx]
        grad[:, 0] = resid.sum(axis=1)
        grad[:, 1] = np.sum(resid * z, axis=1) * tau
        np.add.at(grad, (slice(None), 2 + idx), resid * tau[:, None])
        return grad


def load_eight_schools_data(path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read the two-column ``effect,std_error`` table (bundled data by default)."""
    if path is None:
        text = resources.files("robustvi.data").joinpath("eight_schools.csv").read_text()
        source = "eight_schools.csv"
    else:
        text = Path(path).read_text()
        source = str(path)
    rows = _parse_csv(text.splitlines(), source)
    arr = np.asarray(rows)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{source}: expected two columns (effect, std_error)")
    return arr[:, 0], arr[:, 1]


def eight_schools(parameterization: str = "NCP", data_path: str | Path | None = None,
                  **prior) -> EightSchools:
    effects, std_errors = load_eight_schools_data(data_path)
    return EightSchools(effects, std_errors, parameterization, **prior)


# --------------------------------------------------------------------------
# CSV datasets


def _parse_csv(lines, source: str) -> list[list[float]]:
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise ValueError(f"{source}: empty file, expected a header row")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{source}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            rows.append([float(c) for c in row])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{source}: no data rows")
    return rows


def load_csv_dataset(path: str | Path) -> Dataset:
    """Header row plus float columns; the final column is the response."""
    path = Path(path)
    arr = np.asarray(_parse_csv(path.read_text().splitlines(), str(path)))
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a response column")
    return Dataset(arr[:, :-1], arr[:, -1])
