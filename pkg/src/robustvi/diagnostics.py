"""Markov-chain diagnostics over optimizer iterates.

Iterates are stored as a ``(J, T, K)`` array: ``J`` chains, ``T`` stored
iterations, ``K`` parameter components.  All statistics are computed per
component and vectorized over ``K``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import softmax

from .families import VariationalParams, log_density, sample
from .models import ModelSpec

# returned when the within-sequence variance vanishes but the sequence means differ
RHAT_SENTINEL = 1e10
KHAT_PROBLEM = 1.0
MIN_TAIL = 20


@dataclass
class IterateChains:
    data: np.ndarray
    start_iteration: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[0] < 1:
            raise ValueError(f"iterates must be shaped (J, T, K), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("iterate chains must be finite")
        self.data = data

    @property
    def num_chains(self) -> int:
        return self.data.shape[0]

    @property
    def num_iterations(self) -> int:
        return self.data.shape[1]

    @property
    def num_params(self) -> int:
        return self.data.shape[2]

    def append(self, block) -> None:
        """Append a ``(J, t, K)`` block of new iterates."""
        block = np.asarray(block, dtype=float)
        if block.ndim == 2:
            block = block[:, None, :]
        if block.shape[0] != self.num_chains or block.shape[2] != self.num_params:
            raise ValueError(f"block shape {block.shape} does not match chains {self.data.shape}")
        if not np.all(np.isfinite(block)):
            raise ValueError("refusing to append non-finite iterates")
        self.data = np.concatenate([self.data, block], axis=1)

    def last(self, window: int) -> "IterateChains":
        if window > self.num_iterations:
            raise ValueError(f"window {window} exceeds stored iterations {self.num_iterations}")
        start = self.start_iteration + self.num_iterations - window
        return IterateChains(self.data[:, -window:].copy(), start)


def _window(chains, window: int | None, *, even: bool = True) -> np.ndarray:
    data = chains.data if isinstance(chains, IterateChains) else np.asarray(chains, dtype=float)
    if data.ndim == 2:
        data = data[:, :, None]
    T = data.shape[1]
    if window is None:
        window = T
    if window > T:
        raise ValueError(f"window {window} exceeds stored iterations {T}")
    if window < 4:
        raise ValueError(f"window must hold at least 4 iterates, got {window}")
    if even and window % 2:
        raise ValueError(f"window must be even, got {window}")
    return data[:, T - window:]


def _split(x: np.ndarray) -> np.ndarray:
    """Split each chain into halves: ``(J, n, K) -> (2J, n // 2, K)``."""
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    J, n, K = x.shape
    flat = x.reshape(J * n, K)
    ranks = stats.rankdata(flat, axis=0)
    z = stats.norm.ppf((ranks - 0.375) / (J * n + 0.25))
    return z.reshape(J, n, K)


def split_rhat(chains, window: int | None = None, *, rank_normalize: bool = False) -> np.ndarray:
    """Split-R-hat per component over the last ``window`` iterates.

    Values are floored at 1: sampling noise in the between-half variance can push
    the raw ratio a hair below 1, which carries no information.  Returns 1 for
    components that are constant across all half-chains and ``RHAT_SENTINEL``
    when half-chains are individually constant but disagree.
    """
    x = _window(chains, window)
    if rank_normalize:
        x = _rank_normalize(x)
    seqs = _split(x)
    n = seqs.shape[1]
    within = np.mean(np.var(seqs, axis=1, ddof=1), axis=0)
    between = n * np.var(np.mean(seqs, axis=1), axis=0, ddof=1)
    out = np.empty(within.shape)
    tiny = within <= 0.0
    var_plus = (n - 1) / n * within + between / n
    out[~tiny] = np.sqrt(np.maximum(var_plus[~tiny] / within[~tiny], 1.0))
    out[tiny] = np.where(between[tiny] > 0.0, RHAT_SENTINEL, 1.0)
    return out


def _autocov(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Biased autocovariance along ``axis`` via zero-padded FFT."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    x = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n] / n
    return np.moveaxis(acov, 0, axis)


def autocorrelation(sequence, method: str = "fft") -> np.ndarray:
    """Empirical autocorrelation at lags ``0 .. n-1`` with the mean removed.

    A constant sequence has no defined correlation; it returns 1 at lag 0 and
    zeros elsewhere.
    """
    x = np.asarray(sequence, dtype=float).reshape(-1)
    n = x.size
    if n < 4:
        raise ValueError(f"autocorrelation needs at least 4 values, got {n}")
    if method == "fft":
        acov = _autocov(x)
    elif method == "direct":
        d = x - x.mean()
        acov = np.array([d[: n - t] @ d[t:] for t in range(n)]) / n
    else:
        raise ValueError(f"unknown method {method!r}")
    rho = np.zeros(n)
    rho[0] = 1.0
    if acov[0] > 0.0:
        rho[1:] = acov[1:] / acov[0]
    return rho


def _combined_rho(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multi-chain autocorrelation estimates ``(n, K)`` and ``var_plus`` ``(K,)``."""
    C, n, _ = x.shape
    acov = _autocov(x, axis=1)
    mean_var = np.mean(acov[:, 0], axis=0) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if C > 1:
        var_plus = var_plus + np.var(np.mean(x, axis=1), axis=0, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = 1.0 - (mean_var - np.mean(acov, axis=0)) / var_plus
    rho[0] = 1.0
    return rho, var_plus


def _ess_from_chains(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    C, n, K = x.shape
    total = C * n
    rho, var_plus = _combined_rho(x)
    degenerate = ~(var_plus > 0.0)
    rho = np.where(degenerate[None, :], 0.0, rho)
    npairs = n // 2
    pairs = rho[0:2 * npairs:2] + rho[1:2 * npairs:2]
    # Geyer: stop at the first negative pair sum, enforce monotone pair sums before it
    negative = pairs < 0.0
    stop = np.where(negative.any(axis=0), np.argmax(negative, axis=0), npairs)
    mono = np.minimum.accumulate(pairs, axis=0)
    keep = np.arange(npairs)[:, None] < stop[None, :]
    tau = -1.0 + 2.0 * np.sum(np.where(keep, mono, 0.0), axis=0)
    # floor keeps antithetic chains finite: ESS can exceed the draw count but not blow up
    tau = np.maximum(tau, 1.0 / math.log10(max(total, 10)))
    ess = total / tau
    ess[degenerate] = total
    return ess, degenerate


def ess(chains, window: int | None = None) -> np.ndarray:
    """Multi-chain effective sample size per component (split chains, Geyer truncation)."""
    x = _split(_window(chains, window))
    return _ess_from_chains(x)[0]


def ess_with_flags(chains, window: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Like ``ess`` but also returns the per-component zero-variance flag."""
    return _ess_from_chains(_split(_window(chains, window)))


def mcse(chains, window: int | None = None, ess_values: np.ndarray | None = None) -> np.ndarray:
    """Monte Carlo standard error of the pooled mean, ``sqrt(var / ESS)``."""
    x = _window(chains, window)
    if ess_values is None:
        ess_values = ess(x)
    var = np.var(x.reshape(-1, x.shape[2]), axis=0, ddof=1)
    return np.sqrt(var / ess_values)


# --------------------------------------------------------------------------
# Generalized Pareto tail estimation


def _gpd_fit_sorted(y: np.ndarray, prior_strength: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Batch Zhang-Stephens fit; ``y`` is ``(B, n)`` positive and sorted ascending."""
    B, n = y.shape
    m = 30 + int(math.sqrt(n))
    j = np.arange(1, m + 1)
    quartile = y[:, int(math.floor(n / 4.0 + 0.5)) - 1]
    b = 1.0 / y[:, -1:] + (1.0 - np.sqrt(m / (j - 0.5)))[None, :] / (3.0 * quartile[:, None])
    k = np.mean(np.log1p(-b[:, :, None] * y[:, None, :]), axis=2)
    profile = n * (np.log(-b / k) - k - 1.0)
    weights = softmax(profile, axis=1)
    b_hat = np.sum(b * weights, axis=1)
    k_hat = np.mean(np.log1p(-b_hat[:, None] * y), axis=1)
    sigma = -k_hat / b_hat
    if prior_strength > 0:
        k_hat = (n * k_hat + prior_strength * 0.5) / (n + prior_strength)
    return k_hat, sigma


def gpd_fit(excesses, prior_strength: float = 0.0) -> tuple[float, float]:
    """Estimate the shape ``k`` and scale ``sigma`` of a generalized Pareto sample.

    ``excesses`` are positive threshold exceedances.  Positive ``k`` means a heavy
    tail with moments up to order ``1/k``; negative ``k`` a bounded tail.  A
    nonzero ``prior_strength`` shrinks ``k`` toward 0.5 with that many
    pseudo-observations.
    """
    x = np.asarray(excesses, dtype=float).reshape(-1)
    if x.size < MIN_TAIL:
        raise ValueError(
            f"generalized Pareto fit needs at least {MIN_TAIL} exceedances, got {x.size}; "
            "draw more samples"
        )
    if not np.all(x > 0) or not np.all(np.isfinite(x)):
        raise ValueError("exceedances must be positive and finite")
    k, sigma = _gpd_fit_sorted(np.sort(x)[None, :], prior_strength)
    return float(k[0]), float(sigma[0])


def gpd_sample(k: float, sigma: float, size, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the generalized Pareto distribution at location 0."""
    u = rng.uniform(size=size)
    if k == 0:
        return -sigma * np.log1p(-u)
    return sigma / k * ((1.0 - u) ** (-k) - 1.0)


def tail_size(n: int) -> int:
    return int(math.ceil(min(n / 5.0, 3.0 * math.sqrt(n))))


def tail_khat(values: np.ndarray) -> np.ndarray:
    """Upper-tail k-hat of each column of ``values`` (``(n, B)``).

    Uses the largest ``ceil(min(n/5, 3 sqrt(n)))`` values as exceedances over the
    next order statistic.  Columns whose tail is flat return ``-inf``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    M = tail_size(n)
    if M < MIN_TAIL:
        raise ValueError(f"need at least {5 * MIN_TAIL} draws for a tail fit, got {n}")
    top = np.sort(values, axis=0)[n - M - 1:]
    exc = (top[1:] - top[:1]).T
    scale = np.maximum(np.abs(top[-1]), np.abs(top[0]))
    flat = ~(exc[:, -1] > 1e-12 * np.maximum(scale, 1e-300))
    ok = np.all(exc > 0, axis=1) & ~flat
    out = np.full(values.shape[1], -np.inf)
    if ok.any():
        out[ok] = _gpd_fit_sorted(exc[ok])[0]
    for col in np.flatnonzero(~ok & ~flat):
        # ties inside the tail: fit the strictly positive exceedances if enough remain
        pos = exc[col][exc[col] > 0]
        if pos.size >= MIN_TAIL:
            out[col] = _gpd_fit_sorted(np.sort(pos)[None, :])[0][0]
    return out


def khat_iterates(chains, window: int | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Lower- and upper-tail k-hat of every component, pooled over chains.

    Returns ``(khat_lower, khat_upper, max_khat)``.
    """
    x = _window(chains, window, even=False)
    pooled = x.reshape(-1, x.shape[2])
    if pooled.shape[0] < 100:
        raise ValueError(f"tail diagnostics need at least 100 pooled iterates, got {pooled.shape[0]}")
    upper = tail_khat(pooled)
    lower = tail_khat(-pooled)
    return lower, upper, float(max(np.max(lower), np.max(upper)))


def psis_khat(model: ModelSpec, params: VariationalParams, num_draws: int = 2000,
              rng: np.random.Generator | None = None) -> float:
    """k-hat of the importance weights ``p(theta, y) / q(theta)`` under ``theta ~ q``."""
    if num_draws < 100:
        raise ValueError(f"importance-weight diagnostic needs at least 100 draws, got {num_draws}")
    rng = np.random.default_rng() if rng is None else rng
    theta = sample(params, rng.standard_normal((num_draws, params.dim)))
    log_w = model.log_joint(theta) - log_density(params, theta)
    if not np.all(np.isfinite(log_w)):
        raise FloatingPointError("non-finite log importance weight")
    w = np.exp(log_w - np.max(log_w))
    return float(tail_khat(w)[0])


# --------------------------------------------------------------------------
# Report


@dataclass
class DiagnosticsReport:
    rhat: np.ndarray
    ess: np.ndarray
    mcse: np.ndarray
    khat_lower: np.ndarray
    khat_upper: np.ndarray
    autocorr: np.ndarray = field(repr=False)
    degenerate: np.ndarray = field(repr=False)

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat))

    @property
    def median_mcse(self) -> float:
        return float(np.median(self.mcse))

    @property
    def min_ess(self) -> float:
        return float(np.min(self.ess))

    @property
    def max_khat(self) -> float:
        return float(max(np.max(self.khat_lower), np.max(self.khat_upper)))

    @property
    def khat_problem(self) -> bool:
        return self.max_khat > KHAT_PROBLEM

    def to_dict(self) -> dict:
        return {
            "max_rhat": self.max_rhat,
            "median_mcse": self.median_mcse,
            "min_ess": self.min_ess,
            "max_khat": self.max_khat,
            "khat_problem": self.khat_problem,
            "rhat": self.rhat.tolist(),
            "ess": self.ess.tolist(),
            "mcse": self.mcse.tolist(),
            "khat_lower": self.khat_lower.tolist(),
            "khat_upper": self.khat_upper.tolist(),
            "autocorr": self.autocorr.tolist(),
            "degenerate": self.degenerate.tolist(),
        }


def diagnose(chains, rhat_window: int | None = None, since: int = 0,
             max_lag: int = 100) -> DiagnosticsReport:
    """Full report: R-hat over the last ``rhat_window`` stored iterates, the rest
    over stored iterates from position ``since`` onwards.
    """
    data = chains.data if isinstance(chains, IterateChains) else np.asarray(chains, dtype=float)
    if data.ndim == 2:
        data = data[:, :, None]
    avg = data[:, since:]
    if avg.shape[1] % 2:
        avg = avg[:, 1:]
    rhat = split_rhat(data, rhat_window)
    ess_values, degenerate = ess_with_flags(avg)
    mcse_values = mcse(avg, ess_values=ess_values)
    mcse_values[degenerate] = 0.0
    pooled_n = avg.shape[0] * avg.shape[1]
    if pooled_n >= 100:
        lower, upper, _ = khat_iterates(avg)
    else:
        lower = upper = np.full(data.shape[2], np.nan)
    rho, _ = _combined_rho(_split(avg))
    rho = np.where(degenerate[None, :], 0.0, rho)
    autocorr = rho[: min(max_lag + 1, rho.shape[0])].T
    return DiagnosticsReport(rhat, ess_values, mcse_values, lower, upper, autocorr, degenerate)
