"""Robust stochastic optimization driver.

Runs ``J`` optimizer chains, waits for the windowed split-R-hat to fall below
the cutoff, screens the iterate tails, then averages post-stationarity iterates
until the Monte Carlo standard error and effective sample size targets are met.
The windowed-ELBO stopping rule is available as a baseline.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics as diag
from .families import VariationalParams, num_params
from .gradients import FlatElbo
from .models import EpochBatcher, ModelSpec
from .optimizers import DivergenceError, direction, init as init_optimizer

log = logging.getLogger(__name__)

STOPPING_RULES = ("mcse", "delbo")


@dataclass
class WorkflowConfig:
    eta: float = 0.01
    num_chains: int = 1
    window: int = 100
    rhat_cutoff: float = 1.1
    mcse_cutoff: float = 0.02
    ess_cutoff: float = 20.0
    t_max: int = 120_000
    optimizer: str = "rmsprop"
    num_draws: int = 10
    batch_size: int | None = 50
    stopping_rule: str = "mcse"
    delbo_epsilon: float = 0.01
    delbo_window: int | None = None
    seed: int = 0
    init_sd: float = 0.1
    init_locations: list[list[float]] | None = None
    max_grad_norm: float | None = None
    ess_reduce: str = "min"
    rank_normalize: bool = False
    khat_cutoff: float = diag.KHAT_PROBLEM
    trace_thin: int = 1
    record_trace: bool = True
    threads: int | None = None

    def validate(self) -> None:
        if not self.rhat_cutoff > 1:
            raise ValueError(f"rhat_cutoff must exceed 1, got {self.rhat_cutoff}")
        if not self.mcse_cutoff > 0:
            raise ValueError(f"mcse_cutoff must be positive, got {self.mcse_cutoff}")
        if self.window < 4 or self.window % 2:
            raise ValueError(f"window must be even and at least 4, got {self.window}")
        if self.num_chains < 1:
            raise ValueError("num_chains must be at least 1")
        if self.t_max < self.window:
            raise ValueError("t_max must be at least one window")
        if self.stopping_rule not in STOPPING_RULES:
            raise ValueError(f"stopping_rule must be one of {STOPPING_RULES}")
        if self.ess_reduce not in ("min", "median"):
            raise ValueError("ess_reduce must be 'min' or 'median'")
        if self.trace_thin < 1:
            raise ValueError("trace_thin must be at least 1")
        if self.num_draws < 1:
            raise ValueError("num_draws must be at least 1")
        if self.init_locations is not None and len(self.init_locations) not in (1, self.num_chains):
            raise ValueError("init_locations needs one row or one row per chain")

    @property
    def elbo_window(self) -> int:
        return self.delbo_window or self.window


@dataclass
class RunResult:
    lambda_bar: VariationalParams
    lambda_last: list[VariationalParams]
    T0: int | None
    T_stop: int
    rule_fired: str
    warned_nonconvergence: bool
    iterate_khat_max: float
    diagnostics: diag.DiagnosticsReport
    elbo_trace: np.ndarray
    average_start: int
    rhat_history: list[tuple[int, float]] = field(default_factory=list)
    trace: np.ndarray | None = field(default=None, repr=False)
    trace_iterations: np.ndarray | None = field(default=None, repr=False)
    message: str = ""

    def metadata(self) -> dict:
        return {
            "T0": self.T0,
            "T_stop": self.T_stop,
            "rule_fired": self.rule_fired,
            "warned_nonconvergence": self.warned_nonconvergence,
            "iterate_khat_max": self.iterate_khat_max,
            "average_start": self.average_start,
            "message": self.message,
            "rhat_history": [[t, r] for t, r in self.rhat_history],
        }


class _Chain:
    """One optimizer trajectory with its own RNG stream and minibatch schedule."""

    def __init__(self, model: ModelSpec, kind: str, config: WorkflowConfig,
                 seed: np.random.SeedSequence, init_location):
        self.model = model
        self.kind = kind
        self.config = config
        self.rng = np.random.default_rng(seed)
        P = model.dim
        flat = np.zeros(num_params(kind, P))
        if init_location is None:
            flat[:P] = config.init_sd * self.rng.standard_normal(P)
        else:
            flat[:P] = init_location
        self.flat = flat
        self.opt = init_optimizer(config.optimizer, config.eta, flat.size,
                                  max_grad_norm=config.max_grad_norm)
        self.objective = FlatElbo(model, kind)
        self.batcher = EpochBatcher(model.data_size, config.batch_size, self.rng)

    def advance(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        P, M = self.model.dim, self.config.num_draws
        opt = self.opt
        first, second, t = opt.first, opt.second, opt.t
        flat = self.flat
        iterates = np.empty((n, flat.size))
        elbos = np.empty(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(n):
                noise = self.rng.standard_normal((M, P))
                value, g = self.objective(flat, noise, self.batcher.next())
                t += 1
                if not (np.isfinite(value) and np.all(np.isfinite(g))):
                    raise DivergenceError(f"non-finite ELBO or gradient at optimizer step {t}")
                if opt.max_grad_norm is not None:
                    norm = float(np.linalg.norm(g))
                    if norm > opt.max_grad_norm:
                        g = g * (opt.max_grad_norm / norm)
                update, first, second = direction(opt.kind, g, first, second, t,
                                                  opt.rmsprop_decay, opt.betas)
                flat = flat + opt.eta * update
                if not np.all(np.isfinite(flat)):
                    raise DivergenceError(f"non-finite parameters after optimizer step {t}")
                iterates[i] = flat
                elbos[i] = value
        self.flat = flat
        self.opt = replace(opt, first=first, second=second, t=t)
        return iterates, elbos


class _Store:
    """Growable ``(J, T, K)`` buffer."""

    def __init__(self, J: int, K: int, capacity: int = 256):
        self.buf = np.empty((J, capacity, K))
        self.size = 0

    def extend(self, block: np.ndarray) -> None:
        n = block.shape[1]
        if self.size + n > self.buf.shape[1]:
            cap = max(2 * self.buf.shape[1], self.size + n)
            new = np.empty((self.buf.shape[0], cap, self.buf.shape[2]))
            new[:, : self.size] = self.buf[:, : self.size]
            self.buf = new
        self.buf[:, self.size:self.size + n] = block
        self.size += n

    @property
    def data(self) -> np.ndarray:
        return self.buf[:, : self.size]


def _thread_count(config: WorkflowConfig) -> int:
    if config.threads is not None:
        return max(1, config.threads)
    env = os.environ.get("ROBUSTVI_THREADS")
    return max(1, int(env)) if env else 1


def iterate_average(chains, kind: str, dim: int, start: int | None = None) -> VariationalParams:
    """Mean of the stored iterates with global index ``>= start`` across all chains.

    Averaging happens in the unconstrained coordinates, so the result is always a
    valid family member.
    """
    if not isinstance(chains, diag.IterateChains):
        chains = diag.IterateChains(chains)
    offset = 0 if start is None else start - chains.start_iteration
    if offset < 0:
        raise ValueError("start precedes the first stored iterate")
    block = chains.data[:, offset:]
    if block.shape[1] == 0:
        raise ValueError("no iterates to average")
    flat = block.reshape(-1, block.shape[2]).mean(axis=0)
    return VariationalParams.from_flat(kind, dim, flat)


def delbo_rule(elbo_trace, window: int, delbo_epsilon: float) -> bool:
    """Relative change between the means of the last two ELBO windows is below epsilon."""
    trace = np.asarray(elbo_trace, dtype=float).reshape(-1)
    if trace.size < 2 * window:
        return False
    now = trace[-window:].mean()
    prev = trace[-2 * window:-window].mean()
    return bool(abs(now - prev) / (abs(prev) + 1e-12) < delbo_epsilon)


def ou_theory_check(alpha: float, K: int, T: int, replications: int,
                    seed: int | np.random.Generator = 0, chunk: int = 1000) -> tuple[float, float]:
    """Simulate iid stationary iterates ``lambda* + alpha z`` around ``lambda* = 0``.

    Returns the empirical means of the squared distance of a single iterate and
    of the ``T``-iterate average.
    """
    if min(alpha, K, T, replications) <= 0:
        raise ValueError("alpha, K, T and replications must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sum_a = sum_abar = 0.0
    done = 0
    while done < replications:
        r = min(chunk, replications - done)
        lam = alpha * rng.standard_normal((r, T, K))
        sum_a += float(np.sum(lam[:, 0] ** 2))
        sum_abar += float(np.sum(lam.mean(axis=1) ** 2))
        done += r
    return sum_a / replications, sum_abar / replications


def run(model: ModelSpec, family_kind: str, config: WorkflowConfig | None = None) -> RunResult:
    config = WorkflowConfig() if config is None else config
    config.validate()
    J, W = config.num_chains, config.window
    P = model.dim
    K = num_params(family_kind, P)
    inits = config.init_locations
    if inits is not None:
        inits = [np.asarray(r, dtype=float).reshape(-1) for r in inits]
        if any(r.size != P for r in inits):
            raise ValueError(f"init_locations rows must have length {P}")
        if len(inits) == 1:
            inits = inits * J
    seeds = np.random.SeedSequence(config.seed).spawn(J)
    chains = [_Chain(model, family_kind, config, seeds[j], None if inits is None else inits[j])
              for j in range(J)]

    threads = min(_thread_count(config), J)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    trace = _Store(J, K) if config.record_trace else None
    trace_iters: list[int] = []
    elbo = _Store(J, 1)
    post = _Store(J, K)
    recent = np.empty((J, 0, K))
    t = 0

    def advance(n: int) -> np.ndarray:
        nonlocal t, recent
        try:
            if pool is None:
                out = [c.advance(n) for c in chains]
            else:
                out = list(pool.map(lambda c: c.advance(n), chains))
        except DivergenceError as exc:
            exc.partial_elbo = elbo.data[:, :, 0].copy()
            exc.partial_trace = None if trace is None else trace.data.copy()
            exc.iteration = t
            raise
        block = np.stack([o[0] for o in out])
        elbo.extend(np.stack([o[1] for o in out])[:, :, None])
        if trace is not None:
            its = np.arange(t + 1, t + n + 1)
            keep = its % config.trace_thin == 0
            trace.extend(block[:, keep])
            trace_iters.extend(its[keep].tolist())
        t += n
        recent = np.concatenate([recent, block], axis=1)[:, -W:]
        return block

    def make_result(lambda_bar, T0, rule, warned, khat_max, report, avg_start, rhats, message):
        if message:
            log.warning(message)
        return RunResult(
            lambda_bar=lambda_bar,
            lambda_last=[VariationalParams.from_flat(family_kind, P, c.flat) for c in chains],
            T0=T0, T_stop=t, rule_fired=rule, warned_nonconvergence=warned,
            iterate_khat_max=khat_max, diagnostics=report, elbo_trace=elbo.data[:, :, 0].copy(),
            average_start=avg_start, rhat_history=rhats,
            trace=None if trace is None else trace.data.copy(),
            trace_iterations=None if trace is None else np.asarray(trace_iters),
            message=message,
        )

    def window_khat(x: np.ndarray) -> float:
        if x.shape[0] * x.shape[1] < 100:
            return float("nan")
        return diag.khat_iterates(x)[2]

    try:
        rhats: list[tuple[int, float]] = []
        if config.stopping_rule == "delbo":
            ew = config.elbo_window
            rule = "t_max"
            while t < config.t_max:
                advance(min(ew, config.t_max - t))
                if t % ew == 0 and delbo_rule(elbo.data[:, :, 0].mean(axis=0), ew, config.delbo_epsilon):
                    rule = "delbo"
                    break
            win = recent
            report = diag.diagnose(win, rhat_window=win.shape[1] - win.shape[1] % 2)
            rhats.append((t, report.max_rhat))
            khat = window_khat(win)
            lam = iterate_average(diag.IterateChains(win, t - win.shape[1] + 1), family_kind, P)
            warned = rule != "delbo"
            msg = "" if not warned else f"ELBO stopping rule did not trigger within {config.t_max} iterations"
            return make_result(lam, None, rule, warned, khat, report, t - win.shape[1] + 1, rhats, msg)

        # phase 1: wait for stationarity
        T0 = None
        while t < config.t_max:
            advance(min(W, config.t_max - t))
            if t % W == 0:
                r = diag.split_rhat(recent, W, rank_normalize=config.rank_normalize)
                rhats.append((t, float(np.max(r))))
                if np.max(r) < config.rhat_cutoff:
                    T0 = t
                    break
        khat = window_khat(recent)
        if T0 is None or khat > config.khat_cutoff:
            win = recent
            report = diag.diagnose(win, rhat_window=win.shape[1] - win.shape[1] % 2)
            lam = iterate_average(diag.IterateChains(win, t - win.shape[1] + 1), family_kind, P)
            if T0 is None:
                msg = (f"optimization may not have converged: max R-hat {rhats[-1][1]:.3g} "
                       f">= {config.rhat_cutoff} after {t} iterations")
                rule = "rhat"
            else:
                msg = (f"optimization may not have converged: iterate tail index {khat:.3g} "
                       f"> {config.khat_cutoff}")
                rule = "khat"
            return make_result(lam, T0, rule, True, khat, report, t - win.shape[1] + 1, rhats, msg)

        # phase 2: average until MCSE and ESS targets are met
        rule = "t_max"
        while t < config.t_max:
            post.extend(advance(min(W, config.t_max - t)))
            if (t - T0) % W:
                continue
            x = post.data
            ess_values, degenerate = diag.ess_with_flags(x)
            mcse_values = diag.mcse(x, ess_values=ess_values)
            mcse_values[degenerate] = 0.0
            ess_stat = np.min(ess_values) if config.ess_reduce == "min" else np.median(ess_values)
            log.debug("t=%d median MCSE %.4g, ESS %.4g", t, np.median(mcse_values), ess_stat)
            if np.median(mcse_values) < config.mcse_cutoff and ess_stat > config.ess_cutoff:
                rule = "mcse"
                break
        x = post.data
        if x.shape[1] % 2:
            x = x[:, 1:]
        report = diag.diagnose(x, rhat_window=min(W, x.shape[1]))
        lam = iterate_average(diag.IterateChains(post.data, T0 + 1), family_kind, P)
        warned = rule != "mcse"
        msg = "" if not warned else f"MCSE/ESS targets not reached within {config.t_max} iterations"
        return make_result(lam, T0, rule, warned, khat, report, T0 + 1, rhats, msg)
    finally:
        if pool is not None:
            pool.shutdown()
