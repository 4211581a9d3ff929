"""Command-line harness: ``robustvi run | compare | diagnose``.

Exit codes: 0 success, 1 non-convergence warning, 2 error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .config import ConfigError, ExperimentConfig, build_model, load_config
from .families import num_params
from .metrics import load_reference_moments, params_distance
from .models import ModelSpec
from .optimizers import DivergenceError
from .workflow import RunResult, run

EXIT_OK, EXIT_WARN, EXIT_ERROR = 0, 1, 2
TABLE_COLUMNS = ["seed", "K", "rule", "eps", "T", "D_mu", "D_mu_IA", "D_Sigma", "D_Sigma_IA",
                 "khat", "khat_IA"]
TRACE_HEADER = "chain,iteration,component,value"
AUTOCORR_WARNING = 0.99


def _err(msg: str) -> None:
    print(f"robustvi: error: {msg}", file=sys.stderr)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# Output files


def write_trace(path: Path, result: RunResult) -> None:
    trace, its = result.trace, result.trace_iterations
    J, T, K = trace.shape
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        comps = np.arange(K)
        for j in range(J):
            for t in range(T):
                prefix = f"{j},{its[t]},"
                fh.write("".join(f"{prefix}{c},{v!r}\n" for c, v in zip(comps, trace[j, t].tolist())))


def write_elbo(path: Path, result: RunResult) -> None:
    est = result.elbo_trace.mean(axis=0)
    with open(path, "w") as fh:
        fh.write("iteration,estimate\n")
        fh.write("".join(f"{i + 1},{v!r}\n" for i, v in enumerate(est.tolist())))


def write_table(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_trace(path: str | Path) -> np.ndarray:
    """Parse a ``chain,iteration,component,value`` file into a ``(J, T, K)`` array."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"trace not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trace")
    if lines[0].strip() != TRACE_HEADER:
        raise ValueError(f"{path}:1: expected header {TRACE_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append((int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: empty trace")
    arr = np.asarray(rows)
    chains, its, comps = (np.unique(arr[:, i]).astype(int) for i in range(3))
    J, T, K = chains.size, its.size, comps.size
    if J * T * K != len(rows):
        raise ValueError(f"{path}: trace is not a complete chain x iteration x component grid")
    out = np.full((J, T, K), np.nan)
    out[np.searchsorted(chains, arr[:, 0]), np.searchsorted(its, arr[:, 1]),
        np.searchsorted(comps, arr[:, 2])] = arr[:, 3]
    if np.isnan(out).any():
        raise ValueError(f"{path}: duplicate or missing entries in trace")
    return out


# --------------------------------------------------------------------------
# Shared pieces


def _reference(cfg: ExperimentConfig, model: ModelSpec):
    if model.analytic_moments is not None:
        return model.analytic_moments
    if cfg.reference_path is not None:
        return load_reference_moments(cfg.reference_path, model.dim)
    return None


def _table_row(model: ModelSpec, cfg: ExperimentConfig, result: RunResult, reference) -> dict:
    wf = cfg.workflow
    rule = "mcse" if wf.stopping_rule == "mcse" else "delbo"
    last = result.lambda_last[0]
    if reference is not None:
        d_last, d_avg = params_distance(last, reference), params_distance(result.lambda_bar, reference)
        dm, dmi, ds, dsi = d_last.d_mu, d_avg.d_mu, d_last.d_sigma, d_avg.d_sigma
    else:
        dm = dmi = ds = dsi = float("nan")
    rng = np.random.default_rng([wf.seed, 7])
    khat = diag.psis_khat(model, last, rng=rng)
    khat_ia = diag.psis_khat(model, result.lambda_bar, rng=rng)
    return {
        "seed": wf.seed, "K": num_params(cfg.family, model.dim), "rule": rule,
        "eps": float(wf.mcse_cutoff if rule == "mcse" else wf.delbo_epsilon), "T": result.T_stop,
        "D_mu": dm, "D_mu_IA": dmi, "D_Sigma": ds, "D_Sigma_IA": dsi,
        "khat": float(khat), "khat_IA": float(khat_ia),
    }


def _report(cfg: ExperimentConfig, model: ModelSpec, result: RunResult, row: dict) -> dict:
    def params_dict(p):
        return {"location": p.location, "scale": p.scale}

    wf = dataclasses.asdict(cfg.workflow)
    return _jsonable({
        "model": {k: v for k, v in cfg.model.items()},
        "family": cfg.family,
        "dim": model.dim,
        "num_params": num_params(cfg.family, model.dim),
        "workflow": wf,
        "result": result.metadata(),
        "diagnostics": result.diagnostics.to_dict(),
        "lambda_bar": params_dict(result.lambda_bar),
        "lambda_last": [params_dict(p) for p in result.lambda_last],
        "table_row": row,
    })


def _execute(cfg: ExperimentConfig, model: ModelSpec, out: Path, reference) -> tuple[RunResult, dict]:
    out.mkdir(parents=True, exist_ok=True)
    result = run(model, cfg.family, cfg.workflow)
    row = _table_row(model, cfg, result, reference)
    write_trace(out / "trace.csv", result)
    write_elbo(out / "elbo.csv", result)
    (out / "report.json").write_text(json.dumps(_report(cfg, model, result, row), indent=1,
                                                sort_keys=True) + "\n")
    return result, row


def _prepare(config_path, seed, out_dir):
    cfg = load_config(config_path)
    if seed is not None:
        cfg.workflow.seed = int(seed)
    model = build_model(cfg)
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output_dir)
    return cfg, model, out


# --------------------------------------------------------------------------
# Commands


def cmd_run(config_path, seed: int | None = None, out_dir=None) -> int:
    try:
        cfg, model, out = _prepare(config_path, seed, out_dir)
        reference = _reference(cfg, model)
        result, row = _execute(cfg, model, out, reference)
        write_table(out / "table.csv", [row])
    except DivergenceError as exc:
        _err(f"optimization diverged: {exc}")
        return EXIT_ERROR
    except (ConfigError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_ERROR
    status = "warning: " + result.message if result.warned_nonconvergence else "converged"
    print(f"{status}; stopped at T={result.T_stop} by rule {result.rule_fired}; outputs in {out}")
    return EXIT_WARN if result.warned_nonconvergence else EXIT_OK


def cmd_compare(config_path, seed: int | None = None, out_dir=None) -> int:
    try:
        cfg, model, out = _prepare(config_path, seed, out_dir)
        reference = _reference(cfg, model)
        if reference is None:
            raise ConfigError(f"{cfg.source}: compare needs ground truth "
                              "(a model with analytic moments or model.reference)")
        rows, warned = [], False
        base = cfg.workflow.seed
        for s in range(base, base + cfg.compare_seeds):
            for rule in ("delbo", "mcse"):
                sub = copy.deepcopy(cfg)
                sub.workflow.seed = s
                sub.workflow.stopping_rule = rule
                result, row = _execute(sub, model, out / f"seed{s}" / rule, reference)
                warned |= result.warned_nonconvergence and rule == "mcse"
                rows.append(row)
                print(f"seed {s} {rule}: T={row['T']} D_mu={row['D_mu']:.4g} "
                      f"D_mu_IA={row['D_mu_IA']:.4g}")
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "table.csv", rows)
    except DivergenceError as exc:
        _err(f"optimization diverged: {exc}")
        return EXIT_ERROR
    except (ConfigError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_ERROR
    return EXIT_WARN if warned else EXIT_OK


def verdict(chains: np.ndarray, window: int = 100, rhat_cutoff: float = 1.1,
            khat_cutoff: float = diag.KHAT_PROBLEM) -> tuple[str, list[str], diag.DiagnosticsReport]:
    """Offline verdict for a ``(J, T, K)`` iterate trace.

    R-hat uses the last ``window`` iterates; ESS, MCSE, tail indices and the
    lag-1 autocorrelation use the whole trace.
    """
    T = chains.shape[1]
    w = min(window, T - T % 2)
    if w < 4:
        raise ValueError(f"trace too short for diagnostics ({T} iterations)")
    report = diag.diagnose(chains, rhat_window=w)
    warnings = []
    rho1 = float(np.max(report.autocorr[:, 1])) if report.autocorr.shape[1] > 1 else 0.0
    if rho1 > AUTOCORR_WARNING:
        warnings.append(f"lag-1 autocorrelation {rho1:.4f} > {AUTOCORR_WARNING}: "
                        "iterate averaging may not be reliable")
    if report.max_rhat >= rhat_cutoff:
        text = "not stationary (R̂ ≥ τ)"
    elif np.isfinite(report.max_khat) and report.max_khat > khat_cutoff:
        text = "heavy-tailed iterates (k̂ > 1), averaging may be invalid"
    elif warnings:
        text = "converged, averaging inefficient"
    else:
        text = "converged, averaging efficient"
    return text, warnings, report


def cmd_diagnose(trace_path, window: int = 100, rhat_cutoff: float = 1.1, out_dir=None) -> int:
    try:
        chains = read_trace(trace_path)
        text, warnings, report = verdict(chains, window, rhat_cutoff)
    except (ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_ERROR
    J, T, K = chains.shape
    print(f"trace: {J} chain(s), {T} iterations, {K} components")
    print(f"max R-hat {report.max_rhat:.4f}  min ESS {report.min_ess:.1f}  "
          f"median MCSE {report.median_mcse:.4g}  max k-hat {report.max_khat:.3f}")
    for w in warnings:
        print(f"warning: {w}")
    print(f"verdict: {text}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = _jsonable({"verdict": text, "warnings": warnings, "diagnostics": report.to_dict()})
        (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK if text == "converged, averaging efficient" else EXIT_WARN


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustvi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run one workflow and persist its outputs"),
                           ("compare", "run the ELBO and MCSE stopping rules side by side")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="experiment config file")
        s.add_argument("--seed", type=int, default=None, help="override workflow.seed")
        s.add_argument("--out", default=None, help="override output.dir")
    s = sub.add_parser("diagnose", help="recompute diagnostics from a persisted trace")
    s.add_argument("--trace", required=True, help="trace.csv written by run or compare")
    s.add_argument("--window", type=int, default=100, help="R-hat window")
    s.add_argument("--rhat-cutoff", type=float, default=1.1)
    s.add_argument("--seed", type=int, default=None, help="accepted for symmetry; unused")
    s.add_argument("--out", default=None, help="also write report.json here")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out)
    if args.command == "compare":
        return cmd_compare(args.config, args.seed, args.out)
    return cmd_diagnose(args.trace, args.window, args.rhat_cutoff, args.out)


if __name__ == "__main__":
    sys.exit(main())
