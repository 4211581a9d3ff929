"""Flat ``key = value`` experiment configuration.

Keys are dotted (``workflow.window = 100``); ``#`` starts a comment.  Vectors
are written ``1;2;3`` and matrices ``1,0;0,1`` (rows separated by ``;``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .families import FAMILY_KINDS
from .models import (
    BimodalTarget, GaussianTarget, LinearRegression, LinRegSpec, LogisticRegression,
    ModelSpec, eight_schools, linreg_generate, load_csv_dataset, synthetic_logistic,
)
from .workflow import WorkflowConfig

MODEL_KINDS = ("linreg", "logistic", "eight_schools", "gaussian", "bimodal")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and line when known."""


def parse_vector(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", ";").split(";") if v.strip()]


def parse_matrix(text: str) -> list[list[float]]:
    return [[float(v) for v in row.split(",") if v.strip()] for row in text.split(";") if row.strip()]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("none", "") else conv(text)
    return parse


def _init_locations(text: str):
    """``-3;3`` gives one scalar per chain; ``0 0|1 1`` gives one vector per chain."""
    if "|" in text:
        return [parse_vector(r.replace(" ", ";")) for r in text.split("|")]
    return [[v] for v in parse_vector(text)]


_WORKFLOW_PARSERS = {
    "eta": float, "num_chains": int, "window": int, "rhat_cutoff": float,
    "mcse_cutoff": float, "ess_cutoff": float, "t_max": int, "optimizer": str,
    "num_draws": int, "batch_size": _optional(int), "stopping_rule": str,
    "delbo_epsilon": float, "delbo_window": _optional(int), "seed": int,
    "init_sd": float, "init_locations": _optional(_init_locations),
    "max_grad_norm": _optional(float), "ess_reduce": str, "rank_normalize": _parse_bool,
    "khat_cutoff": float, "threads": _optional(int),
}

_MODEL_PARSERS = {
    "kind": str, "dim": int, "n": int, "noise_var": float, "gamma": float, "data_seed": int,
    "data": str, "prior_sd": float, "parameterization": str, "mean": parse_vector,
    "cov": parse_matrix, "modes": parse_vector, "sd": float, "reference": str,
}

_OTHER_PARSERS = {
    "family": str, "output.dir": str, "output.thin": int, "compare.seeds": int,
}


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {"kind": "linreg"})
    family: str = "full_rank"
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    output_dir: str = "out"
    thin: int = 1
    compare_seeds: int = 1
    source: str = "<config>"
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def reference_path(self) -> Path | None:
        ref = self.model.get("reference")
        return None if ref is None else self.resolve(ref)


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig(source=source, base_dir=base_dir or Path.cwd())
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in lines:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        lines[key] = lineno
        try:
            if key.startswith("workflow."):
                name = key[len("workflow."):]
                if name not in _WORKFLOW_PARSERS:
                    raise KeyError(key)
                setattr(cfg.workflow, name, _WORKFLOW_PARSERS[name](value))
            elif key.startswith("model."):
                name = key[len("model."):]
                if name not in _MODEL_PARSERS:
                    raise KeyError(key)
                cfg.model[name] = _MODEL_PARSERS[name](value)
            elif key in _OTHER_PARSERS:
                parsed = _OTHER_PARSERS[key](value)
                attr = {"family": "family", "output.dir": "output_dir", "output.thin": "thin",
                        "compare.seeds": "compare_seeds"}[key]
                setattr(cfg, attr, parsed)
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    _validate(cfg, lines)
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict[str, int]) -> None:
    def fail(key: str, msg: str):
        where = f"{cfg.source}:{lines[key]}" if key in lines else cfg.source
        raise ConfigError(f"{where}: {msg}")

    kind = cfg.model.get("kind")
    if kind not in MODEL_KINDS:
        fail("model.kind", f"model.kind must be one of {MODEL_KINDS}, got {kind!r}")
    if cfg.family not in FAMILY_KINDS:
        fail("family", f"family must be one of {FAMILY_KINDS}, got {cfg.family!r}")
    if cfg.thin < 1:
        fail("output.thin", "output.thin must be at least 1")
    if cfg.compare_seeds < 1:
        fail("compare.seeds", "compare.seeds must be at least 1")
    for key in ("data", "reference"):
        if key in cfg.model and not cfg.resolve(cfg.model[key]).is_file():
            fail(f"model.{key}", f"referenced file not found: {cfg.model[key]}")
    cfg.workflow.trace_thin = cfg.thin
    try:
        cfg.workflow.validate()
    except ValueError as exc:
        fail("", str(exc))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    return parse_config(path.read_text(), str(path), path.parent)


def build_model(cfg: ExperimentConfig) -> ModelSpec:
    m = cfg.model
    kind = m["kind"]
    try:
        if kind == "linreg":
            if "data" in m:
                ds = load_csv_dataset(cfg.resolve(m["data"]))
                return LinearRegression(ds.X, ds.y, m.get("noise_var", 0.4))
            spec = LinRegSpec(dim=m.get("dim", 2), n=m.get("n", 300), noise_var=m.get("noise_var", 0.4),
                              gamma=m.get("gamma", 0.0), seed=m.get("data_seed", 0))
            return linreg_generate(spec)[0]
        if kind == "logistic":
            if "data" in m:
                ds = load_csv_dataset(cfg.resolve(m["data"]))
            else:
                ds = synthetic_logistic(m.get("n", 300), m.get("dim", 2), m.get("data_seed", 0))
            return LogisticRegression(ds.X, ds.y, m.get("prior_sd", 1.0))
        if kind == "eight_schools":
            path = cfg.resolve(m["data"]) if "data" in m else None
            return eight_schools(m.get("parameterization", "NCP"), path)
        if kind == "gaussian":
            dim = m.get("dim", len(m["mean"]) if "mean" in m else 2)
            mean = np.asarray(m.get("mean", np.zeros(dim)), dtype=float)
            cov = np.asarray(m.get("cov", np.eye(mean.size)), dtype=float)
            return GaussianTarget(mean, cov)
        return BimodalTarget(m.get("modes", (-3.0, 3.0)), m.get("sd", 0.5))
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"{cfg.source}: cannot build {kind} model: {exc}") from None
