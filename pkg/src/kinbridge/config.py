"""Flat key-value configuration files with dotted sections.

Format: one `dotted.key = value` per line; `#` starts a comment.  Values are
parsed as int, float, comma-separated numeric lists, booleans, or strings.
Example:

    potential.family = quadratic
    potential.alpha = 1.0
    potential.gamma = 1.0
    grid.nx = 61
    grid.nv = 61
    problem = ksp
    marginals.mu.family = gaussian
    marginals.mu.mean = -1.0
    marginals.mu.var = 0.25
    marginals.nu.family = gaussian
    marginals.nu.mean = 1.0
    marginals.nu.var = 0.25
    horizons = 3, 4, 5, 6, 7, 8, 9, 10
    delta = 0.25
    sinkhorn.tol = 1e-10
    sinkhorn.max_iter = 5000
    kernel.source = exact
    seed = 0
"""

from __future__ import annotations

import math
from pathlib import Path

from .exceptions import ConfigurationError
from .experiments import ExperimentConfig, MarginalSpec
from .model import build_grid, potential_from_family


def _parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


def parse_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def _section(d: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in d.items() if k.startswith(prefix + ".")}


def _marginal_spec(d: dict, name: str) -> MarginalSpec:
    sec = _section(d, f"marginals.{name}")
    family = sec.pop("family", "stationary")
    return MarginalSpec(family=str(family), params=sec)


def experiment_from_config(d: dict, out_dir=None, seed=None) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed key-value dict."""
    pot_sec = _section(d, "potential")
    family = str(pot_sec.pop("family", "quadratic"))
    pot = potential_from_family(family, pot_sec)

    grid_sec = _section(d, "grid")
    nx = int(grid_sec.get("nx", 61))
    nv = int(grid_sec.get("nv", 61))
    half_x = 6.0 / math.sqrt(pot.alpha)
    x_min = float(grid_sec.get("x_min", -half_x))
    x_max = float(grid_sec.get("x_max", half_x))
    v_min = float(grid_sec.get("v_min", -6.0))
    v_max = float(grid_sec.get("v_max", 6.0))
    grid = build_grid((x_min, x_max), (v_min, v_max), nx, nv)

    horizons = d.get("horizons", [2.0])
    if not isinstance(horizons, list):
        horizons = [horizons]
    sink = _section(d, "sinkhorn")
    kern = _section(d, "kernel")
    times = _section(d, "times")

    return ExperimentConfig(
        potential=pot, grid=grid,
        problem=str(d.get("problem", "ksp")),
        mu=_marginal_spec(d, "mu"), nu=_marginal_spec(d, "nu"),
        T_list=tuple(float(t) for t in horizons),
        delta=float(d.get("delta", 0.25)),
        tol=float(sink.get("tol", 1e-10)),
        max_iter=int(sink.get("max_iter", 5000)),
        kernel_source=str(kern.get("source", "exact")),
        mc_nsamples=int(kern.get("nsamples", 10000)),
        mc_dt=float(kern.get("dt", 1e-3)),
        seed=int(seed if seed is not None else d.get("seed", 0)),
        n_times=int(times.get("count", 65)),
        n_gh=int(kern.get("n_gh", 24)),
        out_dir=Path(out_dir) if out_dir is not None else Path(d.get("out", ".")),
    )
