"""Experiment configuration: JSON parsing and fail-fast validation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .engine import GridSpec, Payoff, VolatilityBand
from .errors import ConfigError, MRGBSDEError
from .gbsde import GeneratorSpec
from .reflection import LossSpec
from .skorokhod import BoundaryPair, InputPath

MODES = ("gexp", "gbsde", "sp", "bsp", "mr-bounded", "mr-unbounded", "verify")
REQUIRED = {
    "gexp": ("band", "grid", "terminal"),
    "gbsde": ("band", "grid", "terminal"),
    "sp": ("input", "boundaries"),
    "bsp": ("input", "boundaries"),
    "mr-bounded": ("band", "grid", "terminal", "loss"),
    "mr-unbounded": ("band", "grid", "terminal", "loss"),
    "verify": ("band", "grid", "terminal", "loss"),
}
TOP_LEVEL = {
    "name",
    "mode",
    "seed",
    "band",
    "grid",
    "terminal",
    "generator",
    "loss",
    "input",
    "boundaries",
    "policies",
    "certificates",
    "expect",
    "output_dir",
}
DEFAULT_POLICIES = {
    "delta": None,
    "delta_factor": 0.5,
    "n_lattice": 257,
    "fp_tol": 1e-9,
    "max_iter": 50,
    "anchor_tol": 1e-4,
    "m_schedule": [1, 2, 4, 8, 16],
    "theta_schedule": [0.5, 0.9, 0.99],
    "init": "unreflected",
    "gap_tol": 5e-3,
    "tree_depth": 8,
    "stability_guard": 0.25,
    "tol": 1e-9,
    "oracle_depth": None,
    "apriori": None,
}


@dataclass
class ExperimentConfig:
    """A validated experiment: one mode plus the objects it needs."""

    name: str
    mode: str
    seed: int = 0
    band: VolatilityBand | None = None
    grid: GridSpec | None = None
    terminal: Payoff | None = None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    loss: LossSpec | None = None
    input: InputPath | None = None
    boundaries: BoundaryPair | None = None
    policies: dict = field(default_factory=lambda: dict(DEFAULT_POLICIES))
    certificates: dict = field(default_factory=dict)
    expect: dict = field(default_factory=dict)
    output_dir: str | None = None
    raw: dict = field(default_factory=dict)


def _section(raw: dict, key: str, kind=dict):
    value = raw[key]
    if not isinstance(value, kind):
        raise ConfigError(f"field '{key}' must be a {kind.__name__}")
    return value


def parse_band(spec: dict) -> VolatilityBand:
    try:
        return VolatilityBand(float(spec["sigma_low_sq"]), float(spec["sigma_high_sq"]))
    except KeyError as exc:
        raise ConfigError(f"band needs key {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"band: {exc}") from None


def parse_grid(spec: dict, band: VolatilityBand) -> GridSpec:
    try:
        if "x_min" in spec:
            grid = GridSpec(
                float(spec.get("t_start", 0.0)),
                float(spec["t_end"]),
                int(spec["n_time"]),
                float(spec["x_min"]),
                float(spec["x_max"]),
                int(spec["n_space"]),
            )
            grid.check_cfl(band)
            return grid
        return GridSpec.for_band(
            band,
            t_end=float(spec.get("t_end", 1.0)),
            n_space=int(spec.get("n_space", 201)),
            n_time=None if spec.get("n_time") is None else int(spec["n_time"]),
            t_start=float(spec.get("t_start", 0.0)),
            half_width=None if spec.get("half_width") is None else float(spec["half_width"]),
        )
    except KeyError as exc:
        raise ConfigError(f"grid needs key {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None


def parse_input(spec: dict, seed: int) -> InputPath:
    """Input paths: explicit samples or one of the linear / sawtooth / random_walk families."""
    family = spec.get("family", "explicit")
    anchor = spec.get("anchor")
    t_end = float(spec.get("t_end", 1.0))
    n = int(spec.get("n", 100))
    times = np.linspace(0.0, t_end, n + 1)
    if family == "explicit":
        if "times" not in spec or "values" not in spec:
            raise ConfigError("explicit input needs 'times' and 'values'")
        return InputPath(spec["times"], spec["values"], anchor)
    if family == "linear":
        values = float(spec.get("slope", 1.0)) * times + float(spec.get("start", 0.0))
    elif family == "sawtooth":
        teeth = int(spec.get("teeth", 4))
        amp = float(spec.get("amplitude", 1.0))
        phase = (times / t_end * teeth) % 1.0
        values = amp * (1.0 - 2.0 * np.abs(2.0 * phase - 1.0))
    elif family == "random_walk":
        rng = np.random.default_rng(seed)
        steps = rng.normal(0.0, float(spec.get("scale", 1.0)) * math.sqrt(t_end / n), n)
        values = np.concatenate([[0.0], np.cumsum(steps)])
    else:
        raise ConfigError(f"unknown input family {family!r}")
    return InputPath(times, values, anchor)


def parse_config(raw: dict, source: str = "<config>") -> ExperimentConfig:
    """Validate a decoded config; assumption checks run here and fail fast."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"{source}: unknown fields {sorted(unknown)}")
    mode = raw.get("mode")
    if mode not in MODES:
        raise ConfigError(f"{source}: field 'mode' must be one of {MODES}, got {mode!r}")
    for key in REQUIRED[mode]:
        if key not in raw:
            raise ConfigError(f"{source}: mode '{mode}' requires field '{key}'")
    seed = int(raw.get("seed", 0))
    cfg = ExperimentConfig(name=str(raw.get("name", Path(source).stem)), mode=mode, seed=seed, raw=raw)
    try:
        if "band" in raw:
            cfg.band = parse_band(_section(raw, "band"))
        if "grid" in raw:
            if cfg.band is None:
                raise ConfigError("field 'grid' needs field 'band'")
            cfg.grid = parse_grid(_section(raw, "grid"), cfg.band)
        if "terminal" in raw:
            cfg.terminal = Payoff.from_config(_section(raw, "terminal"))
            if cfg.grid is not None:
                cfg.terminal.sample(cfg.grid)
        if "generator" in raw:
            cfg.generator = GeneratorSpec.from_config(_section(raw, "generator"))
        if "loss" in raw:
            cfg.loss = LossSpec.from_config(_section(raw, "loss"))
            cfg.loss.validate(cfg.grid.times if cfg.grid is not None else np.linspace(0, 1, 11))
        if "input" in raw:
            cfg.input = parse_input(_section(raw, "input"), seed)
        if "boundaries" in raw:
            cfg.boundaries = BoundaryPair.from_config(_section(raw, "boundaries"))
            times = cfg.input.times if cfg.input is not None else np.linspace(0, 1, 11)
            cfg.boundaries.validate(times)
        policies = dict(DEFAULT_POLICIES)
        policies.update(raw.get("policies", {}) or {})
        unknown_p = set(policies) - set(DEFAULT_POLICIES)
        if unknown_p:
            raise ConfigError(f"unknown policies {sorted(unknown_p)}")
        cfg.policies = policies
        cfg.certificates = dict(raw.get("certificates", {}) or {})
        cfg.expect = dict(raw.get("expect", {}) or {})
        for key, val in cfg.expect.items():
            if not (isinstance(val, (list, tuple)) and len(val) == 2):
                raise ConfigError(f"expect.{key} must be [value, tolerance]")
        cfg.output_dir = raw.get("output_dir")
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except (MRGBSDEError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{source}: {type(exc).__name__}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a JSON config file; parse errors carry line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        raw: Any = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_config(raw, str(path))
