"""Command line front door: ``run``, ``suite`` and ``validate``.

Every run writes its artifacts plus ``report.json`` (metrics, certificates
and a sha256 manifest of the other files) into one output directory. Wall
time is printed but never written, so repeated runs of the same config give
byte-identical directories.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bmo import IntegrandPath, bmo_norm_estimate
from .config import ExperimentConfig, load_config
from .engine import scenario_supremum_oracle, solve_g_heat
from .errors import ConfigError, MRGBSDEError
from .gbsde import apriori_bound_check, solve_gbsde
from .reflection import solve_frozen, solve_bounded, solve_unbounded, verify_solution
from .skorokhod import solve_bsp, solve_sp

OUT_ROOT_ENV = "MRGBSDE_OUT_ROOT"
EXIT_OK, EXIT_CERT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


@dataclass
class RunReport:
    name: str
    mode: str
    out_dir: str
    wall_time: float = 0.0
    grid_stats: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    passed: bool = True

    def to_dict(self) -> dict:
        # wall time is deliberately absent: written reports must be reproducible
        return {
            "name": self.name,
            "mode": self.mode,
            "grid_stats": self.grid_stats,
            "metrics": self.metrics,
            "certificates": self.certificates,
            "manifest": self.manifest,
            "passed": self.passed,
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _cert(value: float, threshold: float, upper: bool = True) -> dict:
    ok = value <= threshold if upper else value >= threshold
    return {"value": float(value), "threshold": float(threshold), "passed": bool(ok)}


class _Runner:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path, tol_scale: float):
        self.cfg = cfg
        self.out = out_dir
        self.scale = tol_scale
        self.pol = cfg.policies
        self.metrics: dict = {}
        self.certs: dict = {}

    def thr(self, key: str, default: float) -> float:
        return float(self.cfg.certificates.get(key, default)) * self.scale

    def gexp(self):
        cfg = self.cfg
        sol = solve_g_heat(cfg.terminal, cfg.band, cfg.grid)
        sol.to_csv(self.out / "field.csv")
        self.metrics["value"] = sol.root_value
        self.metrics["cfl_ratio"] = cfg.grid.cfl_ratio(cfg.band)
        depth = self.pol.get("oracle_depth")
        if depth:
            oracle = scenario_supremum_oracle(cfg.terminal, cfg.band, int(depth), cfg.grid.horizon)
            self.metrics["oracle_value"] = oracle
            self.certs["oracle_consistency"] = _cert(abs(sol.root_value - oracle), self.thr("oracle", 5e-3))

    def gbsde(self):
        cfg = self.cfg
        sol = solve_gbsde(cfg.terminal, cfg.generator, cfg.band, cfg.grid, stability_guard=self.pol["stability_guard"])
        sol.to_csv(self.out / "field.csv")
        diag = sol.diagnostics()
        diag["k_martingale"] = sol.k_martingale_residual(int(self.pol["tree_depth"]))
        scale = max(1.0, float(np.max(np.abs(sol.values))))
        self.certs["k_monotone"] = _cert(sol.k_increase / scale, self.thr("k_increase", 1e-8))
        self.certs["k_martingale"] = _cert(diag["k_martingale"]["max_residual"], self.thr("k_martingale", 5e-3))
        apriori = self.pol.get("apriori")
        if apriori and cfg.band.sigma_low_sq > 0:
            rep = apriori_bound_check(sol, cfg.generator, cfg.band, float(apriori.get("p", 1)), float(apriori["gamma"]))
            diag["apriori"] = rep
            self.certs["apriori_bound"] = _cert(rep["max_violation"], self.thr("apriori", 1e-6))
        write_json(self.out / "diagnostics.json", diag)
        self.metrics.update({"y0": sol.y0, "k_increase": sol.k_increase, "guard_margin": sol.guard_margin})

    def _skorokhod(self, backward: bool):
        cfg = self.cfg
        tol = float(self.pol["tol"])
        sol = solve_bsp(cfg.input, cfg.boundaries, tol) if backward else solve_sp(cfg.input, cfg.boundaries, tol)
        sol.to_csv(self.out / "path.csv")
        c = sol.certificates
        write_json(self.out / "certificates.json", c)
        ctol = self.thr("constraint", tol)
        self.certs["constraint"] = _cert(max(c["constraint_l"], c["constraint_r"]), ctol)
        self.certs["flatness_l"] = _cert(c["flatness_l"], self.thr("flatness", tol) * max(c["total_k_l"], 1.0))
        self.certs["flatness_r"] = _cert(c["flatness_r"], self.thr("flatness", tol) * max(c["total_k_r"], 1.0))
        self.certs["minimality"] = {"value": c["simultaneous_push"], "passed": not c["simultaneous_push"]}
        self.metrics.update({"k_T": float(sol.k[-1]), "k_r_T": float(sol.k_r[-1]), "k_l_T": float(sol.k_l[-1]), "x_0": float(sol.x[0])})

    def sp(self):
        self._skorokhod(False)

    def bsp(self):
        self._skorokhod(True)

    def _bounded_kwargs(self) -> dict:
        p = self.pol
        return {
            "delta": p["delta"],
            "delta_factor": p["delta_factor"],
            "fp_tol": p["fp_tol"],
            "max_iter": int(p["max_iter"]),
            "n_lattice": int(p["n_lattice"]),
            "anchor_tol": p["anchor_tol"],
        }

    def _mr_outputs(self, sol):
        sol.to_csv(self.out / "mr.csv")
        sol.field_csv(self.out / "field.csv")
        tolerances = {
            "constraint": self.thr("constraint", 2e-3),
            "flatness_relative": self.thr("flatness_relative", 1e-3),
            "k_martingale": self.thr("k_martingale", 5e-3),
            "k_increase": self.thr("k_increase", 1e-8),
            "monotonicity": self.thr("monotonicity", 1e-12),
        }
        report = verify_solution(sol, int(self.pol["tree_depth"]), tolerances)
        write_json(self.out / "certificates.json", report)
        for name, ok in report["checks"].items():
            self.certs[name] = {"passed": bool(ok)}
        self.metrics.update(
            {
                "y0": sol.y0,
                "a_T": float(sol.a[-1]),
                "a_r_T": float(sol.a_r[-1]),
                "a_l_T": float(sol.a_l[-1]),
                "intervals": len(sol.knots) - 1,
                "max_iterations": max(sol.iterations),
            }
        )
        return report

    def mr_bounded(self):
        cfg = self.cfg
        sol = solve_bounded(cfg.terminal, cfg.generator, cfg.loss, cfg.band, cfg.grid, init=self.pol["init"], **self._bounded_kwargs())
        self._mr_outputs(sol)
        return sol

    def mr_unbounded(self):
        cfg = self.cfg
        p = self.pol
        kwargs = self._bounded_kwargs()
        kwargs.pop("delta")
        kwargs.pop("delta_factor")
        sol, diag = solve_unbounded(
            cfg.terminal,
            cfg.generator,
            cfg.loss,
            cfg.band,
            cfg.grid,
            m_schedule=p["m_schedule"],
            theta_schedule=p["theta_schedule"],
            init=p["init"],
            gap_tol=p["gap_tol"],
            **kwargs,
        )
        write_json(self.out / "theta.json", diag.to_dict())
        self._mr_outputs(sol)
        gaps = diag.cauchy_gaps
        self.metrics["cauchy_gaps"] = gaps
        self.metrics["final_gap"] = gaps[-1] if gaps else 0.0
        self.certs["cauchy_converged"] = _cert(self.metrics["final_gap"], float(p["gap_tol"]) * self.scale)
        decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
        self.certs["gaps_decreasing"] = {"value": decreasing, "passed": decreasing}

    def verify(self):
        cfg = self.cfg
        sol = self.mr_bounded()
        # fixed-point property: feeding Y back as the frozen argument reproduces it
        worst = 0.0
        for k in range(len(sol.knots) - 1):
            i0, i1 = sol.knots[k], sol.knots[k + 1]
            sub = cfg.grid.window(i0, i1)
            again = solve_frozen(
                sol.Y[i0 : i1 + 1],
                sol.Y[i1],
                cfg.generator,
                cfg.loss,
                cfg.band,
                sub,
                n_lattice=int(self.pol["n_lattice"]),
                anchor_tol=self.pol["anchor_tol"],
                mean_grid=cfg.grid,
            )
            worst = max(worst, float(np.max(np.abs(again.Y - sol.Y[i0 : i1 + 1]))))
        self.certs["freeze_consistency"] = _cert(worst, self.thr("freeze", 1e-6))
        self.metrics["freeze_gap"] = worst
        z_sq = bmo_norm_estimate(IntegrandPath.from_solution(sol.components[0]), int(self.pol["tree_depth"]))
        self.metrics["bmo_squared_norm_first_interval"] = z_sq
        apriori = self.pol.get("apriori")
        if apriori and cfg.band.sigma_low_sq > 0:
            rep = apriori_bound_check(sol.components[0], cfg.generator, cfg.band, float(apriori.get("p", 1)), float(apriori["gamma"]))
            self.certs["apriori_bound"] = _cert(rep["max_violation"], self.thr("apriori", 1e-6))

    def run(self):
        handler = {
            "gexp": self.gexp,
            "gbsde": self.gbsde,
            "sp": self.sp,
            "bsp": self.bsp,
            "mr-bounded": self.mr_bounded,
            "mr-unbounded": self.mr_unbounded,
            "verify": self.verify,
        }[self.cfg.mode]
        handler()
        for key, (value, tol) in self.cfg.expect.items():
            if key not in self.metrics:
                self.certs[f"expect.{key}"] = {"passed": False, "reason": "metric not produced"}
                continue
            self.certs[f"expect.{key}"] = _cert(abs(float(self.metrics[key]) - float(value)), float(tol) * self.scale)


def resolve_out_dir(cfg: ExperimentConfig, out_dir: str | None) -> Path:
    if out_dir:
        return Path(out_dir)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / cfg.name


def execute(cfg: ExperimentConfig, out_dir: Path, tol_scale: float = 1.0) -> RunReport:
    """Run one validated config and write its artifacts into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").unlink(missing_ok=True)
    start = time.perf_counter()
    runner = _Runner(cfg, out_dir, tol_scale)
    runner.run()
    report = RunReport(cfg.name, cfg.mode, str(out_dir))
    report.wall_time = time.perf_counter() - start
    if cfg.grid is not None:
        report.grid_stats = {**cfg.grid.to_dict(), "dt": cfg.grid.dt, "dx": cfg.grid.dx}
        if cfg.band is not None:
            report.grid_stats["cfl_ratio"] = cfg.grid.cfl_ratio(cfg.band)
    report.metrics = runner.metrics
    report.certificates = runner.certs
    report.passed = all(c.get("passed", False) for c in runner.certs.values())
    report.manifest = {
        p.name: sha256(p) for p in sorted(out_dir.iterdir()) if p.is_file() and p.name != "report.json"
    }
    write_json(out_dir / "report.json", report.to_dict())
    return report


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = resolve_out_dir(cfg, args.out_dir)
    try:
        report = execute(cfg, out, args.tol_scale)
    except MRGBSDEError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} {cfg.name} ({cfg.mode}) -> {out} [{report.wall_time:.2f}s]")
    for name, cert in report.certificates.items():
        if not cert.get("passed", False):
            print(f"  failed certificate: {name} {cert}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_CERT


def _suite_member(index: int, config_path: Path, out_root: Path, tol_scale: float) -> dict:
    entry = {"index": index, "config": str(config_path), "name": None, "passed": False, "error": None, "out_dir": None}
    try:
        cfg = load_config(config_path)
        entry["name"] = cfg.name
        sub = f"{index:03d}-{cfg.name}"
        entry["out_dir"] = sub
        report = execute(cfg, out_root / sub, tol_scale)
        entry["passed"] = report.passed
        entry["failed_certificates"] = sorted(k for k, v in report.certificates.items() if not v.get("passed", False))
    except (MRGBSDEError, OSError) as exc:
        entry["error"] = f"{type(exc).__name__}: {exc}"
    return entry


def read_manifest(path: Path) -> list[Path]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    items = raw.get("configs", []) if isinstance(raw, dict) else raw
    if not isinstance(items, list):
        raise ConfigError(f"{path}: manifest must list configs")
    return [(path.parent / p) for p in items]


def run_suite(manifest: Path, out_root: Path, threads: int = 1, tol_scale: float = 1.0) -> dict:
    """Run every config of a manifest; member failures are recorded, not raised."""
    configs = read_manifest(Path(manifest))
    out_root.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_suite_member, i, p, out_root, tol_scale) for i, p in enumerate(configs)]
        entries = [f.result() for f in futures]
    summary = {"count": len(entries), "passed": all(e["passed"] for e in entries), "entries": entries}
    write_json(out_root / "summary.json", summary)
    return summary


def cmd_suite(args) -> int:
    out_root = Path(args.out_dir) if args.out_dir else Path(os.environ.get(OUT_ROOT_ENV, "runs")) / Path(args.manifest).stem
    try:
        summary = run_suite(Path(args.manifest), out_root, args.threads, args.tol_scale)
    except (ConfigError, OSError) as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for e in summary["entries"]:
        status = "PASS" if e["passed"] else "FAIL"
        print(f"{status} {e['config']}" + (f" ({e['error']})" if e["error"] else ""))
    print(f"{sum(e['passed'] for e in summary['entries'])}/{summary['count']} passed -> {out_root}")
    return EXIT_OK if summary["passed"] else EXIT_CERT


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"valid: {cfg.name} ({cfg.mode})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrgbsde", description="Mean-reflected G-BSDE laboratory")
    sub = parser.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help=f"output directory (default: ${OUT_ROOT_ENV}/<name> or runs/<name>)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for suite members")
    common.add_argument("--tol-scale", type=float, default=1.0, help="multiply every certificate tolerance")
    p_run = sub.add_parser("run", parents=[common], help="run one experiment config")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)
    p_suite = sub.add_parser("suite", parents=[common], help="run a manifest of configs")
    p_suite.add_argument("manifest")
    p_suite.set_defaults(func=cmd_suite)
    p_val = sub.add_parser("validate", parents=[common], help="parse and validate a config")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
