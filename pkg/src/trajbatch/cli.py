"""Command-line entry point: run benchmarks and case studies from JSON configs.

Each run writes CSV tables (or JSON, per --format), a JSON report echoing the
normalized config plus host metadata, and optional SVG plots. Exit codes:
0 success, 2 config error, 3 solver/verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .batch import bench_scaling
from .dynamics import Cartpole, DoubleIntegrator, Pendulum, TwoLinkArm
from .errors import ConfigError
from .mpc import (
    HypothesisMode,
    ReachingScenario,
    SingleMode,
    figure8_study,
    rho_sweep_study,
    run_reaching_suite,
)
from .oracles import riccati_suite, schur_kkt_suite
from .qpform import CostSpec, ProblemSpec

EXPERIMENT_KINDS = (
    "benchmark",
    "case1_rho",
    "case2_fixed_force",
    "case3_reaching",
    "oracle_suite",
)

MODELS = {
    "double_integrator": DoubleIntegrator,
    "pendulum": Pendulum,
    "cartpole": Cartpole,
    "two_link_arm": TwoLinkArm,
}

_CONFIG_FIELDS = {
    "kind", "model", "N", "h", "M", "M_list", "N_list", "workers", "seed",
    "seeds", "steps", "iterations", "sigma", "force_magnitude", "targets",
    "out_dir", "format", "repeats", "solver",
}

_SOLVER_FIELDS = {
    "max_sqp_iterations", "rho_init", "rho_min", "rho_max", "rho_factor",
    "step_tolerance", "feasibility_tolerance", "regularize_r",
    "pcg_tolerance", "pcg_max_iterations", "mu", "beta", "num_shrinks",
}


@dataclass
class ExperimentConfig:
    """Validated experiment description; unknown keys are rejected."""

    kind: str
    model: str = "two_link_arm"
    N: int = 16
    h: float = 0.05
    M: int = 16
    M_list: list[int] = field(default_factory=lambda: [1, 2, 4])
    N_list: list[int] = field(default_factory=lambda: [8, 16])
    workers: int = 1
    seed: int = 0
    seeds: int = 20
    steps: int = 60
    iterations: int = 20
    sigma: float = 1.0
    force_magnitude: float = 3.0
    targets: int = 3
    out_dir: str = "trajbatch_out"
    format: str = "csv"
    repeats: int = 3
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}"
            )
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {tuple(MODELS)}")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be 'csv' or 'json'")
        unknown = set(self.solver) - _SOLVER_FIELDS
        if unknown:
            raise ConfigError(f"unknown solver settings keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(data) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("config must set 'kind'")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------- #
# Tables and plots                                                             #
# --------------------------------------------------------------------------- #

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_table(rows: list[dict], path: Path, fmt: str = "csv") -> Path:
    """One table per file; column order follows the first row's keys."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = path.with_suffix(".json")
        serializable = [
            {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}
            for row in rows
        ]
        path.write_text(json.dumps(serializable, indent=2, sort_keys=True) + "\n")
        return path
    path = path.with_suffix(".csv")
    buffer = io.StringIO()
    if rows:
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(rows[0].keys())
        for row in rows:
            writer.writerow([_fmt(v) for v in row.values()])
    path.write_text(buffer.getvalue())
    return path


def emit_plot(table: list[dict], kind: str, path: Path, x: str = "", y: str = "", value: str = "") -> Path | None:
    """Write a self-contained SVG line plot or annotated heatmap.

    Empty tables produce a warning and no file. Line plots place one polyline
    point per row using the ``x`` and ``y`` columns; heatmaps draw one cell
    per row at integer grid positions of the distinct ``x``/``y`` values,
    annotated with the ``value`` column.
    """
    if not table:
        print("emit_plot: empty table, no plot written", file=sys.stderr)
        return None
    if kind not in ("line", "heatmap"):
        raise ConfigError(f"unknown plot kind {kind!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    width, height, margin = 480, 320, 50

    def scale(vals, lo_px, hi_px):
        vmin, vmax = min(vals), max(vals)
        span = vmax - vmin if vmax > vmin else 1.0
        return [lo_px + (v - vmin) / span * (hi_px - lo_px) for v in vals]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if kind == "line":
        xs = [float(row[x]) for row in table]
        ys = [float(row[y]) for row in table]
        px = scale(xs, margin, width - margin)
        py = scale(ys, height - margin, margin)  # svg y grows downward
        points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        parts.append(
            f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{points}"/>'
        )
        for a, b in zip(px, py):
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="#1f77b4"/>')
        parts.append(
            f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{x}</text>'
        )
        parts.append(
            f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" '
            f'text-anchor="middle" font-size="12">{y}</text>'
        )
    else:
        xvals = sorted({float(row[x]) for row in table})
        yvals = sorted({float(row[y]) for row in table})
        vals = [float(row[value]) for row in table]
        vmin, vmax = min(vals), max(vals)
        vspan = vmax - vmin if vmax > vmin else 1.0
        cell_w = (width - 2 * margin) / len(xvals)
        cell_h = (height - 2 * margin) / len(yvals)
        for row in table:
            i = xvals.index(float(row[x]))
            j = yvals.index(float(row[y]))
            v = float(row[value])
            shade = int(235 - 180 * (v - vmin) / vspan)
            cx = margin + i * cell_w
            cy = height - margin - (j + 1) * cell_h
            parts.append(
                f'<rect x="{cx:.2f}" y="{cy:.2f}" width="{cell_w:.2f}" height="{cell_h:.2f}" '
                f'fill="rgb({shade},{shade},255)" stroke="#888"/>'
            )
            parts.append(
                f'<text x="{cx + cell_w / 2:.2f}" y="{cy + cell_h / 2 + 4:.2f}" '
                f'text-anchor="middle" font-size="11">{_fmt(v)}</text>'
            )
        for i, xv in enumerate(xvals):
            parts.append(
                f'<text x="{margin + (i + 0.5) * cell_w:.2f}" y="{height - margin + 16}" '
                f'text-anchor="middle" font-size="11">{_fmt(xv)}</text>'
            )
        for j, yv in enumerate(yvals):
            parts.append(
                f'<text x="{margin - 8}" y="{height - margin - (j + 0.5) * cell_h + 4:.2f}" '
                f'text-anchor="end" font-size="11">{_fmt(yv)}</text>'
            )
    parts.append("</svg>")
    path = path.with_suffix(".svg")
    path.write_text("\n".join(parts) + "\n")
    return path


# --------------------------------------------------------------------------- #
# Experiment runners                                                           #
# --------------------------------------------------------------------------- #

def _benchmark_problem(config: ExperimentConfig) -> ProblemSpec:
    model = MODELS[config.model]()
    n = model.state_dim
    goal = np.zeros(n)
    if config.model == "pendulum":
        goal = np.array([np.pi, 0.0])
    elif config.model == "cartpole":
        goal = np.array([0.0, np.pi, 0.0, 0.0])
    cost = CostSpec(Q=np.eye(n), R=0.1 * np.eye(model.control_dim), QN=10.0 * np.eye(n), goal=goal)
    return ProblemSpec(
        model=model, cost=cost, horizon=config.N, timestep=config.h,
        x_start=np.zeros(n),
    )


def _run_benchmark(config: ExperimentConfig, out: Path) -> tuple[list[dict], list[Path]]:
    rows = bench_scaling(
        _benchmark_problem(config),
        config.M_list,
        config.N_list,
        workers=config.workers,
        repeats=config.repeats,
    )
    files = [write_table(rows, out / "benchmark", config.format)]
    plot = emit_plot(rows, "heatmap", out / "benchmark_heatmap", x="M", y="N", value="median_ms")
    if plot:
        files.append(plot)
    first_n = [r for r in rows if r["N"] == config.N_list[0]]
    plot = emit_plot(first_n, "line", out / "benchmark_line", x="M", y="median_ms")
    if plot:
        files.append(plot)
    return rows, files


def _run_case1(config: ExperimentConfig, out: Path) -> tuple[list[dict], list[Path]]:
    seeds = [config.seed + i for i in range(config.seeds)]
    rows = rho_sweep_study(
        seeds, sorted(set(config.M_list)), iterations=config.iterations,
        horizon=config.N, workers=config.workers,
    )
    files = [write_table(rows, out / "case1_rho", config.format)]
    summary = []
    for M in sorted(set(config.M_list)):
        vals = [r["best_merit"] for r in rows if r["M"] == M]
        summary.append({"M": M, "median_best_merit": float(np.median(vals))})
    files.append(write_table(summary, out / "case1_rho_summary", config.format))
    plot = emit_plot(summary, "line", out / "case1_rho_line", x="M", y="median_best_merit")
    if plot:
        files.append(plot)
    return rows, files


def _run_case2(config: ExperimentConfig, out: Path) -> tuple[list[dict], list[Path]]:
    seeds = [config.seed + i for i in range(config.seeds)]
    rows = figure8_study(
        seeds, sorted(set(config.M_list)), steps=config.steps, horizon=config.N,
        timestep=config.h, force_magnitude=config.force_magnitude,
        sigma=config.sigma, workers=config.workers,
    )
    files = [write_table(rows, out / "case2_fixed_force", config.format)]
    summary = []
    for M in sorted(set(config.M_list)):
        vals = [r["rms_ee_error"] for r in rows if r["M"] == M]
        summary.append({"M": M, "median_rms_ee_error": float(np.median(vals))})
    files.append(write_table(summary, out / "case2_summary", config.format))
    plot = emit_plot(summary, "line", out / "case2_line", x="M", y="median_rms_ee_error")
    if plot:
        files.append(plot)
    return rows, files


def _run_case3(config: ExperimentConfig, out: Path) -> tuple[list[dict], list[Path]]:
    scenario = ReachingScenario(horizon=config.N, timestep=config.h, sigma=config.sigma)
    rows = []
    for i in range(config.seeds):
        seed = config.seed + i
        for M in sorted(set(config.M_list)):
            mode = SingleMode() if M == 1 else HypothesisMode(M, scenario.sigma)
            metrics = run_reaching_suite(
                config.targets, mode, seed=seed, scenario=scenario, workers=config.workers
            )
            rows.append({
                "seed": seed,
                "M": M,
                "success_rate": metrics.success_rate,
                "mean_time_s": metrics.mean_completion_time,
            })
    files = [write_table(rows, out / "case3_reaching", config.format)]
    summary = []
    for M in sorted(set(config.M_list)):
        vals = [r["success_rate"] for r in rows if r["M"] == M]
        times = [r["mean_time_s"] for r in rows if r["M"] == M]
        summary.append({
            "M": M,
            "median_success_rate": float(np.median(vals)),
            "median_mean_time_s": float(np.median(times)),
        })
    files.append(write_table(summary, out / "case3_summary", config.format))
    plot = emit_plot(summary, "line", out / "case3_line", x="M", y="median_success_rate")
    if plot:
        files.append(plot)
    return rows, files


def _run_oracles(config: ExperimentConfig, out: Path) -> tuple[list[dict], list[Path]]:
    schur = schur_kkt_suite(count=100, seed=config.seed)
    riccati = riccati_suite(count=20, seed=config.seed + 1)
    rows = [
        {
            "suite": "schur_kkt",
            "passed": sum(r.passed for r in schur),
            "failed": sum(not r.passed for r in schur),
            "max_error": max(r.error for r in schur),
        },
        {
            "suite": "riccati",
            "passed": sum(r.passed for r in riccati),
            "failed": sum(not r.passed for r in riccati),
            "max_error": max(r.error for r in riccati),
        },
    ]
    files = [write_table(rows, out / "oracle_suite", config.format)]
    return rows, files


def run(config_path: str | Path, overrides: dict | None = None) -> int:
    """Execute the experiment described by a config file; returns exit code."""
    try:
        config = load_config(config_path)
        if overrides:
            config = dataclasses.replace(config, **overrides)
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runners = {
        "benchmark": _run_benchmark,
        "case1_rho": _run_case1,
        "case2_fixed_force": _run_case2,
        "case3_reaching": _run_case3,
        "oracle_suite": _run_oracles,
    }
    solver_failed = False
    try:
        rows, files = runners[config.kind](config, out)
    except Exception as exc:  # noqa: BLE001 - report and exit 3
        rows, files = [], []
        solver_failed = True
        failure = f"{type(exc).__name__}: {exc}"
        print(f"solver failure: {failure}", file=sys.stderr)
    else:
        failure = None

    if config.kind == "oracle_suite" and any(r["failed"] for r in rows):
        solver_failed = True

    report = {
        "config": dataclasses.asdict(config),
        "version": __version__,
        "host": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "failure": failure,
        "files": sorted(str(f) for f in files),
        "rows": len(rows),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {report_path}")
    return 3 if solver_failed else 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="trajbatch",
        description="Batched trajectory-optimization benchmarks and case studies",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_parser = sub.add_parser("run", help="run an experiment from a JSON config")
    run_parser.add_argument("config", help="path to the JSON experiment config")
    run_parser.add_argument("--workers", type=int, default=None, help="override worker count")
    run_parser.add_argument("--seed", type=int, default=None, help="override base seed")
    run_parser.add_argument("--out", default=None, help="override output directory")
    run_parser.add_argument("--format", choices=("csv", "json"), default=None,
                            help="override table format")
    args = parser.parse_args(argv)

    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.format is not None:
        overrides["format"] = args.format
    return run(args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
