"""Run many independent SQP solves concurrently with deterministic results.

Parallelism granularity is one task per problem. Workers are separate
processes (forked, so numpy state is shared copy-on-write) and every task is
a pure function of its inputs, so results are bitwise identical to a serial
loop regardless of worker count or completion order. A failed solve records
its error in the matching slot without aborting the rest of the batch.
"""

from __future__ import annotations

import dataclasses
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .qpform import ProblemSpec
from .sqp import SolverSettings, SqpResult, sqp_solve


@dataclass
class BatchSpec:
    """M problems plus their initial trajectories and solver settings.

    All problems must share state/control dimensions and horizon (the batch
    is homogeneous). ``overrides[i]``, when present and not None, replaces the
    shared settings for problem i -- the usual case is a per-problem rho_init.
    """

    problems: list[ProblemSpec]
    inits: list[tuple[np.ndarray, np.ndarray]]
    settings: SolverSettings
    overrides: list[SolverSettings | None] | None = None

    def __post_init__(self):
        if len(self.problems) < 1:
            raise ValueError("batch must contain at least one problem")
        if len(self.inits) != len(self.problems):
            raise ValueError("need one initial trajectory per problem")
        if self.overrides is not None and len(self.overrides) != len(self.problems):
            raise ValueError("overrides must align with problems")
        first = self.problems[0]
        for p in self.problems[1:]:
            if (
                p.model.state_dim != first.model.state_dim
                or p.model.control_dim != first.model.control_dim
                or p.horizon != first.horizon
            ):
                raise ValueError("batch problems must share n, m and horizon")

    @property
    def size(self) -> int:
        return len(self.problems)

    def effective_settings(self, i: int) -> SolverSettings:
        if self.overrides is not None and self.overrides[i] is not None:
            return self.overrides[i]
        return self.settings

    @classmethod
    def with_rho_inits(
        cls,
        problems: list[ProblemSpec],
        inits: list[tuple[np.ndarray, np.ndarray]],
        settings: SolverSettings,
        rho_inits,
    ) -> "BatchSpec":
        overrides = [
            dataclasses.replace(settings, rho_init=float(rho)) for rho in rho_inits
        ]
        return cls(problems, inits, settings, overrides)


@dataclass
class BatchResult:
    """Per-problem results in input order. ``results[i]`` is None exactly when
    ``errors[i]`` holds the failure message for that slot."""

    results: list[SqpResult | None]
    errors: list[str | None]
    wall_time: float
    solve_times: list[float]

    @property
    def ok(self) -> bool:
        return all(e is None for e in self.errors)


def _solve_task(task):
    problem, X0, U0, settings = task
    start = time.perf_counter()
    try:
        result = sqp_solve(problem, X0, U0, settings)
        return result, None, time.perf_counter() - start
    except Exception as exc:  # noqa: BLE001 - isolate the failing slot
        return None, f"{type(exc).__name__}: {exc}", time.perf_counter() - start


def batch_solve(spec: BatchSpec, workers: int = 1) -> BatchResult:
    """Solve every problem in the batch over a bounded worker pool."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    tasks = [
        (spec.problems[i], spec.inits[i][0], spec.inits[i][1], spec.effective_settings(i))
        for i in range(spec.size)
    ]

    start = time.perf_counter()
    if workers == 1 or spec.size == 1:
        outcomes = [_solve_task(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            chunk = max(1, spec.size // (4 * workers))
            outcomes = list(pool.map(_solve_task, tasks, chunksize=chunk))
    wall = time.perf_counter() - start

    results = [o[0] for o in outcomes]
    errors = [o[1] for o in outcomes]
    times = [o[2] for o in outcomes]
    return BatchResult(results, errors, wall, times)


def bench_scaling(
    problem_template: ProblemSpec,
    M_list: list[int],
    N_list: list[int],
    workers: int = 1,
    repeats: int = 3,
    budget_iterations: int = 5,
) -> list[dict]:
    """Median/p90 wall times over an (M, N) grid of fixed-budget batches.

    Every cell solves M copies of the template resized to horizon N from a
    zero initialization, running exactly ``budget_iterations`` SQP iterations
    so cells are comparable. One warm-up run per cell is discarded.
    """
    settings = SolverSettings(
        max_sqp_iterations=budget_iterations,
        step_tolerance=None,
    )
    if problem_template.cost.goal.ndim != 1:
        raise ValueError("bench_scaling needs a template with a single-state goal")

    rows = []
    for N in N_list:
        problem = dataclasses.replace(problem_template, horizon=N)
        n, m = problem.model.state_dim, problem.model.control_dim
        init = (np.zeros((N + 1, n)), np.zeros((N, m)))
        for M in M_list:
            spec = BatchSpec([problem] * M, [init] * M, settings)
            batch_solve(spec, workers=workers)  # warm-up discarded
            times = [batch_solve(spec, workers=workers).wall_time for _ in range(repeats)]
            times.sort()
            median = times[len(times) // 2] if repeats % 2 else 0.5 * (
                times[len(times) // 2 - 1] + times[len(times) // 2]
            )
            p90 = times[min(len(times) - 1, int(np.ceil(0.9 * len(times))) - 1)]
            rows.append({
                "M": M,
                "N": N,
                "median_ms": 1e3 * median,
                "p90_ms": 1e3 * p90,
                "workers": workers,
            })
    return rows
