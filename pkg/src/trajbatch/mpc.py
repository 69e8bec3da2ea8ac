"""Closed-loop MPC harness with batched solves and disturbance hypotheses.

Each control step warm-starts from the previous solution, solves a batch of
problems that differ per mode (disturbance hypotheses or damping values),
applies the chosen first control to the plant under the true disturbance, and
re-centers the hypothesis set on whichever candidate best explained the last
measured transition. The harness is sequential over steps (feedback); all
within-step concurrency is delegated to the batch engine.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .batch import BatchSpec, batch_solve
from .dynamics import (
    Cartpole,
    DynamicsModel,
    ExternalForce,
    PlantConfig,
    SwingingLoadProfile,
    TwoLinkArm,
    simulate_plant,
)
from .qpform import CostSpec, ProblemSpec
from .sqp import SolverSettings, SqpResult


# --------------------------------------------------------------------------- #
# Modes                                                                        #
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class SingleMode:
    """One solve per step under the problem's assumed force."""


@dataclass(frozen=True)
class HypothesisMode:
    """Hypothesize-and-test over sampled disturbance candidates."""

    num_hypotheses: int
    sigma: float


@dataclass(frozen=True)
class RhoSweepMode:
    """Batch over nested log-spaced initial damping values."""

    batch_size: int
    rho_low: float = 1e-8
    rho_high: float = 1e1


def rho_grid(M: int, lo: float = 1e-8, hi: float = 1e1) -> np.ndarray:
    """First M values of a nested log-spaced refinement of [lo, hi].

    The underlying sequence starts at the log-midpoint, adds the endpoints,
    then fills odd dyadic fractions level by level, so grids for increasing M
    are supersets of smaller ones (prefix property). Doubling M refines the
    grid; best-of-batch results are therefore monotone in M by construction.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    fractions = [0.5, 0.0, 1.0]
    level = 4
    while len(fractions) < M:
        fractions.extend(i / level for i in range(1, level, 2))
        level *= 2
    lo_e, hi_e = math.log10(lo), math.log10(hi)
    exponents = lo_e + (hi_e - lo_e) * np.asarray(fractions[:M])
    return 10.0 ** exponents


# --------------------------------------------------------------------------- #
# Warm starting and hypothesis machinery                                       #
# --------------------------------------------------------------------------- #

def shift_warm_start(prev: SqpResult) -> tuple[np.ndarray, np.ndarray]:
    """Shift the previous solution left one knot, duplicating the tail."""
    X = np.concatenate([prev.X[1:], prev.X[-1:]], axis=0)
    U = np.concatenate([prev.U[1:], prev.U[-1:]], axis=0)
    return X, U


@dataclass
class HypothesisSet:
    """Candidate forces around a center estimate.

    Candidate 0 is the center itself; the rest sit at Euclidean distance
    ``sigma`` in sampled directions.
    """

    center: np.ndarray
    sigma: float
    candidates: list[ExternalForce]
    seed: int

    @property
    def forces(self) -> np.ndarray:
        return np.stack([c.value for c in self.candidates])


def sample_hypotheses(center, sigma: float, M: int, seed: int) -> HypothesisSet:
    """Center plus M-1 candidates at radius sigma, directions uniform on the
    sphere (normalized Gaussian draws); deterministic in the seed."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    center_vec = center.value if isinstance(center, ExternalForce) else np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    candidates = [ExternalForce.constant(center_vec)]
    for _ in range(M - 1):
        direction = rng.standard_normal(center_vec.shape[0])
        norm = np.linalg.norm(direction)
        while norm < 1e-12:
            direction = rng.standard_normal(center_vec.shape[0])
            norm = np.linalg.norm(direction)
        candidates.append(ExternalForce.constant(center_vec + sigma * direction / norm))
    return HypothesisSet(center_vec.copy(), sigma, candidates, seed)


def select_hypothesis(
    model: DynamicsModel,
    x_prev: np.ndarray,
    u_applied: np.ndarray,
    x_meas: np.ndarray,
    hypotheses: HypothesisSet,
    control_period: float,
    plant_cfg: PlantConfig,
    position_only: bool = False,
) -> int:
    """Index of the candidate whose predicted evolution best matches the
    measurement; ties break toward the lowest index (center preferred)."""
    sel = slice(0, model.position_dim) if position_only else slice(None)
    errors = np.empty(len(hypotheses.candidates))
    for j, candidate in enumerate(hypotheses.candidates):
        pred = simulate_plant(model, x_prev, u_applied, control_period, plant_cfg, candidate)
        errors[j] = np.linalg.norm((pred - x_meas)[sel])
    return int(np.argmin(errors))


# --------------------------------------------------------------------------- #
# Closed-loop engine                                                           #
# --------------------------------------------------------------------------- #

@dataclass
class MpcTrace:
    """Per-step records of a closed-loop run plus aggregate tracking metrics."""

    states: np.ndarray            # (steps+1, n) plant states
    controls: np.ndarray          # (steps, m) applied controls
    selected: np.ndarray          # (steps,) chosen batch member per step
    merits: np.ndarray            # (steps,) final merit of the chosen member
    solve_times: np.ndarray       # (steps,) batch wall time per step
    references: np.ndarray        # (steps, n) goal state active at each step
    centers_after: np.ndarray | None   # (steps, force_dim) hypothesis center after re-centering
    hypothesis_forces: list | None     # per step: (M, force_dim) candidate forces
    solver_error_steps: list[int]
    rms_tracking_error: float
    mean_velocity_l1: float

    @property
    def steps(self) -> int:
        return self.controls.shape[0]


class _MpcEngine:
    """One closed-loop controller instance; ``advance`` runs one control step."""

    def __init__(
        self,
        problem: ProblemSpec,
        plant_cfg: PlantConfig,
        true_disturbance: ExternalForce | None,
        mode,
        settings: SolverSettings,
        seed: int,
        reference: Callable[[int], np.ndarray] | None = None,
        workers: int = 1,
        position_only_selection: bool = False,
    ):
        self.template = problem
        self.plant_cfg = plant_cfg
        self.true_disturbance = true_disturbance
        self.mode = mode
        self.settings = settings
        self.reference = reference
        self.workers = workers
        self.position_only = position_only_selection
        self.rng = np.random.default_rng(seed)

        self.model = problem.model
        self.h = problem.timestep
        self.x = problem.x_start.copy()
        self.center = problem.force.value.copy()
        self.t = 0
        self.prev_solution: SqpResult | None = None
        self.prev_state: np.ndarray | None = None
        self.prev_control: np.ndarray | None = None
        self.last_control = np.zeros(self.model.control_dim)

        if isinstance(mode, RhoSweepMode):
            self.rho_values = rho_grid(mode.batch_size, mode.rho_low, mode.rho_high)
            self.member_solutions: list[SqpResult | None] = [None] * mode.batch_size

        # per-step records
        self.states = [self.x.copy()]
        self.controls: list[np.ndarray] = []
        self.selected: list[int] = []
        self.merits: list[float] = []
        self.solve_times: list[float] = []
        self.references: list[np.ndarray] = []
        self.centers_after: list[np.ndarray] = []
        self.hypothesis_forces: list[np.ndarray] = []
        self.solver_error_steps: list[int] = []

    def set_goal(self, goal: np.ndarray):
        self.template = dataclasses.replace(
            self.template, cost=dataclasses.replace(self.template.cost, goal=goal)
        )

    def _current_goal_state(self) -> np.ndarray:
        goal = self.template.cost.goal
        return goal if goal.ndim == 1 else goal[0]

    def _fresh_init(self) -> tuple[np.ndarray, np.ndarray]:
        N, n, m = self.template.horizon, self.model.state_dim, self.model.control_dim
        if isinstance(self.mode, RhoSweepMode):
            return np.zeros((N + 1, n)), np.zeros((N, m))
        return np.tile(self.x, (N + 1, 1)), np.zeros((N, m))

    def advance(self):
        t = self.t
        if self.reference is not None:
            self.set_goal(self.reference(t))
        base = dataclasses.replace(self.template, x_start=self.x.copy())

        if isinstance(self.mode, RhoSweepMode):
            M = self.mode.batch_size
            problems = [base] * M
            inits = [
                shift_warm_start(sol) if sol is not None else self._fresh_init()
                for sol in self.member_solutions
            ]
            spec = BatchSpec.with_rho_inits(problems, inits, self.settings, self.rho_values)
            hypotheses = None
        else:
            if isinstance(self.mode, HypothesisMode):
                hypotheses = sample_hypotheses(
                    self.center, self.mode.sigma, self.mode.num_hypotheses,
                    int(self.rng.integers(2 ** 63)),
                )
                forces = hypotheses.candidates
            else:
                hypotheses = None
                forces = [ExternalForce.constant(self.center)]
            problems = [dataclasses.replace(base, force=f) for f in forces]
            init = (
                shift_warm_start(self.prev_solution)
                if self.prev_solution is not None
                else self._fresh_init()
            )
            inits = [init] * len(problems)
            spec = BatchSpec(problems, inits, self.settings)

        batch = batch_solve(spec, workers=self.workers)
        if not batch.ok:
            self.solver_error_steps.append(t)
        if isinstance(self.mode, RhoSweepMode):
            for j, res in enumerate(batch.results):
                if res is not None:
                    self.member_solutions[j] = res

        # Pick the batch member to execute.
        if isinstance(self.mode, RhoSweepMode):
            merits = [
                res.final_merit if res is not None else math.inf
                for res in batch.results
            ]
            idx = int(np.argmin(merits))
        elif isinstance(self.mode, HypothesisMode):
            if self.prev_state is None:
                idx = 0
            else:
                idx = select_hypothesis(
                    self.model, self.prev_state, self.prev_control, self.x,
                    hypotheses, self.h, self.plant_cfg, self.position_only,
                )
        else:
            idx = 0

        chosen = batch.results[idx]
        if chosen is not None:
            control = chosen.U[0]
            merit_value = chosen.final_merit
            if not isinstance(self.mode, RhoSweepMode):
                self.prev_solution = chosen
        else:
            control = self.last_control  # zero-order fallback on solver failure
            merit_value = math.inf

        x_next = simulate_plant(
            self.model, self.x, control, self.h, self.plant_cfg,
            self.true_disturbance, t0=t * self.h,
        )

        if hypotheses is not None:
            self.center = hypotheses.candidates[idx].value.copy()
            self.hypothesis_forces.append(hypotheses.forces)
        self.centers_after.append(self.center.copy())

        self.references.append(self._current_goal_state().copy())
        self.controls.append(np.asarray(control, dtype=float).copy())
        self.selected.append(idx)
        self.merits.append(merit_value)
        self.solve_times.append(batch.wall_time)
        self.prev_state = self.x
        self.prev_control = np.asarray(control, dtype=float)
        self.last_control = self.prev_control
        self.x = x_next
        self.states.append(x_next.copy())
        self.t += 1

    def trace(self) -> MpcTrace:
        states = np.asarray(self.states)
        references = (
            np.asarray(self.references)
            if self.references
            else np.zeros((0, self.model.state_dim))
        )
        d = self.model.position_dim
        if len(self.controls):
            pos_err = states[:-1, :d] - references[:, :d]
            rms = float(np.sqrt(np.mean(np.sum(pos_err ** 2, axis=1))))
            mean_speed = float(np.mean(np.sum(np.abs(states[:-1, d:]), axis=1)))
        else:
            rms, mean_speed = 0.0, 0.0
        return MpcTrace(
            states=states,
            controls=np.asarray(self.controls).reshape(len(self.controls), -1),
            selected=np.asarray(self.selected, dtype=int),
            merits=np.asarray(self.merits),
            solve_times=np.asarray(self.solve_times),
            references=references,
            centers_after=np.asarray(self.centers_after) if self.centers_after else None,
            hypothesis_forces=self.hypothesis_forces or None,
            solver_error_steps=self.solver_error_steps,
            rms_tracking_error=rms,
            mean_velocity_l1=mean_speed,
        )


def run_mpc(
    problem: ProblemSpec,
    plant_cfg: PlantConfig,
    true_disturbance: ExternalForce | None,
    steps: int,
    mode,
    settings: SolverSettings,
    seed: int = 0,
    reference: Callable[[int], np.ndarray] | None = None,
    workers: int = 1,
    position_only_selection: bool = False,
) -> MpcTrace:
    """Run a closed-loop controller for a fixed number of control steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    engine = _MpcEngine(
        problem, plant_cfg, true_disturbance, mode, settings, seed,
        reference=reference, workers=workers,
        position_only_selection=position_only_selection,
    )
    for _ in range(steps):
        engine.advance()
    return engine.trace()


# --------------------------------------------------------------------------- #
# Case-study drivers                                                           #
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Figure8Reference:
    """Joint-space window reference tracking a planar figure-8 with the arm.

    Precomputes IK joint angles along x = cx + rx sin(w t),
    y = cy + ry sin(2 w t) and serves (N+1, n) goal windows per control step.
    Picklable (plain data), so problems carrying it can cross processes.
    """

    arm: TwoLinkArm
    horizon: int
    timestep: float
    total_steps: int
    center: tuple[float, float] = (0.55, 0.15)
    radii: tuple[float, float] = (0.22, 0.14)
    period: float = 4.0

    @functools.cached_property
    def _joint_path(self) -> np.ndarray:
        count = self.total_steps + self.horizon + 2
        t = np.arange(count) * self.timestep
        w = 2.0 * np.pi / self.period
        px = self.center[0] + self.radii[0] * np.sin(w * t)
        py = self.center[1] + self.radii[1] * np.sin(2.0 * w * t)
        q = np.stack([
            self.arm.inverse_kinematics(np.array([px[i], py[i]])) for i in range(count)
        ])
        qd = np.zeros_like(q)
        qd[:-1] = (q[1:] - q[:-1]) / self.timestep
        qd[-1] = qd[-2]
        return np.concatenate([q, qd], axis=1)

    def __call__(self, step: int) -> np.ndarray:
        return self._joint_path[step:step + self.horizon + 1]


def arm_tracking_cost(arm: TwoLinkArm, goal: np.ndarray) -> CostSpec:
    """Position-heavy quadratic weights used across the arm case studies."""
    return CostSpec(
        Q=np.diag([60.0, 60.0, 2.0, 2.0]),
        R=np.diag([0.2, 0.2]),
        QN=np.diag([300.0, 300.0, 20.0, 20.0]),
        goal=goal,
    )


def ee_tracking_rms(arm: TwoLinkArm, trace: MpcTrace) -> float:
    """RMS end-effector distance from the reference path over a run."""
    errs = np.empty(trace.steps)
    for t in range(trace.steps):
        ee = arm.ee_position(trace.states[t, :2])
        ee_ref = arm.ee_position(trace.references[t, :2])
        errs[t] = np.linalg.norm(ee - ee_ref)
    return float(np.sqrt(np.mean(errs ** 2)))


def random_reaching_problem(rng: np.random.Generator, horizon: int = 32, timestep: float = 0.05) -> ProblemSpec:
    """Arm reaching task to a random workspace target from a random pose."""
    arm = TwoLinkArm()
    radius = rng.uniform(0.45, 0.85)
    angle = rng.uniform(-np.pi, np.pi)
    target = radius * np.array([np.cos(angle), np.sin(angle)])
    q_goal = arm.inverse_kinematics(target)
    goal = np.concatenate([q_goal, np.zeros(2)])
    q0 = rng.uniform(-0.6, 0.6, size=2)
    return ProblemSpec(
        model=arm,
        cost=arm_tracking_cost(arm, goal),
        horizon=horizon,
        timestep=timestep,
        x_start=np.concatenate([q0, np.zeros(2)]),
    )


def random_upright_problem(
    rng: np.random.Generator, horizon: int = 64, timestep: float = 0.05
) -> ProblemSpec:
    """Cartpole state-space reaching: swing up to a random upright goal.

    Cost scales are randomized over decades, so the damping value that
    converges fastest varies strongly between instances -- the regime where
    sweeping the damping in a batch pays off within a fixed budget.
    """
    qs = 10 ** rng.uniform(-1.0, 1.0)
    rs = 10 ** rng.uniform(-2.5, -0.5)
    goal = np.array([rng.uniform(-0.5, 0.5), np.pi, 0.0, 0.0])
    cost = CostSpec(
        Q=qs * np.diag([1.0, 1.0, 0.1, 0.1]),
        R=rs * np.eye(1),
        QN=100.0 * qs * np.diag([1.0, 1.0, 0.1, 0.1]),
        goal=goal,
    )
    x_start = np.array([rng.uniform(-0.2, 0.2), 0.0, 0.0, 0.0])
    return ProblemSpec(
        model=Cartpole(), cost=cost, horizon=horizon, timestep=timestep, x_start=x_start
    )


def rho_sweep_study(
    seeds: list[int],
    M_values: list[int],
    iterations: int = 20,
    horizon: int = 64,
    workers: int = 1,
) -> list[dict]:
    """Best-of-batch merit of zero-initialized reaching solves vs batch size.

    Every batch member shares the zero initialization and runs a fixed
    iteration budget; members differ only in their initial damping, drawn
    from the nested grid, so larger batches can only improve the best merit.
    """
    settings = SolverSettings(max_sqp_iterations=iterations, step_tolerance=None)
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        problem = random_upright_problem(rng, horizon=horizon)
        n, m = problem.model.state_dim, problem.model.control_dim
        init = (np.zeros((horizon + 1, n)), np.zeros((horizon, m)))
        for M in M_values:
            spec = BatchSpec.with_rho_inits(
                [problem] * M, [init] * M, settings, rho_grid(M)
            )
            batch = batch_solve(spec, workers=workers)
            merits = [
                r.final_merit if r is not None else math.inf for r in batch.results
            ]
            rows.append({
                "seed": seed,
                "M": M,
                "best_merit": float(min(merits)),
                "best_rho_index": int(np.argmin(merits)),
            })
    return rows


def figure8_study(
    seeds: list[int],
    M_values: list[int],
    steps: int = 60,
    horizon: int = 16,
    timestep: float = 0.05,
    force_magnitude: float = 3.0,
    sigma: float = 1.0,
    sqp_iterations: int = 2,
    workers: int = 1,
) -> list[dict]:
    """Figure-8 tracking under a constant unmodeled tip force, per batch size.

    The force direction is randomized per seed; M = 1 runs the single-solve
    baseline (no hypothesis exploration).
    """
    arm = TwoLinkArm()
    plant = PlantConfig(h_plant=timestep / 5.0)
    settings = SolverSettings(
        max_sqp_iterations=sqp_iterations,
        step_tolerance=None,
        pcg=dataclasses.replace(SolverSettings().pcg, tolerance=1e-6),
    )
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        true_force = ExternalForce.constant(
            force_magnitude * np.array([np.cos(angle), np.sin(angle)])
        )
        reference = Figure8Reference(arm, horizon, timestep, steps)
        start_q = reference(0)[0]
        problem = ProblemSpec(
            model=arm,
            cost=arm_tracking_cost(arm, reference(0)),
            horizon=horizon,
            timestep=timestep,
            x_start=start_q,
        )
        for M in M_values:
            mode = SingleMode() if M == 1 else HypothesisMode(M, sigma)
            trace = run_mpc(
                problem, plant, true_force, steps, mode, settings,
                seed=seed, reference=reference, workers=workers,
            )
            rows.append({
                "seed": seed,
                "M": M,
                "rms_ee_error": ee_tracking_rms(arm, trace),
                "rms_state_error": trace.rms_tracking_error,
                "mean_velocity_l1": trace.mean_velocity_l1,
            })
    return rows


@dataclass(frozen=True)
class ReachingScenario:
    """Standard multi-target reaching setup under a swinging-load tip force."""

    horizon: int = 16
    timestep: float = 0.05
    plant_substep: float = 0.01
    reach_tolerance: float = 0.05   # meters at the end effector
    speed_tolerance: float = 1.0    # sum |joint velocity|, rad/s
    timeout: float = 2.0            # seconds per target
    sqp_iterations: int = 1
    sigma: float = 1.0
    load_weight: float = 3.0
    load_amplitude: float = 2.0
    load_frequency_hz: float = 0.4
    load_decay: float = 0.05


@dataclass
class ReachingMetrics:
    success_rate: float
    mean_completion_time: float
    per_target: list[dict]


def run_reaching_suite(
    targets: int,
    mode,
    settings: SolverSettings | None = None,
    seed: int = 0,
    scenario: ReachingScenario | None = None,
    workers: int = 1,
) -> ReachingMetrics:
    """Sequential reaching of random targets under a time-varying disturbance.

    A target counts as reached when the end effector is within the scenario
    tolerance of the goal with total joint speed below the velocity bound; on
    timeout the target is marked failed and the run moves to the next one.
    """
    scenario = scenario or ReachingScenario()
    arm = TwoLinkArm()
    rng = np.random.default_rng(seed)
    plant = PlantConfig(h_plant=scenario.plant_substep)
    if settings is None:
        settings = SolverSettings(
            max_sqp_iterations=scenario.sqp_iterations,
            step_tolerance=None,
            pcg=dataclasses.replace(SolverSettings().pcg, tolerance=1e-6),
        )
    disturbance = ExternalForce.time_varying(
        SwingingLoadProfile(
            weight=scenario.load_weight,
            amplitude=scenario.load_amplitude,
            frequency_hz=scenario.load_frequency_hz,
            decay=scenario.load_decay,
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        ),
        dim=2,
    )

    q0 = rng.uniform(-0.5, 0.5, size=2)
    problem = ProblemSpec(
        model=arm,
        cost=arm_tracking_cost(arm, np.zeros(4)),
        horizon=scenario.horizon,
        timestep=scenario.timestep,
        x_start=np.concatenate([q0, np.zeros(2)]),
    )
    engine = _MpcEngine(
        problem, plant, disturbance, mode, settings,
        seed=int(rng.integers(2 ** 63)), workers=workers,
    )

    steps_per_target = max(1, int(round(scenario.timeout / scenario.timestep)))
    per_target = []
    for _ in range(targets):
        radius = rng.uniform(0.45, 0.85)
        angle = rng.uniform(-np.pi, np.pi)
        target_xy = radius * np.array([np.cos(angle), np.sin(angle)])
        goal = np.concatenate([arm.inverse_kinematics(target_xy), np.zeros(2)])
        engine.set_goal(goal)

        reached = False
        elapsed = scenario.timeout
        for k in range(steps_per_target):
            engine.advance()
            x = engine.x
            ee_err = float(np.linalg.norm(arm.ee_position(x[:2]) - target_xy))
            speed = float(np.sum(np.abs(x[2:])))
            if ee_err <= scenario.reach_tolerance and speed <= scenario.speed_tolerance:
                reached = True
                elapsed = (k + 1) * scenario.timestep
                break
        per_target.append({
            "target_x": float(target_xy[0]),
            "target_y": float(target_xy[1]),
            "reached": reached,
            "time": elapsed,
        })

    successes = sum(1 for rec in per_target if rec["reached"])
    times = [rec["time"] for rec in per_target]
    return ReachingMetrics(
        success_rate=successes / targets,
        mean_completion_time=float(np.mean(times)),
        per_target=per_target,
    )
