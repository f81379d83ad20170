"""IMEX time stepping for the regularized reaction-transport system.

Each step treats transport implicitly (backward Euler on the assembled
diffusion + advection operator, unconditionally stable and positivity
preserving for M-matrices) and the bounded reaction explicitly at the old
state:

    (I/dt + A_i) u_i_new = u_i_old / dt + truncate(F(u_old), eps)_i.

If any cell of the solution dips below the positivity tolerance the step
is retried with a halved dt; states are never clamped, so the discrete
mass budget stays exact up to linear-solver residuals.

Linear systems are solved by diagonally preconditioned BiCGStab; on 1D
grids the per-species systems are concatenated into one tridiagonal
matrix and eliminated directly (banded LAPACK).  Checkpoints serialize a
state as a flat little-endian binary record.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .diagnostics import Trajectory
from .grid import (
    BoundarySpec,
    CoefficientField,
    StructuredGrid,
    assemble_advection,
    assemble_diffusion,
)
from .reactions import ReactionSystem, TruncationParam, truncate

__all__ = [
    "SimState",
    "SolverConfig",
    "StepReport",
    "Problem",
    "TransportOperators",
    "SolverError",
    "PositivityError",
    "LinearSolveError",
    "linear_solve",
    "step",
    "run",
    "epsilon_refinement_study",
    "dump_state",
    "load_state",
]

_STATE_TOL = 1e-12


class SolverError(RuntimeError):
    """Base class for time-stepping failures."""


class PositivityError(SolverError):
    """A state left the non-negative orthant beyond tolerance."""


class LinearSolveError(SolverError):
    """The linear solver did not reach the requested residual."""


@dataclass
class SimState:
    """Species fields at one time level, with the truncation strength."""

    t: float
    fields: np.ndarray  # (m, ncells)
    eps: TruncationParam

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=float)
        if self.fields.ndim != 2:
            raise ValueError(f"fields must be (m, ncells), got shape {self.fields.shape}")
        low = float(self.fields.min(initial=0.0))
        if low < -_STATE_TOL:
            raise PositivityError(f"state has component {low} below -{_STATE_TOL}")

    @property
    def m(self) -> int:
        return self.fields.shape[0]


@dataclass
class SolverConfig:
    dt: float
    t_end: float
    linear_tol: float = 1e-10
    max_linear_iter: int = 500
    positivity_tol: float = 1e-12
    max_halvings: int = 20
    record_dt: float | None = None  # None records every accepted step

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.linear_tol <= 0 or self.positivity_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class StepReport:
    dt: float
    linear_iterations: int
    halvings: int
    min_value: float
    reaction_magnitude: np.ndarray  # per-species sup-norm of the applied reaction
    reaction_mass: np.ndarray | None = None  # per-species volume integral of it


@dataclass
class Problem:
    """Grid, physics and boundary data for one simulation."""

    grid: StructuredGrid
    system: ReactionSystem
    coefficients: CoefficientField
    boundary: BoundarySpec

    def __post_init__(self):
        if self.coefficients.m != self.system.m:
            raise ValueError("coefficient field and system disagree on species count")
        if len(self.boundary.conditions) != self.system.m:
            raise ValueError("boundary spec and system disagree on species count")


def _bicgstab(a, b, tol, max_iter, x0=None):
    """Diagonally preconditioned BiCGStab; returns (x, iterations, residual)."""
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    diag = a.diagonal()
    inv_diag = np.where(np.abs(diag) > 0, 1.0 / np.where(diag == 0, 1.0, diag), 1.0)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    r = b - a @ x
    if np.linalg.norm(r) <= tol * bnorm:
        return x, 0, float(np.linalg.norm(r))
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    for it in range(1, max_iter + 1):
        rho_new = r_hat @ r
        if rho_new == 0.0 or omega == 0.0:
            # restart from the current residual
            r_hat = r.copy()
            rho_new = r_hat @ r
            if rho_new == 0.0:
                break
            p = np.zeros(n)
            v = np.zeros(n)
            rho = alpha = omega = 1.0
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        p_hat = inv_diag * p
        v = a @ p_hat
        denom = r_hat @ v
        if denom == 0.0:
            break
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) <= tol * bnorm:
            x = x + alpha * p_hat
            return x, it, float(np.linalg.norm(b - a @ x))
        s_hat = inv_diag * s
        t_vec = a @ s_hat
        tt = t_vec @ t_vec
        if tt == 0.0:
            break
        omega = (t_vec @ s) / tt
        x = x + alpha * p_hat + omega * s_hat
        r = s - omega * t_vec
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it, float(np.linalg.norm(b - a @ x))
    return x, max_iter, float(np.linalg.norm(b - a @ x))


def linear_solve(a, b, tol: float = 1e-10, max_iter: int = 500, x0=None) -> np.ndarray:
    """Solve a sparse system to a relative residual by preconditioned BiCGStab.

    Raises LinearSolveError with the final residual on non-convergence.
    """
    b = np.asarray(b, dtype=float).ravel()
    x, _, res = _bicgstab(sp.csr_matrix(a), b, tol, max_iter, x0=x0)
    bnorm = np.linalg.norm(b)
    if bnorm > 0 and res > tol * bnorm:
        raise LinearSolveError(
            f"BiCGStab stalled at relative residual {res / bnorm:.3e} "
            f"(target {tol:.3e}) after {max_iter} iterations"
        )
    return x


def _tridiagonal_bands(a: sp.csr_matrix) -> np.ndarray:
    n = a.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = a.diagonal(1)
    ab[1, :] = a.diagonal(0)
    ab[2, :-1] = a.diagonal(-1)
    return ab


class TransportOperators:
    """Assembled per-species transport operators for one coefficient epoch.

    Caches the combined (I/dt + A) solve per dt value: one banded
    elimination over the concatenated species systems in 1D, per-species
    BiCGStab in 2D.
    """

    def __init__(self, problem: Problem, t: float):
        self.problem = problem
        grid = problem.grid
        self.matrices = []
        for i in range(problem.system.m):
            a_diff = assemble_diffusion(grid, problem.coefficients, problem.boundary, i, t)
            a_adv = assemble_advection(grid, problem.coefficients, problem.boundary, i, t)
            self.matrices.append((a_diff + a_adv).tocsr())
        self._band_cache: dict[float, np.ndarray] = {}

    def solve(self, dt: float, rhs: np.ndarray, cfg: SolverConfig,
              x0: np.ndarray | None = None) -> tuple[np.ndarray, int]:
        """Solve (I/dt + A_i) u_i = rhs_i for every species; returns (u, iterations)."""
        m, n = rhs.shape
        if self.problem.grid.dim == 1:
            ab = self._band_cache.get(dt)
            if ab is None:
                full = sp.block_diag(
                    [sp.eye(n) / dt + a for a in self.matrices], format="csr"
                )
                ab = _tridiagonal_bands(full)
                self._band_cache[dt] = ab
            sol = scipy.linalg.solve_banded((1, 1), ab, rhs.ravel())
            return sol.reshape(m, n), 0
        out = np.empty_like(rhs)
        iterations = 0
        for i in range(m):
            system = (sp.eye(n) / dt + self.matrices[i]).tocsr()
            guess = None if x0 is None else x0[i]
            x, it, res = _bicgstab(system, rhs[i], cfg.linear_tol, cfg.max_linear_iter, x0=guess)
            bnorm = np.linalg.norm(rhs[i])
            if bnorm > 0 and res > cfg.linear_tol * bnorm:
                raise LinearSolveError(
                    f"species {i}: relative residual {res / bnorm:.3e} after "
                    f"{cfg.max_linear_iter} iterations"
                )
            out[i] = x
            iterations = max(iterations, it)
        return out, iterations


def step(state: SimState, cfg: SolverConfig, operators: TransportOperators,
         system: ReactionSystem, max_dt: float | None = None) -> tuple[SimState, StepReport]:
    """Advance one accepted IMEX step, halving dt until positivity holds."""
    grid = operators.problem.grid
    reaction = truncate(
        system.evaluate(grid.cell_centers, state.t, state.fields), state.eps
    )
    dt = cfg.dt if max_dt is None else min(cfg.dt, max_dt)
    halvings = 0
    while True:
        rhs = state.fields / dt + reaction
        new_fields, iterations = operators.solve(dt, rhs, cfg, x0=state.fields)
        low = float(new_fields.min())
        if low >= -cfg.positivity_tol:
            break
        halvings += 1
        if halvings > cfg.max_halvings:
            raise PositivityError(
                f"positivity not restored after {cfg.max_halvings} halvings "
                f"(min value {low:.3e} at t={state.t:.6g})"
            )
        dt /= 2.0
    new_state = SimState(state.t + dt, new_fields, state.eps)
    report = StepReport(
        dt=dt,
        linear_iterations=iterations,
        halvings=halvings,
        min_value=low,
        reaction_magnitude=np.max(np.abs(reaction), axis=1),
        reaction_mass=reaction @ grid.cell_volumes,
    )
    return new_state, report


def run(initial: SimState, cfg: SolverConfig, problem: Problem,
        config_echo: dict | None = None) -> Trajectory:
    """Integrate to t_end, recording snapshots and per-step reduced summaries.

    Operators are reassembled whenever a coefficient schedule switch is
    crossed; steps never straddle a switch time.  Snapshots are taken at
    the configured cadence (every step if none); the per-step series
    (masses, sup-norms, minima, cumulative applied reaction) are always
    dense.
    """
    grid = problem.grid
    system = problem.system
    if initial.fields.shape != (system.m, grid.ncells):
        raise ValueError(
            f"initial fields shape {initial.fields.shape} does not match "
            f"({system.m}, {grid.ncells})"
        )
    if not np.all(np.isfinite(initial.fields)):
        raise ValueError("initial data must be finite")

    t_end = cfg.t_end
    if t_end <= initial.t:
        raise ValueError(f"t_end {t_end} must exceed the initial time {initial.t}")
    switches = [s for s in problem.coefficients.switch_times() if initial.t < s < t_end]
    boundaries = sorted(set(switches + [t_end]))

    vol = grid.cell_volumes
    state = initial
    snap_times = [state.t]
    snapshots = [state.fields.copy()]
    step_times = [state.t]
    masses = [state.fields @ vol]
    supnorms = [np.max(np.abs(state.fields), axis=1)]
    minima = [float(state.fields.min())]
    reaction_integral = np.zeros(system.m)
    reaction_integrals = [reaction_integral.copy()]
    dts, halvings_list, iters_list = [], [], []

    next_record = state.t + cfg.record_dt if cfg.record_dt else None
    operators = TransportOperators(problem, state.t)
    epoch_idx = 0
    eps_round = 1e-12 * max(1.0, abs(t_end))

    while state.t < t_end - eps_round:
        boundary = boundaries[epoch_idx]
        if state.t >= boundary - eps_round:
            epoch_idx += 1
            boundary = boundaries[epoch_idx]
            operators = TransportOperators(problem, state.t + eps_round)
        room = boundary - state.t
        state, report = step(state, cfg, operators, system, max_dt=room)
        reaction_integral = reaction_integral + report.dt * report.reaction_mass

        step_times.append(state.t)
        masses.append(state.fields @ vol)
        supnorms.append(np.max(np.abs(state.fields), axis=1))
        minima.append(float(state.fields.min()))
        reaction_integrals.append(reaction_integral.copy())
        dts.append(report.dt)
        halvings_list.append(report.halvings)
        iters_list.append(report.linear_iterations)

        at_end = state.t >= t_end - eps_round
        if next_record is None or state.t >= next_record - eps_round or at_end:
            snap_times.append(state.t)
            snapshots.append(state.fields.copy())
            if next_record is not None:
                while next_record <= state.t + eps_round:
                    next_record += cfg.record_dt

    return Trajectory(
        grid=grid,
        times=np.asarray(snap_times),
        states=snapshots,
        step_times=np.asarray(step_times),
        step_masses=np.asarray(masses),
        step_supnorms=np.asarray(supnorms),
        step_minima=np.asarray(minima),
        reaction_integrals=np.asarray(reaction_integrals),
        step_dts=np.asarray(dts),
        step_halvings=np.asarray(halvings_list, dtype=int),
        step_linear_iterations=np.asarray(iters_list, dtype=int),
        config_echo=config_echo,
    )


def epsilon_refinement_study(problem: Problem, initial_fields: np.ndarray,
                             eps_list, cfg: SolverConfig) -> dict:
    """Run the same problem for a ladder of truncation strengths.

    Reports the pairwise space-time L2 distances between consecutive
    trajectories (time-trapezoid of the spatial L2 distance squared over
    the shared snapshot grid).  Shrinking distances as eps decreases are
    the numerical robustness signature of the regularization.
    """
    eps_values = [e.epsilon if isinstance(e, TruncationParam) else float(e) for e in eps_list]
    if len(eps_values) < 2:
        raise ValueError("need at least two truncation strengths")
    trajectories = []
    for eps in eps_values:
        state = SimState(0.0, np.array(initial_fields, dtype=float), TruncationParam(eps))
        trajectories.append(run(state, cfg, problem))
    vol = problem.grid.cell_volumes
    times = trajectories[0].times
    for traj in trajectories[1:]:
        if traj.times.shape != times.shape or not np.allclose(traj.times, times):
            raise RuntimeError("trajectories recorded incompatible snapshot grids")
    distances = []
    for a, b in zip(trajectories, trajectories[1:]):
        sq = np.array([
            float(np.sum((sa - sb) ** 2 @ vol))
            for sa, sb in zip(a.states, b.states)
        ])
        distances.append(float(np.sqrt(np.trapezoid(sq, times))))
    ratios = [distances[k + 1] / distances[k] if distances[k] > 0 else float("nan")
              for k in range(len(distances) - 1)]
    monotone = all(d2 <= d1 for d1, d2 in zip(distances, distances[1:]))
    return {
        "epsilons": eps_values,
        "pair_distances": distances,
        "ratios": ratios,
        "monotone_shrinking": monotone,
    }


# Checkpoint record layout (all little-endian):
#   bytes  0-7   uint64  grid content hash
#   bytes  8-15  uint64  species count m
#   bytes 16-23  uint64  cell count
#   bytes 24-31  float64 time
#   bytes 32-39  float64 truncation epsilon
#   then m * ncells float64 cell values, species-major
_CHECKPOINT_HEADER = struct.Struct("<QQQdd")


def dump_state(state: SimState, grid: StructuredGrid, path) -> None:
    """Serialize a state to the flat binary checkpoint record."""
    from pathlib import Path

    m, ncells = state.fields.shape
    if ncells != grid.ncells:
        raise ValueError(f"state has {ncells} cells for a grid with {grid.ncells}")
    header = _CHECKPOINT_HEADER.pack(
        grid.content_hash(), m, ncells, state.t, state.eps.epsilon
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(state.fields, dtype="<f8").tobytes())


def load_state(path, grid: StructuredGrid) -> SimState:
    """Restore a state from a checkpoint record, verifying the grid hash."""
    with open(path, "rb") as fh:
        raw = fh.read(_CHECKPOINT_HEADER.size)
        ghash, m, ncells, t, eps = _CHECKPOINT_HEADER.unpack(raw)
        if ghash != grid.content_hash():
            raise ValueError("checkpoint was written for a different grid")
        if ncells != grid.ncells:
            raise ValueError(f"checkpoint has {ncells} cells for a grid with {grid.ncells}")
        data = np.frombuffer(fh.read(8 * m * ncells), dtype="<f8").reshape(m, ncells)
    return SimState(t, data.copy(), TruncationParam(eps))
