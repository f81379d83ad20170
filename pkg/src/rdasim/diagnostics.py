"""Post-processing of trajectories into norm series, energy traces and budgets.

A trajectory carries two granularities: full field snapshots at the
recording cadence, and dense per-step reduced summaries (per-species
masses and sup-norms, the global minimum, and the cumulative applied
reaction).  Time integrals in budgets use trapezoidal accumulation over
whichever series is used.

The energy trace fits, for each energy specification, the smallest
exponential envelope

    L(t_{k+1}) <= L(t_k) exp(-delta dt) + (C / delta)(1 - exp(-delta dt))

over a grid of decay rates delta > 0 and reports (C, delta) together with
the implied plateau C / delta; by construction every recorded value then
sits below max(L(0), plateau).  Whether the trajectory is actually
non-growing is flagged separately by a trend test (last value against the
early maximum), which is also what the windowed sup-norm criterion uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import energy_functional
from .grid import StructuredGrid, discrete_norm

__all__ = [
    "Trajectory",
    "EnergyTrace",
    "norm_series",
    "energy_trace",
    "windowed_sup",
    "mass_budget",
    "apriori_hypothesis_monitor",
    "no_growth",
]

DEFAULT_WINDOW = 2.0
DEFAULT_GROWTH_TOL = 0.05


@dataclass
class Trajectory:
    """Recorded simulation history: snapshots plus dense step summaries.

    Reloaded trajectories may carry only the snapshot series; the step
    arrays are then None and the step-based diagnostics refuse to run.
    """

    grid: StructuredGrid
    times: np.ndarray          # snapshot times, strictly increasing
    states: list               # matching (m, ncells) arrays
    step_times: np.ndarray | None = None
    step_masses: np.ndarray | None = None        # (nsteps + 1, m)
    step_supnorms: np.ndarray | None = None      # (nsteps + 1, m)
    step_minima: np.ndarray | None = None
    reaction_integrals: np.ndarray | None = None  # cumulative (nsteps + 1, m)
    step_dts: np.ndarray | None = None
    step_halvings: np.ndarray | None = None
    step_linear_iterations: np.ndarray | None = None
    config_echo: dict | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or len(self.states) != self.times.size:
            raise ValueError("snapshot times and states must align")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        if self.step_times is not None:
            self.step_times = np.asarray(self.step_times, dtype=float)
            if np.any(np.diff(self.step_times) <= 0):
                raise ValueError("step times must be strictly increasing")

    @property
    def m(self) -> int:
        return self.states[0].shape[0]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def _dense_series(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-step (times, masses); falls back to snapshot-derived masses."""
        if self.step_times is not None and self.step_masses is not None:
            return self.step_times, self.step_masses
        masses = np.array([s @ self.grid.cell_volumes for s in self.states])
        return self.times, masses

    def _dense_supnorms(self) -> tuple[np.ndarray, np.ndarray]:
        if self.step_times is not None and self.step_supnorms is not None:
            return self.step_times, self.step_supnorms
        sups = np.array([np.max(np.abs(s), axis=1) for s in self.states])
        return self.times, sups


def norm_series(traj: Trajectory, p_list) -> dict:
    """Per-species discrete norms at every snapshot, for each p and for inf."""
    orders = list(dict.fromkeys(list(p_list) + [np.inf]))
    out = {"times": traj.times.copy(), "norms": {}}
    for p in orders:
        table = np.empty((traj.m, traj.times.size))
        for k, state in enumerate(traj.states):
            for i in range(traj.m):
                table[i, k] = discrete_norm(state[i], traj.grid, p)
        out["norms"][p] = table
    return out


def no_growth(series: np.ndarray, tol: float = DEFAULT_GROWTH_TOL) -> bool:
    """Trend test: the last value stays within (1 + tol) of the early maximum.

    The early maximum is taken over the first three entries (or all of a
    shorter series).
    """
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        return True
    head = series[: min(3, series.size)]
    return bool(series[-1] <= np.max(head) * (1.0 + tol))


def _fit_envelope(times: np.ndarray, values: np.ndarray) -> dict:
    """Smallest exponential envelope over a log grid of decay rates."""
    if times.size < 2:
        return {"fit_ok": False, "C": float("nan"), "delta": float("nan"),
                "plateau": float("nan"), "bound": float("nan")}
    dt = np.diff(times)
    l_old = values[:-1]
    l_new = values[1:]
    best = None
    for delta in np.logspace(-4, 2, 121):
        decay = np.exp(-delta * dt)
        denom = 1.0 - decay
        if np.any(denom <= 0.0):
            continue
        c_needed = delta * np.max((l_new - l_old * decay) / denom)
        plateau = c_needed / delta
        bound = max(values[0], plateau)
        if not np.isfinite(bound):
            continue
        if best is None or bound < best["bound"] - 1e-15 * abs(best["bound"]):
            best = {"fit_ok": True, "C": float(c_needed), "delta": float(delta),
                    "plateau": float(plateau), "bound": float(bound)}
    if best is None:
        return {"fit_ok": False, "C": float("nan"), "delta": float("nan"),
                "plateau": float("nan"), "bound": float("nan")}
    return best


@dataclass
class EnergyTrace:
    """Energy values over time for a list of specs, with envelope fits."""

    times: np.ndarray
    specs: list
    values: list                     # one (ntimes,) array per spec
    fits: list = field(default_factory=list)
    bounded_flags: list = field(default_factory=list)

    def __post_init__(self):
        for vals in self.values:
            if np.any(np.asarray(vals) < 0):
                raise ValueError("energy values must be non-negative")


def energy_trace(traj: Trajectory, specs) -> EnergyTrace:
    """Evaluate the energy functionals along the snapshots and fit envelopes.

    A failed fit (too few snapshots) is reported in the fit record, not
    raised.  The bounded flag is the no-growth trend test on the energy
    series itself.
    """
    specs = list(specs)
    values = []
    for spec in specs:
        vals = np.array([energy_functional(state, traj.grid, spec) for state in traj.states])
        values.append(vals)
    fits = [_fit_envelope(traj.times, vals) for vals in values]
    # trend test on the latter half: a series that rises through a
    # transient and then plateaus is bounded; one still climbing is not
    flags = [no_growth(vals[vals.size // 2:]) for vals in values]
    return EnergyTrace(times=traj.times.copy(), specs=specs, values=values,
                       fits=fits, bounded_flags=flags)


def windowed_sup(traj: Trajectory, window: float = DEFAULT_WINDOW,
                 tol: float = DEFAULT_GROWTH_TOL) -> dict:
    """Per-species sup-norm maxima over sliding windows (tau, tau + window].

    Window anchors are the integer multiples of the window length covered
    by the trajectory.  The no-growth flags compare the last window
    against the early maximum; they are the uniform-in-time boundedness
    surrogate.  Raises if the trajectory is shorter than one window.
    """
    times, sups = traj._dense_supnorms()
    t0, t1 = float(times[0]), float(times[-1])
    if t1 - t0 < window:
        raise ValueError(f"trajectory of length {t1 - t0} is shorter than one window {window}")
    anchors = []
    tau = float(np.floor(t0))
    while tau + window <= t1 + 1e-12:
        if tau + window > t0:
            anchors.append(tau)
        tau += 1.0
    values = np.empty((sups.shape[1], len(anchors)))
    for k, tau in enumerate(anchors):
        mask = (times > tau) & (times <= tau + window + 1e-12)
        if not mask.any():
            raise ValueError(f"no recorded times inside window ({tau}, {tau + window}]")
        values[:, k] = sups[mask].max(axis=0)
    flags = [no_growth(values[i], tol) for i in range(values.shape[0])]
    return {"anchors": np.asarray(anchors), "values": values, "no_growth": flags,
            "window": window, "tol": tol}


def mass_budget(traj: Trajectory, system) -> tuple[np.ndarray, np.ndarray]:
    """Residual of the weighted-mass budget against its linear bound.

    residual(t) = sum_i c_i m_i(t) - sum_i c_i m_i(0)
                  - int_0^t (K1 sum_i m_i + K2 |Omega|) ds

    with m_i the species masses and the time integral accumulated by
    trapezoid over the dense step series.  Under exact mass dissipation
    (K1 = K2 = 0) and conservative walls the residual stays at the level
    of accumulated solver tolerances; under outflow walls it is
    non-positive.
    """
    times, masses = traj._dense_series()
    c = np.asarray(system.mass_weights, dtype=float)
    k1, k2 = system.mass_constants
    weighted = masses @ c
    total = masses.sum(axis=1)
    integrand = k1 * total + k2 * traj.grid.domain_volume
    dt = np.diff(times)
    accum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (integrand[1:] + integrand[:-1]))])
    residual = weighted - weighted[0] - accum
    return times.copy(), residual


def apriori_hypothesis_monitor(traj: Trajectory, mode: str, exponent: float) -> dict:
    """Monitor one of the two a-priori norm hypotheses over the trajectory.

    mode "La": per-species sup over time of the spatial L^a norm; the
    admissible intermediate order then extends to r < 1 + 2a/n.
    mode "Lb": per-species space-time L^b norm; the threshold becomes
    r < 1 + 2b/(n + 2).  The report carries the computed norms and the
    threshold; it asserts nothing.
    """
    n = traj.grid.dim
    a = float(exponent)
    if a < 1:
        raise ValueError(f"exponent must be >= 1, got {a}")
    if mode == "La":
        norms = np.zeros(traj.m)
        for state in traj.states:
            for i in range(traj.m):
                norms[i] = max(norms[i], discrete_norm(state[i], traj.grid, a))
        threshold = 1.0 + 2.0 * a / n
    elif mode == "Lb":
        powers = np.array([
            [discrete_norm(state[i], traj.grid, a) ** a for i in range(traj.m)]
            for state in traj.states
        ])  # (ntimes, m)
        norms = np.trapezoid(powers, traj.times, axis=0) ** (1.0 / a)
        threshold = 1.0 + 2.0 * a / (n + 2)
    else:
        raise ValueError(f"mode must be 'La' or 'Lb', got {mode!r}")
    return {"mode": mode, "exponent": a, "norms": norms,
            "admissible_order_threshold": float(threshold)}
