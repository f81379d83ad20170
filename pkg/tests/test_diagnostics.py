"""Norm series, energy envelopes, windowed sup-norms, and budgets."""

import numpy as np
import pytest

from rdasim.diagnostics import (
    Trajectory,
    apriori_hypothesis_monitor,
    energy_trace,
    mass_budget,
    no_growth,
    norm_series,
    windowed_sup,
)
from rdasim.energy import EnergySpec, WeightVector
from rdasim.grid import (
    BoundarySpec,
    CoefficientField,
    Dirichlet,
    NoFluxWithDrift,
    StructuredGrid,
    discrete_norm,
)
from rdasim.integrator import Problem, SimState, SolverConfig, run
from rdasim.reactions import (
    TruncationParam,
    builtin_linear_decay,
    builtin_reversible_reaction,
    system_from_expressions,
)


def snapshot_trajectory(grid, times, states):
    return Trajectory(grid=grid, times=np.asarray(times, dtype=float), states=states)


def run_problem(system, fields, t_end=1.0, dt=0.01, diffusion=0.1, n=24,
                bc=None, record_dt=None, eps=1e-4):
    grid = StructuredGrid.uniform([(0.0, 1.0)], [n])
    coeff = CoefficientField.constant(grid, [diffusion] * system.m)
    boundary = BoundarySpec.uniform(system.m, 1, bc or NoFluxWithDrift())
    problem = Problem(grid, system, coeff, boundary)
    state = SimState(0.0, fields, TruncationParam(eps))
    cfg = SolverConfig(dt=dt, t_end=t_end, record_dt=record_dt)
    return run(state, cfg, problem), problem


class TestTrajectory:
    def test_times_must_increase(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [4])
        with pytest.raises(ValueError, match="strictly increasing"):
            snapshot_trajectory(grid, [0.0, 0.0], [np.zeros((1, 4))] * 2)

    def test_alignment(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [4])
        with pytest.raises(ValueError, match="align"):
            snapshot_trajectory(grid, [0.0, 1.0], [np.zeros((1, 4))])


class TestNormSeries:
    def test_constant_state_constant_series(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        state = np.vstack([np.full(8, 2.0), np.full(8, 3.0)])
        traj = snapshot_trajectory(grid, [0.0, 1.0, 2.0], [state] * 3)
        series = norm_series(traj, [1, 2])
        for p, table in series["norms"].items():
            assert np.allclose(table, table[:, :1])
        assert np.allclose(series["norms"][1][0], 2.0)
        assert np.allclose(series["norms"][np.inf][1], 3.0)

    def test_sup_norm_included_and_matches_scan(self):
        rng = np.random.default_rng(0)
        grid = StructuredGrid.uniform([(0.0, 1.0)], [16])
        states = [rng.uniform(0, 1, size=(2, 16)) for _ in range(3)]
        traj = snapshot_trajectory(grid, [0.0, 0.5, 1.0], states)
        series = norm_series(traj, [1])
        for k, state in enumerate(states):
            assert series["norms"][np.inf][0, k] == np.abs(state[0]).max()

    def test_dirichlet_decay_is_monotone(self):
        system = builtin_linear_decay(m=1, rate=0.0)
        fields = np.ones((1, 24))
        traj, _ = run_problem(system, fields, t_end=0.5, diffusion=5.0,
                              bc=Dirichlet(), record_dt=0.05)
        series = norm_series(traj, [1])
        sup = series["norms"][np.inf][0]
        assert np.all(np.diff(sup) <= 1e-14)


class TestEnergyTrace:
    def test_zero_trajectory(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        traj = snapshot_trajectory(grid, [0.0, 1.0], [np.zeros((2, 8))] * 2)
        trace = energy_trace(traj, [EnergySpec(4, WeightVector.ones(2))])
        assert np.all(trace.values[0] == 0.0)

    def test_order_one_equals_l1_sum(self):
        rng = np.random.default_rng(1)
        grid = StructuredGrid.uniform([(0.0, 1.0)], [16])
        states = [rng.uniform(0, 2, size=(3, 16)) for _ in range(4)]
        traj = snapshot_trajectory(grid, [0.0, 0.3, 0.6, 1.0], states)
        trace = energy_trace(traj, [EnergySpec(1, WeightVector.ones(3))])
        for k, state in enumerate(states):
            l1 = sum(discrete_norm(state[i], grid, 1) for i in range(3))
            assert trace.values[0][k] == pytest.approx(l1, rel=1e-13)

    def test_linear_decay_fits_positive_rate(self):
        system = builtin_linear_decay(m=2, rate=1.0)
        rng = np.random.default_rng(2)
        fields = rng.uniform(0.5, 1.5, size=(2, 24))
        traj, _ = run_problem(system, fields, t_end=2.0, record_dt=0.1)
        trace = energy_trace(traj, [EnergySpec(3, WeightVector.ones(2))])
        fit = trace.fits[0]
        assert fit["fit_ok"]
        assert fit["delta"] > 0
        assert trace.bounded_flags[0]

    def test_envelope_certifies_recorded_sup(self):
        system = builtin_reversible_reaction()
        rng = np.random.default_rng(3)
        fields = rng.uniform(0.2, 1.2, size=(2, 24))
        traj, _ = run_problem(system, fields, t_end=2.0, record_dt=0.1)
        trace = energy_trace(traj, [EnergySpec(4, WeightVector((1.0, 2.0)))])
        fit = trace.fits[0]
        sup = float(np.max(trace.values[0]))
        assert sup <= max(trace.values[0][0], fit["plateau"]) * (1 + 1e-6)

    def test_growth_flagged_unbounded(self):
        growth = system_from_expressions(
            ["u1"], mass_weights=[1.0], mass_constants=(1.0, 0.0),
            intermediate_order=1.0, growth_order=1.0, growth_constant=1.0,
        )
        fields = np.ones((1, 24))
        traj, _ = run_problem(growth, fields, t_end=2.0, record_dt=0.1)
        trace = energy_trace(traj, [EnergySpec(2, WeightVector.ones(1))])
        assert not trace.bounded_flags[0]


class TestWindowedSup:
    def test_constant_trajectory(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [4])
        times = np.linspace(0, 10, 101)
        state = np.ones((1, 4))
        traj = Trajectory(grid=grid, times=times, states=[state] * 101,
                          step_times=times,
                          step_supnorms=np.ones((101, 1)),
                          step_masses=np.ones((101, 1)))
        result = windowed_sup(traj)
        assert np.allclose(result["values"], 1.0)
        assert all(result["no_growth"])

    def test_growth_detected(self):
        growth = system_from_expressions(
            ["u1"], mass_weights=[1.0], mass_constants=(1.0, 0.0),
            intermediate_order=1.0, growth_order=1.0, growth_constant=1.0,
        )
        fields = np.ones((1, 16))
        traj, _ = run_problem(growth, fields, t_end=6.0, dt=0.02, n=16)
        result = windowed_sup(traj)
        assert not result["no_growth"][0]

    def test_too_short_raises(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [4])
        times = np.linspace(0, 1, 11)
        traj = Trajectory(grid=grid, times=times, states=[np.ones((1, 4))] * 11,
                          step_times=times, step_supnorms=np.ones((11, 1)))
        with pytest.raises(ValueError, match="shorter than one window"):
            windowed_sup(traj, window=2.0)

    def test_truncation_monotone(self):
        # dropping late records never increases earlier window values
        rng = np.random.default_rng(4)
        grid = StructuredGrid.uniform([(0.0, 1.0)], [4])
        times = np.linspace(0, 8, 161)
        sups = rng.uniform(0.5, 1.5, size=(161, 1))
        traj_full = Trajectory(grid=grid, times=times, states=[np.ones((1, 4))] * 161,
                               step_times=times, step_supnorms=sups)
        cut = 120
        traj_cut = Trajectory(grid=grid, times=times[:cut],
                              states=[np.ones((1, 4))] * cut,
                              step_times=times[:cut], step_supnorms=sups[:cut])
        full = windowed_sup(traj_full)
        part = windowed_sup(traj_cut)
        k = part["values"].shape[1]
        assert np.all(part["values"][:, :k] <= full["values"][:, :k] + 1e-15)


class TestMassBudget:
    @pytest.mark.parametrize("n", [16, 64, 256])
    def test_pure_transport_conserves_at_every_resolution(self, n):
        system = builtin_linear_decay(m=2, rate=0.0)
        rng = np.random.default_rng(5)
        fields = rng.uniform(0.0, 1.0, size=(2, n))
        traj, problem = run_problem(system, fields, t_end=1.0, n=n)
        times, residual = mass_budget(traj, system)
        assert np.max(np.abs(residual)) < 1e-8

    def test_reversible_budget_tight(self):
        system = builtin_reversible_reaction()
        rng = np.random.default_rng(6)
        fields = rng.uniform(0.2, 1.0, size=(2, 24))
        traj, _ = run_problem(system, fields, t_end=1.0)
        _, residual = mass_budget(traj, system)
        assert np.max(np.abs(residual)) < 1e-8

    def test_dirichlet_outflow_nonpositive(self):
        system = builtin_linear_decay(m=1, rate=0.0)
        fields = np.ones((1, 24))
        traj, _ = run_problem(system, fields, t_end=0.5, bc=Dirichlet())
        _, residual = mass_budget(traj, system)
        assert np.all(residual <= 1e-12)
        assert residual[-1] < -1e-3  # mass genuinely leaves

    def test_budget_with_source_bound(self):
        # production exactly matches K2: residual stays near zero
        source = system_from_expressions(
            ["1 + 0*u1"], mass_weights=[1.0], mass_constants=(0.0, 1.0),
            intermediate_order=1.0, growth_order=1.0, growth_constant=2.0,
        )
        fields = np.zeros((1, 24))
        traj, _ = run_problem(source, fields, t_end=1.0, eps=1e-9)
        _, residual = mass_budget(traj, source)
        assert np.max(np.abs(residual)) < 1e-6


class TestAprioriMonitor:
    def test_l1_mode_threshold(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        traj = snapshot_trajectory(grid, [0.0, 1.0], [np.ones((1, 8))] * 2)
        report = apriori_hypothesis_monitor(traj, "La", 1.0)
        assert report["admissible_order_threshold"] == pytest.approx(1 + 2 / 1)
        assert report["norms"][0] == pytest.approx(1.0)

    def test_lb_mode_threshold(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        traj = snapshot_trajectory(grid, [0.0, 1.0], [np.ones((1, 8))] * 2)
        report = apriori_hypothesis_monitor(traj, "Lb", 2.0)
        assert report["admissible_order_threshold"] == pytest.approx(1 + 4 / 3)
        assert report["norms"][0] == pytest.approx(1.0)

    def test_thresholds_monotone_in_exponent(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        traj = snapshot_trajectory(grid, [0.0, 1.0], [np.ones((1, 8))] * 2)
        thresholds = [
            apriori_hypothesis_monitor(traj, "La", a)["admissible_order_threshold"]
            for a in (1, 2, 4, 8)
        ]
        assert all(b > a for a, b in zip(thresholds, thresholds[1:]))

    def test_bad_mode(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        traj = snapshot_trajectory(grid, [0.0], [np.ones((1, 8))])
        with pytest.raises(ValueError, match="mode"):
            apriori_hypothesis_monitor(traj, "Lc", 1.0)


class TestNoGrowth:
    def test_flat(self):
        assert no_growth(np.ones(10))

    def test_decay(self):
        assert no_growth(np.exp(-np.linspace(0, 3, 20)))

    def test_growth(self):
        assert not no_growth(np.exp(np.linspace(0, 1, 20)))
