"""Exactness tests for the weighted multinomial energy algebra.

Expected values come from independent oracles: brute-force nested-loop
enumeration, factorial evaluation, naive summation, central finite
differences, and inertia bisection for eigenvalues.
"""

import math

import numpy as np
import pytest
import scipy.linalg

from rdasim.energy import (
    BlockMatrix,
    EnergySpec,
    IndexBudgetError,
    MultiIndex,
    WeightSearchError,
    WeightVector,
    assemble_coupling_matrix,
    count_multi_indices,
    energy_density,
    energy_functional,
    energy_time_derivative,
    enumerate_multi_indices,
    ibp_identity_sides,
    min_eigenvalue,
    multinomial_coefficient,
    select_weights,
)
from rdasim.grid import StructuredGrid
from rdasim.reactions import builtin_reversible_reaction, system_from_expressions


def brute_force_indices(m, p):
    """Oracle: nested loops over {0..p}^m filtered by the sum."""
    out = []
    for flat in np.ndindex(*([p + 1] * m)):
        if sum(flat) == p:
            out.append(tuple(flat))
    return sorted(out)


class TestEnumeration:
    def test_single_species(self):
        assert [mi.entries for mi in enumerate_multi_indices(1, 5)] == [(5,)]

    def test_two_species_order_two(self):
        assert [mi.entries for mi in enumerate_multi_indices(2, 2)] == [
            (0, 2), (1, 1), (2, 0)
        ]

    def test_four_species_order_six_vs_brute_force(self):
        got = [mi.entries for mi in enumerate_multi_indices(4, 6)]
        assert len(got) == 84
        assert all(sum(e) == 6 for e in got)
        assert got == brute_force_indices(4, 6)

    @pytest.mark.parametrize("m", range(1, 7))
    @pytest.mark.parametrize("p", range(0, 11))
    def test_count_is_complete(self, m, p):
        indices = enumerate_multi_indices(m, p)
        assert len(indices) == count_multi_indices(m, p) == math.comb(p + m - 1, m - 1)
        assert len(set(mi.entries for mi in indices)) == len(indices)

    def test_cap_exceeded_names_count(self):
        with pytest.raises(IndexBudgetError, match=str(math.comb(13, 5))):
            enumerate_multi_indices(6, 8, index_cap=10)

    def test_multi_index_invariants(self):
        mi = MultiIndex((1, 0, 3))
        assert mi.order == 4
        with pytest.raises(ValueError):
            MultiIndex((1, -1))


class TestMultinomialCoefficient:
    def test_pair(self):
        assert multinomial_coefficient(2, (1, 1)) == 2

    def test_factorial_oracle(self):
        # 6! / (2! 2! 2!) = 720 / 8
        assert multinomial_coefficient(6, (2, 2, 2)) == 720 // 8 == 90

    @pytest.mark.parametrize("p", [1, 3, 7])
    def test_boundary_composition(self, p):
        assert multinomial_coefficient(p, (p, 0, 0)) == 1

    def test_order_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            multinomial_coefficient(3, (1, 1))

    def test_exact_for_large_order(self):
        beta = (5, 7, 8)
        expected = math.factorial(20) // (
            math.factorial(5) * math.factorial(7) * math.factorial(8)
        )
        assert multinomial_coefficient(20, beta) == expected


class TestEnergyDensity:
    def test_multinomial_reduction(self):
        # weights of one collapse the density to (sum u)^p
        rng = np.random.default_rng(1)
        for _ in range(100):
            m = int(rng.integers(1, 6))
            p = int(rng.integers(1, 9))
            u = rng.uniform(0.0, 3.0, size=m)
            spec = EnergySpec(p, WeightVector.ones(m))
            expected = np.sum(u) ** p
            assert energy_density(u, spec) == pytest.approx(expected, rel=1e-12)

    def test_explicit_quadratic_two_species(self):
        w1, w2 = 1.3, 0.7
        u1, u2 = 0.9, 2.1
        spec = EnergySpec(2, WeightVector((w1, w2)))
        expected = w1**4 * u1**2 + 2 * w1 * w2 * u1 * u2 + w2**4 * u2**2
        assert energy_density(np.array([u1, u2]), spec) == pytest.approx(expected, rel=1e-14)

    def test_zero_state(self):
        spec = EnergySpec(3, WeightVector((2.0, 0.5)))
        assert energy_density(np.zeros(2), spec) == 0.0

    def test_homogeneity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            m = int(rng.integers(1, 5))
            p = int(rng.integers(1, 7))
            spec = EnergySpec(p, WeightVector(tuple(rng.uniform(0.5, 2.0, m))))
            u = rng.uniform(0.0, 2.0, m)
            s = rng.uniform(0.0, 3.0)
            assert energy_density(s * u, spec) == pytest.approx(
                s**p * energy_density(u, spec), rel=1e-12, abs=1e-300
            )

    def test_negative_input_rejected(self):
        spec = EnergySpec(2, WeightVector.ones(2))
        with pytest.raises(ValueError, match="non-negative"):
            energy_density(np.array([1.0, -0.1]), spec)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(3)
        spec = EnergySpec(4, WeightVector((1.5, 0.8, 1.1)))
        batch = rng.uniform(0, 2, size=(3, 40))
        vals = energy_density(batch, spec)
        for k in range(40):
            assert vals[k] == pytest.approx(energy_density(batch[:, k], spec), rel=1e-14)

    def test_log_domain_path_matches_log_oracle(self):
        # single huge weight forces the log-space accumulation
        w = math.exp(12.0)
        u = 1e-6
        spec = EnergySpec(8, WeightVector((w,)))
        expected = math.exp(64 * 12.0 + 8 * math.log(u))
        assert energy_density(np.array([u]), spec) == pytest.approx(expected, rel=1e-10)

    def test_spec_rejects_blown_budget(self):
        with pytest.raises(IndexBudgetError):
            EnergySpec(8, WeightVector.ones(6), index_cap=100)


class TestEnergyFunctional:
    def test_uniform_field_on_unit_domain(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [16])
        spec = EnergySpec(3, WeightVector.ones(2))
        field = np.vstack([np.full(16, 0.4), np.full(16, 0.6)])
        assert energy_functional(field, grid, spec) == pytest.approx(1.0, rel=1e-13)

    def test_single_cell(self):
        grid = StructuredGrid.uniform([(0.0, 2.5)], [1])
        spec = EnergySpec(2, WeightVector((1.2, 0.9)))
        field = np.array([[0.3], [1.1]])
        expected = 2.5 * energy_density(field[:, 0], spec)
        assert energy_functional(field, grid, spec) == pytest.approx(expected, rel=1e-14)

    def test_matches_naive_summation(self):
        rng = np.random.default_rng(4)
        grid = StructuredGrid.uniform([(0.0, 1.0)], [37])
        spec = EnergySpec(4, WeightVector((1.4, 0.6)))
        field = rng.uniform(0.0, 2.0, size=(2, 37))
        naive = sum(
            energy_density(field[:, c], spec) * grid.cell_volumes[c] for c in range(37)
        )
        assert energy_functional(field, grid, spec) == pytest.approx(naive, rel=1e-13)

    def test_shape_mismatch(self):
        grid = StructuredGrid.uniform([(0.0, 1.0)], [8])
        spec = EnergySpec(2, WeightVector.ones(2))
        with pytest.raises(ValueError, match="does not match"):
            energy_functional(np.zeros((2, 9)), grid, spec)


def fd_directional_derivative(u, dudt, spec, h=1e-5):
    """Oracle: central finite difference of the density along the velocity."""
    fwd = energy_density(u + h * dudt, spec)
    bwd = energy_density(u - h * dudt, spec)
    return (fwd - bwd) / (2 * h)


class TestEnergyTimeDerivative:
    def test_zero_velocity(self):
        spec = EnergySpec(5, WeightVector((1.1, 0.9)))
        assert energy_time_derivative(np.array([1.0, 2.0]), np.zeros(2), spec) == 0.0

    def test_unit_weights_closed_form(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            m = int(rng.integers(1, 6))
            p = int(rng.integers(2, 9))
            u = rng.uniform(0.1, 2.0, m)
            du = rng.uniform(-1.0, 1.0, m)
            spec = EnergySpec(p, WeightVector.ones(m))
            expected = p * np.sum(u) ** (p - 1) * np.sum(du)
            assert energy_time_derivative(u, du, spec) == pytest.approx(expected, rel=1e-12)

    def test_order_one_closed_form(self):
        spec = EnergySpec(1, WeightVector((2.0, 3.0)))
        got = energy_time_derivative(np.array([1.0, 1.0]), np.array([0.5, -0.25]), spec)
        assert got == pytest.approx(2.0 * 0.5 - 3.0 * 0.25, rel=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            m = int(rng.integers(1, 5))
            p = int(rng.integers(2, 7))
            spec = EnergySpec(p, WeightVector(tuple(rng.uniform(0.5, 2.0, m))))
            u = rng.uniform(0.2, 2.0, m)
            du = rng.uniform(-1.0, 1.0, m)
            analytic = energy_time_derivative(u, du, spec)
            numeric = fd_directional_derivative(u, du, spec)
            assert analytic == pytest.approx(numeric, rel=1e-6, abs=1e-9)

    def test_specific_case_p4_m3(self):
        rng = np.random.default_rng(7)
        spec = EnergySpec(4, WeightVector((1.2, 0.8, 1.5)))
        u = rng.uniform(0.5, 1.5, 3)
        du = rng.uniform(-1.0, 1.0, 3)
        assert energy_time_derivative(u, du, spec) == pytest.approx(
            fd_directional_derivative(u, du, spec), rel=1e-6
        )


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestIbpIdentity:
    def test_single_species_closed_form(self):
        # for one species both sides reduce to p (p-1) w^(p^2) u^(p-2) (A g) . g
        rng = np.random.default_rng(8)
        for p in (2, 3, 5):
            w = 1.3
            u = np.array([0.7])
            g = rng.standard_normal((1, 3))
            a = random_spd(rng, 3)
            spec = EnergySpec(p, WeightVector((w,)))
            lhs, rhs = ibp_identity_sides(u, g, [a], spec)
            expected = p * (p - 1) * w ** (p * p) * u[0] ** (p - 2) * (a @ g[0]) @ g[0]
            assert lhs == pytest.approx(expected, rel=1e-12)
            assert rhs == pytest.approx(expected, rel=1e-12)

    def test_zero_gradients(self):
        spec = EnergySpec(3, WeightVector((1.0, 2.0)))
        lhs, rhs = ibp_identity_sides(
            np.array([1.0, 2.0]), np.zeros((2, 2)), [np.eye(2)] * 2, spec
        )
        assert lhs == 0.0 and rhs == 0.0

    def test_random_instances_agree(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            m = int(rng.integers(1, 5))
            p = int(rng.integers(2, 7))
            n = int(rng.integers(1, 4))
            spec = EnergySpec(p, WeightVector(tuple(rng.uniform(0.5, 2.0, m))))
            u = rng.uniform(0.2, 2.0, m)
            g = rng.standard_normal((m, n))
            mats = [random_spd(rng, n) for _ in range(m)]
            lhs, rhs = ibp_identity_sides(u, g, mats, spec)
            assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)

    def test_zero_component_terms_drop(self):
        spec = EnergySpec(4, WeightVector((1.0, 1.0, 1.0)))
        u = np.array([0.8, 0.0, 1.2])
        rng = np.random.default_rng(10)
        g = rng.standard_normal((3, 2))
        mats = [random_spd(rng, 2) for _ in range(3)]
        lhs, rhs = ibp_identity_sides(u, g, mats, spec)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_requires_order_two(self):
        spec = EnergySpec(1, WeightVector((1.0,)))
        with pytest.raises(ValueError, match="order >= 2"):
            ibp_identity_sides(np.array([1.0]), np.ones((1, 1)), [np.eye(1)], spec)

    def test_dimension_mismatch(self):
        spec = EnergySpec(2, WeightVector((1.0, 1.0)))
        with pytest.raises(ValueError):
            ibp_identity_sides(np.array([1.0, 1.0]), np.ones((2, 2)), [np.eye(3)] * 2, spec)


def smallest_eig_bisection(mat, tol=1e-12):
    """Oracle: inertia bisection via LDL^T factorizations."""
    mat = np.asarray(mat, dtype=float)
    bound = np.linalg.norm(mat, np.inf) + 1.0
    lo, hi = -bound, bound

    def count_below(lam):
        _, d, _ = scipy.linalg.ldl(mat - lam * np.eye(mat.shape[0]))
        eigs = np.linalg.eigvalsh((d + d.T) / 2)  # block-diagonal, tiny blocks
        return int(np.sum(eigs < 0))

    while hi - lo > tol:
        mid = (lo + hi) / 2
        if count_below(mid) >= 1:
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


class TestCouplingMatrixAndEigen:
    def test_single_species_block(self):
        d = np.array([[2.0, 0.3], [0.1, 1.5]])
        block = assemble_coupling_matrix([d], WeightVector((1.7,)))
        sym = (d + d.T) / 2
        assert np.allclose(block.matrix, 1.7**2 * sym)
        assert min_eigenvalue(block) > 0

    @pytest.mark.parametrize("t", [0.5, 0.99, 1.01, 2.0])
    def test_two_identical_identities(self, t):
        # blocks [t^2 I, I; I, t^2 I] have eigenvalues t^2 +/- 1
        n = 2
        block = assemble_coupling_matrix([np.eye(n), np.eye(n)], WeightVector((t, t)))
        lam = min_eigenvalue(block)
        assert lam == pytest.approx(t**2 - 1.0, abs=1e-10)
        assert (lam > 0) == (t > 1.0)

    def test_pd_monotone_in_weights(self):
        rng = np.random.default_rng(11)
        mats = [random_spd(rng, 2) * 0.5 for _ in range(3)]
        base = np.array([1.5, 2.0, 1.8])
        w0 = WeightVector(tuple(base))
        while min_eigenvalue(assemble_coupling_matrix(mats, w0)) <= 0:
            base = base * 2
            w0 = WeightVector(tuple(base))
        for _ in range(10):
            bigger = WeightVector(tuple(base * rng.uniform(1.0, 3.0, 3)))
            assert min_eigenvalue(assemble_coupling_matrix(mats, bigger)) > 0

    def test_identity_four(self):
        assert min_eigenvalue(np.eye(4)) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal(self):
        assert min_eigenvalue(np.diag([2.0, -3.0])) == pytest.approx(-3.0, abs=1e-12)

    def test_random_symmetric_vs_bisection_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a = rng.standard_normal((6, 6))
            sym = (a + a.T) / 2
            assert min_eigenvalue(sym) == pytest.approx(
                smallest_eig_bisection(sym), abs=1e-8
            )

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            min_eigenvalue(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_block_matrix_validation(self):
        with pytest.raises(ValueError):
            BlockMatrix(np.array([[1.0, 2.0], [0.0, 1.0]]), 2, 1)


class TestSelectWeights:
    def test_single_species_stays_at_one(self):
        system = builtin_reversible_reaction()
        one_species = system_from_expressions(
            ["1 + u1"], mass_weights=[1.0], mass_constants=(1.0, 1.0),
            intermediate_order=1.0, growth_order=1.0, growth_constant=2.0,
        )
        weights, k_est = select_weights(one_species, [[np.eye(1)]], p=3,
                                        samples_per_radius=500)
        assert weights.entries == (1.0,)
        assert np.isfinite(k_est)

    def test_reversible_system_order_four(self):
        system = builtin_reversible_reaction()
        samples = [[np.eye(1), np.eye(1)]]
        weights, k_est = select_weights(system, samples, p=4, samples_per_radius=1000)
        arr = weights.as_array()
        assert np.all(arr >= 1.0)
        assert np.isfinite(k_est)
        block = assemble_coupling_matrix(samples[0], weights)
        assert min_eigenvalue(block) > 0

    def test_pd_doubling_needed(self):
        # identical unit diffusivities need weights above one
        system = builtin_reversible_reaction()
        samples = [[np.eye(2), np.eye(2)]]
        weights, _ = select_weights(system, samples, p=2, samples_per_radius=500)
        assert min_eigenvalue(assemble_coupling_matrix(samples[0], weights)) > 0
        assert max(weights.entries) > 1.0

    def test_divergent_ratio_fails_with_message(self):
        cubic = system_from_expressions(
            ["u1^3"], mass_weights=[1.0], mass_constants=(1.0, 1.0),
            intermediate_order=2.0, growth_order=3.0, growth_constant=1.0,
        )
        with pytest.raises(WeightSearchError, match="ratio plateau"):
            select_weights(cubic, [[np.eye(1)]], p=2, samples_per_radius=500,
                           max_doublings=12)
