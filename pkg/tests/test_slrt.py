import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_psd
from vcsplit import (
    FitOptions,
    InvalidParameterError,
    KernelSet,
    NullSpec,
    ThetaParam,
    acceptance_width,
    ar1_eigen_kernel,
    ci_width_distribution,
    confidence_interval,
    gen_data,
    kfold_slrt,
    make_folds,
    make_partition,
    p_value,
    randomized_decision,
    split_lrt,
    to_diagonal_coords,
)
from vcsplit.estimation import conditional_objective


class TestPValue:
    def test_spec_examples(self):
        assert p_value(1.0, 1.0) == 1.0
        assert p_value(40.0, 0.742) == pytest.approx(0.01855)

    def test_small_stat_capped_at_one(self):
        assert p_value(0.3, 0.9) == 1.0

    @given(st.floats(1e-6, 1e6), st.floats(1e-6, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, stat, u):
        p = p_value(stat, u)
        assert 0.0 <= p <= 1.0

    def test_invalid_inputs(self):
        with pytest.raises(InvalidParameterError):
            p_value(0.0, 0.5)
        with pytest.raises(InvalidParameterError):
            p_value(1.0, 1.5)


class TestRandomizedDecision:
    def test_worked_example(self):
        # realized u = 0.742 gives threshold 14.84 at alpha = 0.05
        u = 0.742
        assert 25.0 > u / 0.05
        seed = next(s for s in range(10_000)
                    if abs(np.random.default_rng(s).uniform() - 0.742) < 5e-3)
        got_u, reject = randomized_decision(25.0, 0.05, seed)
        assert reject

    def test_sandwich(self):
        # stat > 1/alpha always rejects; stat <= u/alpha never does
        for seed in range(50):
            u, reject = randomized_decision(21.0, 0.05, seed)
            assert reject  # 21 > 1/0.05 >= u/alpha
            _, reject2 = randomized_decision(0.5 * u / 0.05, 0.05, seed)
            assert not reject2

    def test_rejection_probability_matches_min_alpha_stat(self):
        alpha = 0.05
        for stat in (5.0, 15.0, 30.0):
            rejects = sum(randomized_decision(stat, alpha, s)[1] for s in range(100_000))
            want = min(1.0, alpha * stat)
            assert abs(rejects / 100_000 - want) < 0.005


@pytest.fixture
def diag_problem(rng):
    lam = np.column_stack([ar1_eigen_kernel(60, 0.9), ar1_eigen_kernel(60, 0.4)])
    ks = KernelSet.from_eigs(lam)
    y = gen_data(ThetaParam(h2=[0.3, 0.1], tau2=1.0), ks, seed=99)
    return y, ks


class TestSplitLrt:
    def test_nothing_pinned_gives_stat_at_most_one(self, diag_problem):
        y, ks = diag_problem
        part = make_partition(60, 30, seed=1)
        fit = split_lrt(y, ks, NullSpec.none(), part)
        assert fit.log_stat <= 1e-10

    def test_alt_equal_null_gives_stat_one(self, diag_problem):
        # internal consistency: evaluating the conditional objective at the
        # null fit reproduces its reported log-likelihood exactly
        y, ks = diag_problem
        part = make_partition(60, 30, seed=2)
        fit = split_lrt(y, ks, NullSpec.zeros([0]), part)
        obj = conditional_objective(y[part.idx0], None, ks.restrict(part.idx0))
        again = obj.value_at(fit.null.theta.h2, fit.null.theta.tau2)
        assert again == pytest.approx(fit.null.loglik, abs=1e-10)

    def test_dense_and_diag_paths_agree(self, rng):
        lam = np.column_stack([ar1_eigen_kernel(40, 0.8), ar1_eigen_kernel(40, 0.3)])
        ks_diag = KernelSet.from_eigs(lam)
        ks_dense = KernelSet.from_dense([np.diag(lam[:, 0]), np.diag(lam[:, 1])],
                                        validate=False)
        y = gen_data(ThetaParam(h2=[0.25, 0.1], tau2=1.0), ks_diag, seed=5)
        part = make_partition(40, 20, seed=5)
        a = split_lrt(y, ks_diag, NullSpec.zeros([0]), part)
        b = split_lrt(y, ks_dense, NullSpec.zeros([0]), part)
        assert a.log_stat == pytest.approx(b.log_stat, abs=1e-4)

    def test_unconstrained_null_never_larger_stat(self, rng):
        kernels = [random_psd(rng, 20) for _ in range(2)]
        ks = KernelSet.from_dense(kernels, validate=False)
        y = gen_data(ThetaParam(h2=[0.2, 0.2], tau2=1.0), ks, seed=31)
        part = make_partition(20, 10, seed=31)
        exact = split_lrt(y, ks, NullSpec.zeros([0]), part)
        from vcsplit import fit_unconstrained

        blocks_free = NullSpec.zeros([0]).free_indices(2)
        from vcsplit.partition import block_kernels

        blocks = block_kernels(ks, part)
        relaxed_null = fit_unconstrained(
            "conditional", y[part.idx0], y[part.idx1], blocks, NullSpec.zeros([0]),
            extra_starts=[exact.null.theta.h2[blocks_free]],
        )
        assert relaxed_null.loglik >= exact.null.loglik - 1e-8
        obj = conditional_objective(y[part.idx0], y[part.idx1], blocks)
        numerator = obj.value_at(exact.alt.theta.h2, exact.alt.theta.tau2)
        relaxed_stat = numerator - relaxed_null.loglik
        assert relaxed_stat <= exact.log_stat + 1e-8


class TestKfold:
    def test_k1_reduces_to_single_split(self, diag_problem):
        y, ks = diag_problem
        res = kfold_slrt(y, ks, NullSpec.zeros([0]), k=1, seed=42)
        part = make_partition(60, 30, seed=42)
        single = split_lrt(y, ks, NullSpec.zeros([0]), part)
        assert res.log_stat == pytest.approx(single.log_stat, abs=1e-12)
        assert res.k == 1

    def test_fold_roles_and_sizes(self):
        parts = make_folds(10, 5, seed=0)
        assert len(parts) == 5
        for p in parts:
            assert p.n1 == 2 and p.n0 == 8  # the fold itself is the fit part
        all_folds = np.sort(np.concatenate([p.idx1 for p in parts]))
        np.testing.assert_array_equal(all_folds, np.arange(10))

    def test_theta_zero_null_mean_at_most_one(self, diag_problem):
        y, ks = diag_problem
        res = kfold_slrt(y, ks, NullSpec.none(), k=4, seed=7)
        assert res.log_stat <= 1e-10
        assert not res.reject

    def test_result_fields_consistent(self, diag_problem):
        y, ks = diag_problem
        res = kfold_slrt(y, ks, NullSpec.zeros([0]), k=2, seed=3, alpha=0.1)
        assert res.p_value == pytest.approx(
            math.exp(min(0.0, math.log(res.u) - res.log_stat))
        )
        assert res.reject == (res.log_stat > math.log(res.u) - math.log(0.1))
        assert len(res.theta1) == 2 and len(res.theta0) == 2

    def test_needs_enough_data(self, diag_problem):
        y, ks = diag_problem
        from vcsplit import InvalidSplitError

        with pytest.raises(InvalidSplitError):
            kfold_slrt(y, ks, NullSpec.none(), k=40, seed=0)

    def test_crossed_representation_rotates(self):
        ks = KernelSet.from_crossed((6, 5), n_factors=2)
        y = gen_data(ThetaParam(h2=[0.1, 0.2], tau2=1.0), ks, seed=12)
        res = kfold_slrt(y, ks, NullSpec.zeros([0]), k=1, seed=12)
        assert np.isfinite(res.log_stat)


class TestConfidenceInterval:
    def test_randomized_within_nonrandomized(self, diag_problem):
        y, ks = diag_problem
        ci = confidence_interval(y, ks, component=0, alpha=0.05,
                                 grid=np.linspace(0, 0.9, 10), seed=5)
        # same frozen curve, u = 1 threshold
        w_rand = acceptance_width(ci.grid, ci.log_stats, 0.05, ci.u)
        w_fixed = acceptance_width(ci.grid, ci.log_stats, 0.05, 1.0)
        assert w_rand <= w_fixed + 1e-12
        if not ci.empty:
            assert ci.lower <= ci.upper

    def test_curve_frozen_and_reproducible(self, diag_problem):
        y, ks = diag_problem
        a = confidence_interval(y, ks, 0, grid=np.linspace(0, 0.8, 6), seed=9)
        b = confidence_interval(y, ks, 0, grid=np.linspace(0, 0.8, 6), seed=9)
        np.testing.assert_array_equal(a.log_stats, b.log_stats)
        assert a.u == b.u and a.lower == b.lower

    def test_contains_truth_typically(self, diag_problem):
        y, ks = diag_problem  # truth h2_0 = 0.3
        ci = confidence_interval(y, ks, component=0,
                                 grid=np.linspace(0, 0.9, 16), seed=3)
        assert not ci.empty
        assert ci.lower <= 0.3 + 0.35  # generous: one realization

    def test_empty_interval_reported(self, rng):
        # force emptiness: grid far from the truth with strong signal
        lam = np.column_stack([np.linspace(30, 0.1, 120)])
        ks = KernelSet.from_eigs(lam)
        y = gen_data(ThetaParam(h2=[0.05], tau2=1.0), ks, seed=8)
        ci = confidence_interval(y, ks, component=0,
                                 grid=np.linspace(0.97, 0.985, 3), seed=8)
        if ci.empty:
            assert math.isnan(ci.lower) and math.isnan(ci.upper)
        else:  # acceptance possible on some draws; hull must stay in the grid
            assert 0.97 <= ci.lower <= ci.upper <= 0.985

    def test_boundary_refinement_tolerance(self, diag_problem):
        y, ks = diag_problem
        grid = np.linspace(0, 0.9, 7)
        ci = confidence_interval(y, ks, 0, grid=grid, seed=13, refine_tol=1e-4)
        if not ci.empty and ci.upper < grid[-1]:
            # refined bound lies between the last accepted and first rejected knot
            above = grid[grid >= ci.upper]
            assert above.size >= 1

    def test_sd_scale_inversion(self, rng):
        lam = np.column_stack([ar1_eigen_kernel(50, 0.9)])
        ks = KernelSet.from_eigs(lam)
        y = gen_data(ThetaParam(h2=[0.4], tau2=2.0), ks, seed=77)
        ci = confidence_interval(y, ks, component=0, scale="sd",
                                 grid=np.linspace(0.0, 3.0, 8), seed=77)
        assert not ci.empty
        assert 0.0 <= ci.lower <= ci.upper <= 3.0


class TestWidthDistribution:
    def test_all_widths_at_most_nonrandomized(self):
        grid = np.linspace(0, 1, 21)
        curve = 10 * (grid - 0.5) ** 2  # u-shaped in log space
        widths = ci_width_distribution(grid, curve, 0.05, 500, seed=4)
        w_max = acceptance_width(grid, curve, 0.05, 1.0)
        assert np.all(widths <= w_max + 1e-12)

    def test_constant_low_curve_full_span(self):
        grid = np.linspace(0, 2, 11)
        curve = np.full(11, -5.0)
        widths = ci_width_distribution(grid, curve, 0.05, 100, seed=1)
        np.testing.assert_allclose(widths, 2.0)

    def test_interpolated_crossing(self):
        grid = np.array([0.0, 1.0])
        curve = np.array([0.0, 2.0])
        # threshold at log(u/alpha) = 1 crosses halfway
        u = 0.05 * math.e
        w = acceptance_width(grid, curve, 0.05, u)
        assert w == pytest.approx(0.5, abs=1e-12)
