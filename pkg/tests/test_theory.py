import numpy as np
import pytest

from mona_lab.theory import (BasisSpec, DistillProblem, fit_ridge_to_tolerance,
                             gaussian_kernel, make_instance, participation_ratio,
                             rademacher_bound, ridge_solution,
                             self_distill_simulate, sparsification_report)


class TestRademacherBound:
    def test_frozen_example(self):
        # C = (1, 1), V = (2, 2), n = 100 -> 2 * 2 / 10 = 0.4
        spec = BasisSpec(np.array([1.0, 1.0]), np.array([2.0, 2.0]), 100)
        assert abs(rademacher_bound(spec) - 0.4) < 1e-12

    def test_single_basis_function(self):
        spec = BasisSpec(np.array([3.0]), np.array([5.0]), 9)
        assert abs(rademacher_bound(spec) - 5.0) < 1e-12

    def test_homogeneous_in_coordinate_bounds(self):
        c = np.array([1.0, 2.0, 3.0])
        v = np.array([1.0, 4.0, 2.0])
        base = rademacher_bound(BasisSpec(c, v, 50))
        scaled = rademacher_bound(BasisSpec(3 * c, v, 50))
        assert abs(scaled - 3 * base) < 1e-12

    def test_inverse_sqrt_n_scaling(self):
        c, v = np.array([1.0, 1.0]), np.array([1.0, 1.0])
        b1 = rademacher_bound(BasisSpec(c, v, 100))
        b2 = rademacher_bound(BasisSpec(c, v, 400))
        assert abs(b1 - 2 * b2) < 1e-12

    def test_max_supnorm_governs(self):
        c = np.array([1.0, 1.0])
        low = rademacher_bound(BasisSpec(c, np.array([1.0, 1.0]), 25))
        high = rademacher_bound(BasisSpec(c, np.array([1.0, 7.0]), 25))
        assert abs(high - 7 * low) < 1e-12

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            rademacher_bound(BasisSpec(np.array([]), np.array([]), 10))
        with pytest.raises(ValueError):
            rademacher_bound(BasisSpec(np.array([1.0]), np.array([1.0, 2.0]), 10))
        with pytest.raises(ValueError):
            rademacher_bound(BasisSpec(np.array([-1.0]), np.array([1.0]), 10))
        with pytest.raises(ValueError):
            rademacher_bound(BasisSpec(np.array([1.0]), np.array([1.0]), 0))


def make_problem(n=16, seed=0, **kw):
    rng = np.random.default_rng(seed)
    x = np.linspace(-2, 2, n) + rng.uniform(-0.05, 0.05, size=n)
    y = np.sin(2 * x) + 0.1 * rng.normal(size=n)
    base = dict(kernel_width=0.3, epsilon=1e-3, steps=8)
    base.update(kw)
    return DistillProblem(inputs=x, targets=y, **base)


class TestKernelMachinery:
    def test_gaussian_kernel_diagonal_ones(self):
        k = gaussian_kernel(np.array([0.0, 1.0, 3.0]), 1.0)
        np.testing.assert_allclose(np.diag(k), 1.0)

    def test_gaussian_kernel_known_value(self):
        k = gaussian_kernel(np.array([0.0, 1.0]), 1.0)
        assert abs(k[0, 1] - np.exp(-0.5)) < 1e-12

    def test_degenerate_inputs_rejected(self):
        prob = DistillProblem(inputs=np.array([0.0, 0.0, 1.0]),
                              targets=np.zeros(3), kernel_width=0.5)
        with pytest.raises(np.linalg.LinAlgError):
            prob.gram()

    def test_ridge_solution_closed_form(self):
        prob = make_problem()
        k = prob.gram()
        alpha = ridge_solution(k, prob.targets, 0.1)
        expect = np.linalg.inv(k + 0.1 * np.eye(len(prob.targets))) @ prob.targets
        np.testing.assert_allclose(alpha, expect, atol=1e-10)

    def test_fit_lands_in_tolerance_band(self):
        prob = make_problem()
        k = prob.gram()
        eta = fit_ridge_to_tolerance(k, prob.targets, 1e-3)
        alpha = ridge_solution(k, prob.targets, eta)
        mse = float(np.mean((k @ alpha - prob.targets) ** 2))
        assert 0.9e-3 <= mse <= 1e-3

    def test_infeasible_epsilon_rejected(self):
        prob = make_problem()
        with pytest.raises(ValueError, match="infeasible"):
            fit_ridge_to_tolerance(prob.gram(), prob.targets, 1e-30)

    def test_tiny_targets_return_eta_max(self):
        prob = make_problem()
        k = prob.gram()
        eta = fit_ridge_to_tolerance(k, np.full(k.shape[0], 1e-9), 1e-3)
        assert eta == 1e12


class TestSelfDistillation:
    def test_first_step_matches_ridge_oracle(self):
        prob = make_problem(steps=3)
        hist = self_distill_simulate(prob)
        k = prob.gram()
        eta0 = hist["etas"][0]
        alpha = np.linalg.solve(k + eta0 * np.eye(k.shape[0]), prob.targets)
        eigvals, eigvecs = np.linalg.eigh(k)
        np.testing.assert_allclose(hist["coefficients"][0], eigvecs.T @ alpha,
                                   atol=1e-10)
        np.testing.assert_allclose(hist["predictions"][0], k @ alpha, atol=1e-10)

    def test_zero_targets_give_zero_solution(self):
        prob = make_problem(steps=3)
        prob.targets = np.zeros_like(prob.targets)
        hist = self_distill_simulate(prob)
        np.testing.assert_array_equal(hist["coefficients"], 0.0)
        assert np.all(np.isinf(hist["etas"]))

    def test_history_shapes(self):
        prob = make_problem(n=12, steps=5)
        hist = self_distill_simulate(prob)
        assert hist["coefficients"].shape == (5, 12)
        assert hist["predictions"].shape == (5, 12)
        assert hist["etas"].shape == (5,)

    def test_participation_ratio_nonincreasing(self):
        for seed in range(5):
            hist = self_distill_simulate(make_instance(20, 0.3, seed=seed))
            report = sparsification_report(hist)
            assert report["pr_nonincreasing"], f"seed {seed}"

    def test_top_share_nondecreasing(self):
        for seed in range(5):
            hist = self_distill_simulate(make_instance(20, 0.3, seed=seed))
            report = sparsification_report(hist)
            assert report["top_share_nondecreasing"], f"seed {seed}"

    def test_sparsity_strictly_grows_overall(self):
        hist = self_distill_simulate(make_instance(20, 0.3, seed=0, steps=10))
        rows = sparsification_report(hist)["rows"]
        assert rows[-1]["max_over_median"] > rows[0]["max_over_median"]
        assert rows[-1]["participation_ratio"] < rows[0]["participation_ratio"]

    def test_deterministic(self):
        a = self_distill_simulate(make_problem())
        b = self_distill_simulate(make_problem())
        np.testing.assert_array_equal(a["coefficients"], b["coefficients"])


class TestParticipationRatio:
    def test_uniform_is_one(self):
        assert abs(participation_ratio(np.ones(7)) - 1.0) < 1e-12

    def test_one_sparse_is_inverse_n(self):
        a = np.zeros(8)
        a[3] = 5.0
        assert abs(participation_ratio(a) - 1 / 8) < 1e-12

    def test_sign_invariant(self):
        a = np.array([1.0, -2.0, 3.0])
        assert participation_ratio(a) == participation_ratio(np.abs(a))

    def test_zero_vector(self):
        assert participation_ratio(np.zeros(4)) == 0.0

    def test_report_needs_two_steps(self):
        with pytest.raises(ValueError):
            sparsification_report({"coefficients": np.ones((1, 4)),
                                   "eigenvalues": np.ones(4)})
