import numpy as np
import pytest

from gacv.covariance import (
    BlockCovariance,
    ModelEnsembleSpec,
    SampleDesign,
    assemble_block_covariance,
    independent_block_covariance,
)
from gacv.grouping import GroupScheme, stack_restrictions
from gacv.weights import (
    DegenerateDesignError,
    IllConditionedWarning,
    InfeasibleConstraintError,
    WeightSet,
    acv_decomposition,
    check_unbiased,
    ensemble_acv_weights,
    estimator_variance,
    independent_optimal_weights,
    mlblue_optimal_weights,
    optimal_variance,
    optimal_weights,
)

from oracles import (
    nullspace_optimal_weights,
    random_model_covariance,
    random_spd_block_covariance,
)


def random_scheme(rng, max_lowfi=4, max_groups=6, cover_all=True) -> GroupScheme:
    L = int(rng.integers(1, max_lowfi + 1))
    K = int(rng.integers(1, max_groups + 1))
    subsets = [rng.choice(L + 1, size=int(rng.integers(1, L + 2)), replace=False) for _ in range(K)]
    if cover_all:
        missing = set(range(L + 1)) - set().union(*(set(s.tolist()) for s in subsets))
        for model in missing:
            subsets.append([model])
    return GroupScheme.from_subsets(subsets, L)


def random_unbiased_weights(scheme: GroupScheme, rng) -> WeightSet:
    """Particular solution of the unbiasedness constraint plus a null step."""
    import scipy.linalg

    R = stack_restrictions(scheme)
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    beta_p, *_ = np.linalg.lstsq(R, e0, rcond=None)
    N = scipy.linalg.null_space(R)
    if N.shape[1]:
        beta_p = beta_p + N @ rng.standard_normal(N.shape[1])
    return WeightSet.from_stacked(scheme, beta_p)


class TestEstimatorVariance:
    def test_single_estimator(self):
        scheme = GroupScheme.from_subsets([[0]], 0)
        C = BlockCovariance(np.array([[0.37]]), (1,))
        assert estimator_variance(WeightSet((np.array([1.0]),)), C) == pytest.approx(0.37)

    def test_zero_weights(self):
        scheme = GroupScheme.from_subsets([[0, 1]], 1)
        C = BlockCovariance(np.eye(2), (2,))
        assert estimator_variance(WeightSet((np.zeros(2),)), C) == 0.0

    def test_dimension_mismatch(self):
        C = BlockCovariance(np.eye(2), (2,))
        with pytest.raises(ValueError):
            estimator_variance(WeightSet((np.ones(3),)), C)


class TestCheckUnbiased:
    def test_e0_single_full_group(self):
        scheme = GroupScheme.from_subsets([range(4)], 3)
        beta = WeightSet((np.array([1.0, 0, 0, 0]),))
        assert np.array_equal(check_unbiased(beta, scheme), np.zeros(4))

    def test_cancelling_pair(self):
        scheme = GroupScheme.from_subsets([[0], [1], [1]], 1)
        beta = WeightSet((np.array([1.0]), np.array([0.7]), np.array([-0.7])))
        assert np.allclose(check_unbiased(beta, scheme), 0.0)

    def test_optimal_weights_are_unbiased(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            scheme = random_scheme(rng)
            C = BlockCovariance(random_spd_block_covariance(scheme, rng), scheme.sizes)
            beta = optimal_weights(C, scheme)
            assert np.abs(check_unbiased(beta, scheme)).max() <= 1e-10


class TestOptimalWeights:
    def test_single_full_group_forced_to_e0(self):
        rng = np.random.default_rng(22)
        scheme = GroupScheme.from_subsets([range(4)], 3)
        C = BlockCovariance(random_spd_block_covariance(scheme, rng), scheme.sizes)
        beta = optimal_weights(C, scheme)
        assert np.allclose(beta.stacked(), [1, 0, 0, 0], atol=1e-12)
        assert optimal_variance(C, scheme) == pytest.approx(C.matrix[0, 0])

    def test_two_group_scalar_oracle(self):
        # groups {0,1} sharing m samples and {1} with m' fresh ones leave a
        # single free parameter a: beta = (1, a, -a); minimize the quadratic
        # in a analytically and compare
        cov = np.array([[1.0, 0.8], [0.8, 1.0]])
        spec = ModelEnsembleSpec(cov=cov, costs=np.ones(2))
        scheme = GroupScheme.from_subsets([[0, 1], [1]], 1)
        m, mp = 7, 23
        design = SampleDesign.from_ranges(scheme, [(0, m), (m, m + mp)])
        C = assemble_block_covariance(spec, design)
        quad = cov[1, 1] * (1.0 / m + 1.0 / mp)
        a_star = -(cov[0, 1] / m) / quad
        var_star = cov[0, 0] / m + 2 * a_star * cov[0, 1] / m + a_star**2 * quad
        beta = optimal_weights(C, scheme)
        assert np.allclose(beta.stacked(), [1.0, a_star, -a_star], rtol=1e-8)
        assert optimal_variance(C, scheme) == pytest.approx(var_star, rel=1e-8)

    def test_matches_nullspace_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(30):
            scheme = random_scheme(rng)
            Cm = random_spd_block_covariance(scheme, rng)
            C = BlockCovariance(Cm, scheme.sizes)
            beta = optimal_weights(C, scheme)
            _, var_oracle = nullspace_optimal_weights(Cm, scheme)
            assert estimator_variance(beta, C) == pytest.approx(var_oracle, rel=1e-8)
            assert optimal_variance(C, scheme) == pytest.approx(var_oracle, rel=1e-8)

    def test_lagrangian_stationarity(self):
        # C beta* must lie in the column space of the stacked restrictions
        rng = np.random.default_rng(24)
        from gacv.allocation import nested_sample_design, saob_groups

        spec = ModelEnsembleSpec(cov=random_model_covariance(5, rng), costs=np.ones(5))
        saob = saob_groups(4, 3)
        design = nested_sample_design([5, 10, 15, 17, 30], saob)
        C = assemble_block_covariance(spec, design)
        beta = optimal_weights(C, saob.scheme)
        v = C.matrix @ beta.stacked()
        R = stack_restrictions(saob.scheme)
        proj = R.T @ np.linalg.solve(R @ R.T, R @ v)
        assert np.linalg.norm(v - proj) <= 1e-8 * np.linalg.norm(v)

    def test_variance_equals_quadratic_form(self):
        rng = np.random.default_rng(25)
        for _ in range(10):
            scheme = random_scheme(rng)
            C = BlockCovariance(random_spd_block_covariance(scheme, rng), scheme.sizes)
            beta = optimal_weights(C, scheme)
            assert optimal_variance(C, scheme) == pytest.approx(
                estimator_variance(beta, C), rel=1e-10
            )

    def test_feasible_points_never_beat_optimum(self):
        rng = np.random.default_rng(26)
        scheme = random_scheme(rng)
        Cm = random_spd_block_covariance(scheme, rng)
        C = BlockCovariance(Cm, scheme.sizes)
        v_star = optimal_variance(C, scheme)
        for _ in range(20):
            beta = random_unbiased_weights(scheme, rng)
            assert estimator_variance(beta, C) >= v_star - 1e-12

    def test_perturbations_strictly_increase_variance(self):
        import scipy.linalg

        rng = np.random.default_rng(27)
        for _ in range(10):
            scheme = random_scheme(rng)
            Cm = random_spd_block_covariance(scheme, rng)
            C = BlockCovariance(Cm, scheme.sizes)
            beta = optimal_weights(C, scheme)
            v_star = estimator_variance(beta, C)
            N = scipy.linalg.null_space(stack_restrictions(scheme))
            if N.shape[1] == 0:
                continue
            for _ in range(10):
                delta = rng.standard_normal(N.shape[1])
                delta *= 1e-3 * np.linalg.norm(beta.stacked()) / np.linalg.norm(delta)
                perturbed = WeightSet.from_stacked(scheme, beta.stacked() + N @ delta)
                assert estimator_variance(perturbed, C) > v_star

    def test_classic_cv_limit(self):
        # with unlimited fresh samples in the second group, the optimum
        # approaches the known-mean control variate variance (1-rho^2) C00/m
        rho, m = 0.9, 11
        cov = np.array([[2.0, rho * np.sqrt(2.0)], [rho * np.sqrt(2.0), 1.0]])
        spec = ModelEnsembleSpec(cov=cov, costs=np.ones(2))
        scheme = GroupScheme.from_subsets([[0, 1], [1]], 1)
        design = SampleDesign.from_ranges(scheme, [(0, m), (m, m + 10**8)])
        C = assemble_block_covariance(spec, design)
        limit = (1 - rho**2) * cov[0, 0] / m
        assert optimal_variance(C, scheme) == pytest.approx(limit, rel=1e-6)

    def test_adding_group_never_hurts(self):
        rng = np.random.default_rng(28)
        spec = ModelEnsembleSpec(cov=random_model_covariance(4, rng), costs=np.ones(4))
        scheme = GroupScheme.from_subsets([[0, 1, 2], [2, 3], [3]], 3)
        counts = [6, 9, 14]
        base = optimal_variance(
            independent_block_covariance(spec, scheme, counts), scheme
        )
        for extra in ([1], [1, 3], [0, 2]):
            grown = GroupScheme.from_subsets(list(scheme.groups) + [extra], 3)
            grown_counts = counts + [8]
            v = optimal_variance(
                independent_block_covariance(spec, grown, grown_counts), grown
            )
            assert v <= base + 1e-12 * base

    def test_degenerate_design_raises(self):
        scheme = GroupScheme.from_subsets([[0, 1], [0, 1]], 1)
        block = np.array([[1.0, 0.5], [0.5, 1.0]])
        dup = np.block([[block, block], [block, block]])
        with pytest.raises(DegenerateDesignError, match="condition number"):
            optimal_weights(BlockCovariance(dup, scheme.sizes), scheme)

    def test_uncovered_model_raises(self):
        scheme = GroupScheme.from_subsets([[0], [0]], 1)  # model 1 nowhere
        C = BlockCovariance(np.eye(2) * 0.5, scheme.sizes)
        with pytest.raises(InfeasibleConstraintError, match="infeasible constraint"):
            optimal_weights(C, scheme)

    def test_ill_conditioned_warns(self):
        scheme = GroupScheme.from_subsets([[0], [1]], 1)
        C = BlockCovariance(np.diag([1.0, 1e-13]), scheme.sizes)
        with pytest.warns(IllConditionedWarning):
            optimal_weights(C, scheme)


class TestSpecializations:
    def test_independent_agrees_with_general(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            scheme = random_scheme(rng)
            spec = ModelEnsembleSpec(
                cov=random_model_covariance(scheme.num_models, rng),
                costs=np.ones(scheme.num_models),
            )
            counts = rng.integers(2, 40, size=scheme.num_groups)
            C = independent_block_covariance(spec, scheme, counts)
            beta_gen = optimal_weights(C, scheme)
            var_gen = optimal_variance(C, scheme)
            beta_ind, var_ind = independent_optimal_weights(spec, scheme, counts)
            beta_mlb, var_mlb = mlblue_optimal_weights(spec, scheme, counts)
            assert var_ind == pytest.approx(var_gen, rel=1e-10)
            assert var_mlb == pytest.approx(var_gen, rel=1e-10)
            assert np.allclose(beta_ind.stacked(), beta_gen.stacked(), atol=1e-9)
            assert np.allclose(beta_mlb.stacked(), beta_gen.stacked(), atol=1e-9)

    def test_single_singleton_group(self):
        spec = ModelEnsembleSpec(cov=np.array([[0.8]]), costs=np.array([1.0]))
        scheme = GroupScheme.from_subsets([[0]], 0)
        beta, var = independent_optimal_weights(spec, scheme, [4])
        assert np.allclose(beta.stacked(), [1.0])
        assert var == pytest.approx(0.2)


class TestAcvDecomposition:
    def test_one_positive_one_negative(self):
        scheme = GroupScheme.from_subsets([[0, 1], [1]], 1)
        weights = WeightSet((np.array([1.0, 0.7]), np.array([-0.7])))
        dec = acv_decomposition(weights, scheme)
        assert dec.alpha[0] == pytest.approx(0.7)
        assert np.allclose(dec.omega_e[0], [1.0, 0.0])
        assert np.allclose(dec.omega_mu[0], [0.0, 1.0])
        assert np.allclose(dec.baseline_weights, [1.0, 0.0])

    def test_model_drops_out_when_alpha_zero(self):
        scheme = GroupScheme.from_subsets([[0], [1]], 1)
        weights = WeightSet((np.array([1.0]), np.array([0.0])))
        dec = acv_decomposition(weights, scheme)
        assert dec.alpha[0] == 0.0
        assert dec.omega_e[0].size == 0 and dec.omega_mu[0].size == 0
        rebuilt = dec.reconstruct_zero_filled(scheme.num_groups)
        assert np.array_equal(rebuilt, weights.zero_filled(scheme))

    def test_biased_input_rejected(self):
        scheme = GroupScheme.from_subsets([[0, 1]], 1)
        with pytest.raises(ValueError, match="unbiased"):
            acv_decomposition(WeightSet((np.array([1.0, 0.3]),)), scheme)

    def test_roundtrip_exact_and_alpha_expressions_agree(self):
        from oracles import exactly_unbiased_weights

        rng = np.random.default_rng(30)
        for _ in range(30):
            scheme = random_scheme(rng)
            weights = exactly_unbiased_weights(scheme, rng)
            dec = acv_decomposition(weights, scheme)
            tilde = weights.zero_filled(scheme)
            # both halves of the weight-splitting identity
            alpha_pos = np.maximum(tilde[:, 1:], 0).sum(axis=0)
            alpha_neg = -np.minimum(tilde[:, 1:], 0).sum(axis=0)
            assert np.allclose(alpha_pos, alpha_neg, atol=1e-12)
            assert np.allclose(dec.alpha, alpha_pos)
            # bitwise round trip
            assert np.array_equal(dec.reconstruct_zero_filled(scheme.num_groups), tilde)
            # convex weight sums
            for l in range(scheme.num_lowfi):
                if dec.alpha[l] > 0:
                    assert dec.omega_e[l].sum() == pytest.approx(1.0, abs=1e-12)
                    assert dec.omega_mu[l].sum() == pytest.approx(1.0, abs=1e-12)
                    assert np.all(dec.omega_e[l] >= 0) and np.all(dec.omega_mu[l] >= 0)

    def test_optimal_saob_weights_decompose(self):
        rng = np.random.default_rng(31)
        from gacv.allocation import nested_sample_design, saob_groups

        spec = ModelEnsembleSpec(cov=random_model_covariance(5, rng), costs=np.ones(5))
        saob = saob_groups(4, 3)
        design = nested_sample_design([5, 10, 15, 17, 30], saob)
        C = assemble_block_covariance(spec, design)
        weights = optimal_weights(C, saob.scheme)
        dec = acv_decomposition(weights, saob.scheme)
        tilde = weights.zero_filled(saob.scheme)
        assert np.allclose(
            dec.alpha, -np.minimum(tilde[:, 1:], 0).sum(axis=0), atol=1e-10
        )


class TestEnsembleAcv:
    def test_single_replicate_layout(self):
        scheme, weights = ensemble_acv_weights([0.4, -0.3], 1)
        assert scheme.groups == ((0, 1, 2), (1, 2))
        assert np.allclose(weights.per_group[0], [1.0, 0.4, -0.3])
        assert np.allclose(weights.per_group[1], [-0.4, 0.3])
        assert np.abs(check_unbiased(weights, scheme)).max() <= 1e-10

    def test_three_replicates_equal_baseline(self):
        scheme, weights = ensemble_acv_weights([0.5, -0.2], 3)
        assert scheme.num_groups == 6
        for k in range(3):
            assert weights.per_group[k][0] == pytest.approx(1.0 / 3.0)
        assert np.abs(check_unbiased(weights, scheme)).max() <= 1e-10

    def test_variance_scales_as_one_over_k(self):
        # independent identical replicates: variance is 1/K of one replicate
        rng = np.random.default_rng(32)
        cov = random_model_covariance(3, rng)
        spec = ModelEnsembleSpec(cov=cov, costs=np.ones(3))
        alpha = rng.standard_normal(2)
        for K in (1, 2, 4):
            scheme, weights = ensemble_acv_weights(alpha, K)
            counts = [9] * K + [17] * K
            C = independent_block_covariance(spec, scheme, counts)
            vK = estimator_variance(weights, C)
            if K == 1:
                v1 = vK
            else:
                assert vK == pytest.approx(v1 / K, rel=1e-12)
