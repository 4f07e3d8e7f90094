"""Generator validation, uniformization, truncation, and series tests."""

import math

import numpy as np
import pytest

from ctddc.ctmc import (
    GeneratorError,
    UniformizedPropagator,
    dense_expm_oracle,
    expmv,
    expmvd,
    truncation_point,
    uniformize,
    validate_generator,
)
from ctddc.sparse import CooMatrix, coo_to_csr

from _oracles import (
    generator_from_dense,
    poisson_tail_quantile_mp,
    random_generator,
    random_generator_dense,
    renewal_generator,
    two_state_generator,
    two_state_transition,
)


def csr_from_dense(dense):
    return coo_to_csr(CooMatrix.from_dense(np.asarray(dense, float)))


class TestValidateGenerator:
    def test_two_state_valid(self):
        q = two_state_generator(0.2, 0.1)
        assert q.n_states == 2
        np.testing.assert_allclose(q.exit_rates(), [0.2, 0.1])

    def test_zero_matrix_valid(self):
        q = validate_generator(coo_to_csr(CooMatrix(3, 3, [], [], [])))
        assert q.max_exit_rate() == 0.0

    def test_row_sum_violation(self):
        with pytest.raises(GeneratorError, match="sums to"):
            generator_from_dense([[-1.0, 2.0], [0.5, -0.5]])

    def test_negative_off_diagonal(self):
        with pytest.raises(GeneratorError, match="negative off-diagonal"):
            generator_from_dense([[1.0, -1.0], [0.0, 0.0]])

    def test_missing_diagonal(self):
        csr = csr_from_dense([[0.0, 1.0], [0.0, 0.0]])  # off-diag mass, no diagonal slot
        with pytest.raises(GeneratorError, match="no diagonal"):
            validate_generator(csr)

    def test_not_square(self):
        with pytest.raises(GeneratorError, match="square"):
            validate_generator(coo_to_csr(CooMatrix(2, 3, [], [], [])))


class TestUniformize:
    def test_two_state_closed_form(self):
        alpha, beta, eta = 0.2, 0.1, 0.5
        chain = uniformize(two_state_generator(alpha, beta), eta)
        expected = np.array([
            [1 - alpha / eta, alpha / eta],
            [beta / eta, 1 - beta / eta],
        ])
        np.testing.assert_allclose(chain.jump_matrix.to_dense(), expected, rtol=1e-15)

    def test_renewal_rate_lambda_plus_gamma(self):
        # With eta = lambda + gamma the diagonal is 1 - (lambda*sigma_k + gamma)/eta
        # except in the final state, which has no mileage increment.
        gamma, lam = 0.2, 1.0
        sigmas = np.array([0.0, 0.1, 0.4, 0.6, 0.9])
        eta = lam + gamma
        chain = uniformize(renewal_generator(), eta)
        dense = chain.jump_matrix.to_dense()
        expected_diag = 1 - (lam * sigmas + gamma) / eta
        expected_diag[-1] = 1 - lam * sigmas[-1] / eta
        np.testing.assert_allclose(np.diag(dense), expected_diag, rtol=1e-14)
        np.testing.assert_allclose(dense[1:, 0], lam * sigmas[1:] / eta, rtol=1e-14)
        np.testing.assert_allclose(np.diag(dense, k=1), gamma / eta * np.ones(4), rtol=1e-14)

    def test_zero_generator_identity(self):
        q = validate_generator(coo_to_csr(CooMatrix(3, 3, [], [], [])))
        chain = uniformize(q, 1.0)
        np.testing.assert_array_equal(chain.jump_matrix.to_dense(), np.eye(3))

    def test_rate_below_exit_rate_rejected(self):
        with pytest.raises(GeneratorError, match="below largest exit rate"):
            uniformize(two_state_generator(0.2, 0.1), 0.1)

    def test_rows_stochastic_and_pattern_adds_diagonal(self):
        rng = np.random.default_rng(5)
        q = random_generator(rng, 12, density=0.3)
        chain = uniformize(q)
        sigma = chain.jump_matrix
        np.testing.assert_allclose(sigma.row_sums(), np.ones(12), atol=1e-12)
        assert sigma.values.min() >= 0.0 and sigma.values.max() <= 1.0
        # Reconstruct Q = rate * (Sigma - I) entrywise.
        recon = chain.rate * (sigma.to_dense() - np.eye(12))
        np.testing.assert_allclose(recon, q.matrix.to_dense(), atol=1e-12)
        # Pattern: Q's off-diagonal slots plus a full diagonal.
        off = q.matrix.to_dense().copy()
        np.fill_diagonal(off, 0.0)
        assert sigma.nnz == np.count_nonzero(off) + 12


class TestTruncationPoint:
    def test_zero_rate(self):
        assert truncation_point(0.0, 1e-10) == 0

    def test_against_extended_precision_oracle(self):
        assert truncation_point(1.3, 1e-10) == poisson_tail_quantile_mp(1.3, 1e-10)

    def test_large_rate_exceeds_mean(self):
        j = truncation_point(160.0, 1e-12)
        assert j == poisson_tail_quantile_mp(160.0, 1e-12)
        assert j > 160

    def test_boundary_invariant(self):
        import mpmath

        for rate, eps in [(0.5, 1e-8), (7.0, 1e-12), (42.0, 1e-10)]:
            j = truncation_point(rate, eps)
            with mpmath.workdps(50):
                cdf_j = mpmath.gammainc(j + 1, rate, regularized=True)
                assert 1 - cdf_j < eps
                if j > 0:
                    cdf_prev = mpmath.gammainc(j, rate, regularized=True)
                    assert 1 - cdf_prev >= eps

    def test_monotone_in_rate_and_tolerance(self):
        rates = [0.1, 1.0, 5.0, 20.0, 100.0]
        js = [truncation_point(r, 1e-10) for r in rates]
        assert js == sorted(js)
        eps_seq = [1e-4, 1e-8, 1e-12]
        js = [truncation_point(3.0, e) for e in eps_seq]
        assert js == sorted(js)

    def test_rate_guard(self):
        with pytest.raises(GeneratorError, match="exceeds"):
            truncation_point(800.0, 1e-10)

    def test_budget_records_smallest_count(self):
        import mpmath

        from ctddc.ctmc import truncation_budget

        budget = truncation_budget(12.5, 1e-9)
        with mpmath.workdps(50):
            cdf = mpmath.gammainc(budget.n_terms + 1, 12.5, regularized=True)
            assert 1 - cdf < budget.tolerance
            cdf_prev = mpmath.gammainc(budget.n_terms, 12.5, regularized=True)
            assert 1 - cdf_prev >= budget.tolerance

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            truncation_point(1.0, 0.0)
        with pytest.raises(ValueError):
            truncation_point(-1.0, 1e-8)


class TestExpmv:
    def test_zero_generator_is_identity(self):
        q = validate_generator(coo_to_csr(CooMatrix(4, 4, [], [], [])))
        v = np.array([0.1, 0.2, 0.3, 0.4])
        for delta in [0.0, 1.0, 7.5]:
            np.testing.assert_allclose(expmv(q, delta, v), v, rtol=1e-12)

    def test_two_state_closed_form_entry(self):
        alpha, beta, delta = 0.2, 0.1, 1.0
        q = two_state_generator(alpha, beta)
        mu = expmv(q, delta, np.array([1.0, 0.0]), eps=1e-14)
        expected = beta / (alpha + beta) + alpha / (alpha + beta) * math.exp(-(alpha + beta) * delta)
        assert abs(mu[0] - expected) <= 1e-12

    def test_renewal_basis_vector(self):
        q = renewal_generator()
        e0 = np.zeros(5)
        e0[0] = 1.0
        mu = expmv(q, 1.0, e0, eps=1e-12)
        assert mu.min() >= 0.0
        assert abs(mu.sum() - 1.0) <= 1e-12
        oracle = dense_expm_oracle(q, 1.0)
        assert np.abs(mu - oracle[0, :]).sum() <= 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            expmv(renewal_generator(), 1.0, np.ones(4))

    def test_invalid_eps(self):
        with pytest.raises(ValueError, match="eps"):
            expmv(renewal_generator(), 1.0, np.ones(5), eps=2.0)

    def test_probability_mass_within_eps(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            q = random_generator(rng, n)
            v = rng.random(n)
            v /= v.sum()
            for eps in (1e-6, 1e-10, 1e-12):
                mu = expmv(q, 1.0, v, eps=eps)
                assert mu.min() >= 0.0
                assert 1.0 - mu.sum() <= eps
                assert mu.sum() <= 1.0 + 1e-13

    def test_semigroup_property(self):
        rng = np.random.default_rng(29)
        eps = 1e-12
        for _ in range(10):
            n = int(rng.integers(2, 64))
            q = random_generator(rng, n)
            v = rng.random(n)
            v /= v.sum()
            d1, d2 = rng.uniform(0.2, 1.5, size=2)
            once = expmv(q, d1 + d2, v, eps=eps)
            twice = expmv(q, d2, expmv(q, d1, v, eps=eps), eps=eps)
            assert np.abs(once - twice).sum() <= 3 * eps

    def test_uniform_rate_invariance(self):
        rng = np.random.default_rng(31)
        eps = 1e-12
        q = random_generator(rng, 15)
        v = rng.random(15)
        v /= v.sum()
        base = q.max_exit_rate()
        a = expmv(q, 1.0, v, eps=eps, rate=base * 1.0000001)
        b = expmv(q, 1.0, v, eps=eps, rate=base * 3.0)
        assert np.abs(a - b).sum() <= 2 * eps

    def test_arbitrary_vectors_by_linearity(self):
        rng = np.random.default_rng(37)
        q = random_generator(rng, 10)
        v = rng.normal(size=10)
        oracle = dense_expm_oracle(q, 0.7).T @ v
        np.testing.assert_allclose(expmv(q, 0.7, v), oracle, atol=1e-10)


def two_state_row0_dalpha(alpha, beta, delta):
    """d/d(alpha) of the first row of the two-state transition matrix.

    Differentiating p00 = beta/s + (alpha/s) e^{-s delta} with s = alpha +
    beta; p01 = 1 - p00 has the opposite derivative.
    """
    s = alpha + beta
    e = math.exp(-s * delta)
    dp00 = -beta / s**2 + (beta / s**2) * e - (alpha / s) * delta * e
    return np.array([dp00, -dp00])


class TestExpmvd:
    def test_zero_derivative_family(self):
        q = renewal_generator()
        dq = coo_to_csr(CooMatrix(5, 5, [], [], []))
        v = np.zeros(5)
        v[1] = 1.0
        mu, dmu = expmvd(q, [dq], 1.0, v)
        np.testing.assert_array_equal(dmu[0], np.zeros(5))
        np.testing.assert_array_equal(mu, expmv(q, 1.0, v))

    def test_mu_bit_identical_to_expmv(self):
        rng = np.random.default_rng(41)
        q = random_generator(rng, 20)
        dq = csr_from_dense(random_generator_dense(rng, 20, density=0.2))
        v = rng.random(20)
        v /= v.sum()
        mu_plain = expmv(q, 1.3, v)
        mu_joint, _ = expmvd(q, [dq], 1.3, v)
        assert np.array_equal(mu_plain, mu_joint)

    def test_two_state_symbolic_derivative(self):
        alpha, beta, delta = 0.2, 0.1, 1.0
        q = two_state_generator(alpha, beta)
        dq = csr_from_dense([[-1.0, 1.0], [0.0, 0.0]])  # d/d(alpha) of the generator
        e0 = np.array([1.0, 0.0])
        _, dmu = expmvd(q, [dq], delta, e0, eps=1e-14)
        symbolic = two_state_row0_dalpha(alpha, beta, delta)
        np.testing.assert_allclose(dmu[0], symbolic, atol=1e-12)
        # Cross-check the hand derivation itself by finite differences.
        h = 1e-6
        fd = (two_state_transition(alpha + h, beta, delta)[0, :]
              - two_state_transition(alpha - h, beta, delta)[0, :]) / (2 * h)
        np.testing.assert_allclose(symbolic, fd, atol=1e-9)

    def test_renewal_gamma_derivative_finite_difference(self):
        gamma, lam = 0.2, 1.0
        sigmas = np.array([0.0, 0.1, 0.4, 0.6, 0.9])

        def q_dense(g):
            dense = np.zeros((5, 5))
            for k in range(4):
                dense[k, k + 1] = g
            for k in range(1, 5):
                dense[k, 0] = lam * sigmas[k]
            np.fill_diagonal(dense, 0.0)
            np.fill_diagonal(dense, -dense.sum(axis=1))
            return dense

        dq_dense = np.zeros((5, 5))
        for k in range(4):
            dq_dense[k, k + 1] = 1.0
            dq_dense[k, k] = -1.0
        q = generator_from_dense(q_dense(gamma))
        v = np.zeros(5)
        v[2] = 1.0
        _, dmu = expmvd(q, [csr_from_dense(dq_dense)], 1.0, v)

        h = 1e-6
        fd = (expmv(generator_from_dense(q_dense(gamma + h)), 1.0, v)
              - expmv(generator_from_dense(q_dense(gamma - h)), 1.0, v)) / (2 * h)
        err = np.abs(dmu[0] - fd)
        assert np.all(err <= np.maximum(1e-6 * np.abs(fd), 1e-9))

    def test_random_families_against_finite_differences(self):
        rng = np.random.default_rng(43)
        for _ in range(10):
            n = int(rng.integers(2, 25))
            base = random_generator_dense(rng, n, density=0.5)
            direction = np.zeros((n, n))
            mask = (base != 0) & ~np.eye(n, dtype=bool)
            direction[mask] = rng.uniform(-0.3, 0.3, size=mask.sum())
            np.fill_diagonal(direction, -direction.sum(axis=1))
            q = generator_from_dense(base + 0.5 * base * 0)  # base itself
            v = rng.random(n)
            v /= v.sum()
            _, dmu = expmvd(q, [csr_from_dense(direction)], 0.9, v)

            h = 1e-6
            hi = generator_from_dense(base + h * direction)
            lo = generator_from_dense(base - h * direction)
            fd = (expmv(hi, 0.9, v) - expmv(lo, 0.9, v)) / (2 * h)
            err = np.abs(dmu[0] - fd)
            assert np.all(err <= np.maximum(1e-6 * np.abs(fd), 1e-9))

    def test_derivative_rows_must_sum_to_zero(self):
        q = two_state_generator(0.2, 0.1)
        bad = csr_from_dense([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(GeneratorError, match="sum to zero"):
            expmvd(q, [bad], 1.0, np.array([1.0, 0.0]))

    def test_multiple_parameters_share_stream(self):
        rng = np.random.default_rng(47)
        n = 12
        base = random_generator_dense(rng, n, density=0.5)
        q = generator_from_dense(base)
        dirs = []
        for _ in range(3):
            d = np.zeros((n, n))
            mask = (base != 0) & ~np.eye(n, dtype=bool)
            d[mask] = rng.uniform(-0.2, 0.2, size=mask.sum())
            np.fill_diagonal(d, -d.sum(axis=1))
            dirs.append(d)
        v = rng.random(n)
        v /= v.sum()
        _, dmu = expmvd(q, [csr_from_dense(d) for d in dirs], 1.1, v)
        for d, got in zip(dirs, dmu):
            _, one = expmvd(q, [csr_from_dense(d)], 1.1, v)
            np.testing.assert_array_equal(got, one[0])


class TestDenseOracle:
    def test_zero_generator(self):
        q = validate_generator(coo_to_csr(CooMatrix(3, 3, [], [], [])))
        np.testing.assert_array_equal(dense_expm_oracle(q, 2.0), np.eye(3))

    def test_two_state_closed_form(self):
        for alpha, beta, delta in [(0.2, 0.1, 1.0), (1.5, 0.7, 0.3), (3.0, 2.0, 2.0)]:
            q = two_state_generator(alpha, beta)
            np.testing.assert_allclose(
                dense_expm_oracle(q, delta),
                two_state_transition(alpha, beta, delta),
                atol=1e-12,
            )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(53)
        q = random_generator(rng, 30)
        p = dense_expm_oracle(q, 1.7)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(30), atol=1e-10)
        assert p.min() >= -1e-14

    def test_consistent_with_series_rows(self):
        q = renewal_generator()
        oracle = dense_expm_oracle(q, 1.0)
        assembled = np.vstack([
            expmv(q, 1.0, np.eye(5)[k], eps=1e-13) for k in range(5)
        ])
        np.testing.assert_allclose(assembled[0], oracle[0], atol=1e-11)

    def test_state_guard(self):
        q = validate_generator(coo_to_csr(CooMatrix(201, 201, [], [], [])))
        with pytest.raises(GeneratorError, match="limited"):
            dense_expm_oracle(q, 1.0)


def test_propagator_reuse_matches_individual_calls():
    rng = np.random.default_rng(59)
    q = random_generator(rng, 8)
    prop = UniformizedPropagator(q, 1.2, eps=1e-12)
    for _ in range(4):
        v = rng.random(8)
        v /= v.sum()
        np.testing.assert_array_equal(prop.distribution_action(v), expmv(q, 1.2, v, eps=1e-12))


class TestMatrixAction:
    def test_columns_match_dense_oracle(self):
        rng = np.random.default_rng(67)
        q = random_generator(rng, 9)
        prop = UniformizedPropagator(q, 0.8, eps=1e-13)
        oracle = dense_expm_oracle(q, 0.8)
        for l in range(9):
            col = prop.matrix_action(np.eye(9)[l])
            np.testing.assert_allclose(col, oracle[:, l], atol=1e-11)

    def test_column_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(71)
        n = 7
        base = random_generator_dense(rng, n, density=0.6)
        d = np.zeros((n, n))
        mask = (base != 0) & ~np.eye(n, dtype=bool)
        d[mask] = rng.uniform(-0.3, 0.3, size=mask.sum())
        np.fill_diagonal(d, -d.sum(axis=1))
        prop = UniformizedPropagator(generator_from_dense(base), 1.0, eps=1e-13)
        e2 = np.eye(n)[2]
        _, dcols = prop.matrix_action_with_derivatives(e2, [csr_from_dense(d)])
        h = 1e-6
        hi = UniformizedPropagator(generator_from_dense(base + h * d), 1.0, eps=1e-13)
        lo = UniformizedPropagator(generator_from_dense(base - h * d), 1.0, eps=1e-13)
        fd = (hi.matrix_action(e2) - lo.matrix_action(e2)) / (2 * h)
        assert np.all(np.abs(dcols[0] - fd) <= np.maximum(1e-6 * np.abs(fd), 1e-9))


def test_gradient_check_random_families():
    # Central-difference agreement at max(1e-6 rel, 1e-9 abs) across random
    # valid generator families.
    rng = np.random.default_rng(61)
    for _ in range(5):
        n = int(rng.integers(3, 30))
        base = random_generator_dense(rng, n, density=0.4)
        d = np.zeros((n, n))
        mask = (base != 0) & ~np.eye(n, dtype=bool)
        d[mask] = rng.uniform(-0.4, 0.4, size=mask.sum())
        np.fill_diagonal(d, -d.sum(axis=1))
        q = generator_from_dense(base)
        v = rng.random(n)
        v /= v.sum()
        _, dmu = expmvd(q, [csr_from_dense(d)], 1.0, v)
        h = 1e-6
        fd = (expmv(generator_from_dense(base + h * d), 1.0, v)
              - expmv(generator_from_dense(base - h * d), 1.0, v)) / (2 * h)
        assert np.all(np.abs(dmu[0] - fd) <= np.maximum(1e-6 * np.abs(fd), 1e-9))
