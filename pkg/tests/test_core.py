import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mlsaem.core import (
    Dataset,
    ThetaParams,
    canonical_name,
    complete_loglik,
    conditional_R,
    gamma_matrix,
    parameter_names,
    posterior_b_moments,
    resolve_beta_name,
    safe_inv,
    theta_from_vector,
    theta_to_vector,
)
from mlsaem.models import get_model

from conftest import conditional_gaussian_oracle, random_theta


def small_data(rng, n=3, K=2, J=4):
    times = np.broadcast_to(np.array([0.5, 1.0, 3.0, 8.0])[:J], (n, K, J)).copy()
    y = rng.uniform(1.0, 8.0, (n, K, J))
    return Dataset(tuple(range(n)), times, y, np.ones((n, K, J), bool), np.full((n, K), 4.0))


class TestGamma:
    def test_block_structure(self):
        th = random_theta(np.random.default_rng(0), 3, 3, "full")
        G = gamma_matrix(th, 3)
        for k in range(3):
            for l in range(3):
                block = G[3 * k:3 * k + 3, 3 * l:3 * l + 3]
                np.testing.assert_allclose(block, th.omega + (th.psi if k == l else 0))

    def test_requires_two_units(self):
        th = random_theta(np.random.default_rng(0), 2, 2)
        with pytest.raises(ValueError):
            gamma_matrix(th, 1)


class TestPosteriorMoments:
    @pytest.mark.parametrize("structure", ["diagonal", "full"])
    def test_matches_conditional_gaussian(self, structure):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p, K = rng.integers(1, 4), rng.integers(2, 5)
            th = random_theta(rng, p, K, structure)
            phi = rng.normal(size=(5, K, p))
            post = posterior_b_moments(phi, th)
            for i in range(5):
                m, V = conditional_gaussian_oracle(phi[i], th)
                np.testing.assert_allclose(post.m[i], m, atol=1e-10, rtol=1e-10)
                np.testing.assert_allclose(post.V, V, atol=1e-10, rtol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(2, 4), st.integers(0, 10**6))
    def test_variance_symmetric_positive(self, p, K, seed):
        th = random_theta(np.random.default_rng(seed), p, K, "full")
        V = posterior_b_moments(np.zeros((1, K, p)), th).V
        np.testing.assert_allclose(V, V.T, atol=0)
        assert np.linalg.eigvalsh(V).min() > 0
        # conditioning never increases the variance
        assert np.linalg.eigvalsh(th.omega - V).min() > -1e-12

    def test_scalar_hand_values(self):
        # Omega = 1, Psi = 1, K = 2: V = 1/3, m = (phi1 + phi2 - beta2 + mu)/3
        th = ThetaParams([0.5], [[0.0], [1.0]], [[1.0]], [[1.0]], 0.1)
        post = posterior_b_moments(np.array([[[2.0], [4.0]]]), th)
        assert post.V[0, 0] == pytest.approx(1 / 3)
        assert post.m[0, 0] == pytest.approx((2.0 + 3.0 + 0.5) / 3)


class TestLikelihoods:
    def test_complete_loglik_matches_scipy(self):
        rng = np.random.default_rng(3)
        model = get_model("theophylline_1cpt_oral", "combined")
        data = small_data(rng)
        th = random_theta(rng, 3, 2, "full")
        phi = th.mu + rng.normal(scale=0.2, size=(3, 2, 3))
        bt = th.mu + rng.normal(scale=0.2, size=(3, 3))
        f = model.predict(data, phi)
        sd = np.sqrt(th.sigma2) * (1 + f)
        ref = stats.norm.logpdf(data.y, f, sd).sum()
        ref += stats.multivariate_normal(th.mu, th.omega).logpdf(bt).sum()
        for k in range(2):
            ref += sum(
                stats.multivariate_normal(bt[i] + th.beta[k], th.psi).logpdf(phi[i, k]) for i in range(3)
            )
        assert complete_loglik(model, data, phi, bt, th) == pytest.approx(ref, rel=1e-12)

    def test_conditional_R_matches_monte_carlo(self):
        rng = np.random.default_rng(4)
        model = get_model("theophylline_1cpt_oral", "constant")
        data = small_data(rng)
        th_prev = random_theta(rng, 3, 2, "full")
        th = random_theta(rng, 3, 2, "full")
        phi = th_prev.mu + rng.normal(scale=0.2, size=(3, 2, 3))
        post = posterior_b_moments(phi, th_prev)
        L = np.linalg.cholesky(post.V)
        draws = np.array([
            complete_loglik(model, data, phi, post.m + rng.normal(size=(3, 3)) @ L.T, th)
            for _ in range(4000)
        ])
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert abs(conditional_R(model, data, phi, th, th_prev) - draws.mean()) < 4 * se


class TestThetaParams:
    def test_first_unit_effect_must_be_zero(self):
        with pytest.raises(ValueError, match="row 1"):
            ThetaParams([0.0], [[0.1], [0.0]], [[1.0]], [[1.0]], 0.1)

    def test_diagonal_structure_enforced(self):
        with pytest.raises(ValueError, match="diagonal"):
            ThetaParams([0, 0], np.zeros((2, 2)), [[1, 0.1], [0.1, 1]], np.eye(2), 0.1)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="semi-definite"):
            ThetaParams([0, 0], np.zeros((2, 2)), [[1, 2], [2, 1]], np.eye(2), 0.1, "full")

    def test_rejects_nonpositive_sigma2(self):
        with pytest.raises(ValueError):
            ThetaParams([0.0], np.zeros((2, 1)), [[1.0]], [[1.0]], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(2, 4), st.sampled_from(["diagonal", "full"]),
           st.integers(0, 10**6))
    def test_vector_round_trip(self, p, K, structure, seed):
        th = random_theta(np.random.default_rng(seed), p, K, structure)
        vec = theta_to_vector(th)
        assert vec.size == len(parameter_names(["x"] * p, K, structure))
        back = theta_from_vector(vec, p, K, structure)
        np.testing.assert_array_equal(theta_to_vector(back), vec)
        np.testing.assert_array_equal(back.omega, th.omega)

    def test_names_for_crossover(self):
        names = parameter_names(("logV", "logKa", "logAUC"), 2)
        assert len(names) == 13
        assert names[3:6] == ["beta2.logV", "beta2.logKa", "beta2.logAUC"]

    def test_beta_alias(self):
        pn = ("logV", "logKa", "logAUC")
        assert resolve_beta_name("beta.logAUC", pn, 2) == (1, 2)
        assert canonical_name("beta.logAUC", pn, 2) == "beta2.logAUC"
        with pytest.raises(KeyError, match="ambiguous"):
            resolve_beta_name("beta.logAUC", pn, 3)
        with pytest.raises(KeyError):
            resolve_beta_name("beta1.logAUC", pn, 2)


class TestSafeInverse:
    def test_floors_singular_matrix(self):
        inv, logdet = safe_inv(np.diag([1.0, 0.0]))
        assert np.all(np.isfinite(inv)) and np.isfinite(logdet)

    def test_exact_for_regular(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        inv, logdet = safe_inv(A)
        np.testing.assert_allclose(inv, np.linalg.inv(A), rtol=1e-12)
        assert logdet == pytest.approx(np.log(np.linalg.det(A)))


class TestDataset:
    def _arrays(self):
        times = np.array([[[0.5, 1.0, 0.0], [0.5, 2.0, 4.0]]])
        mask = np.array([[[True, True, False], [True, True, True]]])
        return times, np.ones_like(times), mask, np.full((1, 2), 4.0)

    def test_ragged_units(self):
        d = Dataset(("s",), *self._arrays())
        np.testing.assert_array_equal(d.n_obs, [[2, 3]])
        assert d.total_obs == 5

    def test_requires_two_units(self):
        t, y, m, dose = self._arrays()
        with pytest.raises(ValueError, match="two units"):
            Dataset(("s",), t[:, :1], y[:, :1], m[:, :1], dose[:, :1])

    def test_times_increasing(self):
        t, y, m, dose = self._arrays()
        t[0, 1, 2] = 1.0
        with pytest.raises(ValueError, match="increasing"):
            Dataset(("s",), t, y, m, dose)

    def test_empty_unit(self):
        t, y, m, dose = self._arrays()
        m[0, 0] = False
        with pytest.raises(ValueError, match="at least one observation"):
            Dataset(("s",), t, y, m, dose)

    def test_fingerprint_sensitive_to_values(self):
        t, y, m, dose = self._arrays()
        a = Dataset(("s",), t, y, m, dose)
        y2 = y.copy()
        y2[0, 0, 0] += 1e-12
        assert a.fingerprint() == Dataset(("s",), t, y, m, dose).fingerprint()
        assert a.fingerprint() != Dataset(("s",), t, y2, m, dose).fingerprint()
