import numpy as np
import pytest

from infomaxvae import autodiff as ad
from infomaxvae import nets, objectives
from util import numeric_grad

rng = np.random.default_rng(99)


def posterior_of(mean, log_var):
    return nets.GaussianPosterior(ad.constant(mean), ad.constant(log_var))


class TestKlTerm:
    def test_standard_normal_posterior_zero_kl(self):
        post = posterior_of(np.zeros((4, 3)), np.zeros((4, 3)))
        kl = objectives.kl_to_standard_normal_per_example(post)
        assert np.allclose(kl.value, 0.0)

    def test_unit_mean_half_nat(self):
        post = posterior_of(np.ones((1, 1)), np.zeros((1, 1)))
        kl = objectives.kl_to_standard_normal_per_example(post)
        assert kl.value[0, 0] == pytest.approx(0.5)

    def test_analytic_matches_monte_carlo(self):
        # KL = E_q[log q(z) - log p(z)], sampled directly from q
        g = np.random.default_rng(4)
        mu = g.uniform(-2, 2, (1, 3))
        log_var = g.uniform(-1, 1, (1, 3))
        sigma = np.exp(0.5 * log_var)

        n = 100_000
        z = mu + sigma * g.standard_normal((n, 3))
        log_q = -0.5 * (np.log(2 * np.pi) + log_var + (z - mu) ** 2 / sigma**2).sum(axis=1)
        log_p = -0.5 * (np.log(2 * np.pi) + z**2).sum(axis=1)
        mc = (log_q - log_p).mean()

        analytic = objectives.kl_to_standard_normal_per_example(
            posterior_of(mu, log_var)).value[0, 0]
        assert analytic == pytest.approx(mc, rel=0.01)


class TestElboTerms:
    def test_recon_ll_matches_direct_formula(self):
        x = rng.integers(0, 2, (5, 7)).astype(np.float64)
        xhat = rng.uniform(0.1, 0.9, (5, 7))
        recon_ll, _ = objectives.elbo_terms(
            ad.constant(x), posterior_of(np.zeros((5, 2)), np.zeros((5, 2))),
            ad.constant(xhat))
        direct = (x * np.log(xhat) + (1 - x) * np.log(1 - xhat)).sum(axis=1).mean()
        assert recon_ll.value[0, 0] == pytest.approx(direct)

    def test_nonfinite_kl_named_in_error(self):
        post = posterior_of(np.zeros((2, 2)), np.full((2, 2), 800.0))
        with np.errstate(over="ignore"):
            with pytest.raises(ad.NumericError, match="kl"):
                objectives.elbo_terms(
                    ad.constant(np.zeros((2, 3))), post,
                    ad.constant(np.full((2, 3), 0.5)))


class TestPermutation:
    def test_identity_never_sampled(self):
        g = np.random.default_rng(0)
        identity = np.arange(4)
        for _ in range(500):
            perm = objectives.sample_batch_permutation(g, 4)
            assert not np.array_equal(perm, identity)

    def test_b2_always_swaps(self):
        g = np.random.default_rng(1)
        for _ in range(20):
            assert objectives.sample_batch_permutation(g, 2).tolist() == [1, 0]

    def test_permute_codes_swap(self):
        z = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        out = objectives.permute_codes(z, [1, 0])
        assert out.value.tolist() == [[3.0, 4.0], [1.0, 2.0]]

    def test_multiset_preserved(self):
        g = np.random.default_rng(2)
        z = g.normal(size=(16, 3))
        perm = objectives.sample_batch_permutation(g, 16)
        out = objectives.permute_codes(ad.constant(z), perm)
        assert np.array_equal(np.sort(out.value, axis=0), np.sort(z, axis=0))

    def test_non_bijection_rejected(self):
        with pytest.raises(ad.GraphError):
            objectives.permute_codes(ad.constant(np.zeros((3, 1))), [0, 1, 1])


class TestMiLowerBound:
    def test_zero_scores_f_dual(self):
        zeros = ad.constant(np.zeros((8, 1)))
        bound = objectives.mi_lower_bound(objectives.kl_f_dual(), zeros, zeros)
        assert bound.value[0, 0] == pytest.approx(-np.exp(-1.0))

    def test_zero_scores_dv(self):
        zeros = ad.constant(np.zeros((8, 1)))
        bound = objectives.mi_lower_bound(objectives.donsker_varadhan(), zeros, zeros)
        assert bound.value[0, 0] == pytest.approx(0.0)

    def test_dv_at_least_f_dual_on_random_scores(self):
        g = np.random.default_rng(8)
        for _ in range(10_000):
            tj = ad.constant(g.uniform(-5, 5, (6, 1)))
            tm = ad.constant(g.uniform(-5, 5, (6, 1)))
            dv = objectives.mi_lower_bound(objectives.donsker_varadhan(), tj, tm)
            fd = objectives.mi_lower_bound(objectives.kl_f_dual(), tj, tm)
            assert dv.value[0, 0] >= fd.value[0, 0] - 1e-12

    def test_bounds_coincide_when_marginal_exp_mean_is_one(self):
        # log u <= u/e with equality at u = e, i.e. mean(exp(t-1)) = 1
        tj = ad.constant(rng.normal(size=(5, 1)))
        ones = ad.constant(np.ones((5, 1)))
        dv = objectives.mi_lower_bound(objectives.donsker_varadhan(), tj, ones)
        fd = objectives.mi_lower_bound(objectives.kl_f_dual(), tj, ones)
        assert dv.value[0, 0] == pytest.approx(fd.value[0, 0], abs=1e-12)

    def test_generic_with_exp_conjugate_matches_f_dual(self):
        spec = objectives.generic_f_dual(
            f=lambda t: t * np.log(t),
            conjugate=lambda node: ad.exp(ad.add_scalar(node, -1.0)))
        tj = ad.constant(rng.normal(size=(6, 1)))
        tm = ad.constant(rng.normal(size=(6, 1)))
        a = objectives.mi_lower_bound(spec, tj, tm).value[0, 0]
        b = objectives.mi_lower_bound(objectives.kl_f_dual(), tj, tm).value[0, 0]
        assert a == b

    def test_generic_rejects_nonconvex_f(self):
        with pytest.raises(ValueError, match="convex"):
            objectives.generic_f_dual(f=lambda t: -((t - 1.0) ** 2),
                                      conjugate=lambda node: node)

    def test_generic_rejects_f_not_zero_at_one(self):
        with pytest.raises(ValueError, match="f\\(1\\)"):
            objectives.generic_f_dual(f=lambda t: t, conjugate=lambda node: node)

    def test_scores_clamped_before_exp(self):
        big = ad.constant(np.full((4, 1), 1e6))
        bound = objectives.mi_lower_bound(objectives.kl_f_dual(), big, big)
        assert np.isfinite(bound.value[0, 0])
        assert bound.value[0, 0] == pytest.approx(50.0 - np.exp(49.0))

    def test_gradients_match_finite_differences(self):
        tj0 = rng.uniform(-2, 2, (5, 1))
        tm0 = rng.uniform(-2, 2, (5, 1))
        for spec in (objectives.kl_f_dual(), objectives.donsker_varadhan()):
            pj, pm = ad.Parameter(tj0), ad.Parameter(tm0)
            ad.backward(objectives.mi_lower_bound(spec, pj, pm))
            for param, base, other_first in ((pj, tj0, True), (pm, tm0, False)):
                def scalar(v):
                    args = (ad.constant(v), ad.constant(tm0)) if other_first \
                        else (ad.constant(tj0), ad.constant(v))
                    return objectives.mi_lower_bound(spec, *args).value[0, 0]
                assert np.allclose(param.grad, numeric_grad(scalar, base), atol=1e-6)

    def test_optimal_critic_recovers_gaussian_mi(self):
        # analytic log density ratio is the optimal DV critic
        rho = 0.8
        n = 200_000
        g = np.random.default_rng(12)
        x = g.standard_normal((n, 1))
        z = rho * x + np.sqrt(1 - rho**2) * g.standard_normal((n, 1))
        mi_true = -0.5 * np.log(1 - rho**2)

        def scores(xs, zs):
            c = 1 - rho**2
            return -0.5 * np.log(c) - rho * (rho * xs**2 + rho * zs**2 - 2 * xs * zs) / (2 * c)

        perm = np.random.default_rng(13).permutation(n)
        bound = objectives.mi_lower_bound(
            objectives.donsker_varadhan(),
            ad.constant(scores(x, z)),
            ad.constant(scores(x, z[perm])))
        assert bound.value[0, 0] == pytest.approx(mi_true, abs=0.03)
        assert bound.value[0, 0] <= mi_true + 0.03


class TestInfomaxLoss:
    def setup_method(self):
        g = np.random.default_rng(31)
        self.x = ad.constant(g.integers(0, 2, (6, 5)).astype(np.float64))
        self.post = posterior_of(g.normal(size=(6, 2)), g.uniform(-1, 1, (6, 2)))
        self.xhat = ad.constant(g.uniform(0.05, 0.95, (6, 5)))

    def test_alpha_zero_beta_one_is_negative_elbo_bitwise(self):
        parts = objectives.infomax_loss(
            objectives.ObjectiveConfig(alpha=0.0, beta=1.0),
            self.x, self.post, self.xhat)
        recon_ll, kl = objectives.elbo_terms(self.x, self.post, self.xhat)
        elbo = recon_ll.value[0, 0] - kl.value[0, 0]
        assert parts.vae_loss.value[0, 0] == -elbo
        assert parts.critic_loss is None

    def test_alpha_zero_beta_four_is_weighted_elbo_bitwise(self):
        parts = objectives.infomax_loss(
            objectives.ObjectiveConfig(alpha=0.0, beta=4.0),
            self.x, self.post, self.xhat)
        recon_ll, kl = objectives.elbo_terms(self.x, self.post, self.xhat)
        assert parts.vae_loss.value[0, 0] == -(recon_ll.value[0, 0] - 4.0 * kl.value[0, 0])

    def test_zero_critic_composition(self):
        zeros = ad.constant(np.zeros((6, 1)))
        parts = objectives.infomax_loss(
            objectives.ObjectiveConfig(alpha=10.0, beta=1.0),
            self.x, self.post, self.xhat, t_joint=zeros, t_marg=zeros)
        recon_ll, kl = objectives.elbo_terms(self.x, self.post, self.xhat)
        expected = -(recon_ll.value[0, 0] - kl.value[0, 0] + 10.0 * (-np.exp(-1.0)))
        assert parts.vae_loss.value[0, 0] == pytest.approx(expected)
        assert parts.critic_loss.value[0, 0] == pytest.approx(np.exp(-1.0))

    def test_missing_scores_with_positive_alpha_rejected(self):
        with pytest.raises(ValueError, match="critic scores"):
            objectives.infomax_loss(objectives.ObjectiveConfig(alpha=1.0),
                                    self.x, self.post, self.xhat)

    def test_negative_coefficients_rejected(self):
        with pytest.raises(ValueError, match="alpha"):
            objectives.ObjectiveConfig(alpha=-1.0)


def brute_force_mmd(a, b, bandwidths, unbiased=True):
    def k(u, v):
        d2 = ((u - v) ** 2).sum()
        return sum(np.exp(-d2 / bw) for bw in bandwidths)

    n, m = len(a), len(b)
    within_a = sum(k(a[i], a[j]) for i in range(n) for j in range(n) if i != j or not unbiased)
    within_b = sum(k(b[i], b[j]) for i in range(m) for j in range(m) if i != j or not unbiased)
    cross = sum(k(a[i], b[j]) for i in range(n) for j in range(m))
    if unbiased:
        return within_a / (n * (n - 1)) + within_b / (m * (m - 1)) - 2 * cross / (n * m)
    return within_a / n**2 + within_b / m**2 - 2 * cross / (n * m)


class TestMmd:
    def test_identical_sets_biased_zero(self):
        a = rng.normal(size=(10, 3))
        m2 = objectives.mmd_squared(ad.constant(a), ad.constant(a), [1.0, 2.0],
                                    unbiased=False)
        assert m2.value[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_biased_nonnegative(self):
        for _ in range(50):
            a = rng.normal(size=(8, 2))
            b = rng.normal(size=(8, 2))
            m2 = objectives.mmd_squared(ad.constant(a), ad.constant(b), [1.0],
                                        unbiased=False)
            assert m2.value[0, 0] >= -1e-12

    def test_matches_double_sum_oracle(self):
        g = np.random.default_rng(5)
        a = g.normal(loc=-10.0, size=(12, 1))
        b = g.normal(loc=10.0, size=(12, 1))
        for unbiased in (True, False):
            ours = objectives.mmd_squared(ad.constant(a), ad.constant(b), [1.0],
                                          unbiased=unbiased).value[0, 0]
            oracle = brute_force_mmd(a, b, [1.0], unbiased=unbiased)
            assert ours == pytest.approx(oracle, rel=1e-10)

    def test_multibandwidth_matches_oracle(self):
        g = np.random.default_rng(6)
        a = g.normal(size=(7, 3))
        b = g.normal(loc=0.5, size=(9, 3))
        bws = objectives.default_mmd_bandwidths(3)
        ours = objectives.mmd_squared(ad.constant(a), ad.constant(b), bws).value[0, 0]
        assert ours == pytest.approx(brute_force_mmd(a, b, bws), rel=1e-10)

    def test_unbiased_needs_two_samples(self):
        with pytest.raises(ValueError, match="at least 2"):
            objectives.mmd_squared(ad.constant(np.zeros((1, 2))),
                                   ad.constant(np.zeros((3, 2))), [1.0])

    def test_gradient_through_samples(self):
        a0 = rng.normal(size=(5, 2))
        b0 = rng.normal(size=(5, 2))

        p = ad.Parameter(a0)
        ad.backward(objectives.mmd_squared(p, ad.constant(b0), [1.0, 4.0]))

        def scalar(v):
            return objectives.mmd_squared(ad.constant(v), ad.constant(b0),
                                          [1.0, 4.0]).value[0, 0]

        assert np.allclose(p.grad, numeric_grad(scalar, a0), atol=1e-6)


class TestMmdInfovaeLoss:
    def setup_method(self):
        g = np.random.default_rng(41)
        self.x = ad.constant(g.integers(0, 2, (6, 5)).astype(np.float64))
        self.post = posterior_of(g.normal(size=(6, 2)), g.uniform(-1, 0, (6, 2)))
        self.xhat = ad.constant(g.uniform(0.05, 0.95, (6, 5)))
        self.z = ad.constant(g.normal(size=(6, 2)))
        self.prior = g.standard_normal((6, 2))

    def test_reduces_to_vanilla_elbo(self):
        cfg = objectives.ObjectiveConfig(mmd_alpha=0.0, mmd_lambda=1.0)
        parts = objectives.mmd_infovae_loss(cfg, self.x, self.post, self.xhat,
                                            self.z, self.prior)
        recon_ll, kl = objectives.elbo_terms(self.x, self.post, self.xhat)
        assert parts.vae_loss.value[0, 0] == -(recon_ll.value[0, 0] - kl.value[0, 0])

    def test_default_config_weights_terms(self):
        cfg = objectives.ObjectiveConfig(mmd_alpha=0.0, mmd_lambda=1000.0)
        parts = objectives.mmd_infovae_loss(cfg, self.x, self.post, self.xhat,
                                            self.z, self.prior)
        recon_ll, kl = objectives.elbo_terms(self.x, self.post, self.xhat)
        m2 = objectives.mmd_squared(self.z, ad.constant(self.prior),
                                    objectives.default_mmd_bandwidths(2)).value[0, 0]
        expected = -recon_ll.value[0, 0] + kl.value[0, 0] + 999.0 * m2
        assert parts.vae_loss.value[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_prior_count_must_match_batch(self):
        cfg = objectives.ObjectiveConfig()
        with pytest.raises(ad.ShapeError, match="prior"):
            objectives.mmd_infovae_loss(cfg, self.x, self.post, self.xhat,
                                        self.z, self.prior[:3])


class TestDecomposedKl:
    def test_prior_posterior_all_zero(self):
        g = np.random.default_rng(15)
        z = g.standard_normal((2000, 2))
        out = objectives.decomposed_kl_terms(np.zeros(2000), z)
        assert out.kl_qzx_p == 0.0
        assert abs(out.kl_qz_p_estimate) < 0.15
        assert out.mi_identity_residual == 0.0

    def test_single_repeated_datapoint(self):
        # one posterior for every x: aggregate equals the conditional
        g = np.random.default_rng(16)
        mu, sigma = 0.7, 0.6
        z = (mu + sigma * g.standard_normal(3000)).reshape(-1, 1)
        kl_analytic = 0.5 * (mu**2 + sigma**2 - 1 - np.log(sigma**2))
        out = objectives.decomposed_kl_terms(np.full(3000, kl_analytic), z)
        assert out.kl_qzx_p == pytest.approx(kl_analytic)
        assert out.kl_qz_p_estimate == pytest.approx(kl_analytic, abs=0.1)

    def test_two_component_mixture_against_quadrature(self):
        # aggregated posterior is an equal mixture of two 1-D Gaussians
        m0, sigma = 1.5, 0.5
        grid = np.linspace(-12, 12, 48001)

        def normal_pdf(v, mean, sd):
            return np.exp(-0.5 * ((v - mean) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))

        q = 0.5 * normal_pdf(grid, -m0, sigma) + 0.5 * normal_pdf(grid, m0, sigma)
        p = normal_pdf(grid, 0.0, 1.0)
        kl_qz_quad = np.trapezoid(q * np.log(q / p), grid)

        kl_qzx = 0.5 * (m0**2 + sigma**2 - 1 - np.log(sigma**2))
        mi_true = kl_qzx - kl_qz_quad  # identity, exact for the 2-point data law

        g = np.random.default_rng(17)
        signs = g.choice([-1.0, 1.0], size=6000)
        z = (signs * m0 + sigma * g.standard_normal(6000)).reshape(-1, 1)

        out = objectives.decomposed_kl_terms(np.full(6000, kl_qzx), z,
                                             mi_estimate=mi_true)
        assert out.kl_qz_p_estimate == pytest.approx(kl_qz_quad, abs=0.1)
        assert abs(out.mi_identity_residual) < 0.1
