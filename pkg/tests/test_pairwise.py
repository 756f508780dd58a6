"""Pairwise densities: MC estimators, exact sums, quadrature oracle, gradients."""

import math

import numpy as np
import pytest
from scipy import stats as sps

from trawlkit.dist import (
    Gamma,
    Gaussian,
    InverseGaussian,
    NegativeBinomial,
    NormalInverseGaussian,
    Poisson,
    Skellam,
    UnsupportedError,
    param_fd_gradient,
)
from trawlkit.pairwise import (
    GammaPairBatch,
    PairContext,
    _skellam_two_sided_sum,
    adaptive_sample_size,
    discrete_pair_gradient,
    gaussian_pair_density,
    gaussian_pair_loggrad,
    pair_context,
    pairwise_density_discrete,
    pairwise_density_mc,
    pairwise_density_quadrature,
    pairwise_logdensity_and_grad,
)
from trawlkit.trawl import ExponentialTrawl, GammaTrawl, ModelSpec

GAMMA_MODEL = ModelSpec(Gamma(3.0, 0.75), ExponentialTrawl(0.25))
GAUSS_MODEL = ModelSpec(Gaussian(0.4, 1.1), ExponentialTrawl(0.5))


def bvn_logpdf(xs, xt, m, v, c):
    cov = np.array([[v, c], [c, v]])
    return float(sps.multivariate_normal(mean=[m, m], cov=cov).logpdf([xs, xt]))


# ---------------------------------------------------------------------------
# Gaussian seeds: closed form as the oracle
# ---------------------------------------------------------------------------


def test_gaussian_closed_form_matches_scipy_bvn():
    ctx = pair_context(GAUSS_MODEL, 1.2, -0.3, 0.7)
    seed, tf = GAUSS_MODEL.seed, GAUSS_MODEL.trawl
    area = tf.total_area()
    ref = bvn_logpdf(1.2, -0.3, seed.mu * area, seed.sigma**2 * area, seed.sigma**2 * ctx.slices.s_common)
    logp, _ = gaussian_pair_loggrad(ctx)
    assert logp == pytest.approx(ref, rel=1e-12)


def test_gaussian_loggrad_matches_fd():
    ctx = pair_context(GAUSS_MODEL, 1.2, -0.3, 0.7)

    def logp(theta):
        model = GAUSS_MODEL.with_theta(theta)
        return np.array(gaussian_pair_loggrad(pair_context(model, 1.2, -0.3, 0.7))[0])

    fd = param_fd_gradient(logp, GAUSS_MODEL.theta)
    np.testing.assert_allclose(gaussian_pair_loggrad(ctx)[1], fd.ravel(), rtol=1e-6, atol=1e-8)


def test_gaussian_quadrature_matches_closed_form():
    for (xs, xt, h) in [(1.2, -0.3, 0.7), (0.1, 0.2, 1.5), (-1.0, 2.0, 0.2)]:
        ctx = pair_context(GAUSS_MODEL, xs, xt, h)
        assert pairwise_density_quadrature(ctx) == pytest.approx(gaussian_pair_density(ctx), rel=1e-8)


def test_gaussian_mc_matches_closed_form():
    rng = np.random.default_rng(0)
    ctx = pair_context(GAUSS_MODEL, 1.2, -0.3, 0.7)
    est = pairwise_density_mc(ctx, 100_000, rng)
    truth = gaussian_pair_density(ctx)
    assert abs(est.value - truth) < 3.0 * est.std_error


def test_gaussian_grad_estimators_match_fd_of_quadrature():
    ctx = pair_context(GAUSS_MODEL, 1.2, -0.3, 0.7)
    truth = gaussian_pair_loggrad(ctx)[1]
    for method in ("pg", "sf"):
        res = pairwise_logdensity_and_grad(ctx, 60_000, np.random.default_rng(1), method=method)
        assert np.all(np.abs(res.gradient - truth) < 4.0 * res.gradient_se + 1e-8)


# ---------------------------------------------------------------------------
# Gamma seeds
# ---------------------------------------------------------------------------


def test_gamma_mc_matches_quadrature_at_spec_point():
    ctx = pair_context(GAMMA_MODEL, 16.0, 16.0, 1.0)
    oracle = pairwise_density_quadrature(ctx)
    est = pairwise_density_mc(ctx, 200_000, np.random.default_rng(2))
    assert abs(est.value - oracle) < 3.0 * est.std_error


@pytest.mark.parametrize("cv_degree", [0, 1, 2, 3])
def test_gamma_mc_cv_consistency(cv_degree):
    ctx = pair_context(GAMMA_MODEL, 10.0, 20.0, 2.0)
    oracle = pairwise_density_quadrature(ctx)
    est = pairwise_density_mc(ctx, 50_000, np.random.default_rng(3), cv_degree=cv_degree)
    assert abs(est.value - oracle) < 4.0 * max(est.std_error, 1e-12)
    if cv_degree > 0:
        plain = pairwise_density_mc(ctx, 50_000, np.random.default_rng(3))
        assert est.std_error < plain.std_error


def test_gamma_independence_limit():
    model = GAMMA_MODEL
    h = 80.0  # rho = e^{-20} << 1e-6
    assert model.trawl.acf(h) < 1e-6
    ctx = pair_context(model, 10.0, 14.0, h)
    marg = model.marginal()
    prod = float(marg.density(10.0) * marg.density(14.0))
    assert pairwise_density_quadrature(ctx) == pytest.approx(prod, rel=1e-6)
    est = pairwise_density_mc(ctx, 50_000, np.random.default_rng(4))
    assert abs(est.value - prod) < 4.0 * est.std_error + 1e-6 * prod


def test_gamma_out_of_support_flag():
    ctx = pair_context(GAMMA_MODEL, -1.0, 5.0, 1.0)
    est = pairwise_density_mc(ctx, 100, np.random.default_rng(0))
    assert est.value == 0.0 and est.out_of_support


def test_gamma_batch_integrand_gradient_matches_fd():
    h = 1.0
    x_a, x_b = np.array([10.0, 16.0]), np.array([14.0, 16.0])
    batch = GammaPairBatch(GAMMA_MODEL, x_a, x_b, h)
    z = batch.sample(np.random.default_rng(5), 3)
    got = batch.grad_theta_f(z)

    def f_at(theta):
        b = GammaPairBatch(GAMMA_MODEL.with_theta(theta), x_a, x_b, h)
        return b.f(z)

    fd = param_fd_gradient(f_at, GAMMA_MODEL.theta)
    np.testing.assert_allclose(got, fd, rtol=5e-6, atol=1e-12)


def test_gamma_batch_dfdz_matches_fd():
    batch = GammaPairBatch(GAMMA_MODEL, 10.0, 14.0, 1.0)
    z = np.array([[0.3, 0.6]])
    hstep = 1e-6
    fd = (batch.f(z + hstep) - batch.f(z - hstep)) / (2 * hstep)
    np.testing.assert_allclose(batch.dfdz(z), fd, rtol=1e-6)


def test_gamma_batch_pathwise_matches_quantile_fd():
    batch = GammaPairBatch(GAMMA_MODEL, 10.0, 14.0, 1.0)
    u = np.array([[0.3, 0.7]])
    z = batch.from_uniforms(u)
    got = batch.pathwise(z)

    def z_at(theta):
        return GammaPairBatch(GAMMA_MODEL.with_theta(theta), 10.0, 14.0, 1.0).from_uniforms(u)

    fd = param_fd_gradient(z_at, GAMMA_MODEL.theta)
    np.testing.assert_allclose(got, fd, rtol=2e-5, atol=1e-7)


def test_gamma_batch_taylor_gradients_match_fd():
    batch = GammaPairBatch(GAMMA_MODEL, 10.0, 14.0, 1.0)
    coef, dcoef = batch.taylor_pieces(3)
    z0 = batch.z0

    def coef_at(theta):
        b = GammaPairBatch(GAMMA_MODEL.with_theta(theta), 10.0, 14.0, 1.0)
        # hold the expansion point fixed while differentiating
        b.z0 = z0
        return b.taylor_pieces(3)[0]

    fd = param_fd_gradient(coef_at, GAMMA_MODEL.theta)
    np.testing.assert_allclose(dcoef, fd, rtol=2e-5, atol=1e-10)


def test_gamma_loggrad_matches_crn_fd_of_log_density():
    ctx = pair_context(GAMMA_MODEL, 10.0, 14.0, 1.0)
    n = 100_000
    u = np.random.default_rng(6).uniform(size=(1, n))
    res = pairwise_logdensity_and_grad(ctx, n, None, method="pg", cv_degree=2, u=u)

    def logp(theta):
        model = GAMMA_MODEL.with_theta(theta)
        batch = GammaPairBatch(model, 10.0, 14.0, 1.0)
        return np.array(math.log(float(batch.f(batch.from_uniforms(u)).mean())))

    fd = param_fd_gradient(logp, GAMMA_MODEL.theta).ravel()
    np.testing.assert_allclose(res.gradient, fd, rtol=0.01, atol=2e-4)


def test_gamma_sf_pg_agree_and_pg_wins_on_variance():
    ctx = pair_context(GAMMA_MODEL, 10.0, 14.0, 1.0)
    n = 60_000
    pg = pairwise_logdensity_and_grad(ctx, n, np.random.default_rng(7), method="pg")
    sf = pairwise_logdensity_and_grad(ctx, n, np.random.default_rng(8), method="sf")
    joint = np.sqrt(pg.gradient_se**2 + sf.gradient_se**2)
    assert np.all(np.abs(pg.gradient - sf.gradient) < 4.0 * joint)
    # q does not depend on the rate: identical error bars there, PG wins elsewhere
    assert pg.gradient_se[0] < sf.gradient_se[0]
    assert pg.gradient_se[2] < sf.gradient_se[2]


def test_gamma_delta_method_coverage():
    ctx = pair_context(GAMMA_MODEL, 10.0, 14.0, 1.0)
    truth = math.log(pairwise_density_quadrature(ctx))
    rng = np.random.default_rng(9)
    hits = 0
    reps = 200
    for _ in range(reps):
        res = pairwise_logdensity_and_grad(ctx, 600, rng, method="pg")
        if abs(res.log_density - truth) <= 3.0 * res.log_se:
            hits += 1
    assert hits >= 0.98 * reps


def test_nonpositive_density_estimate_raises():
    ctx = pair_context(GAMMA_MODEL, 10.0, 14.0, 1.0)
    batch = GammaPairBatch(ctx.model, ctx.x_s, ctx.x_t, ctx.h)
    stats_bad = batch.estimate(batch.sample(np.random.default_rng(0), 50), cv_degree=0)
    stats_bad.density = np.array([-0.1])
    with pytest.raises(RuntimeError, match="control degree|sample size"):
        batch.log_likelihood_terms(stats_bad)


# ---------------------------------------------------------------------------
# discrete seeds
# ---------------------------------------------------------------------------


def _poisson_brute_force(ctx):
    nu = ctx.model.seed.lam
    s = ctx.slices
    tot = 0.0
    for k in range(0, int(min(ctx.x_s, ctx.x_t)) + 1):
        tot += (
            sps.poisson.pmf(k, nu * s.s_common)
            * sps.poisson.pmf(ctx.x_t - k, nu * s.s_right)
            * sps.poisson.pmf(ctx.x_s - k, nu * s.s_left)
        )
    return tot


def test_poisson_pairwise_matches_brute_force():
    model = ModelSpec(Poisson(1.0), ExponentialTrawl(1.0))
    ctx = pair_context(model, 0.0, 0.0, math.log(2.0))
    # slices are (0.5, 0.5, 0.5); the single k = 0 term is e^{-nu * 1.5}
    assert ctx.slices.s_common == pytest.approx(0.5)
    assert pairwise_density_discrete(ctx) == pytest.approx(math.exp(-1.5), abs=1e-14)
    rng = np.random.default_rng(10)
    for _ in range(50):
        xs, xt = rng.integers(0, 9, size=2)
        h = rng.uniform(0.2, 3.0)
        ctx = pair_context(model, float(xs), float(xt), h)
        assert pairwise_density_discrete(ctx) == pytest.approx(_poisson_brute_force(ctx), abs=1e-14)


def test_poisson_single_feasible_term():
    model = ModelSpec(Poisson(2.0), ExponentialTrawl(1.0))
    ctx = pair_context(model, 0.0, 5.0, 0.8)
    s = ctx.slices
    nu = 2.0
    expect = (
        sps.poisson.pmf(0, nu * s.s_common)
        * sps.poisson.pmf(5, nu * s.s_right)
        * sps.poisson.pmf(0, nu * s.s_left)
    )
    assert pairwise_density_discrete(ctx) == pytest.approx(expect, abs=1e-16)


def test_discrete_symmetry():
    for seed in (Poisson(1.7), NegativeBinomial(2.0, 0.4), Skellam(1.0, 1.0)):
        model = ModelSpec(seed, ExponentialTrawl(0.8))
        a = pairwise_density_discrete(pair_context(model, 2.0, 5.0, 1.1))
        b = pairwise_density_discrete(pair_context(model, 5.0, 2.0, 1.1))
        assert a == pytest.approx(b, rel=1e-13)
    m = ModelSpec(Skellam(1.0, 1.0), ExponentialTrawl(0.8))
    a = pairwise_density_discrete(pair_context(m, -2.0, 3.0, 1.1))
    b = pairwise_density_discrete(pair_context(m, 3.0, -2.0, 1.1))
    assert a == pytest.approx(b, rel=1e-13)


def test_poisson_marginalisation():
    model = ModelSpec(Poisson(1.5), ExponentialTrawl(1.0))
    marg = model.marginal()
    xs = 3.0
    tot = sum(
        pairwise_density_discrete(pair_context(model, xs, float(xt), 0.9)) for xt in range(0, 60)
    )
    assert tot == pytest.approx(float(marg.density(xs)), abs=1e-10)


def test_skellam_tail_threshold_stability():
    model = ModelSpec(Skellam(1.0, 1.3), ExponentialTrawl(0.7))
    ctx = pair_context(model, 1.0, -2.0, 0.9)
    full = _skellam_two_sided_sum(ctx, tail=1e-14)
    half = _skellam_two_sided_sum(ctx, tail=5e-15)
    assert abs(full - half) < 1e-10


def test_discrete_non_integer_rejected():
    model = ModelSpec(Poisson(1.0), ExponentialTrawl(1.0))
    with pytest.raises(ValueError):
        pairwise_density_discrete(pair_context(model, 0.5, 1.0, 1.0))


def test_discrete_exact_gradient_matches_fd():
    for seed in (Poisson(1.7), NegativeBinomial(2.0, 0.4), Skellam(1.2, 0.9)):
        model = ModelSpec(seed, ExponentialTrawl(0.8))
        ctx = pair_context(model, 3.0, 1.0, 1.1)
        p, grad = discrete_pair_gradient(ctx)
        assert p == pytest.approx(pairwise_density_discrete(ctx), rel=1e-12)

        def p_at(theta, model=model):
            m = model.with_theta(theta)
            return np.array(pairwise_density_discrete(pair_context(m, 3.0, 1.0, 1.1)))

        fd = param_fd_gradient(p_at, model.theta)
        np.testing.assert_allclose(grad, fd.ravel(), rtol=1e-5, atol=1e-10)


@pytest.mark.parametrize(
    "seed,method",
    [(Poisson(1.7), "mvg"), (Skellam(1.2, 0.9), "mvg"), (NegativeBinomial(2.0, 0.4), "hybrid")],
)
def test_discrete_grad_estimators_match_exact(seed, method):
    model = ModelSpec(seed, ExponentialTrawl(0.8))
    ctx = pair_context(model, 3.0, 1.0, 1.1)
    p, grad = discrete_pair_gradient(ctx)
    truth = grad / p
    res = pairwise_logdensity_and_grad(ctx, 150_000, np.random.default_rng(11), method=method)
    assert res.method == method
    assert np.all(np.abs(res.gradient - truth) < 4.0 * res.gradient_se + 1e-8)
    assert res.log_density == pytest.approx(math.log(p), abs=4.0 * res.log_se + 1e-8)


def test_auto_method_dispatch():
    cases = [
        (Poisson(1.0), "mvg"),
        (Skellam(1.0, 1.0), "mvg"),
        (NegativeBinomial(2.0, 0.4), "hybrid"),
    ]
    for seed, want in cases:
        model = ModelSpec(seed, ExponentialTrawl(1.0))
        res = pairwise_logdensity_and_grad(pair_context(model, 2.0, 1.0, 1.0), 2000, np.random.default_rng(0))
        assert res.method == want


# ---------------------------------------------------------------------------
# other continuous seeds
# ---------------------------------------------------------------------------


def test_inverse_gaussian_mc_matches_quadrature():
    model = ModelSpec(InverseGaussian(1.2, 2.0), ExponentialTrawl(0.6))
    ctx = pair_context(model, 1.5, 2.4, 0.9)
    oracle = pairwise_density_quadrature(ctx)
    est = pairwise_density_mc(ctx, 150_000, np.random.default_rng(12))
    assert abs(est.value - oracle) < 3.0 * est.std_error


def test_inverse_gaussian_grad_matches_fd_of_quadrature():
    model = ModelSpec(InverseGaussian(1.2, 2.0), ExponentialTrawl(0.6))
    ctx = pair_context(model, 1.5, 2.4, 0.9)

    def logp(theta):
        m = model.with_theta(theta)
        return np.array(math.log(pairwise_density_quadrature(pair_context(m, 1.5, 2.4, 0.9))))

    truth = param_fd_gradient(logp, model.theta).ravel()
    res = pairwise_logdensity_and_grad(ctx, 120_000, np.random.default_rng(13), method="pg")
    assert np.all(np.abs(res.gradient - truth) < 4.0 * res.gradient_se + 1e-6)


def test_nig_mc_matches_quadrature():
    model = ModelSpec(NormalInverseGaussian(2.0, 0.5, 1.0, 0.1), ExponentialTrawl(0.6))
    ctx = pair_context(model, 0.5, 1.2, 0.9)
    oracle = pairwise_density_quadrature(ctx)
    est = pairwise_density_mc(ctx, 60_000, np.random.default_rng(14))
    assert abs(est.value - oracle) < 3.0 * est.std_error


def test_nig_sf_grad_matches_fd_of_quadrature():
    model = ModelSpec(NormalInverseGaussian(2.0, 0.5, 1.0, 0.1), ExponentialTrawl(0.6))
    ctx = pair_context(model, 0.5, 1.2, 0.9)

    def logp(theta):
        m = model.with_theta(theta)
        return np.array(math.log(pairwise_density_quadrature(pair_context(m, 0.5, 1.2, 0.9), tol=1e-10)))

    truth = param_fd_gradient(logp, model.theta).ravel()
    res = pairwise_logdensity_and_grad(ctx, 120_000, np.random.default_rng(15), method="sf")
    assert res.method == "sf"
    assert np.all(np.abs(res.gradient - truth) < 4.0 * res.gradient_se + 1e-5)


def test_gaussian_long_memory_model_grad():
    model = ModelSpec(Gaussian(0.4, 1.1), GammaTrawl(1.25, 1.0))
    ctx = pair_context(model, 1.2, -0.3, 0.7)
    truth = gaussian_pair_loggrad(ctx)[1]
    res = pairwise_logdensity_and_grad(ctx, 80_000, np.random.default_rng(16), method="pg")
    assert np.all(np.abs(res.gradient - truth) < 4.0 * res.gradient_se + 1e-8)


def test_adaptive_sample_size_scales_with_difficulty():
    easy = pair_context(GAMMA_MODEL, 14.0, 15.0, 1.0)
    n_easy = adaptive_sample_size(easy, np.random.default_rng(17), target_rel_var=0.01)
    n_tight = adaptive_sample_size(easy, np.random.default_rng(17), target_rel_var=0.0001)
    assert n_easy <= n_tight
    assert n_tight <= 20_000


def test_pair_context_validation():
    with pytest.raises(ValueError):
        pair_context(GAMMA_MODEL, 1.0, 2.0, 0.0)
    with pytest.raises(UnsupportedError):
        pairwise_density_quadrature(pair_context(ModelSpec(Poisson(1.0), ExponentialTrawl(1.0)), 1.0, 1.0, 1.0))
