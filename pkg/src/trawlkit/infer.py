"""Parameter estimation: moment matching (GMM) and pairwise likelihood (PL).

The GMM estimator matches the marginal moments (seed parameters) and the
empirical autocorrelation at a set of lags (trawl parameters).  The PL
estimator maximises the sum of log pairwise densities over the configured
lags; the Monte Carlo noise is frozen through common random numbers, so each
optimisation runs on a smooth deterministic surface and the whole fit is
reproducible bit for bit from its master seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, optimize, special

from .dist import (
    Gamma,
    Gaussian,
    InverseGaussian,
    NegativeBinomial,
    NormalInverseGaussian,
    Poisson,
    Skellam,
    UnsupportedError,
)
from .pairwise import (
    ContinuousPairKernel,
    GammaPairBatch,
    discrete_pair_gradient,
    gaussian_pair_loggrad,
    pair_context,
)
from .trawl import ExponentialTrawl, GammaTrawl, InvGaussianTrawl, ModelSpec


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by the GMM and PL fitting routines."""

    lags: tuple = (1, 3, 5)
    samples_per_pair: int = 400
    cv_degree: int = 2
    optimizer: str = "quasi-newton"
    max_iterations: int = 60
    gradient_tolerance: float = 0.5
    master_seed: int = 0
    adaptive_samples: bool = True
    target_rel_var: float = 0.01
    engine: str = "pg"

    def __post_init__(self):
        if len(self.lags) == 0 or any(int(k) != k or k < 1 for k in self.lags):
            raise ValueError("the lag set must be a nonempty tuple of positive integers")
        if self.samples_per_pair < 100:
            raise ValueError("need at least 100 samples per pair")
        if self.cv_degree not in (0, 1, 2, 3):
            raise ValueError("control-variate degree must be 0, 1, 2 or 3")
        if self.optimizer not in ("quasi-newton", "gradient-ascent"):
            raise ValueError("unknown optimizer")


@dataclass
class FitResult:
    model: ModelSpec
    objective_trace: list
    gradient_norm_trace: list
    wall_time: float
    diagnostics: dict = field(default_factory=dict)


def default_lag_set(trawl, tau):
    """More lags for slowly decaying autocorrelations."""
    k = 1
    while trawl.acf(k * tau) > 0.1 and k < 50:
        k += 1
    if k <= 5:
        return (1, 3, 5)
    if k <= 12:
        return (1, 3, 5, 10)
    if k <= 22:
        return (1, 3, 5, 10, 15, 20)
    return (1, 3, 5, 10, 15, 20, 30, 40)


# ---------------------------------------------------------------------------
# GMM
# ---------------------------------------------------------------------------


def empirical_acf(x, max_lag):
    x = np.asarray(x, dtype=float)
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    return np.array([float(np.dot(xc[:-k], xc[k:]) / denom) for k in range(1, max_lag + 1)])


def _fit_trawl_acf(trawl_template, tau, lags, acf_hat):
    """Least squares on the autocorrelation, positivity via log parameters."""
    hs = np.asarray(lags, dtype=float) * tau
    target = np.asarray([acf_hat[k - 1] for k in lags])

    def residual(eta):
        tf = trawl_template.with_params(np.exp(np.clip(eta, -30.0, 30.0)))
        return np.asarray(tf.acf(hs)) - target

    eta0 = np.zeros(trawl_template.n_params)
    sol = optimize.least_squares(residual, eta0, method="lm", max_nfev=4000)
    return trawl_template.with_params(np.exp(np.clip(sol.x, -30.0, 30.0)))


def _seed_from_moments(seed_template, mean, var, skew, exkurt, area):
    """Method of moments for the seed through the marginal law of L(A)."""
    if var <= 0.0:
        raise ValueError("nonpositive empirical variance")
    if isinstance(seed_template, Poisson):
        return Poisson(mean / area)
    if isinstance(seed_template, Gaussian):
        return Gaussian(mean / area, math.sqrt(var / area))
    if isinstance(seed_template, Gamma):
        shape_marginal = mean**2 / var
        return Gamma(shape_marginal / area, mean / var)
    if isinstance(seed_template, InverseGaussian):
        mu = mean / area
        return InverseGaussian(mu, mean**3 / (var * area**2))
    if isinstance(seed_template, NegativeBinomial):
        if var <= mean:
            raise ValueError("negative binomial needs overdispersed data")
        p = 1.0 - mean / var
        return NegativeBinomial(mean * (1.0 - p) / (p * area), p)
    if isinstance(seed_template, Skellam):
        if var <= abs(mean):
            raise ValueError("Skellam needs variance exceeding |mean|")
        return Skellam((var + mean) / (2.0 * area), (var - mean) / (2.0 * area))
    if isinstance(seed_template, NormalInverseGaussian):
        return _nig_from_moments(mean, var, skew, exkurt, area)
    raise UnsupportedError(f"no moment estimator for {type(seed_template).__name__}")


def _nig_from_moments(mean, var, skew, exkurt, area):
    denom = 3.0 * exkurt - 4.0 * skew**2
    if denom <= 0.0 or exkurt <= 0.0:
        raise ValueError("moments incompatible with a NIG law (need 3*kurt > 4*skew^2)")
    r2 = skew**2 / denom
    r = math.copysign(math.sqrt(r2), skew)
    phi = 3.0 * (1.0 + 4.0 * r2) / exkurt
    gam = math.sqrt(phi / (var * (1.0 - r2)))
    delta_marg = phi / gam
    alpha = gam / math.sqrt(1.0 - r2)
    beta = r * alpha
    mu_marg = mean - delta_marg * beta / gam
    return NormalInverseGaussian(alpha, beta, delta_marg / area, mu_marg / area)


def gmm_from_stats(template: ModelSpec, mean, var, acf_hat, tau, lags, skew=0.0, exkurt=1.0) -> ModelSpec:
    """Moment matching from precomputed statistics (exact-input fixed point)."""
    trawl = _fit_trawl_acf(template.trawl, tau, lags, acf_hat)
    seed = _seed_from_moments(template.seed, mean, var, skew, exkurt, trawl.total_area())
    return ModelSpec(seed, trawl)


def gmm_fit(path, tau, template: ModelSpec, config: FitConfig) -> ModelSpec:
    """Seed parameters from empirical moments, trawl parameters from the acf."""
    x = np.asarray(path, dtype=float)
    if x.size < 50:
        raise ValueError("need at least 50 observations")
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    xc = x - mean
    sd = math.sqrt(var)
    skew = float(np.mean(xc**3) / sd**3)
    exkurt = float(np.mean(xc**4) / sd**4 - 3.0)
    acf_hat = empirical_acf(x, max(config.lags))
    return gmm_from_stats(template, mean, var, acf_hat, tau, config.lags, skew, exkurt)


# ---------------------------------------------------------------------------
# pairwise likelihood surface
# ---------------------------------------------------------------------------


class PairwiseLikelihood:
    """Frozen-noise log pairwise likelihood and gradient over the model θ."""

    def __init__(self, path, tau, template: ModelSpec, config: FitConfig):
        self.x = np.asarray(path, dtype=float)
        self.tau = float(tau)
        self.template = template
        self.config = config
        self.seed_kind = type(template.seed)
        rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 0x706C]))
        self.pairs = {}
        self.uniforms = {}
        self.sample_sizes = {}
        for k in config.lags:
            xa, xb = self.x[:-k], self.x[k:]
            self.pairs[k] = (xa, xb)
            if self.seed_kind is Gamma:
                n_k = self._adaptive_n(k, xa, xb, rng)
                self.uniforms[k] = rng.uniform(size=(xa.size, n_k))
                self.sample_sizes[k] = n_k
            elif self.seed_kind in (InverseGaussian, NormalInverseGaussian):
                n_k = config.samples_per_pair
                cols = 2 if self.seed_kind is NormalInverseGaussian else 1
                self.uniforms[k] = rng.uniform(size=(cols, xa.size, n_k))
                self.sample_sizes[k] = n_k
            else:
                self.sample_sizes[k] = 0  # closed form or exact summation

    def _adaptive_n(self, k, xa, xb, rng):
        cfg = self.config
        if not cfg.adaptive_samples:
            return cfg.samples_per_pair
        batch = GammaPairBatch(self.template, xa, xb, k * self.tau)
        pilot = batch.estimate(batch.sample(rng, 128), cv_degree=cfg.cv_degree)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = (pilot.density_sd1 / pilot.density) ** 2
        need = int(np.ceil(np.nanmax(rel) / cfg.target_rel_var))
        return int(min(cfg.samples_per_pair, max(128, need)))

    def value_only(self, theta):
        """Objective value without gradient work (used by line searches)."""
        model = self.template.with_theta(theta)
        total = 0.0
        for k in self.config.lags:
            xa, xb = self.pairs[k]
            h = k * self.tau
            if self.seed_kind is Gamma:
                batch = GammaPairBatch(model, xa, xb, h)
                dens, _ = batch.density_stats(batch.from_uniforms(self.uniforms[k]), self.config.cv_degree)
                if np.any(dens <= 0.0) or not np.all(np.isfinite(dens)):
                    return -np.inf
                total += float(np.sum(np.log(dens)))
            elif self.seed_kind is Gaussian:
                for a, b in zip(xa, xb):
                    total += gaussian_pair_loggrad(pair_context(model, a, b, h))[0]
            elif model.seed.discrete:
                for a, b in zip(xa, xb):
                    p, _ = discrete_pair_gradient(pair_context(model, a, b, h))
                    if p <= 0.0:
                        return -np.inf
                    total += math.log(p)
            else:
                lk, _ = self._continuous_lag(model, xa, xb, h, self.uniforms[k], value_only=True)
                total += lk
        return total

    def value_and_grad(self, theta):
        model = self.template.with_theta(theta)
        total = 0.0
        grad = np.zeros(theta.size)
        for k in self.config.lags:
            xa, xb = self.pairs[k]
            h = k * self.tau
            if self.seed_kind is Gamma:
                batch = GammaPairBatch(model, xa, xb, h)
                z = batch.from_uniforms(self.uniforms[k])
                stats = batch.estimate(z, cv_degree=self.config.cv_degree, engine=self.config.engine)
                lk, gk, _, _ = batch.log_likelihood_terms(stats)
                total += lk
                grad += gk
            elif self.seed_kind is Gaussian:
                for a, b in zip(xa, xb):
                    lp, g = gaussian_pair_loggrad(pair_context(model, a, b, h))
                    total += lp
                    grad += g
            elif model.seed.discrete:
                for a, b in zip(xa, xb):
                    p, g = discrete_pair_gradient(pair_context(model, a, b, h))
                    if p <= 0.0:
                        return -np.inf, grad
                    total += math.log(p)
                    grad += g / p
            else:
                lk, gk = self._continuous_lag(model, xa, xb, h, self.uniforms[k])
                total += lk
                grad += gk
        return total, grad

    def _continuous_lag(self, model, xa, xb, h, u, value_only=False):
        total = 0.0
        grad = np.zeros(model.theta.size)
        for i, (a, b) in enumerate(zip(xa, xb)):
            ctx = pair_context(model, a, b, h)
            kernel = ContinuousPairKernel(ctx)
            if kernel.out_of_support:
                return -np.inf, grad
            z = self._crn_draw(kernel, u[:, i, :])
            fs = np.asarray(kernel.f(z))
            ubar = float(fs.mean())
            if ubar <= 0.0:
                return -np.inf, grad
            total += math.log(ubar)
            if value_only:
                continue
            if isinstance(model.seed, NormalInverseGaussian):
                per = fs[None] * kernel.sampler().score(z) + kernel.grad_theta_f(z)
            else:
                per = np.asarray(kernel.dfdz(z)) * kernel.sampler().pathwise(z) + kernel.grad_theta_f(z)
            grad += per.mean(axis=1) / ubar
        return total, grad

    def _crn_draw(self, kernel, u):
        seed = kernel.ctx.model.seed
        if isinstance(seed, NormalInverseGaussian):
            q = kernel.common
            v = np.asarray(_ig_ppf(u[0], q.delta / q.gamma, q.delta**2))
            return q.mu + q.beta * v + np.sqrt(v) * special.ndtri(u[1])
        return np.asarray(kernel.sampling.quantile(u[0]))


def _ig_ppf(u, mean, shape):
    from scipy import stats as sps

    return sps.invgauss.ppf(u, mean / shape, scale=shape)


def pl_objective(path, tau, theta, template: ModelSpec, config: FitConfig):
    """(log PL, gradient) at θ on the frozen-noise surface defined by the config."""
    surface = PairwiseLikelihood(path, tau, template, config)
    return surface.value_and_grad(np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def _positivity_mask(model: ModelSpec):
    seed = model.seed
    if isinstance(seed, Gaussian):
        seed_mask = [False, True]
    elif isinstance(seed, NormalInverseGaussian):
        seed_mask = [True, False, True, False]
    elif isinstance(seed, Skellam):
        seed_mask = [True, True]
    else:
        seed_mask = [True] * seed.n_params
    return np.array(seed_mask + [True] * model.trawl.n_params)


class _LogParam:
    """Free-space coordinates: log on the positive components."""

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def to_free(self, theta):
        eta = np.asarray(theta, dtype=float).copy()
        eta[self.mask] = np.log(eta[self.mask])
        return eta

    def to_theta(self, eta):
        theta = np.asarray(eta, dtype=float).copy()
        theta[self.mask] = np.exp(theta[self.mask])
        return theta

    def chain(self, eta, grad_theta):
        scale = np.ones_like(eta)
        scale[self.mask] = np.exp(eta[self.mask])
        return grad_theta * scale


def maximize_bfgs(fun_grad, x0, max_iterations=60, gradient_tolerance=0.5, use_bfgs=True, fun_value=None):
    """BFGS ascent with Armijo backtracking; falls back to 1/sqrt(iter) gradient
    steps after two line-search failures.  Returns the best visited iterate.

    ``fun_value``, when given, evaluates the objective alone and is used for
    the backtracking trials; the gradient is computed only at accepted points.
    """
    if fun_value is None:
        fun_value = lambda xx: fun_grad(xx)[0]
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective not finite at the starting point")
    dim = x.size
    h_inv = np.eye(dim)
    scaled = False
    best_x, best_f = x.copy(), f
    trace_f, trace_g = [f], [float(np.linalg.norm(g))]
    failures = 0
    stalled = 0
    fallback = not use_bfgs
    step_cap = 1.0  # log-parameter units: at most one e-fold per trial step
    for it in range(1, max_iterations + 1):
        # the gradient estimator carries MC noise relative to the frozen
        # surface, so a stall in the objective is the practical optimum signal
        if np.linalg.norm(g) < gradient_tolerance or stalled >= 3:
            break
        f_before = f
        if not fallback:
            direction = h_inv @ g
            if not np.isfinite(direction).all() or float(direction @ g) <= 0.0:
                direction = g.copy()
            step = min(1.0, step_cap / max(float(np.linalg.norm(direction)), 1e-12))
            accepted = False
            for _ in range(14):
                xn = x + step * direction
                fn = fun_value(xn)
                if np.isfinite(fn) and fn >= f + 1e-4 * step * float(direction @ g):
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                fn, gn = fun_grad(xn)
                s = xn - x
                y_min = g - gn  # curvature pair of the equivalent minimisation problem
                sy = float(s @ y_min)
                if sy > 1e-10:
                    if not scaled:
                        h_inv *= sy / max(float(y_min @ y_min), 1e-12)
                        scaled = True
                    rho = 1.0 / sy
                    eye = np.eye(dim)
                    h_inv = (eye - rho * np.outer(s, y_min)) @ h_inv @ (
                        eye - rho * np.outer(y_min, s)
                    ) + rho * np.outer(s, s)
                x, f, g = xn, fn, gn
            else:
                failures += 1
                if failures >= 2:
                    fallback = True
        else:
            step = 1.0 / math.sqrt(it)
            xn = x + step * g / max(np.linalg.norm(g), 1.0)
            fn, gn = fun_grad(xn)
            if np.isfinite(fn) and fn > f:
                x, f, g = xn, fn, gn
        if f > best_f:
            best_x, best_f = x.copy(), f
        stalled = stalled + 1 if f - f_before <= 1e-6 * (1.0 + abs(f_before)) else 0
        trace_f.append(f)
        trace_g.append(float(np.linalg.norm(g)))
    return best_x, best_f, trace_f, trace_g


def pl_fit(path, tau, template: ModelSpec, config: FitConfig, init: Optional[ModelSpec] = None) -> FitResult:
    """Maximise the pairwise likelihood, initialised at the GMM estimate.

    Optimisation runs in log coordinates on the positive parameters; the best
    iterate by objective is returned together with the traces.
    """
    t0 = time.perf_counter()
    if init is None:
        init = gmm_fit(path, tau, template, config)
    surface = PairwiseLikelihood(path, tau, init, config)
    transform = _LogParam(_positivity_mask(init))

    def fun_grad(eta):
        theta = transform.to_theta(eta)
        try:
            value, grad = surface.value_and_grad(theta)
        except (ValueError, RuntimeError, FloatingPointError):
            return -np.inf, np.zeros_like(eta)
        if not np.isfinite(value):
            return -np.inf, np.zeros_like(eta)
        return value, transform.chain(eta, grad)

    def fun_value(eta):
        try:
            return surface.value_only(transform.to_theta(eta))
        except (ValueError, RuntimeError, FloatingPointError):
            return -np.inf

    eta0 = transform.to_free(init.theta)
    eta_best, _, trace_f, trace_g = maximize_bfgs(
        fun_grad,
        eta0,
        max_iterations=config.max_iterations,
        gradient_tolerance=config.gradient_tolerance,
        use_bfgs=config.optimizer == "quasi-newton",
        fun_value=fun_value,
    )
    model = init.with_theta(transform.to_theta(eta_best))
    return FitResult(
        model,
        trace_f,
        trace_g,
        time.perf_counter() - t0,
        diagnostics={
            "init_theta": init.theta.tolist(),
            "samples_per_lag": dict(sorted(surface.sample_sizes.items())),
            "cv_degree": config.cv_degree,
            "engine": config.engine,
            "iterations": len(trace_f) - 1,
        },
    )


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------


def marginal_kl(truth: ModelSpec, estimate: ModelSpec) -> float:
    """KL(truth marginal || estimated marginal) by quadrature or summation."""
    p = truth.marginal()
    q = estimate.marginal()
    if p.discrete:
        lo = p.mean() - 40.0 * math.sqrt(p.variance())
        hi = p.mean() + 40.0 * math.sqrt(p.variance())
        ks = np.arange(math.floor(max(lo, -1e6)), math.ceil(hi) + 1)
        pk = np.asarray(p.density(ks))
        qk = np.asarray(q.density(ks))
        keep = pk > 0.0
        return float(np.sum(pk[keep] * (np.log(pk[keep]) - np.log(np.maximum(qk[keep], 1e-300)))))
    sd = math.sqrt(p.variance())
    lo, hi = p.mean() - 40.0 * sd, p.mean() + 40.0 * sd
    if isinstance(p, (Gamma, InverseGaussian)):
        lo = 1e-12

    def integrand(x):
        px = float(p.density(x))
        if px <= 0.0:
            return 0.0
        qx = max(float(q.density(x)), 1e-300)
        return px * (math.log(px) - math.log(qx))

    val, _ = integrate.quad(integrand, lo, hi, limit=300)
    return float(val)


def weighted_acf_distance(truth, estimate, power=2, k_weight=0.01, tol=1e-6):
    """Weighted L^p distance between autocorrelation functions on [0, T_max]."""
    t_max = 1.0
    while truth.acf(t_max) / (1.0 + k_weight * t_max**2) > tol and t_max < 1e6:
        t_max *= 2.0
    ts = np.linspace(0.0, t_max, 4001)
    w = 1.0 / (1.0 + k_weight * ts**2)
    diff = np.abs(np.asarray(truth.acf(ts)) - np.asarray(estimate.acf(ts))) ** power
    return float(np.trapezoid(w * diff, ts) ** (1.0 / power))


def eval_metrics(estimates, truth: ModelSpec) -> dict:
    """Per-parameter errors plus marginal-KL and weighted acf distances."""
    if len(estimates) == 0:
        raise ValueError("need at least one estimate")
    thetas = np.stack([m.theta for m in estimates])
    errs = thetas - truth.theta[None]
    report = {
        "param_names": list(truth.param_names),
        "rmse": np.sqrt(np.mean(errs**2, axis=0)).tolist(),
        "mae": np.mean(np.abs(errs), axis=0).tolist(),
        "medae": np.median(np.abs(errs), axis=0).tolist(),
    }
    kls = np.array([marginal_kl(truth, m) for m in estimates])
    report["mean_kl"] = float(kls.mean())
    report["median_kl"] = float(np.median(kls))
    for power, name in ((1, "acf_l1"), (2, "acf_l2")):
        ds = np.array([weighted_acf_distance(truth.trawl, m.trawl, power=power) for m in estimates])
        report[f"mean_{name}"] = float(ds.mean())
        report[f"median_{name}"] = float(np.median(ds))
    return report
