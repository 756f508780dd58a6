"""Pairwise densities of trawl processes and their gradients.

The bivariate density of ``(X_s, X_t)`` factors over the three disjoint
slices of the two trawl sets and reduces to a one-dimensional integral, here
written as an expectation over the common-slice variable and estimated by
Monte Carlo.  Three families of machinery live in this module:

* a vectorised Beta-reparameterised kernel for Gamma seeds (the common and
  lag-specific Gamma factors cancel into a Beta expectation), used by the
  likelihood optimiser and the benchmark suites;
* a generic kernel for other continuous seeds, sampling the common-slice law
  (truncated to ``[0, min(x_s, x_t)]`` for positive seeds);
* exact finite/truncated sums for the discrete families, plus measure-valued
  and hybrid gradient estimators for them.

An adaptive quadrature oracle cross-checks every continuous case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, special

from .cv import centered_moment_gradients, centered_moments
from .dist import (
    Beta,
    Gamma,
    Gaussian,
    InverseGaussian,
    NegativeBinomial,
    NormalInverseGaussian,
    Poisson,
    Skellam,
    TruncatedSeed,
    UnsupportedError,
    basis_scale,
    basis_scale_area_velocity,
    basis_scale_param_jacobian,
)
from .mcgrad import ReparamSampler, pathwise_gradient
from .trawl import ModelSpec, SliceTriple, pair_slices

_Z_EPS = 1e-13
_SKELLAM_TAIL = 1e-14


@dataclass(frozen=True)
class PairContext:
    """One observation pair with its slice areas under a model."""

    x_s: float
    x_t: float
    h: float
    slices: SliceTriple
    model: ModelSpec

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("pair lag must be positive")


def pair_context(model: ModelSpec, x_s, x_t, h) -> PairContext:
    return PairContext(float(x_s), float(x_t), float(h), pair_slices(model.trawl, h), model)


@dataclass(frozen=True)
class PairDensityEstimate:
    value: float
    std_error: float
    n: int
    out_of_support: bool = False
    cv_active: bool = False
    gamma: float = 0.0


@dataclass(frozen=True)
class PairGradResult:
    """Log pairwise density and its gradient with delta-method error bars."""

    log_density: float
    gradient: np.ndarray
    log_se: float
    gradient_se: np.ndarray
    log_bias: float
    n: int
    method: str
    cv_degree: int


# ---------------------------------------------------------------------------
# slice-law plumbing shared by the generic and discrete kernels
# ---------------------------------------------------------------------------


def _slice_jacobian(model: ModelSpec, area, darea_dphi):
    """d(slice-law params)/dθ for the law basis_scale(seed, area).

    Columns are the model parameters (seed params then trawl params); the
    trawl columns flow through the area derivative.
    """
    seed = model.seed
    jac_seed = basis_scale_param_jacobian(seed, area)  # (k, n_seed)
    vel = basis_scale_area_velocity(seed, area)  # (k,)
    jac_phi = np.outer(vel, np.asarray(darea_dphi))  # (k, n_trawl)
    return np.concatenate([jac_seed, jac_phi], axis=1)


def _slice_geometry(ctx: PairContext):
    """Common/left/right slice laws with their θ-jacobians."""
    model = ctx.model
    tf = model.trawl
    dover = np.asarray(tf.overlap_gradient(ctx.h))
    darea = np.asarray(tf.area_gradient())
    s = ctx.slices
    laws = {}
    for name, area, dphi in (
        ("common", s.s_common, dover),
        ("left", s.s_left, darea - dover),
        ("right", s.s_right, darea - dover),
    ):
        laws[name] = (basis_scale(model.seed, area), _slice_jacobian(model, area, dphi))
    return laws


# ---------------------------------------------------------------------------
# Gamma seeds: Beta reparameterisation, vectorised across the pairs of a lag
# ---------------------------------------------------------------------------


def _beta_cdf_param_grad(a, b, z):
    """Central differences of the regularised incomplete beta in (a, b).

    A single central difference at step 1e-5 max(1, θ) is already far inside
    the 1e-5 relative tolerance the pathwise gradients are verified to; the
    per-sample volume here makes the extra Richardson evaluations costly.
    """
    ha = 1e-5 * max(1.0, a)
    hb = 1e-5 * max(1.0, b)
    da = (special.betainc(a + ha, b, z) - special.betainc(a - ha, b, z)) / (2.0 * ha)
    db = (special.betainc(a, b + hb, z) - special.betainc(a, b - hb, z)) / (2.0 * hb)
    return np.stack([da, db])


def _rowwise_gamma(terms, controls):
    """cov/var along the last axis, zero where the control is degenerate."""
    tc = terms - terms.mean(axis=-1, keepdims=True)
    hc = controls - controls.mean(axis=-1, keepdims=True)
    var_h = np.mean(hc**2, axis=-1)
    cov = np.mean(tc * hc, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(var_h > 0.0, cov / np.where(var_h > 0.0, var_h, 1.0), 0.0)
    return g


@dataclass
class GammaBatchStats:
    """Per-pair summaries of the pairwise density and gradient estimators."""

    density: np.ndarray  # (P,)
    density_sd1: np.ndarray  # per-sample sd of the U estimator, (P,)
    gradient: np.ndarray  # V-bar, (d, P)
    gradient_sd1: np.ndarray  # per-sample sd of the V estimator, (d, P)
    ratio_resid_sd1: np.ndarray  # per-sample sd of (g U - V), (d, P)
    n: int

    @property
    def log_density(self):
        return np.log(self.density)

    @property
    def log_gradient(self):
        return self.gradient / self.density

    def log_se(self):
        return self.density_sd1 / (math.sqrt(self.n) * self.density)

    def log_gradient_se(self):
        return self.ratio_resid_sd1 / (math.sqrt(self.n) * self.density[None])

    def log_bias(self):
        return -self.density_sd1**2 / (2.0 * self.n * self.density**2)


class GammaPairBatch:
    """All pairs of one lag for a Gamma seed share the same Beta mixing law.

    The pairwise density is ``C(θ) E_{Beta(a0, a1)}[(l2 - l1 Z)^{a1 - 1}
    e^{β l1 Z}]`` with ``a0 = a_seed * s_common`` and ``a1 = a_seed * s_left``;
    everything here is vectorised with shape (pairs, samples).
    """

    def __init__(self, model: ModelSpec, x_a, x_b, h):
        if not isinstance(model.seed, Gamma):
            raise UnsupportedError("the Beta reparameterisation applies to Gamma seeds")
        x_a = np.atleast_1d(np.asarray(x_a, dtype=float))
        x_b = np.atleast_1d(np.asarray(x_b, dtype=float))
        if np.any(x_a <= 0.0) or np.any(x_b <= 0.0):
            raise ValueError("Gamma-seed observations must be positive")
        self.model = model
        self.h = float(h)
        self.l1 = np.minimum(x_a, x_b)
        self.l2 = np.maximum(x_a, x_b)
        seed = model.seed
        tf = model.trawl
        s = pair_slices(tf, h)
        self.a0 = seed.alpha * s.s_common
        self.a1 = seed.alpha * s.s_left
        self.abar = self.a0 + self.a1
        self.rate = seed.beta
        self.n_pairs = self.l1.size
        self.dim = model.theta.size

        # d(a0, a1, rate)/dθ; the rate is itself a model parameter
        dover = np.asarray(tf.overlap_gradient(h))
        darea = np.asarray(tf.area_gradient())
        j3 = np.zeros((3, self.dim))
        j3[0, 0] = s.s_common
        j3[1, 0] = s.s_left
        j3[0, 2:] = seed.alpha * dover
        j3[1, 2:] = seed.alpha * (darea - dover)
        j3[2, 1] = 1.0
        self.j3 = j3
        self.mixing = Beta(self.a0, self.a1)
        self.z0 = self.a0 / self.abar  # Taylor expansion point: the mixing mean

        self.log_c = (
            (self.abar + self.a1) * math.log(self.rate)
            + (self.abar - 1.0) * np.log(self.l1)
            - self.rate * (self.l1 + self.l2)
            - special.gammaln(self.abar)
            - special.gammaln(self.a1)
        )
        self.dlogc = np.array(
            [
                math.log(self.rate) + 0.0 - special.digamma(self.abar),  # + log l1 added per pair
                2.0 * math.log(self.rate) - special.digamma(self.abar) - special.digamma(self.a1),
                (self.abar + self.a1) / self.rate,
            ]
        )

    # -- sampling -----------------------------------------------------------
    def sample(self, rng, n):
        return np.clip(rng.beta(self.a0, self.a1, size=(self.n_pairs, n)), _Z_EPS, 1.0 - _Z_EPS)

    def from_uniforms(self, u):
        z = special.betaincinv(self.a0, self.a1, np.asarray(u, dtype=float))
        return np.clip(z, _Z_EPS, 1.0 - _Z_EPS)

    # -- kernel values -------------------------------------------------------
    def log_f(self, z):
        return self.log_c[:, None] + (self.a1 - 1.0) * np.log(self.l2[:, None] - self.l1[:, None] * z) + (
            self.rate * self.l1[:, None] * z
        )

    def f(self, z):
        return np.exp(self.log_f(z))

    def dfdz(self, z):
        l1 = self.l1[:, None]
        return self.f(z) * (self.rate * l1 - l1 * (self.a1 - 1.0) / (self.l2[:, None] - l1 * z))

    def _dlogf_abr(self, z):
        """∂ log f / ∂(a0, a1, rate) as (3, P, n) arrays."""
        l1 = self.l1[:, None]
        rem = self.l2[:, None] - l1 * z
        g0 = (self.dlogc[0] + np.log(self.l1))[:, None] * np.ones_like(z)
        g1 = (self.dlogc[1] + np.log(self.l1))[:, None] + np.log(rem)
        g2 = (self.dlogc[2] - (self.l1 + self.l2))[:, None] + l1 * z
        return np.stack([g0, g1, g2])

    def grad_theta_f(self, z):
        """(d, P, n) gradient of f with respect to the full model θ."""
        return np.einsum("kd,kpn->dpn", self.j3, self._dlogf_abr(z) * self.f(z)[None])

    # -- mixing-law gradients -------------------------------------------------
    def score(self, z):
        """∇_θ log Beta(z; a0, a1) chained to the model parameters, (d, P, n)."""
        dg = special.digamma(self.abar)
        s0 = np.log(z) - special.digamma(self.a0) + dg
        s1 = np.log1p(-z) - special.digamma(self.a1) + dg
        return np.einsum("kd,kpn->dpn", self.j3[:2], np.stack([s0, s1]))

    def pathwise(self, z):
        """∇_θ z = -∇_θ F(z)/q(z) chained to the model parameters, (d, P, n).

        Draws clipped to the support boundary can underflow the density; their
        weight is set to zero there (the quantile is flat in θ at the clip).
        """
        grad_f = _beta_cdf_param_grad(self.a0, self.a1, z)
        log_dens = (
            (self.a0 - 1.0) * np.log(z) + (self.a1 - 1.0) * np.log1p(-z) - special.betaln(self.a0, self.a1)
        )
        with np.errstate(over="ignore"):
            inv = np.where(log_dens > -280.0, np.exp(-np.clip(log_dens, -280.0, 700.0)), 0.0)
        return np.einsum("kd,kpn->dpn", self.j3[:2], -grad_f * inv)

    # -- Taylor machinery ------------------------------------------------------
    def taylor_pieces(self, degree):
        """Coefficients f^(l)(z0)/l! per pair and their θ-gradients.

        Returns (coef (m, P), dcoef (d, m, P)); computed by a Leibniz expansion
        of the power/exponential product, so they are exact.
        """
        m = degree
        l1, l2 = self.l1, self.l2
        rem0 = l2 - l1 * self.z0
        log_rem0 = np.log(rem0)
        # everything scales with f(z0), which is bounded; keep that factor in logs
        log_f0 = self.log_c + (self.a1 - 1.0) * log_rem0 + self.rate * l1 * self.z0
        f0 = np.where(log_f0 > -700.0, np.exp(np.maximum(log_f0, -700.0)), 0.0)
        w = -l1 / rem0
        r = self.rate * l1
        dlogc0 = self.dlogc[0] + np.log(l1)
        dlogc1 = self.dlogc[1] + np.log(l1)
        dlogc2 = self.dlogc[2] - (l1 + l2)
        coef = np.empty((m, self.n_pairs))
        dcoef_abr = np.zeros((3, m, self.n_pairs))
        with np.errstate(over="ignore", invalid="ignore"):
            for order in range(1, m + 1):
                s = np.zeros(self.n_pairs)
                ds_a1 = np.zeros(self.n_pairs)
                ds_rate = np.zeros(self.n_pairs)
                pj, dpj = 1.0, 0.0
                for j in range(order + 1):
                    if j > 0:
                        dpj = dpj * (self.a1 - j) + pj
                        pj = pj * (self.a1 - j)
                    c = math.comb(order, j)
                    base = c * w**j * r ** (order - j)
                    s += base * pj
                    ds_a1 += base * dpj
                    ds_rate += base * pj * (order - j) / self.rate
                fact = math.factorial(order)
                coef[order - 1] = f0 * s / fact
                dcoef_abr[0, order - 1] = f0 * s * dlogc0 / fact
                dcoef_abr[1, order - 1] = f0 * ((dlogc1 + log_rem0) * s + ds_a1) / fact
                dcoef_abr[2, order - 1] = f0 * ((dlogc2 + l1 * self.z0) * s + ds_rate) / fact
        # a degenerate coefficient only disables the control; zero keeps estimators unbiased
        np.nan_to_num(coef, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
        np.nan_to_num(dcoef_abr, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
        dcoef = np.einsum("kd,kmp->dmp", self.j3, dcoef_abr)
        return coef, dcoef

    def moment_pieces(self, degree):
        """Centred Beta moments about z0 and their θ-gradients."""
        sampler = ReparamSampler(self.mixing, self.j3[:2])
        mom = centered_moments(self.mixing, self.z0, degree)
        dmom = centered_moment_gradients(sampler, self.z0, degree)  # (d, m)
        return mom, dmom

    # -- estimators -------------------------------------------------------------
    def estimate(self, z, cv_degree=0, engine="pg"):
        """Per-pair density and gradient summaries from a (P, n) sample matrix."""
        return self.estimate_many(z, engines=(engine,), degrees=(cv_degree,))[(engine, cv_degree)]

    def density_stats(self, z, cv_degree=0):
        """Per-pair (density, single-sample sd) only; skips all gradient work."""
        fs = self.f(z)
        if cv_degree == 0:
            u_per = fs
        else:
            coef, _ = self.taylor_pieces(cv_degree)
            dz = z - self.z0
            powers = np.stack([dz**l for l in range(1, cv_degree + 1)])
            t_val = np.einsum("mp,mpn->pn", coef, powers)
            mom, _ = self.moment_pieces(cv_degree)
            c0 = np.einsum("mp,m->p", coef, mom)
            gamma0 = _rowwise_gamma(fs, t_val)
            u_per = fs - gamma0[:, None] * (t_val - c0[:, None])
        return u_per.mean(axis=1), u_per.std(axis=1, ddof=1)

    def estimate_many(self, z, engines=("pg",), degrees=(0,)):
        """Estimators for several engine/control-degree combinations on shared samples.

        The expensive pieces (pathwise weights, scores, Taylor coefficients)
        are computed once; returns a dict keyed by (engine, degree).
        """
        for engine in engines:
            if engine not in ("pg", "sf"):
                raise ValueError("engine must be 'pg' or 'sf'")
        n = z.shape[1]
        fs = self.f(z)
        direct = self.grad_theta_f(z)
        weights = {}
        measures = {}
        if "pg" in engines:
            weights["pg"] = self.pathwise(z)
            measures["pg"] = self.dfdz(z)[None] * weights["pg"]
        if "sf" in engines:
            weights["sf"] = self.score(z)
            measures["sf"] = fs[None] * weights["sf"]

        max_m = max(degrees)
        if max_m > 0:
            coef, dcoef = self.taylor_pieces(max_m)
            mom, dmom = self.moment_pieces(max_m)
            dz = z - self.z0
            powers = np.stack([dz**l for l in range(1, max_m + 1)])  # (m, P, n)
            dpowers = np.stack([dz ** (l - 1) for l in range(1, max_m + 1)])

        out = {}
        for engine in engines:
            measure = measures[engine]
            for m in degrees:
                if m == 0:
                    u_per = fs
                    v_per = measure + direct
                else:
                    cm = coef[:m]
                    t_val = np.einsum("mp,mpn->pn", cm, powers[:m])
                    ls = np.arange(1, m + 1, dtype=float)
                    t_dz = np.einsum("mp,m,mpn->pn", cm, ls, dpowers[:m])
                    c0 = np.einsum("mp,m->p", cm, mom[:m])
                    gamma0 = _rowwise_gamma(fs, t_val)
                    u_per = fs - gamma0[:, None] * (t_val - c0[:, None])

                    hcontrol = (t_dz if engine == "pg" else t_val)[None] * weights[engine]
                    c2 = np.einsum("mp,dm->dp", cm, dmom[:, :m])
                    gamma2 = _rowwise_gamma(measure, hcontrol)
                    h1 = np.einsum("dmp,mpn->dpn", dcoef[:, :m], powers[:m])
                    c1 = np.einsum("dmp,m->dp", dcoef[:, :m], mom[:m])
                    gamma1 = _rowwise_gamma(direct, h1)
                    v_per = (
                        measure
                        - gamma2[..., None] * (hcontrol - c2[..., None])
                        + direct
                        - gamma1[..., None] * (h1 - c1[..., None])
                    )
                density = u_per.mean(axis=1)
                density_sd1 = u_per.std(axis=1, ddof=1)
                grad = v_per.mean(axis=2)
                grad_sd1 = v_per.std(axis=2, ddof=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    g = np.where(density > 0.0, grad / np.where(density > 0.0, density, 1.0), 0.0)
                resid_sd1 = (g[..., None] * u_per[None] - v_per).std(axis=2, ddof=1)
                out[(engine, m)] = GammaBatchStats(density, density_sd1, grad, grad_sd1, resid_sd1, n)
        return out

    def log_likelihood_terms(self, stats: GammaBatchStats):
        """Summed log density / gradient with delta-method standard errors."""
        if np.any(stats.density <= 0.0) or not np.all(np.isfinite(stats.density)):
            raise RuntimeError(
                "nonpositive pairwise density estimate; increase the sample size or lower the control degree"
            )
        total_log = float(np.sum(stats.log_density))
        total_grad = stats.log_gradient.sum(axis=1)
        log_var = np.sum(stats.density_sd1**2 / (stats.n * stats.density**2))
        grad_var = np.sum(stats.log_gradient_se() ** 2, axis=1)
        return total_log, total_grad, math.sqrt(log_var), np.sqrt(grad_var)


# ---------------------------------------------------------------------------
# generic continuous kernel
# ---------------------------------------------------------------------------


class ContinuousPairKernel:
    """Pairwise-density integrand for non-Gamma continuous seeds.

    The sampling law is the common-slice law, truncated to ``[0, l1]`` for
    positive seeds; the integrand is the product of the two outer slice
    densities (times the truncation mass so that the expectation equals the
    density itself).
    """

    def __init__(self, ctx: PairContext):
        seed = ctx.model.seed
        if seed.discrete or isinstance(seed, Gamma):
            raise UnsupportedError("generic continuous kernel expects a non-Gamma continuous seed")
        self.ctx = ctx
        laws = _slice_geometry(ctx)
        self.common, self.j_common = laws["common"]
        self.left, self.j_left = laws["left"]
        self.right, self.j_right = laws["right"]
        self.l1 = min(ctx.x_s, ctx.x_t)
        self.positive = isinstance(seed, InverseGaussian)
        self.dim = ctx.model.theta.size
        self.out_of_support = self.positive and self.l1 <= 0.0
        if self.positive and not self.out_of_support:
            self.sampling = TruncatedSeed(self.common, self.l1)
            self.mass = float(self.common.cdf(self.l1))
        else:
            self.sampling = self.common
            self.mass = 1.0

    def sampler(self):
        return ReparamSampler(self.sampling, self.j_common)

    def f(self, z):
        z = np.asarray(z, dtype=float)
        return self.mass * np.asarray(self.right.density(self.ctx.x_t - z)) * np.asarray(
            self.left.density(self.ctx.x_s - z)
        )

    def dfdz(self, z):
        z = np.asarray(z, dtype=float)
        rt = self.ctx.x_t - z
        lf = self.ctx.x_s - z
        return self.f(z) * (-np.asarray(self.right.log_density_dx(rt)) - np.asarray(self.left.log_density_dx(lf)))

    def grad_theta_f(self, z):
        z = np.asarray(z, dtype=float)
        fs = self.f(z)
        out = self.j_right.T @ np.asarray(self.right.log_density_gradient(self.ctx.x_t - z))
        out = out + self.j_left.T @ np.asarray(self.left.log_density_gradient(self.ctx.x_s - z))
        if self.positive:
            dmass = self.j_common.T @ np.asarray(self.common.cdf_gradient(self.l1))
            out = out + (dmass / self.mass)[:, None]
        return out * fs[None]

    def integrand(self):
        from .mcgrad import Integrand

        return Integrand(value=self.f, dz=self.dfdz, grad_theta=self.grad_theta_f)


# ---------------------------------------------------------------------------
# closed form for Gaussian seeds
# ---------------------------------------------------------------------------


def gaussian_pair_density(ctx: PairContext) -> float:
    """Bivariate-normal closed form: cov(X_s, X_t) = sigma^2 Leb(A ∩ A_h)."""
    return math.exp(gaussian_pair_loggrad(ctx)[0])


def gaussian_pair_loggrad(ctx: PairContext):
    """(log density, ∇_θ log density) for a Gaussian seed, both exact."""
    model = ctx.model
    seed = model.seed
    if not isinstance(seed, Gaussian):
        raise UnsupportedError("closed form requires a Gaussian seed")
    tf = model.trawl
    area = tf.total_area()
    over = ctx.slices.s_common
    m = seed.mu * area
    v = seed.sigma**2 * area
    c = seed.sigma**2 * over
    ds, dt = ctx.x_s - m, ctx.x_t - m
    det = v**2 - c**2
    quad_n = v * ds**2 - 2.0 * c * ds * dt + v * dt**2
    logp = -math.log(2.0 * math.pi) - 0.5 * math.log(det) - quad_n / (2.0 * det)
    # partials with respect to (m, v, c)
    dm = (ds + dt) / (v + c)
    dv = -v / det - ((ds**2 + dt**2) * det - 2.0 * v * quad_n) / (2.0 * det**2)
    dc = c / det + (ds * dt * det - c * quad_n) / det**2
    darea = np.asarray(tf.area_gradient())
    dover = np.asarray(tf.overlap_gradient(ctx.h))
    grad = np.zeros(model.theta.size)
    grad[0] = dm * area
    grad[1] = dv * 2.0 * seed.sigma * area + dc * 2.0 * seed.sigma * over
    grad[2:] = dm * seed.mu * darea + dv * seed.sigma**2 * darea + dc * seed.sigma**2 * dover
    return logp, grad


# ---------------------------------------------------------------------------
# discrete seeds: exact sums and their exact gradients
# ---------------------------------------------------------------------------


def _discrete_terms(ctx: PairContext, ks):
    laws = _slice_geometry(ctx)
    common, _ = laws["common"]
    left, _ = laws["left"]
    right, _ = laws["right"]
    return (
        np.asarray(common.density(ks))
        * np.asarray(right.density(ctx.x_t - ks))
        * np.asarray(left.density(ctx.x_s - ks))
    )


def pairwise_density_discrete(ctx: PairContext) -> float:
    """Exact pairwise mass: finite sum for positive seeds, truncated for Skellam."""
    seed = ctx.model.seed
    if not seed.discrete:
        raise UnsupportedError("exact summation applies to discrete seeds")
    xs, xt = ctx.x_s, ctx.x_t
    if not (float(xs).is_integer() and float(xt).is_integer()):
        raise ValueError("discrete pairwise density needs integer observations")
    if isinstance(seed, (Poisson, NegativeBinomial)):
        if xs < 0 or xt < 0:
            return 0.0
        ks = np.arange(0, int(min(xs, xt)) + 1)
        return float(np.sum(_discrete_terms(ctx, ks)))
    if isinstance(seed, Skellam):
        return _skellam_two_sided_sum(ctx)
    raise UnsupportedError(f"no discrete pairwise density for {type(seed).__name__}")


def _skellam_two_sided_sum(ctx: PairContext, tail=_SKELLAM_TAIL):
    center = int(round(min(ctx.x_s, ctx.x_t)))
    total = 0.0
    width = 16
    lo, hi = center - width, center + width
    total = float(np.sum(_discrete_terms(ctx, np.arange(lo, hi + 1))))
    while True:
        ring_lo = np.arange(lo - width, lo)
        ring_hi = np.arange(hi + 1, hi + width + 1)
        add = float(np.sum(_discrete_terms(ctx, ring_lo))) + float(np.sum(_discrete_terms(ctx, ring_hi)))
        total += add
        lo -= width
        hi += width
        if add <= tail * max(total, 1e-300):
            return total


def discrete_pair_gradient(ctx: PairContext):
    """Exact (p, ∇_θ p) for a discrete seed by termwise differentiation."""
    seed = ctx.model.seed
    if not seed.discrete:
        raise UnsupportedError("exact gradients apply to discrete seeds")
    xs, xt = ctx.x_s, ctx.x_t
    if isinstance(seed, Skellam):
        center = int(round(min(xs, xt)))
        ks = np.arange(center - 200, center + 201)
    else:
        if xs < 0 or xt < 0:
            return 0.0, np.zeros(ctx.model.theta.size)
        ks = np.arange(0, int(min(xs, xt)) + 1)
    laws = _slice_geometry(ctx)
    common, j_c = laws["common"]
    left, j_l = laws["left"]
    right, j_r = laws["right"]
    t_c = np.asarray(common.density(ks))
    t_r = np.asarray(right.density(xt - ks))
    t_l = np.asarray(left.density(xs - ks))
    terms = t_c * t_r * t_l
    keep = terms > 0.0
    ks = ks[keep]
    terms = terms[keep]
    grad = np.zeros(ctx.model.theta.size)
    if ks.size:
        sc = j_c.T @ np.asarray(common.log_density_gradient(ks))
        sr = j_r.T @ np.asarray(right.log_density_gradient(xt - ks))
        sl = j_l.T @ np.asarray(left.log_density_gradient(xs - ks))
        grad = ((sc + sr + sl) * terms[None]).sum(axis=1)
    return float(terms.sum()), grad


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------


def pairwise_density_quadrature(ctx: PairContext, tol=1e-8) -> float:
    """Adaptive quadrature of the slice-product integral (continuous seeds).

    Algebraic endpoint singularities of the Gamma case are handled by the
    weighted rule; non-convergence raises with the achieved error estimate.
    """
    seed = ctx.model.seed
    if seed.discrete:
        raise UnsupportedError("quadrature oracle applies to continuous seeds")
    laws = _slice_geometry(ctx)
    common, _ = laws["common"]
    left, _ = laws["left"]
    right, _ = laws["right"]
    xs, xt = ctx.x_s, ctx.x_t
    l1 = min(xs, xt)

    if isinstance(seed, Gamma):
        if l1 <= 0.0:
            return 0.0
        a0 = common.alpha
        a1 = left.alpha
        a_exp = a0 - 1.0
        b_exp = (a1 - 1.0) * (2.0 if xs == xt else 1.0)
        if b_exp <= -1.0:
            raise RuntimeError("pairwise density diverges on the diagonal for a1 <= 1/2")

        def smooth(z):
            # full integrand divided by z^a_exp (l1 - z)^b_exp, kept in logs
            beta = seed.beta
            abar = a0 + 2.0 * a1
            logv = (
                abar * math.log(beta)
                - special.gammaln(a0)
                - 2.0 * special.gammaln(a1)
                - beta * (xs + xt)
                + beta * z
            )
            if xs == xt:
                return math.exp(logv)
            l2 = max(xs, xt)
            return math.exp(logv + (a1 - 1.0) * math.log(l2 - z))

        val, err = integrate.quad(
            smooth, 0.0, l1, weight="alg", wvar=(a_exp, b_exp), epsabs=1e-300, epsrel=tol, limit=400
        )
    elif isinstance(seed, InverseGaussian):
        if l1 <= 0.0:
            return 0.0

        def integrand(z):
            return float(common.density(z) * right.density(xt - z) * left.density(xs - z))

        val, err = integrate.quad(integrand, 0.0, l1, epsabs=1e-300, epsrel=tol, limit=400)
    else:
        span = 60.0
        lo = max(
            common.mean() - span * math.sqrt(common.variance()),
            xt - right.mean() - span * math.sqrt(right.variance()),
            xs - left.mean() - span * math.sqrt(left.variance()),
        )
        hi = min(
            common.mean() + span * math.sqrt(common.variance()),
            xt - right.mean() + span * math.sqrt(right.variance()),
            xs - left.mean() + span * math.sqrt(left.variance()),
        )

        def integrand(z):
            return float(common.density(z) * right.density(xt - z) * left.density(xs - z))

        val, err = integrate.quad(integrand, lo, hi, epsabs=1e-300, epsrel=tol, limit=400)
    if err > tol * max(abs(val), 1e-300) * 10.0 and err > 1e-13:
        raise RuntimeError(f"quadrature did not reach the requested tolerance: value {val}, error {err}")
    return val


# ---------------------------------------------------------------------------
# user-facing estimators
# ---------------------------------------------------------------------------


def pairwise_density_mc(ctx: PairContext, n, rng, cv_degree=0, u=None) -> PairDensityEstimate:
    """Monte Carlo estimate of the pairwise density.

    Gamma seeds use the Beta reparameterisation with optional Taylor controls;
    other continuous seeds sample the (possibly truncated) common-slice law.
    Out-of-support observations return a flagged zero.
    """
    seed = ctx.model.seed
    if seed.discrete:
        raise UnsupportedError("use pairwise_density_discrete for discrete seeds")
    if isinstance(seed, Gamma):
        if min(ctx.x_s, ctx.x_t) <= 0.0:
            return PairDensityEstimate(0.0, 0.0, n, out_of_support=True)
        batch = GammaPairBatch(ctx.model, ctx.x_s, ctx.x_t, ctx.h)
        z = batch.from_uniforms(np.atleast_2d(u)) if u is not None else batch.sample(rng, n)
        stats = batch.estimate(z, cv_degree=cv_degree)
        return PairDensityEstimate(
            float(stats.density[0]),
            float(stats.density_sd1[0] / math.sqrt(stats.n)),
            stats.n,
            cv_active=cv_degree > 0,
        )
    kernel = ContinuousPairKernel(ctx)
    if kernel.out_of_support:
        return PairDensityEstimate(0.0, 0.0, n, out_of_support=True)
    s = kernel.sampler()
    z = s.sample_from_uniform(np.asarray(u)) if u is not None else s.sample(rng, n)
    fs = np.asarray(kernel.f(z))
    return PairDensityEstimate(float(fs.mean()), float(fs.std(ddof=1) / math.sqrt(fs.size)), fs.size)


def _auto_method(seed):
    if isinstance(seed, (Gamma, Gaussian, InverseGaussian)):
        return "pg"
    if isinstance(seed, NormalInverseGaussian):
        return "sf"
    if isinstance(seed, (Poisson, Skellam)):
        return "mvg"
    if isinstance(seed, NegativeBinomial):
        return "hybrid"
    raise UnsupportedError(f"no pairwise gradient engine for {type(seed).__name__}")


def pairwise_logdensity_and_grad(
    ctx: PairContext, n, rng, method="auto", cv_degree=0, u=None
) -> PairGradResult:
    """Log pairwise density and ∇_θ log density with delta-method error bars.

    The measure term uses the engine matched to the seed family: pathwise or
    score for continuous seeds, measure-valued for Poisson/Skellam, the
    Gamma-Poisson hybrid for negative binomial; the log and ratio estimators
    are formed from the same samples.
    """
    seed = ctx.model.seed
    if method == "auto":
        method = _auto_method(seed)
    if isinstance(seed, Gamma) and method in ("pg", "sf"):
        batch = GammaPairBatch(ctx.model, ctx.x_s, ctx.x_t, ctx.h)
        z = batch.from_uniforms(np.atleast_2d(u)) if u is not None else batch.sample(rng, n)
        stats = batch.estimate(z, cv_degree=cv_degree, engine=method)
        if stats.density[0] <= 0.0:
            raise RuntimeError(
                "nonpositive pairwise density estimate; increase the sample size or lower the control degree"
            )
        return PairGradResult(
            float(stats.log_density[0]),
            stats.log_gradient[:, 0],
            float(stats.log_se()[0]),
            stats.log_gradient_se()[:, 0],
            float(stats.log_bias()[0]),
            stats.n,
            method,
            cv_degree,
        )
    if seed.discrete:
        return _discrete_pair_grad_estimate(ctx, n, rng, method)
    return _continuous_pair_grad_estimate(ctx, n, rng, method)


def _finalise_ratio(u_samples, v_samples, n, method, cv_degree):
    ubar = float(u_samples.mean())
    if ubar <= 0.0:
        raise RuntimeError(
            "nonpositive pairwise density estimate; increase the sample size or lower the control degree"
        )
    vbar = v_samples.mean(axis=1)
    grad = vbar / ubar
    sd_u = float(u_samples.std(ddof=1))
    resid = grad[:, None] * u_samples[None] - v_samples
    grad_se = resid.std(axis=1, ddof=1) / (math.sqrt(n) * ubar)
    return PairGradResult(
        math.log(ubar),
        grad,
        sd_u / (math.sqrt(n) * ubar),
        grad_se,
        -sd_u**2 / (2.0 * n * ubar**2),
        n,
        method,
        cv_degree,
    )


def _continuous_pair_grad_estimate(ctx, n, rng, method):
    if method not in ("pg", "sf"):
        raise UnsupportedError(f"method {method!r} is not available for continuous seeds")
    kernel = ContinuousPairKernel(ctx)
    if kernel.out_of_support:
        raise ValueError("observations outside the support of the marginal law")
    s = kernel.sampler()
    z = s.sample(rng, n)
    fs = np.asarray(kernel.f(z))
    direct = kernel.grad_theta_f(z)
    if method == "pg":
        measure = np.asarray(kernel.dfdz(z)) * s.pathwise(z)
    else:
        measure = fs[None] * s.score(z)
    return _finalise_ratio(fs, measure + direct, n, method, 0)


def _discrete_pair_grad_estimate(ctx, n, rng, method):
    seed = ctx.model.seed
    laws = _slice_geometry(ctx)
    common, j_c = laws["common"]
    left, j_l = laws["left"]
    right, j_r = laws["right"]
    xs, xt = ctx.x_s, ctx.x_t

    def f(k):
        return np.asarray(right.density(xt - k)) * np.asarray(left.density(xs - k))

    def grad_theta_f(k):
        # f vanishes outside the joint support, so its gradient does too
        vals = f(k)
        out = np.zeros((ctx.model.theta.size, k.size))
        ok = vals > 0.0
        if np.any(ok):
            sc = j_r.T @ np.asarray(right.log_density_gradient(xt - k[ok]))
            sc = sc + j_l.T @ np.asarray(left.log_density_gradient(xs - k[ok]))
            out[:, ok] = sc * vals[ok][None]
        return out

    if method == "mvg":
        if not isinstance(seed, (Poisson, Skellam)):
            raise UnsupportedError("the measure-valued engine applies to Poisson and Skellam seeds")
        z = common.sample(rng, n)
        direct = grad_theta_f(z)
        if isinstance(seed, Poisson):
            pair_terms = (f(z + 1.0) - f(z))[None]  # derivative in the common-slice intensity
        else:
            pair_terms = np.stack([f(z + 1.0) - f(z), f(z - 1.0) - f(z)])
        per = np.einsum("kd,kn->dn", j_c, pair_terms) + direct
        return _finalise_ratio(f(z), per, n, method, 0)

    if method == "hybrid":
        if not isinstance(seed, NegativeBinomial):
            raise UnsupportedError("the hybrid engine applies to negative binomial seeds")
        m_c = common.m
        rate = (1.0 - seed.p) / seed.p
        mix = Gamma(m_c, rate)
        y = mix.sample(rng, n)
        z = rng.poisson(y).astype(float)
        pw = pathwise_gradient(mix, y)  # rows: (shape, rate)
        # d(shape)/dθ follows the common-slice jacobian's m-row; d(rate)/dp = -1/p^2
        j_y = np.zeros((2, ctx.model.theta.size))
        j_y[0] = j_c[0]
        j_y[1, 1] = -1.0 / seed.p**2
        grad_y = j_y.T @ pw
        per = (f(z + 1.0) - f(z))[None] * grad_y + grad_theta_f(z)
        return _finalise_ratio(f(z), per, n, method, 0)

    raise UnsupportedError(f"method {method!r} is not available for discrete seeds")


def adaptive_sample_size(ctx: PairContext, rng, pilot=200, target_rel_var=0.01, n_max=20_000, cv_degree=0):
    """Sample count making the estimated Var(U1)/(N p̂²) at most the target.

    Uses a pilot run; the relative variance of the mean density estimator is
    exactly the driver of both the bias and the variance of the log estimator.
    """
    est = pairwise_density_mc(ctx, pilot, rng, cv_degree=cv_degree)
    if est.value <= 0.0:
        return n_max
    rel = (est.std_error * math.sqrt(est.n) / est.value) ** 2
    return int(min(n_max, max(pilot, math.ceil(rel / target_rel_var))))
