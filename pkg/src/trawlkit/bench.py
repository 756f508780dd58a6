"""Desk-scale benchmark suites behind the command line.

Each suite reproduces a reduced version of a reference experiment and writes
plot-ready CSV tables:

* ``grad``      — bias/standard deviation grid of the SF and PG estimators of
                  the log pairwise-likelihood gradient on a long-memory Gamma
                  path, across Taylor control degrees.
* ``cv``        — quantiles of the per-pair standard-deviation ratio of the
                  controlled density estimator, by control degree.
* ``inference`` — PL versus GMM estimation-error ratios over replicated paths.
* ``forecast``  — percentage change of out-of-sample forecast errors when the
                  conditional-mean forecast uses PL instead of GMM parameters.

All randomness flows from one master seed through named hash streams, so any
suite is byte-reproducible.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .dist import Gamma
from .forecast import forecast_errors
from .infer import FitConfig, eval_metrics, gmm_fit, pl_fit
from .pairwise import GammaPairBatch
from .trawl import ExponentialTrawl, GammaTrawl, ModelSpec, simulate

GRAD_MODEL = ModelSpec(Gamma(6.0, 1.75), GammaTrawl(1.25, 1.0))
GRAD_LAGS = (1, 3, 5, 10, 15, 20)
INFER_MODEL = ModelSpec(Gamma(3.0, 0.75), ExponentialTrawl(0.25))


def stream_rng(master_seed, label, index=0):
    """Named deterministic RNG stream: hash(label:index) mixed with the master seed."""
    digest = hashlib.sha256(f"{label}:{index}".encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *words]))


def parallel_map(fn, n_items, threads, label):
    """Deterministic parallel map: item i always runs on stream (label, i)."""
    if threads <= 1:
        return [fn(i) for i in range(n_items)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_items)))


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


# ---------------------------------------------------------------------------
# grad suite
# ---------------------------------------------------------------------------


def _grad_batches(model, path, tau):
    return {k: GammaPairBatch(model, path[:-k], path[k:], k * tau) for k in GRAD_LAGS}


def run_grad_suite(out_dir, master_seed=0, n=1500, tau=0.5, n_samples=750, replications=24, n_ref=12_000):
    """Bias/sd table of the SF and PG gradient estimators on a long-memory path."""
    os.makedirs(out_dir, exist_ok=True)
    path = simulate(GRAD_MODEL, n, tau, stream_rng(master_seed, "bench.grad.path"))
    fitted = gmm_fit(path, tau, GRAD_MODEL, FitConfig(lags=GRAD_LAGS))
    batches = _grad_batches(fitted, path, tau)

    def total_gradient(stats_by_lag):
        total = np.zeros(fitted.theta.size)
        var = np.zeros(fitted.theta.size)
        for stats in stats_by_lag:
            total += stats.log_gradient.sum(axis=1)
            var += np.sum(stats.log_gradient_se() ** 2, axis=1)
        return total, np.sqrt(var)

    # high-precision reference with the strongest controls
    ref_rng = stream_rng(master_seed, "bench.grad.reference")
    ref_stats = [batches[k].estimate(batches[k].sample(ref_rng, n_ref), cv_degree=3, engine="pg") for k in GRAD_LAGS]
    reference, reference_se = total_gradient(ref_stats)

    degrees = (0, 1, 2, 3)
    engines = ("sf", "pg")
    sums = {key: np.zeros(fitted.theta.size) for key in [(e, m) for e in engines for m in degrees]}
    sums_sq = {key: np.zeros(fitted.theta.size) for key in sums}
    sd_delta = {key: np.zeros(fitted.theta.size) for key in sums}
    for rep in range(replications):
        rng = stream_rng(master_seed, "bench.grad.rep", rep)
        totals = {key: np.zeros(fitted.theta.size) for key in sums}
        var_key = {key: np.zeros(fitted.theta.size) for key in sums}
        for k in GRAD_LAGS:
            batch = batches[k]
            z = batch.sample(rng, n_samples)
            many = batch.estimate_many(z, engines=engines, degrees=degrees)
            for key, stats in many.items():
                totals[key] += stats.log_gradient.sum(axis=1)
                var_key[key] += np.sum(stats.log_gradient_se() ** 2, axis=1)
        for key in sums:
            sums[key] += totals[key]
            sums_sq[key] += totals[key] ** 2
            sd_delta[key] += np.sqrt(var_key[key]) / replications

    param_names = list(fitted.param_names)
    rows = []
    results = {}
    for key in sums:
        engine, m = key
        mean = sums[key] / replications
        emp_sd = np.sqrt(np.maximum(sums_sq[key] / replications - mean**2, 0.0) * replications / (replications - 1))
        bias = mean - reference
        results[key] = {"bias": bias, "sd": sd_delta[key], "sd_empirical": emp_sd}
        for i, name in enumerate(param_names):
            rows.append([engine, m, name, bias[i], sd_delta[key][i], emp_sd[i], reference[i]])
    _write_csv(
        os.path.join(out_dir, "grad_bias_sd.csv"),
        ["engine", "cv_degree", "param", "bias", "sd", "sd_empirical", "reference"],
        rows,
    )
    return {
        "reference": reference,
        "reference_se": reference_se,
        "results": results,
        "theta_hat": fitted.theta,
        "param_names": param_names,
        "replications": replications,
    }


# ---------------------------------------------------------------------------
# cv suite
# ---------------------------------------------------------------------------


def run_cv_suite(out_dir, master_seed=0, n=750, tau=0.5, n_samples=750, degrees=(1, 2, 3, 4, 5)):
    """Quantiles of the per-pair sd ratio of the controlled density estimator."""
    os.makedirs(out_dir, exist_ok=True)
    prior_rng = stream_rng(master_seed, "bench.cv.prior")
    alpha = prior_rng.gamma(6.0, 1.0 / 4.0)
    beta = prior_rng.gamma(6.0, 1.0 / 4.0)
    lam = prior_rng.gamma(4.0, 1.0 / 4.0)
    truth = ModelSpec(Gamma(alpha, beta), ExponentialTrawl(lam))
    path = simulate(truth, n, tau, stream_rng(master_seed, "bench.cv.path"))
    try:
        fitted = gmm_fit(path, tau, truth, FitConfig(lags=(1, 3, 5)))
    except ValueError:
        fitted = truth
    batch = GammaPairBatch(fitted, path[:-1], path[1:], tau)
    z = batch.sample(stream_rng(master_seed, "bench.cv.samples"), n_samples)
    fs = batch.f(z)
    sd_plain = fs.std(axis=1, ddof=1)
    max_m = max(degrees)
    coef, _ = batch.taylor_pieces(max_m)
    dz = z - batch.z0
    powers = np.stack([dz**l for l in range(1, max_m + 1)])
    mom, _ = batch.moment_pieces(max_m)
    ratios = {}
    quantiles = (0.05, 0.25, 0.5, 0.75, 0.95)
    rows = []
    for m in degrees:
        t_val = np.einsum("mp,mpn->pn", coef[:m], powers[:m])
        tc = t_val - t_val.mean(axis=1, keepdims=True)
        fc = fs - fs.mean(axis=1, keepdims=True)
        var_t = np.mean(tc**2, axis=1)
        gamma = np.where(var_t > 0.0, np.mean(fc * tc, axis=1) / np.where(var_t > 0.0, var_t, 1.0), 0.0)
        sd_cv = (fs - gamma[:, None] * t_val).std(axis=1, ddof=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(sd_plain > 0.0, sd_cv / np.where(sd_plain > 0.0, sd_plain, 1.0), 1.0)
        ratios[m] = r
        for q in quantiles:
            rows.append([m, q, float(np.quantile(r, q))])
    _write_csv(os.path.join(out_dir, "cv_sd_ratio.csv"), ["m", "quantile", "ratio"], rows)
    return {"theta_true": truth.theta, "theta_hat": fitted.theta, "ratios": ratios}


# ---------------------------------------------------------------------------
# inference suite
# ---------------------------------------------------------------------------


def run_inference_suite(out_dir, master_seed=0, replicates=20, n=500, tau=1.0, threads=1, config=None):
    """PL vs GMM estimation errors over replicated Gamma-exponential paths."""
    os.makedirs(out_dir, exist_ok=True)
    truth = INFER_MODEL
    if config is None:
        config = FitConfig(lags=(1, 3, 5), samples_per_pair=400, cv_degree=2, max_iterations=30,
                           gradient_tolerance=1.0)

    def one(rep):
        rng = stream_rng(master_seed, "bench.inference.rep", rep)
        x = simulate(truth, n, tau, rng)
        cfg = FitConfig(
            lags=config.lags,
            samples_per_pair=config.samples_per_pair,
            cv_degree=config.cv_degree,
            max_iterations=config.max_iterations,
            gradient_tolerance=config.gradient_tolerance,
            master_seed=int(stream_rng(master_seed, "bench.inference.noise", rep).integers(2**31)),
        )
        gmm = gmm_fit(x, tau, truth, cfg)
        pl = pl_fit(x, tau, truth, cfg, init=gmm).model
        return gmm, pl

    fits = parallel_map(one, replicates, threads, "bench.inference")
    gmm_models = [f[0] for f in fits]
    pl_models = [f[1] for f in fits]
    gmm_report = eval_metrics(gmm_models, truth)
    pl_report = eval_metrics(pl_models, truth)
    rows = []
    for metric in ("rmse", "mae", "medae"):
        for i, name in enumerate(gmm_report["param_names"]):
            g, p = gmm_report[metric][i], pl_report[metric][i]
            rows.append([metric, name, g, p, p / g if g > 0 else math.nan])
    for metric in ("mean_kl", "median_kl", "mean_acf_l2", "mean_acf_l1"):
        g, p = gmm_report[metric], pl_report[metric]
        rows.append([metric, "-", g, p, p / g if g > 0 else math.nan])
    _write_csv(
        os.path.join(out_dir, "inference_ratio.csv"),
        ["metric", "param", "gmm", "pl", "ratio"],
        rows,
    )
    return {"gmm": gmm_report, "pl": pl_report, "gmm_models": gmm_models, "pl_models": pl_models}


# ---------------------------------------------------------------------------
# forecast suite
# ---------------------------------------------------------------------------


def run_forecast_suite(out_dir, master_seed=0, n_train=250, horizons=(1, 2, 3, 5, 10, 15), eval_replicates=8,
                       n_eval=1500, tau=1.0):
    """Percentage change in forecast errors when PL parameters replace GMM ones."""
    os.makedirs(out_dir, exist_ok=True)
    truth = INFER_MODEL
    x = simulate(truth, n_train, tau, stream_rng(master_seed, "bench.forecast.train"))
    config = FitConfig(lags=(1, 3, 5), samples_per_pair=400, cv_degree=2, max_iterations=30,
                       gradient_tolerance=1.0, master_seed=master_seed)
    gmm = gmm_fit(x, tau, truth, config)
    pl = pl_fit(x, tau, truth, config, init=gmm).model
    rows = []
    table = {}
    errs = {}
    for label, model in (("gmm", gmm), ("pl", pl)):
        rng = stream_rng(master_seed, "bench.forecast.eval")  # same paths for both fits
        errs[label] = {
            (r.horizon, r.metric): r.value
            for r in forecast_errors(model, truth, horizons, eval_replicates, rng, n_path=n_eval, tau=tau)
        }
    for h in horizons:
        for metric in ("mae", "medae", "rmse"):
            g = errs["gmm"][(h, metric)]
            p = errs["pl"][(h, metric)]
            change = 100.0 * (p - g) / g
            table[(h, metric)] = change
            rows.append([h, metric, g, p, change])
    _write_csv(
        os.path.join(out_dir, "forecast_percent_change.csv"),
        ["horizon", "metric", "gmm_error", "pl_error", "percent_change"],
        rows,
    )
    return {"gmm_model": gmm, "pl_model": pl, "percent_change": table}
