"""Command line entry point: simulate | fit | forecast | bench.

All commands are byte-reproducible given their arguments and ``--seed``; CSV
numbers carry 17 significant digits so reproducibility is checkable by diff.
Exit codes: 2 for malformed configuration, 3 for unsupported model/data
combinations.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench
from .dist import (
    Beta,
    DoubleSidedMaxwell,
    Gamma,
    Gaussian,
    InverseGaussian,
    NegativeBinomial,
    NormalInverseGaussian,
    Poisson,
    Skellam,
    Uniform,
    UnsupportedError,
)
from .forecast import conditional_mean, conditional_sample
from .infer import FitConfig, gmm_fit, pl_fit
from .trawl import (
    ExponentialTrawl,
    GammaTrawl,
    InvGaussianTrawl,
    ModelSpec,
    SupExponentialTrawl,
    read_path_csv,
    simulate,
    write_path_csv,
)

SEED_FAMILIES = {
    "poisson": Poisson,
    "negative_binomial": NegativeBinomial,
    "skellam": Skellam,
    "uniform": Uniform,
    "beta": Beta,
    "gamma": Gamma,
    "inverse_gaussian": InverseGaussian,
    "gaussian": Gaussian,
    "ds_maxwell": DoubleSidedMaxwell,
    "nig": NormalInverseGaussian,
}
TRAWL_KINDS = {
    "exponential": ExponentialTrawl,
    "sup_exponential": SupExponentialTrawl,
    "inv_gaussian": InvGaussianTrawl,
    "gamma": GammaTrawl,
}


class ConfigError(Exception):
    pass


def model_from_json(doc) -> ModelSpec:
    try:
        seed_doc = doc["seed"]
        trawl_doc = doc["trawl"]
        seed_cls = SEED_FAMILIES[seed_doc["family"]]
        trawl_cls = TRAWL_KINDS[trawl_doc["kind"]]
        seed = seed_cls(**seed_doc["params"])
        if trawl_cls is SupExponentialTrawl:
            trawl = SupExponentialTrawl(
                tuple(trawl_doc["params"]["weights"]), tuple(trawl_doc["params"]["rates"])
            )
        else:
            trawl = trawl_cls(**trawl_doc["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model configuration: {exc}") from exc
    return ModelSpec(seed, trawl)


def model_to_json(model: ModelSpec) -> dict:
    family = {v: k for k, v in SEED_FAMILIES.items()}[type(model.seed)]
    kind = {v: k for k, v in TRAWL_KINDS.items()}[type(model.trawl)]
    seed_params = {name: getattr(model.seed, name) for name in model.seed.param_names}
    if isinstance(model.trawl, SupExponentialTrawl):
        trawl_params = {"weights": list(model.trawl.weights), "rates": list(model.trawl.rates)}
    else:
        trawl_params = {name: getattr(model.trawl, name) for name in model.trawl.param_names}
    return {"seed": {"family": family, "params": seed_params}, "trawl": {"kind": kind, "params": trawl_params}}


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        line = f" (line {exc.lineno})" if isinstance(exc, json.JSONDecodeError) else ""
        raise ConfigError(f"cannot read {what} {path}{line}: {exc}") from exc


def _fit_config_from_json(doc, seed):
    fields = {}
    for key in (
        "lags",
        "samples_per_pair",
        "cv_degree",
        "optimizer",
        "max_iterations",
        "gradient_tolerance",
        "adaptive_samples",
        "target_rel_var",
        "engine",
    ):
        if key in doc:
            fields[key] = tuple(doc[key]) if key == "lags" else doc[key]
    try:
        return FitConfig(master_seed=seed, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad fit configuration: {exc}") from exc


def cmd_simulate(args):
    doc = _load_json(args.config, "config")
    model = model_from_json(doc)
    try:
        n = int(doc["n"])
        tau = float(doc["tau"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config needs integer n and positive tau: {exc}") from exc
    rng = bench.stream_rng(args.seed, "cli.simulate")
    x = simulate(model, n, tau, rng)
    write_path_csv(x, tau, args.out)
    marg = model.marginal()
    print(f"wrote {args.out}: n={n} tau={tau:.17g}")
    print(
        f"marginal mean={marg.mean():.17g} variance={marg.variance():.17g} "
        f"acf(tau)={model.trawl.acf(tau):.17g}"
    )
    return 0


def cmd_fit(args):
    t, x = read_path_csv(args.path)
    if t.size < 2:
        raise ConfigError("path file must contain at least two observations")
    tau = float(t[1] - t[0])
    doc = _load_json(args.config, "config")
    template = model_from_json(doc)
    config = _fit_config_from_json(doc.get("fit", {}), args.seed)
    if not template.seed.discrete and np.all(x == np.round(x)):
        print("error: integer-valued path with a continuous seed family; pick a discrete family", file=sys.stderr)
        return 3
    try:
        gmm = gmm_fit(x, tau, template, config)
        report = {
            "method": args.method,
            "tau": tau,
            "n": int(x.size),
            "gmm": model_to_json(gmm),
            "gmm_theta": gmm.theta.tolist(),
            "param_names": list(template.param_names),
        }
        if args.method == "pl":
            res = pl_fit(x, tau, template, config, init=gmm)
            report["pl"] = model_to_json(res.model)
            report["pl_theta"] = res.model.theta.tolist()
            report["objective_trace"] = res.objective_trace
            report["gradient_norm_trace"] = res.gradient_norm_trace
            report["diagnostics"] = res.diagnostics
            if args.timings:
                report["wall_time_seconds"] = res.wall_time
    except UnsupportedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out}")
    return 0


def cmd_forecast(args):
    t, x = read_path_csv(args.path)
    model = model_from_json(_load_json(args.model, "model"))
    tau = float(t[1] - t[0]) if t.size > 1 else 1.0
    horizons = [int(h) for h in args.horizons.split(",")]
    last = float(x[-1])
    rows = []
    for h in horizons:
        point = conditional_mean(model, last, h * tau)
        row = [h, point]
        if args.samples > 0 and h > 0:
            rng = bench.stream_rng(args.seed, "cli.forecast", h)
            draws = conditional_sample(model, last, h * tau, args.samples, rng)
            row += [float(np.quantile(draws, q)) for q in (0.05, 0.5, 0.95)]
        elif args.samples > 0:
            row += [last, last, last]
        rows.append(row)
    header = ["horizon", "point"] + (["q05", "q50", "q95"] if args.samples > 0 else [])
    bench._write_csv(args.out, header, rows)
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args):
    suites = {
        "grad": lambda: bench.run_grad_suite(args.out, master_seed=args.seed),
        "cv": lambda: bench.run_cv_suite(args.out, master_seed=args.seed),
        "inference": lambda: bench.run_inference_suite(args.out, master_seed=args.seed, threads=args.threads),
        "forecast": lambda: bench.run_forecast_suite(args.out, master_seed=args.seed),
    }
    suites[args.suite]()
    print(f"wrote {args.suite} tables to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="trawlkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a trawl path to CSV")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit a model to a t,x CSV path")
    p_fit.add_argument("--path", required=True)
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--method", choices=("gmm", "pl"), default="pl")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--timings", action="store_true", help="include wall time in the report")
    p_fit.set_defaults(func=cmd_fit)

    p_fc = sub.add_parser("forecast", help="conditional-mean forecasts from the last observation")
    p_fc.add_argument("--path", required=True)
    p_fc.add_argument("--model", required=True)
    p_fc.add_argument("--horizons", default="1,5,10")
    p_fc.add_argument("--samples", type=int, default=0)
    p_fc.add_argument("--out", required=True)
    p_fc.add_argument("--seed", type=int, default=0)
    p_fc.set_defaults(func=cmd_forecast)

    p_b = sub.add_parser("bench", help="desk-scale benchmark suites")
    p_b.add_argument("--suite", choices=("grad", "cv", "inference", "forecast"), required=True)
    p_b.add_argument("--scale", choices=("desk",), default="desk")
    p_b.add_argument("--out", required=True)
    p_b.add_argument("--seed", type=int, default=0)
    p_b.add_argument("--threads", type=int, default=1)
    p_b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
