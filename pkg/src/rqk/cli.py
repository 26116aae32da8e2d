"""Command-line interface: ``simulate``, ``fit-gaussian``, ``fit-poisson``, ``bench``.

Exit codes: 0 success, 1 input error, 2 numerical failure (a partial fit
file with diagnostics is still written).
"""

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import bench as bench_mod
from .errors import OptimizerDiverged, ParseError, RqkError
from .gaussian import GaussianModel, fit_map, gaussian_log_prior, mh_sample, posterior_f, posterior_g, \
    rao_blackwell_f_band, confidence_band
from .poisson import PoissonModel, f_band, fit_laplace_map, latent_summary
from .simulate import simulate_gaussian, simulate_poisson

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
DATASET_FORMAT = "rqk-dataset/1"
FIT_FORMAT = "rqk-fit"
FIT_FORMAT_VERSION = 1
GRAD_TOL = 1e-3


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors (exit 1), not argparse's default 2
    def error(self, message):
        raise InputError(message)


def resolve_seed(seed):
    if seed is not None:
        return int(seed)
    env = os.environ.get("RQK_SEED")
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"RQK_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# files


def _num(v):
    return repr(float(v))


def write_table(path, header, columns, meta):
    lines = [f"# format: {DATASET_FORMAT}"]
    lines += [f"# {k}={v}" for k, v in meta.items()]
    lines.append(",".join(header))
    for row in zip(*columns):
        lines.append(",".join(_num(v) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path, kind):
    """Parse ``x,y1..ym`` (gaussian) or ``t,c1..cm`` (poisson).

    Returns ``(grid, Y, meta)``; ``meta`` holds ``# key=value`` comments.
    """
    prefix = {"gaussian": ("x", "y"), "poisson": ("t", "c")}[kind]
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    meta, rows, header = {}, [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        cells = [c.strip() for c in line.split(",")]
        if header is None:
            header = cells
            want = [prefix[0]] + [f"{prefix[1]}{i}" for i in range(1, len(cells))]
            if len(cells) < 2 or cells != want:
                raise ParseError(f"{path}: header must be {','.join(want[:2])},...; got {line!r}")
            continue
        if len(cells) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            vals = [float(c) for c in cells]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"{path}:{lineno}: NaN or infinite value")
        rows.append(vals)
    if header is None or not rows:
        raise ParseError(f"{path}: no data rows")
    data = np.array(rows)
    grid = data[:, 0]
    if np.any(np.diff(grid) <= 0):
        raise ParseError(f"{path}: {prefix[0]} must be strictly increasing")
    Y = data[:, 1:]
    if kind == "poisson" and (np.any(Y < 0) or np.any(Y != np.round(Y))):
        raise ParseError(f"{path}: counts must be non-negative integers")
    return grid, Y, meta


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload):
    Path(path).write_text(json.dumps(_clean(payload), indent=1) + "\n")


def _fit_header(model_name):
    return {"format": FIT_FORMAT, "format_version": FIT_FORMAT_VERSION, "model": model_name,
            "rqk_version": __version__}


def _parse_floats(text, what):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of numbers") from None


def _parse_ints(text, what):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of integers") from None
    if any(v < 1 for v in vals):
        raise InputError(f"{what} must be positive")
    return vals


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    seed = resolve_seed(args.seed)
    if args.n < 1 or args.m < 1:
        raise InputError("n and m must be at least 1")
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    truth = Path(args.truth) if args.truth else out.with_name(out.stem + ".truth.csv")
    m = args.m
    if args.kind == "gaussian":
        if args.sigma < 0:
            raise InputError("sigma must be non-negative")
        sim = simulate_gaussian(args.n, m, rng, sigma=args.sigma)
        meta = {"kind": "gaussian", "seed": seed, "sigma": _num(args.sigma)}
        write_table(out, ["x"] + [f"y{i}" for i in range(1, m + 1)], [sim.x] + list(sim.Y.T), meta)
        write_table(truth, ["x", "f"] + [f"g{i}" for i in range(1, m + 1)], [sim.x, sim.f] + list(sim.G.T), meta)
    else:
        if not args.delta > 0 or not args.base_rate > 0:
            raise InputError("delta and base rate must be positive")
        sim = simulate_poisson(args.n, m, rng, delta=args.delta, base_rate=args.base_rate)
        meta = {"kind": "poisson", "seed": seed, "delta": _num(args.delta)}
        counts = [c.astype(np.int64) for c in sim.counts.T]
        write_table(out, ["t"] + [f"c{i}" for i in range(1, m + 1)], [sim.t] + counts, meta)
        write_table(truth, ["t", "log_f"] + [f"log_lambda{i}" for i in range(1, m + 1)],
                    [sim.t, sim.f] + list(sim.log_rate.T), meta)
    print(f"wrote {out} and {truth}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-gaussian


def _gaussian_payload(model, theta, value, diagnostics, alpha):
    post_g = posterior_g(model, theta)
    post_f = posterior_f(model, theta)
    band = confidence_band([post_f.mean], [post_f.sd], alpha)
    return {
        "theta_star": model.hyperparams(theta).as_dict(),
        "logdensity_at_opt": value,
        "x": model.grid.points,
        "means": post_g.mean.reshape(model.m, model.n).T,
        "f_mean": post_f.mean,
        "bands": {"lower": band.lower, "upper": band.upper, "alpha": alpha},
        "diagnostics": diagnostics,
    }


def cmd_fit_gaussian(args):
    seed = resolve_seed(args.seed)
    grid, Y, _ = read_dataset(args.data, "gaussian")
    model = GaussianModel.stationary(grid, Y)
    init = bench_mod.default_init(Y) if args.init is None else _parse_floats(args.init, "--init")
    if init.size != model.n_params:
        raise InputError(f"--init needs {model.n_params} values ({','.join(model.names)})")
    if args.prior_sd is not None and not args.prior_sd > 0:
        raise InputError("--prior-sd must be positive")
    prior = gaussian_log_prior(init, args.prior_sd) if args.prior_sd else None
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    header = _fit_header("gaussian")
    try:
        fit = fit_map(model, init, prior=prior)
    except OptimizerDiverged as exc:
        write_json(args.out, {**header, "error": str(exc), "diagnostics": {"seed": seed, "converged": False}})
        print(f"optimizer diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    res = fit.result
    grad_norm = float(np.max(np.abs(res.grad))) if res.grad is not None and res.grad.size else 0.0
    diagnostics = {
        "iterations": res.iterations, "grad_norm": grad_norm, "seed": seed,
        "converged": bool(grad_norm < GRAD_TOL), "message": res.message,
    }
    payload = {**header, **_gaussian_payload(model, fit.theta, fit.log_post, diagnostics, args.alpha)}
    if args.mcmc:
        samples = mh_sample(model, fit.theta, fit.cov, args.n_samples, args.burn, seed=seed, prior=prior)
        thin = max(1, args.n_samples // args.band_draws)
        band, f_rb = rao_blackwell_f_band(model, samples.thetas[::thin], args.alpha)
        payload["mcmc"] = {
            "n_samples": args.n_samples, "burn": args.burn, "acceptance_rate": samples.acceptance_rate,
            "theta_mean": dict(zip(model.names, samples.thetas.mean(axis=0))), "band_draws": len(samples.thetas[::thin]),
        }
        payload["mcmc_bands"] = {"lower": band.lower, "upper": band.upper, "alpha": args.alpha}
        payload["mcmc_f_mean"] = f_rb
    write_json(args.out, payload)
    print(f"wrote {args.out} (log density {fit.log_post:.6g}, {res.iterations} iterations)")
    return EXIT_OK if diagnostics["converged"] else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# fit-poisson


def _parse_fix(text, names):
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise InputError(f"--fix entries look like name=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in names:
            raise InputError(f"unknown hyperparameter {k!r}; choose from {','.join(names)}")
        try:
            out[k] = float(v)
        except ValueError:
            raise InputError(f"--fix value for {k} is not a number") from None
    return out


def poisson_default_init(model):
    base = [np.log(0.1), np.log(0.5)]
    if model.n_params == 6:
        return np.array(base + [np.log(0.05), np.log(0.5)] + [np.log(0.2), np.log(0.1)])
    return np.array(base + [np.log(0.2), np.log(0.1)])


def cmd_fit_poisson(args):
    seed = resolve_seed(args.seed)
    grid, Y, meta = read_dataset(args.data, "poisson")
    delta = args.delta if args.delta is not None else float(meta["delta"]) if "delta" in meta else None
    if delta is None:
        raise InputError("--delta is required (the dataset does not record a bin width)")
    if not delta > 0:
        raise InputError("--delta must be positive")
    offset = 0.0 if args.no_offset else float(np.log((Y.sum() + 0.5) / (Y.size * delta)))
    if args.nonstationary:
        model = PoissonModel.nonstationary(grid, Y, delta, args.t0, args.s_t, offset=offset)
    else:
        model = PoissonModel.stationary(grid, Y, delta, offset=offset)
    init = poisson_default_init(model) if args.init is None else _parse_floats(args.init, "--init")
    if init.size != model.n_params:
        raise InputError(f"--init needs {model.n_params} values ({','.join(model.names)})")
    fixed = []
    if args.fix:
        for k, v in _parse_fix(args.fix, model.names).items():
            i = model.names.index(k)
            init[i] = v
            fixed.append(i)
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    header = _fit_header("poisson-nonstationary" if args.nonstationary else "poisson")
    trace = "hutchinson" if args.hutchinson else "exact"
    try:
        fit = fit_laplace_map(model, init, fixed=fixed or None, trace=trace, seed=seed)
    except (OptimizerDiverged, RqkError, np.linalg.LinAlgError) as exc:
        write_json(args.out, {**header, "error": str(exc), "diagnostics": {"seed": seed, "converged": False}})
        print(f"Laplace fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    res = fit.result
    summ = latent_summary(model, fit.theta, fit.mode)
    band = f_band(summ, args.alpha)
    grad_norm = float(np.max(np.abs(res.grad))) if res.grad is not None and res.grad.size else 0.0
    eta = fit.mode.x_star + model.offset
    payload = {
        **header,
        "theta_star": fit.theta.as_dict(),
        "logdensity_at_opt": fit.value,
        "t": model.grid.points,
        "delta": delta,
        "offset": offset,
        "means": np.exp(eta).reshape(model.m, model.n).T,
        "f_mean": summ.f_mean + offset,
        "bands": {"lower": band.lower + offset, "upper": band.upper + offset, "alpha": args.alpha,
                  "scale": "log intensity"},
        "diagnostics": {
            "iterations": res.iterations, "grad_norm": grad_norm, "seed": seed,
            "converged": bool(grad_norm < GRAD_TOL), "message": res.message,
            "mode_iterations": fit.mode.iterations, "clamped": fit.mode.clamped, "trace": trace,
            "fixed": [model.names[i] for i in sorted(fixed)],
        },
    }
    write_json(args.out, payload)
    print(f"wrote {args.out} (Laplace log likelihood {fit.value:.6g}, {res.iterations} iterations)")
    return EXIT_OK if payload["diagnostics"]["converged"] else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args):
    seed = resolve_seed(args.seed)
    ns = _parse_ints(args.ns, "--ns")
    ms = _parse_ints(args.ms, "--ms")
    if args.replicates < bench_mod.MIN_REPLICATES:
        raise InputError(f"--replicates must be at least {bench_mod.MIN_REPLICATES}")
    if args.mode == "density":
        result = bench_mod.bench_density(ns, ms, args.replicates, seed=seed, parallel=args.parallel)
    else:
        result = bench_mod.bench_map(ns, ms, args.replicates, seed=seed, parallel=args.parallel)
    prefix = Path(args.out)
    csv_path = prefix.with_suffix(".csv")
    json_path = prefix.with_suffix(".json")
    bench_mod.write_csv(result, csv_path)
    summary = bench_mod.summary(result)
    summary["seed"] = seed
    write_json(json_path, summary)
    for s in summary["slopes"]:
        print(f"{s['method']:>15} n={s['n']:<5} slope_m={s['slope_m']:.3f}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="rqk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rqk {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="write a synthetic dataset and its truth sidecar")
    s.add_argument("--kind", choices=("gaussian", "poisson"), required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--m", type=int, default=6)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="truth sidecar path (default: <out>.truth.csv)")
    s.add_argument("--sigma", type=float, default=1.0, help="gaussian noise sd (0 for noiseless)")
    s.add_argument("--delta", type=float, default=0.02, help="poisson bin width in seconds")
    s.add_argument("--base-rate", type=float, default=50.0, help="poisson baseline rate (per second)")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("fit-gaussian", help="MAP fit of the two-level Gaussian model")
    g.add_argument("data")
    g.add_argument("--out", required=True)
    g.add_argument("--init", help="comma-separated log-scale start (5 values)")
    g.add_argument("--prior-sd", type=float, help="sd of normal log-priors centred at --init")
    g.add_argument("--mcmc", action="store_true", help="also sample hyperparameters and emit averaged bands")
    g.add_argument("--n-samples", type=int, default=2000)
    g.add_argument("--burn", type=int, default=500)
    g.add_argument("--band-draws", type=int, default=200, help="thinned draws used for the averaged band")
    g.add_argument("--alpha", type=float, default=0.05)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_fit_gaussian)

    q = sub.add_parser("fit-poisson", help="Laplace fit of the Poisson latent Gaussian model")
    q.add_argument("data")
    q.add_argument("--out", required=True)
    q.add_argument("--delta", type=float, help="bin width (defaults to the value recorded in the file)")
    q.add_argument("--nonstationary", action="store_true")
    q.add_argument("--t0", type=float, default=0.3)
    q.add_argument("--s-t", type=float, default=0.2)
    q.add_argument("--init", help="comma-separated log-scale start")
    q.add_argument("--fix", help="hold hyperparameters, e.g. log_var_b=-20")
    q.add_argument("--no-offset", action="store_true", help="do not centre on the mean log rate")
    q.add_argument("--hutchinson", action="store_true", help="stochastic trace estimates in the gradient")
    q.add_argument("--alpha", type=float, default=0.05)
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_fit_poisson)

    b = sub.add_parser("bench", help="timing benchmarks")
    b.add_argument("--mode", choices=("density", "map"), default="density")
    b.add_argument("--ns", default="100")
    b.add_argument("--ms", default="2,4,8,16,32,64")
    b.add_argument("--replicates", type=int, default=5)
    b.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.json")
    b.add_argument("--seed", type=int)
    b.add_argument("--parallel", action="store_true", help="time cells concurrently")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (InputError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
