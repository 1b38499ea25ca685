"""Command-line harness: data bundles, fitting, evaluation and experiments.

Bundles and results are directories holding a ``manifest.json`` plus one
matrix file per array. Matrices are comma-separated text with one row per
component (``%.17g``, so values round-trip exactly) or raw little-endian
float64 when ``--binary`` is given.

Trace tables hold only deterministic columns; wall-clock times go to a
separate ``timing.csv`` so that repeated runs give identical trace files.
"""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import concat_ica, mvica_fit, perm_ica
from .metrics import align_sources, precision_error, r2_score, reconstruction_error, unmixing_recovery_score
from .model import ModelParams, MultiViewDataset, neg_log_likelihood, unmix, weighted_mean_sources
from .optim_em import EmConfig, fit_em
from .optim_mle import ConvergenceTrace, OptimizerConfig, fit_mle
from .synth import SynthConfig, adaptive_scaling_config, generate_dataset

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
REPORT_VERSION = 1
ALGORITHMS = ("avica-mle", "avica-em", "mvica", "concat", "perm")
EXPERIMENTS = ("reconstruction", "convergence", "adaptive-scaling", "precision-recovery", "transfer")
TRACE_COLUMNS = ("sweep", "gradW_inf", "gradEta_inf", "gradSigma_inf", "nll")


class BundleError(ValueError):
    """Malformed or incomplete bundle/result directory."""


# ---------------------------------------------------------------- matrix I/O


def write_matrix(path: Path, a, binary: bool = False) -> str:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if binary:
        path = path.with_suffix(".bin")
        path.write_bytes(np.ascontiguousarray(a, dtype="<f8").tobytes())
    else:
        path = path.with_suffix(".csv")
        np.savetxt(path, a, fmt="%.17g", delimiter=",")
    return path.name


def read_matrix(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise BundleError(f"missing file {path}")
    if path.suffix == ".bin":
        a = np.frombuffer(path.read_bytes(), dtype="<f8")
    else:
        a = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    if a.size != int(np.prod(shape)):
        raise BundleError(f"{path.name}: expected shape {tuple(shape)}, found {a.size} values")
    return a.reshape(shape).astype(float)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_manifest(directory: Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise BundleError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


# ------------------------------------------------------------------- bundles


def save_bundle(out: Path, data: MultiViewDataset, truth=None, config: Optional[SynthConfig] = None, binary=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "m": data.m,
        "k": data.k,
        "n": data.n,
        "binary": binary,
        "views": [write_matrix(out / f"view_{i:03d}", x, binary) for i, x in enumerate(data.views)],
        "truth": None,
        "seed": None if config is None else config.seed,
        "config": None if config is None else config.to_dict(),
    }
    if truth is not None:
        manifest["truth"] = {
            "sources": write_matrix(out / "true_sources", truth.sources, binary),
            "mixing": [write_matrix(out / f"true_mixing_{i:03d}", A, binary) for i, A in enumerate(truth.mixing)],
            "lambda_sq": write_matrix(out / "true_lambda_sq", truth.lambda_sq, binary),
            "sigma": write_matrix(out / "true_sigma", truth.sigma, binary),
        }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_bundle(directory):
    """Read a dataset bundle.

    Returns
    -------
    data : MultiViewDataset
    truth : dict or None
        ``sources``, ``mixing``, ``lambda_sq`` and ``sigma`` arrays.
    """
    directory = Path(directory)
    man = _read_manifest(directory)
    if man.get("kind") != "dataset":
        raise BundleError(f"{directory} is not a dataset bundle")
    m, k, n = man["m"], man["k"], man["n"]
    if len(man["views"]) != m:
        raise BundleError(f"manifest lists {len(man['views'])} views, expected {m}")
    data = MultiViewDataset([read_matrix(directory / f, (k, n)) for f in man["views"]])
    truth = None
    if man.get("truth"):
        t = man["truth"]
        truth = {
            "sources": read_matrix(directory / t["sources"], (k, n)),
            "mixing": np.array([read_matrix(directory / f, (k, k)) for f in t["mixing"]]),
            "lambda_sq": read_matrix(directory / t["lambda_sq"], (m, k)),
            "sigma": read_matrix(directory / t["sigma"], (k,)),
        }
    return data, truth


# ------------------------------------------------------------------- results


def write_trace(out: Path, trace: ConvergenceTrace) -> None:
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for s in range(len(trace)):
            w.writerow([s] + [repr(float(v[s])) for v in (trace.grad_unmixing, trace.grad_precision, trace.grad_sigma, trace.nll)])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sweep", "seconds"))
        for s, sec in enumerate(trace.seconds):
            w.writerow((s, repr(sec)))


def save_result(out: Path, algorithm: str, params: ModelParams, sources, data: MultiViewDataset, fit=None, binary=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "result",
        "algorithm": algorithm,
        "m": params.m,
        "k": params.k,
        "n": int(np.asarray(sources).shape[1]),
        "mu_sq": params.mu_sq,
        "unmixing": [write_matrix(out / f"unmixing_{i:03d}", W, binary) for i, W in enumerate(params.unmixing)],
        "lambda_sq": write_matrix(out / "lambda_sq", params.lambda_sq, binary),
        "sigma": write_matrix(out / "sigma", params.sigma, binary),
        "sources": write_matrix(out / "sources", sources, binary),
        "nll": neg_log_likelihood(params, data),
        "terminated": None,
        "sweeps": 0,
        "final_tol": None,
    }
    if fit is not None:
        write_trace(out, fit.trace)
        manifest.update(
            terminated=fit.terminated.value,
            sweeps=len(fit.trace),
            final_tol=fit.trace.tolerance() if len(fit.trace) else None,
        )
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_result(directory):
    """Read a result directory; returns ``(manifest, params, sources)``."""
    directory = Path(directory)
    man = _read_manifest(directory)
    if man.get("kind") != "result":
        raise BundleError(f"{directory} is not a result directory")
    m, k, n = man["m"], man["k"], man["n"]
    W = np.array([read_matrix(directory / f, (k, k)) for f in man["unmixing"]])
    params = ModelParams(
        W,
        read_matrix(directory / man["lambda_sq"], (m, k)),
        read_matrix(directory / man["sigma"], (k,)),
        man["mu_sq"],
    )
    return man, params, read_matrix(directory / man["sources"], (k, n))


# ------------------------------------------------------------------- fitting


def run_algorithm(algorithm: str, data: MultiViewDataset, config: OptimizerConfig):
    """Fit one method; returns ``(params, sources, fit_or_None)``.

    AVICA and MVICA start from ConcatICA with precisions ``1/m`` and unit
    noise levels. ConcatICA and PermICA report those same defaults.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    if algorithm == "perm":
        res = perm_ica(data, config)
        return res.as_init(0.0), res.sources, None
    init = concat_ica(data, config=config)
    if algorithm == "concat":
        return init.as_init(0.0), init.sources, None
    if algorithm == "mvica":
        fit = mvica_fit(data, config, init.as_init())
    elif algorithm == "avica-mle":
        fit = fit_mle(data, config, init.as_init(config.mu_sq))
    else:
        em = EmConfig(
            tol=config.tol,
            mu_sq=config.mu_sq,
            max_sweeps=config.max_sweeps,
            ls_max_halvings=config.ls_max_halvings,
            hess_floor=config.hess_floor,
            seed=config.seed,
            rescale_steps=config.rescale_steps,
            max_log_scale=config.max_log_scale,
        )
        fit = fit_em(data, em, init.as_init(config.mu_sq))
    return fit.params, fit.sources, fit


def evaluate(params: ModelParams, sources, data: MultiViewDataset, truth: dict, algorithm: str = "avica-mle") -> dict:
    """Metric record of a fit against the ground truth."""
    if truth is None:
        raise BundleError("ground truth is required for evaluation")
    record = {
        "reconstruction_error": reconstruction_error(truth["sources"], sources),
        "unmixing_recovery_score": unmixing_recovery_score(params.unmixing, truth["mixing"]),
        "nll": neg_log_likelihood(params, data),
    }
    if algorithm.startswith("avica"):
        alignment = align_sources(truth["sources"], sources)
        record["precision_error"] = precision_error(truth["lambda_sq"], params.lambda_sq, alignment)
    return record


# --------------------------------------------------------------- experiments


def _synth(seed, n=1000, m=10, k=5, **kw):
    return generate_dataset(SynthConfig(m=m, k=k, n=n, seed=seed, **kw))


def _truth_dict(gt):
    return {"sources": gt.sources, "mixing": gt.mixing, "lambda_sq": gt.lambda_sq, "sigma": gt.sigma}


def _exp_reconstruction(seeds, args, config):
    methods = ("avica-mle", "mvica", "concat", "perm")
    for level in (-2.0, -1.0, 0.0, 1.0, 2.0):
        for seed in seeds:
            data, gt = _synth(seed, args.n, args.m, args.k, mean_log_sigma=level)
            for method in methods:
                params, src, _ = run_algorithm(method, data, replace(config, seed=seed))
                yield level, seed, method, "reconstruction_error", reconstruction_error(gt.sources, src)


def _exp_convergence(seeds, args, config):
    cfg = replace(config, mu_sq=0.0)
    for seed in seeds:
        data, _ = _synth(seed, args.n, args.m, args.k)
        for method in ("avica-mle", "avica-em"):
            _, _, fit = run_algorithm(method, data, replace(cfg, seed=seed))
            if args.out is not None:
                trace_dir = Path(args.out) / "traces" / f"{method}_seed{seed:04d}"
                trace_dir.mkdir(parents=True, exist_ok=True)
                write_trace(trace_dir, fit.trace)
            yield "mu_sq=0", seed, method, "final_tol", fit.trace.tolerance()
            yield "mu_sq=0", seed, method, "nll", fit.trace.nll[-1]
            yield "mu_sq=0", seed, method, "sweeps", float(len(fit.trace))


def _exp_adaptive(seeds, args, config):
    methods = ("avica-mle", "mvica", "concat", "perm")
    for variance in (1e-2, 1e-1, 1.0, 1e1, 1e2):
        for seed in seeds:
            data, gt = generate_dataset(adaptive_scaling_config(variance, seed=seed, n=args.n))
            for method in methods:
                _, src, _ = run_algorithm(method, data, replace(config, seed=seed))
                yield variance, seed, method, "reconstruction_error", reconstruction_error(gt.sources, src)


def _exp_precision(seeds, args, config):
    for seed in seeds:
        data, gt = _synth(seed, args.n, args.m, args.k)
        params, src, _ = run_algorithm("avica-mle", data, replace(config, seed=seed))
        alignment = align_sources(gt.sources, src)
        yield 0.0, seed, "avica-mle", "precision_error", precision_error(gt.lambda_sq, params.lambda_sq, alignment)
        uniform = np.full_like(gt.lambda_sq, 1.0 / data.m)
        yield 0.0, seed, "uniform", "precision_error", precision_error(gt.lambda_sq, uniform, alignment)


def _exp_transfer(seeds, args, config):
    """Fit on the first half of the samples, predict each view on the second.

    The shared response is the precision-weighted average of the other
    views' unmixed test data; the held-out view is predicted by mapping it
    back through the inverse of its own unmixing matrix.
    """
    methods = ("avica-mle", "mvica", "concat", "perm")
    for seed in seeds:
        data, _ = _synth(seed, 2 * args.n, args.m, args.k)
        train = MultiViewDataset(data.views[:, :, : args.n])
        test = MultiViewDataset(data.views[:, :, args.n :])
        for method in methods:
            params, _, _ = run_algorithm(method, train, replace(config, seed=seed))
            lam = params.lambda_sq if method == "avica-mle" else np.full_like(params.lambda_sq, 1.0 / data.m)
            Y = unmix(params, test)
            for i in range(data.m):
                keep = np.arange(data.m) != i
                s_hat = weighted_mean_sources(Y[keep], lam[keep] / lam[keep].sum(axis=0))
                pred = np.linalg.solve(params.unmixing[i], s_hat)
                yield i, seed, method, "r2", r2_score(test.views[i], pred)


_EXPERIMENTS = {
    "reconstruction": _exp_reconstruction,
    "convergence": _exp_convergence,
    "adaptive-scaling": _exp_adaptive,
    "precision-recovery": _exp_precision,
    "transfer": _exp_transfer,
}


def run_experiment(name: str, args, config: OptimizerConfig):
    """Return the sorted record list ``(condition, seed, method, metric, value)``."""
    if name not in _EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    seeds = range(args.first_seed, args.first_seed + args.seeds)
    records = list(_EXPERIMENTS[name](seeds, args, config))
    # stable sort keeps the method order within each (condition, seed)
    return sorted(records, key=lambda r: (r[0], r[1]))


def summarize(records):
    """Median and quartiles per (condition, method, metric)."""
    groups = {}
    for cond, _, method, metric, value in records:
        groups.setdefault((cond, method, metric), []).append(value)
    rows = []
    for key, values in groups.items():
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        rows.append(key + (len(values), float(med), float(q1), float(q3)))
    return rows


def write_report(out: Path, name: str, records, config_echo: dict) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    header = f"# avica-report v{REPORT_VERSION} experiment={name} config={json.dumps(config_echo, sort_keys=True)}\n"
    with open(out / "report.csv", "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("condition", "seed", "method", "metric", "value"))
        for cond, seed, method, metric, value in records:
            w.writerow((cond, seed, method, metric, repr(float(value))))
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("condition", "method", "metric", "count", "median", "q1", "q3"))
        for row in summarize(records):
            w.writerow(row[:4] + tuple(repr(v) for v in row[4:]))


# ------------------------------------------------------------------ commands


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(
        tol=args.tol,
        mu_sq=args.mu_sq,
        max_sweeps=args.max_sweeps,
        ls_max_halvings=args.ls_max_halvings,
        hess_floor=args.hess_floor,
        seed=args.seed,
        rescale_steps=not args.no_rescale,
    )


def cmd_generate(args) -> int:
    if args.sigma is not None and args.mean_log_sigma is not None:
        raise ValueError("--sigma and --mean-log-sigma are mutually exclusive")
    config = SynthConfig(
        m=args.m,
        k=args.k,
        n=args.n,
        seed=args.seed,
        mean_log_sigma=args.mean_log_sigma or 0.0,
        std_log_sigma=args.std_log_sigma,
        dirichlet_alpha=args.dirichlet_alpha,
        sigma_override=args.sigma,
    )
    data, truth = generate_dataset(config)
    save_bundle(args.out, data, truth, config, args.binary)
    print(f"wrote bundle m={data.m} k={data.k} n={data.n} to {args.out}")
    return 0


def cmd_fit(args) -> int:
    data, _ = load_bundle(args.bundle)
    config = _optimizer_config(args)
    params, sources, fit = run_algorithm(args.algorithm, data, config)
    man = save_result(args.out, args.algorithm, params, sources, data, fit, args.binary)
    print(json.dumps({key: man[key] for key in ("algorithm", "terminated", "sweeps", "final_tol", "nll")}))
    return 0


def cmd_evaluate(args) -> int:
    data, truth = load_bundle(args.bundle)
    man, params, sources = load_result(args.result)
    record = evaluate(params, sources, data, truth, man["algorithm"])
    text = json.dumps(record, sort_keys=True)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_experiment(args) -> int:
    config = _optimizer_config(args)
    records = run_experiment(args.name, args, config)
    echo = {"seeds": args.seeds, "first_seed": args.first_seed, "m": args.m, "k": args.k, "n": args.n}
    echo.update({k: getattr(config, k) for k in ("tol", "mu_sq", "max_sweeps", "hess_floor", "rescale_steps")})
    write_report(args.out, args.name, records, echo)
    for row in summarize(records):
        print("%s %s %s median=%.4g" % (row[0], row[1], row[2], row[4]))
    return 0


def _add_optimizer_flags(p):
    d = OptimizerConfig()
    p.add_argument("--tol", type=float, default=d.tol)
    p.add_argument("--mu-sq", type=float, default=d.mu_sq)
    p.add_argument("--max-sweeps", type=int, default=d.max_sweeps)
    p.add_argument("--ls-max-halvings", type=int, default=d.ls_max_halvings)
    p.add_argument("--hess-floor", type=float, default=d.hess_floor)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-rescale", action="store_true", help="disable joint rescaling searches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avica", description="Adaptive multiview ICA")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset bundle")
    g.add_argument("--m", type=int, default=10)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mean-log-sigma", type=float, default=None)
    g.add_argument("--std-log-sigma", type=float, default=float(np.sqrt(0.5)))
    g.add_argument("--dirichlet-alpha", type=float, default=1.0)
    g.add_argument("--sigma", type=float, default=None, help="use this noise level for every source")
    g.add_argument("--binary", action="store_true", help="store matrices as little-endian float64")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model to a bundle")
    f.add_argument("bundle")
    f.add_argument("--algorithm", choices=ALGORITHMS, default="avica-mle")
    _add_optimizer_flags(f)
    f.add_argument("--binary", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="score a result against the ground truth")
    e.add_argument("result")
    e.add_argument("bundle")
    e.add_argument("--out", default=None, help="also write the metrics JSON here")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run a seeded synthetic experiment")
    x.add_argument("name", choices=EXPERIMENTS)
    x.add_argument("--seeds", type=int, default=100)
    x.add_argument("--first-seed", type=int, default=0)
    x.add_argument("--m", type=int, default=10)
    x.add_argument("--k", type=int, default=5)
    x.add_argument("--n", type=int, default=1000)
    _add_optimizer_flags(x)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"avica: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
