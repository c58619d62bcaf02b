"""Command line front end.

Subcommands cover the full workflow: ``generate`` synthetic datasets,
``fit`` a chain to data, ``density-grid`` and ``score`` off a saved
chain, and ``benchmark`` for the cross-validated comparison.  Data
outputs go only to the paths named in the arguments; progress and
diagnostics go to the error stream as ``key=value`` lines.

Configuration is a flat JSON object; every key has a default and
``--set key=value`` overrides file values.  The fully resolved mapping
is digested (first 12 hex chars of its SHA-256) and embedded in every
artifact together with the seed.

Config keys
-----------
latent_dim, concentration, n_iter, burn_in, thin, single_cluster,
scan_order, param_prior_std, init_log_signal, init_log_noise_precision,
init_log_lengthscale, hmc_x_step_size, hmc_params_step_size,
leapfrog_steps, target_accept : chain settings (see ``ChainConfig``).
niw_mean, niw_precision_scale, niw_scale, niw_dof : latent prior
fields; ``niw_scale`` is a scalar multiplying the identity.  Unset
fields keep the defaults for the resolved latent dimension.
standardize, m_inner, point_estimate, seed : pipeline settings.
datasets, methods, k_folds, seeds, dataset_seed : benchmark settings;
dataset entries are either ``shape:n`` or a file path.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import data as data_mod
from . import evaluation, predictive
from .evaluation import METHODS, config_digest
from .gp import KernelParams
from .latent_mixture import NiwPrior
from .sampler import ChainConfig, HmcConfig, run_chain


class UsageError(Exception):
    """Bad arguments or config keys; exits with the usage code."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def default_config() -> dict:
    c = ChainConfig()
    return {
        "latent_dim": c.latent_dim,
        "concentration": c.concentration,
        "n_iter": c.n_iter,
        "burn_in": c.burn_in,
        "thin": c.thin,
        "single_cluster": c.single_cluster,
        "scan_order": c.scan_order,
        "param_prior_std": c.param_prior_std,
        "init_log_signal": c.init_params.log_signal,
        "init_log_noise_precision": c.init_params.log_noise_precision,
        "init_log_lengthscale": c.init_params.log_lengthscale,
        "hmc_x_step_size": c.hmc_x.step_size,
        "hmc_params_step_size": c.hmc_params.step_size,
        "leapfrog_steps": c.hmc_x.leapfrog_steps,
        "target_accept": c.hmc_x.target_accept,
        "niw_mean": None,
        "niw_precision_scale": None,
        "niw_scale": None,
        "niw_dof": None,
        "standardize": True,
        "m_inner": 1000,
        "point_estimate": "max_joint",
        "seed": 0,
        "datasets": ["two_curve:100"],
        "methods": list(METHODS),
        "k_folds": 20,
        "seeds": [0],
        "dataset_seed": 0,
    }


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then file values, then ``key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path}: expected a flat JSON object")
        for key, value in loaded.items():
            if key not in cfg:
                raise UsageError(f"config {path}: unknown key {key!r}")
            cfg[key] = value
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set needs key=value, got {item!r}")
        if key not in cfg:
            raise UsageError(f"--set: unknown key {key!r}")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def _resolve_prior(cfg: dict, q: int) -> NiwPrior | None:
    keys = ("niw_mean", "niw_precision_scale", "niw_scale", "niw_dof")
    if all(cfg[k] is None for k in keys):
        return None
    base = NiwPrior.default(q)
    mean = base.mean if cfg["niw_mean"] is None else np.asarray(cfg["niw_mean"], float)
    r = base.precision_scale if cfg["niw_precision_scale"] is None else float(
        cfg["niw_precision_scale"]
    )
    scale = base.scale if cfg["niw_scale"] is None else float(cfg["niw_scale"]) * np.eye(q)
    dof = base.dof if cfg["niw_dof"] is None else float(cfg["niw_dof"])
    return NiwPrior(mean=mean, precision_scale=r, scale=scale, dof=dof)


def chain_config(cfg: dict, observed_dim: int) -> ChainConfig:
    """Build the chain settings from the flat mapping."""
    latent_dim = cfg["latent_dim"]
    q = observed_dim if latent_dim is None else int(latent_dim)
    std = cfg["param_prior_std"]
    return ChainConfig(
        latent_dim=latent_dim,
        prior=_resolve_prior(cfg, q),
        concentration=float(cfg["concentration"]),
        init_params=KernelParams(
            float(cfg["init_log_signal"]),
            float(cfg["init_log_noise_precision"]),
            float(cfg["init_log_lengthscale"]),
        ),
        param_prior_std=tuple(std) if isinstance(std, (list, tuple)) else float(std),
        n_iter=int(cfg["n_iter"]),
        burn_in=int(cfg["burn_in"]),
        thin=int(cfg["thin"]),
        hmc_x=HmcConfig(
            step_size=float(cfg["hmc_x_step_size"]),
            leapfrog_steps=int(cfg["leapfrog_steps"]),
            target_accept=float(cfg["target_accept"]),
        ),
        hmc_params=HmcConfig(
            step_size=float(cfg["hmc_params_step_size"]),
            leapfrog_steps=int(cfg["leapfrog_steps"]),
            target_accept=float(cfg["target_accept"]),
        ),
        single_cluster=bool(cfg["single_cluster"]),
        scan_order=str(cfg["scan_order"]),
    )


def _load_observations(path) -> data_mod.Dataset:
    if str(path).endswith(".csv"):
        return data_mod.load_dataset(path)
    return data_mod.load_libsvm(path)


def _transform_from_extra(extra: dict) -> data_mod.StandardizeTransform | None:
    mean = extra.get("standardize_mean")
    scale = extra.get("standardize_scale")
    if mean is None or scale is None:
        return None
    return data_mod.StandardizeTransform(
        mean=np.asarray(mean, float), scale=np.asarray(scale, float)
    )


def _parse_axes(text: str):
    axes = []
    for part in text.split(","):
        pieces = part.split(":")
        if len(pieces) != 3:
            raise UsageError(f"axis {part!r} is not low:high:count")
        try:
            lo, hi, count = float(pieces[0]), float(pieces[1]), int(pieces[2])
        except ValueError:
            raise UsageError(f"axis {part!r} is not low:high:count") from None
        if count < 2 or not hi > lo:
            raise UsageError(f"axis {part!r} needs high > low and count >= 2")
        axes.append((lo, hi, count))
    if len(axes) != 2:
        raise UsageError("density grids need exactly two axes")
    return tuple(axes)


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args) -> int:
    params = {}
    for item in args.param or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--param needs key=value, got {item!r}")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    dataset = data_mod.generate(args.shape, args.n, seed=args.seed, **params)
    data_mod.save_dataset(dataset, args.out)
    meta = {
        "shape": args.shape,
        "n": args.n,
        "seed": args.seed,
        "params": params,
        "config_digest": config_digest(
            {"shape": args.shape, "n": args.n, "params": params}
        ),
    }
    with open(f"{args.out}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    _log(f"generate shape={args.shape} n={args.n} seed={args.seed} out={args.out}")
    return 0


def _cmd_fit(args) -> int:
    cfg = load_config(args.config, args.set or ())
    dataset = _load_observations(args.data)
    seed = int(cfg["seed"])
    digest = config_digest(cfg)
    y = dataset.y
    extra = {
        "config_digest": digest,
        "m_inner": int(cfg["m_inner"]),
        "point_estimate": cfg["point_estimate"],
    }
    if cfg["standardize"]:
        std, transform = data_mod.standardize(dataset)
        y = std.y
        extra["standardize_mean"] = transform.mean.tolist()
        extra["standardize_scale"] = transform.scale.tolist()
    config = chain_config(cfg, y.shape[1])
    _log(
        f"fit data={args.data} n={y.shape[0]} d={y.shape[1]} "
        f"seed={seed} config_digest={digest}"
    )
    run = run_chain(y, config, seed=seed)
    trace = run.diagnostics.cluster_trace
    window = max(1, len(trace) // 10)
    for lo in range(0, len(trace), window):
        chunk = trace[lo : lo + window]
        _log(
            f"progress iter={min(lo + window, len(trace))} "
            f"clusters_modal={int(np.bincount(chunk).argmax())} "
            f"clusters_last={int(chunk[-1])}"
        )
    _log(
        f"diagnostics accept_x={run.diagnostics.accept_rate_x:.3f} "
        f"accept_params={run.diagnostics.accept_rate_params:.3f} "
        f"samples={len(run.samples)}"
    )
    data_mod.save_chain(args.chain_out, y, config, seed, run.samples, extra=extra)
    _log(f"fit chain_out={args.chain_out} samples={len(run.samples)}")
    return 0


def _cmd_density_grid(args) -> int:
    chain = data_mod.load_chain(args.chain)
    axes = _parse_axes(args.axes)
    transform = _transform_from_extra(chain.extra)
    inner = axes
    jac = 0.0
    if transform is not None:
        inner = tuple(
            (
                (lo - transform.mean[i]) / transform.scale[i],
                (hi - transform.mean[i]) / transform.scale[i],
                count,
            )
            for i, (lo, hi, count) in enumerate(axes)
        )
        jac = transform.log_jacobian
    m_inner = args.m_inner or int(chain.extra.get("m_inner", 1000))
    seed = 0 if chain.seed is None else int(chain.seed)
    grid = predictive.density_grid(
        chain.samples,
        chain.y,
        inner,
        prior=chain.config.prior,
        concentration=chain.config.concentration,
        m_inner=m_inner,
        rng=np.random.default_rng((seed, 0xD1D)),
    )
    out_grid = predictive.DensityGrid(
        axes=axes,
        log_density=grid.log_density + jac,
        sample_count=grid.sample_count,
    )
    meta = {
        "seed": chain.seed,
        "config_digest": chain.extra.get("config_digest", config_digest(
            data_mod._config_to_dict(chain.config)
        )),
        "m_inner": m_inner,
    }
    predictive.save_density_grid(out_grid, args.out, meta=meta)
    _log(
        f"density-grid chain={args.chain} axes={args.axes} "
        f"m_inner={m_inner} out={args.out}"
    )
    return 0


def _cmd_score(args) -> int:
    chain = data_mod.load_chain(args.chain)
    test = _load_observations(args.test)
    transform = _transform_from_extra(chain.extra)
    pts = test.y
    jac = 0.0
    if transform is not None:
        pts = transform.apply(pts)
        jac = transform.log_jacobian
    m_inner = args.m_inner or int(chain.extra.get("m_inner", 1000))
    seed = 0 if chain.seed is None else int(chain.seed)
    scores = predictive.predictive_log_density(
        pts,
        chain.samples,
        chain.y,
        prior=chain.config.prior,
        concentration=chain.config.concentration,
        m_inner=m_inner,
        rng=np.random.default_rng((seed, 0x5C03E)),
    )
    scores = np.asarray(scores) + jac
    digest = chain.extra.get(
        "config_digest", config_digest(data_mod._config_to_dict(chain.config))
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("log_density\n")
            for value in scores:
                fh.write(f"{float(value)!r}\n")
        _log(f"score out={args.out} rows={scores.size}")
    result = {
        "mean_test_log_lik": float(scores.mean()),
        "n_test": int(scores.size),
        "seed": chain.seed,
        "config_digest": digest,
    }
    print(json.dumps(result))
    return 0


def _cmd_benchmark(args) -> int:
    cfg = load_config(args.config, args.set or ())
    digest = config_digest(cfg)
    datasets = {}
    for entry in cfg["datasets"]:
        entry = str(entry)
        if entry.endswith(".csv") or "/" in entry:
            ds = _load_observations(entry)
            name = ds.name or entry.rsplit("/", 1)[-1].rsplit(".", 1)[0]
        else:
            shape, sep, count = entry.partition(":")
            if not sep:
                raise UsageError(
                    f"dataset {entry!r} is neither a path nor shape:n"
                )
            ds = data_mod.generate(shape, int(count), seed=int(cfg["dataset_seed"]))
            name = shape
        datasets[name] = ds
        _log(f"dataset name={name} n={ds.n} d={ds.dim}")
    chain = chain_config(cfg, max(ds.dim for ds in datasets.values()))

    def progress(row):
        _log(
            f"row dataset={row.dataset} method={row.method} fold={row.fold} "
            f"seed={row.seed} rand={row.rand_index} loglik={row.test_log_lik} "
            f"wall={row.wall_time_s:.1f}"
        )

    report = evaluation.benchmark(
        datasets,
        methods=tuple(cfg["methods"]),
        k_folds=int(cfg["k_folds"]),
        seeds=tuple(int(s) for s in cfg["seeds"]),
        chain=chain,
        m_inner=int(cfg["m_inner"]),
        point_estimate=str(cfg["point_estimate"]),
        progress=progress,
    )
    report.write_csv(args.out)
    if args.aggregate_out:
        report.write_aggregate_csv(args.aggregate_out)
    _log(f"benchmark rows={len(report.rows)} out={args.out} config_digest={digest}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpmix",
        description="Warped infinite mixture modeling workflows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    p.add_argument("--shape", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--param",
        action="append",
        metavar="KEY=VALUE",
        help="generator parameter override, repeatable",
    )
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("fit", help="run a chain and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--chain-out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser(
        "density-grid", help="evaluate the predictive density on a grid"
    )
    p.add_argument("--chain", required=True)
    p.add_argument("--axes", required=True, metavar="LO:HI:N,LO:HI:N")
    p.add_argument("--out", required=True)
    p.add_argument("--m-inner", type=int, default=None)
    p.set_defaults(handler=_cmd_density_grid)

    p = sub.add_parser("score", help="mean test log likelihood of a saved chain")
    p.add_argument("--chain", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default=None, help="optional per-point scores CSV")
    p.add_argument("--m-inner", type=int, default=None)
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("benchmark", help="cross-validated method comparison")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--aggregate-out", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(handler=_cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and signal
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
