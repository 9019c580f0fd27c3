"""Command-line entry point: ``nestedgp {train,predict,encode,bound,check-grad,gen-step}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
import yaml

from . import deep, params
from .deep import AUTOENCODER
from .errors import (ConfigError, DataError, DimensionMismatch, InvalidLayerIndex, InvalidPlan,
                     ModelFileError, NonFiniteObjective, NotPositiveDefinite)
from .io import DataConfig, ModelFile, RunConfig, gen_step, load_csv, write_csv
from .optim import initialize, maximize, write_trace_csv
from .parallel import ChunkPlan, OrderedPool, resolve_workers

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("nestedgp")


def _print_resolved(d):
    print("# resolved config")
    print(yaml.safe_dump(d, sort_keys=True, default_flow_style=None).rstrip())


def _load_data(path, dcfg: DataConfig, mode, x_norm=None, y_norm=None):
    x_cols = [] if mode == AUTOENCODER else dcfg.x_cols
    y_cols = dcfg.y_cols
    if mode == AUTOENCODER and y_cols is None:
        y_cols = _all_columns(path, dcfg.has_header)
    if x_norm is None and y_norm is None:
        return load_csv(path, dcfg.has_header, x_cols, y_cols, dcfg.normalize)
    ds = load_csv(path, dcfg.has_header, x_cols, y_cols, normalize=False)
    if y_norm is not None:
        ds.Y, ds.y_norm = y_norm.apply(ds.Y), y_norm
    if x_norm is not None and ds.X is not None:
        ds.X, ds.x_norm = x_norm.apply(ds.X), x_norm
    return ds


def _all_columns(path, has_header):
    ds = load_csv(path, has_header, x_cols=[], y_cols=None)
    width = len(ds.x_names) + len(ds.y_names)
    return list(range(width))


def _data_pair(ds):
    return (ds.X, ds.Y)


def _model_data(mf: ModelFile, path):
    dcfg = DataConfig(**mf.metadata.get("data", {}))
    return _load_data(path, dcfg, mf.model.mode, mf.x_norm, mf.y_norm)


def _chunks(n, count):
    return ChunkPlan.even(n, min(count, n)).chunks() if count > 1 else None


# -- commands ---------------------------------------------------------------------


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    workers = resolve_workers(args.workers)
    resolved = cfg.to_dict() | {"workers": workers, "data_file": args.data}
    _print_resolved(resolved)
    ds = _load_data(args.data, cfg.data, cfg.mode)
    model = initialize(ds.X, ds.Y, cfg.architecture, seed=cfg.seed, mode=cfg.mode)
    res = maximize(model, _data_pair(ds), cfg.optimizer, objective=cfg.objective, fixed=cfg.fixed,
                   mapper=OrderedPool(workers), chunks=_chunks(ds.n, cfg.chunks))
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "data": cfg.data.__dict__,
            "final_bound": res.objective, "termination": res.reason,
            "iterations": res.trace[-1].iteration if res.trace else 0,
            "line_search_failed": res.line_search_failed,
            "x_names": ds.x_names, "y_names": ds.y_names}
    ModelFile(res.model, ds.x_norm, ds.y_norm, meta).save(args.out)
    if args.trace:
        write_trace_csv(res.trace, args.trace, timing=args.timing)
    print(f"final bound {res.objective!r} after {meta['iterations']} iterations ({res.reason})")
    if res.nonfinite:
        print("training hit a non-finite objective; saved the last finite state", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_predict(args):
    mf = ModelFile.load(args.model)
    model = mf.model
    _print_resolved({"command": "predict", "model": args.model, "grid": args.grid, "input": args.input})
    if model.mode == AUTOENCODER:
        raise ConfigError("predict needs a regression model; use encode for autoencoders")
    if args.grid:
        lo, hi, count = float(args.grid[0]), float(args.grid[1]), int(args.grid[2])
        if model.input_dim != 1:
            raise ConfigError("--grid only supports one-dimensional inputs; use --input")
        if count < 1:
            raise ConfigError("grid size must be positive")
        Xraw = np.linspace(lo, hi, count)[:, None]
        x_names = mf.metadata.get("x_names", ["x"])
    else:
        dcfg = DataConfig(**mf.metadata.get("data", {}))
        ds = load_csv(args.input, dcfg.has_header, dcfg.x_cols, [], normalize=False) \
            if dcfg.x_cols is not None else _inputs_only(args.input, dcfg.has_header)
        Xraw, x_names = ds.X, ds.x_names
    X = mf.x_norm.apply(Xraw) if mf.x_norm else Xraw
    q = deep.predict(model, X)
    mean, var = q.means, q.variances
    if mf.y_norm:
        mean, var = mf.y_norm.invert(mean), mf.y_norm.invert_variance(var)
    D = model.output_dim
    y_names = mf.metadata.get("y_names", [f"y{d}" for d in range(D)])
    header = list(x_names) + [f"mean_{n}" for n in y_names] + [f"var_{n}" for n in y_names]
    write_csv(args.out, header, [Xraw, mean, var])
    return EXIT_OK


def _inputs_only(path, has_header):
    return load_csv(path, has_header, x_cols=None, y_cols=[], normalize=False)


def cmd_encode(args):
    mf = ModelFile.load(args.model)
    _print_resolved({"command": "encode", "model": args.model, "data": args.data, "layer": args.layer})
    ds = _model_data(mf, args.data)
    source = ds.Y if mf.model.mode == AUTOENCODER else ds.X
    q = deep.encode(mf.model, source, args.layer)
    Q = q.Q
    header = [f"mean_h{j}" for j in range(Q)] + [f"var_h{j}" for j in range(Q)]
    write_csv(args.out, header, [q.means, q.variances])
    return EXIT_OK


def cmd_bound(args):
    mf = ModelFile.load(args.model)
    workers = resolve_workers(args.workers)
    _print_resolved({"command": "bound", "model": args.model, "data": args.data,
                     "workers": workers, "chunks": args.chunks})
    ds = _model_data(mf, args.data)
    rep, _ = deep.evaluate(mf.model, ds.X, ds.Y, _chunks(ds.n, args.chunks), mapper=OrderedPool(workers))
    print(format_bound_table(rep))
    return EXIT_OK


def format_bound_table(rep: deep.BoundReport) -> str:
    rows = [("likelihood", rep.likelihood_term)]
    rows += [(f"kl[{i + 1}]", -v) for i, v in enumerate(rep.kl_terms)]
    rows += [(f"compression[{i + 1}]", -v) for i, v in enumerate(rep.compression_terms)]
    rows += [(f"propagation[{i + 2}]", -v) for i, v in enumerate(rep.propagation_terms)]
    lines = [f"{'term':<18}{'contribution':>26}"]
    lines += [f"{name:<18}{float(val)!r:>26}" for name, val in rows]
    lines.append(f"{'total':<18}{float(rep.total)!r:>26}")
    if rep.clamp_count:
        lines.append(f"variance clamps: {rep.clamp_count}")
    return "\n".join(lines)


def cmd_check_grad(args):
    if args.model:
        mf = ModelFile.load(args.model)
        model = mf.model
        ds = _model_data(mf, args.data)
    elif args.config:
        cfg = RunConfig.load(args.config)
        ds = _load_data(args.data, cfg.data, cfg.mode)
        model = initialize(ds.X, ds.Y, cfg.architecture, seed=cfg.seed, mode=cfg.mode)
    else:
        raise ConfigError("check-grad needs --model or --config")
    _print_resolved({"command": "check-grad", "objective": args.objective, "tolerance": args.tolerance,
                     "step": args.step, "richardson": args.richardson,
                     "model": args.model, "config": args.config, "data": args.data})
    rep = params.finite_difference_check(args.objective, model, _data_pair(ds), step=args.step,
                                        tolerance=args.tolerance, richardson=args.richardson)
    print(f"coordinates checked: {rep.rel_error.size}")
    print(f"worst relative error: {rep.worst!r}")
    if not rep.passed:
        print(f"FAILED at {len(rep.failing)} coordinates: {list(rep.failing)[:20]}")
        return EXIT_NUMERICAL
    print("PASSED")
    return EXIT_OK


def cmd_gen_step(args):
    _print_resolved({"command": "gen-step", "n": args.n, "noise_sd": args.noise_sd, "seed": args.seed})
    ds = gen_step(args.n, args.noise_sd, args.seed)
    write_csv(args.out, ds.x_names + ds.y_names, [ds.X, ds.Y], note=ds.note)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestedgp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log optimizer progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write a model file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model file (JSON)")
    t.add_argument("--trace", help="optimizer trace CSV")
    t.add_argument("--timing", action="store_true", help="add a wall-clock column to the trace")
    t.add_argument("--workers", type=int, help=f"threads (overrides ${'DEEPGP_WORKERS'})")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predictive mean and variance")
    pr.add_argument("--model", required=True)
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid", nargs=3, metavar=("LO", "HI", "N"))
    src.add_argument("--input", help="CSV of inputs")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("encode", help="latent messages at a hidden layer")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--layer", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    b = sub.add_parser("bound", help="print the bound term table")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--workers", type=int)
    b.add_argument("--chunks", type=int, default=1)
    b.set_defaults(func=cmd_bound)

    c = sub.add_parser("check-grad", help="finite-difference gradient check")
    c.add_argument("--model")
    c.add_argument("--config")
    c.add_argument("--data", required=True)
    c.add_argument("--objective", default="deep_bound", choices=params.OBJECTIVES[:2] + params.OBJECTIVES[3:])
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=3e-4,
                   help="relative central-difference step; nested bounds carry ~1e3 eps of round-off")
    c.add_argument("--richardson", action=argparse.BooleanOptionalAction, default=True,
                   help="combine steps h and h/2 to cancel the h^2 truncation error")
    c.set_defaults(func=cmd_check_grad)

    g = sub.add_parser("gen-step", help="write the noisy step-function dataset")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--noise-sd", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_step)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidPlan, InvalidLayerIndex) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionMismatch, ModelFileError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NotPositiveDefinite, NonFiniteObjective, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
