"""Command-line entry point: ``mtfqi <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import harness
from .analysis import evaluate
from .data import collect_bundle, derive_seed, load_bundle, save_bundle
from .features import FeatureMap, build_encoder_class
from .fqi import SolverConfig, model_from_dict, model_to_dict, run_mtfqi
from .mdp import EnsembleSpec, generate_ensemble
from .serialize import dump_json, load_encoders, load_ensemble, load_json, save_ensemble

REPORT_SCHEMA_VERSION = 1


def _behavior(value: str) -> str:
    if value != "uniform":
        if not value.startswith("eps:"):
            raise argparse.ArgumentTypeError("expected 'uniform' or 'eps:<float>'")
        try:
            eps = float(value[4:])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad epsilon in {value!r}") from None
        if not 0.0 < eps <= 1.0:
            raise argparse.ArgumentTypeError("epsilon must lie in (0, 1]")
    return value


def cmd_generate(args):
    w_max = float("inf") if args.w_max is None else args.w_max
    spec = EnsembleSpec(args.S, args.K, args.H, args.T, args.d, args.gamma, w_max)
    ens = generate_ensemble(spec, derive_seed(args.seed, 0))
    truth = FeatureMap(ens.features, args.K, "truth")
    encoders = build_encoder_class(truth, args.num_encoders - 1, args.corruption, derive_seed(args.seed, 1))
    # embed the encoder class so one file feeds collect, train and evaluate
    ens = dataclasses.replace(ens, encoders=encoders)
    save_ensemble(ens, args.out)
    print(f"wrote ensemble T={args.T} S={args.S} K={args.K} H={args.H} d={args.d} to {args.out}")


def cmd_collect(args):
    ens = load_ensemble(args.ensemble)
    bundle = collect_bundle(ens, args.behavior, args.n, args.seed)
    save_bundle(bundle, args.out)
    print(f"wrote {bundle.num_tasks} x {bundle.horizon} x {bundle.n} transitions to {args.out}")


def cmd_train(args):
    bundle = load_bundle(args.data)
    encoders = load_encoders(args.encoders)
    config = SolverConfig(ridge=args.ridge, gamma=args.gamma, mode=args.mode)
    model, report = run_mtfqi(bundle, encoders, config)
    dump_json(model_to_dict(model, report), args.out)
    labels = ", ".join(phi.label for phi in model.encoders)
    print(f"selected encoders per stage: {labels}")


def cmd_evaluate(args):
    model, report = model_from_dict(load_json(args.model))
    ens = load_ensemble(args.ensemble)
    bundle = load_bundle(args.data)
    result = evaluate(model, ens, bundle, report, ens.encoders, args.delta, seed=args.seed)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "kind": "mtfqi-report", **result}
    dump_json(doc, args.out)
    d1 = result["errors"]["optimal"]["delta"][0]
    print(f"delta_1 (optimal) = {d1:.6g}; theorem1a = {result['bounds']['theorem1a']:.6g}; "
          f"lambda_max = {result['lambda_max']:.6g}")


def cmd_sweep(args):
    config = harness.ExperimentConfig.load(args.config)
    rows = harness.run_sweep(config, args.out_dir)
    failed = sum(r.status != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed, written to {args.out_dir}")


def cmd_plot(args):
    out = harness.emit_plot(args.csv, args.axis, args.response, args.out)
    print(f"wrote {out}")


def cmd_slope(args):
    rows, columns = harness.read_csv(args.csv)
    if args.response not in columns:
        raise KeyError(f"column {args.response!r} not found in {args.csv}")
    fit = harness.fit_loglog_slope(rows, args.response)
    print(json.dumps({"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2, "excluded": fit.excluded}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtfqi", description="Multi-task fitted Q-iteration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a low-rank task ensemble with an encoder class")
    for name, default in (("S", 5), ("K", 3), ("H", 5), ("T", 5), ("d", 4)):
        p.add_argument(f"--{name}", type=int, default=default)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--w-max", type=float, default=None, help="decoder norm budget (default: none)")
    p.add_argument("--num-encoders", type=int, default=8)
    p.add_argument("--corruption", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("collect", help="collect an offline dataset bundle")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--behavior", type=_behavior, default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="run multi-task FQI on a bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--encoders", required=True, help="encoder file or ensemble embedding one")
    p.add_argument("--mode", choices=("per-stage", "global"), default="per-stage")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="errors, concentrability and bound values for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a scaling sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="log-log SVG of a sweep CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--axis", choices=harness.AXES, required=True)
    p.add_argument("--response", default="d1_opt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("slope", help="fit the log-log slope of a sweep CSV column")
    p.add_argument("--csv", required=True)
    p.add_argument("--response", required=True)
    p.set_defaults(func=cmd_slope)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"mtfqi {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
