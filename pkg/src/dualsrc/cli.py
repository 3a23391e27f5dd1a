"""Command-line workflow: gen | train-buy | train-coord | backtest | report.

Every subcommand takes ``--config FILE`` (JSON object of option values) and
explicit flags, which win over the file. The resolved options are written
next to the outputs as ``<output>.run.json`` so a run can be replayed with
``--config``. Default output directory: ``$DUALSRC_OUT`` or the current one.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

OUT_ENV = "DUALSRC_OUT"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("dualsrc")


class ValidationError(Exception):
    pass


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_ENV, "."))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _out_path(args, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() or p.parent != Path(".") else _out_dir(args) / p


def _write_run_config(args, target: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    Path(f"{target}.run.json").write_text(json.dumps(cfg, indent=1, sort_keys=True, default=str))


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"input file not found: {p}")
    return p


def _load_world(path):
    from .datagen import load_world
    return load_world(_existing(path))


def _load_buy_params(path):
    """Parameters and saved training options from a checkpoint or a bare parameter file."""
    from . import autodiff as ad
    from .training import Checkpoint
    p = _existing(path)
    try:
        ck = Checkpoint.load(p)
        return ck.params, ck.config
    except ValueError:
        return ad.load_params(p)


# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .datagen import GenSpec, generate_world, save_world
    from .exo import validate_world
    spec = {}
    if args.spec:
        spec = json.loads(_existing(args.spec).read_text())
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.products is not None:
        spec["num_products"] = args.products
    if args.horizon is not None:
        spec["horizon"] = args.horizon
    world = generate_world(GenSpec.from_dict(spec))
    bad = validate_world(world)
    if bad:
        raise ValidationError(f"generated world violates {len(bad)} rules, first: {bad[0]}")
    out = _out_path(args, args.out)
    save_world(world, out)
    _write_run_config(args, out)
    print(json.dumps({"world": str(out), "digest": world.digest(), "products": world.num_products,
                      "weeks": world.horizon}))
    return 0


def _train_config(args, **extra):
    from .training import TrainConfig
    opts = dict(extra)
    for flag, key in (("batches", "max_batches"), ("batch_size", "batch_size"),
                      ("step_size", "step_size"), ("train_mode", "mode"), ("seed", "seed"),
                      ("optimizer", "optimizer"), ("train_horizon", "train_horizon")):
        if getattr(args, flag, None) is not None:
            opts[key] = getattr(args, flag)
    if args.deterministic:
        opts["deterministic"] = True
    return TrainConfig(**opts)


def cmd_train_buy(args) -> int:
    from .training import train_buy_policy
    world = _load_world(args.world)
    mode = {"dualsrc-rl": {}, "jit-rl": {"llt_mask": True}, "priced": {"priced": True}}[args.mode]
    cfg = _train_config(args, **mode)
    out = _out_path(args, args.out)
    log_path = _out_path(args, args.log) if args.log else None
    res = train_buy_policy(world, cfg, checkpoint_path=out, log_path=log_path)
    _write_run_config(args, out)
    print(json.dumps({"checkpoint": str(out), "batches": res.batches, "stopped": res.stopped,
                      "final_objective": res.history[-1] if res.history else None}))
    return 0


def cmd_train_coord(args) -> int:
    import numpy as np
    from .training import CoordTrainConfig, train_coordinator
    world = _load_world(args.world)
    params, _ = _load_buy_params(args.buy)
    opts = {}
    for flag, key in (("batches", "max_batches"), ("step_size", "step_size"), ("seed", "seed"),
                      ("train_mode", "mode"), ("train_horizon", "train_horizon")):
        if getattr(args, flag, None) is not None:
            opts[key] = getattr(args, flag)
    cfg = CoordTrainConfig(**opts)
    limits = np.full(world.horizon, np.inf) if args.unconstrained else None
    out = _out_path(args, args.out)
    log_path = _out_path(args, args.log) if args.log else None
    res = train_coordinator(world, params, cfg, limits=limits, checkpoint_path=out, log_path=log_path)
    _write_run_config(args, out)
    print(json.dumps({"checkpoint": str(out), "batches": res.batches, "stopped": res.stopped,
                      "final_loss": res.history[-1] if res.history else None}))
    return 0


def cmd_backtest(args) -> int:
    from .backtest import (check_criteria, export_trajectories, run_backtest, tune_tbs_alpha,
                           warm_start_state)
    from .coordinator import MpcConfig, MpcCoordinator, NeuralCoordinator
    from .exo import price_unit
    from .policies import BshtPolicy, FeatureConfig, NeuralPolicy, TbsPolicy, policy_network
    from .training import reference_volumes, sample_capacity_paths

    world = _load_world(args.world)
    split = args.split
    alpha = args.alpha if args.alpha is not None else tune_tbs_alpha(world, split)
    policies = {"bsht": BshtPolicy(), "tbs": TbsPolicy(alpha)}
    feats = FeatureConfig.for_world(world)
    for name, path, mask in (("dualsrc-rl", args.dualsrc, False), ("jit-rl", args.jit, True)):
        if path == "zero":
            policies[name] = NeuralPolicy(policy_network(feats, zero=True), feats, mask, name)
        elif path:
            params, saved = _load_buy_params(path)
            policies[name] = NeuralPolicy(params, feats, saved.get("llt_mask", mask), name)
    criteria = json.loads(_existing(args.criteria).read_text()) if args.criteria else None
    start = warm_start_state(world, split)
    priced, paths, coords = None, None, {}
    if args.priced:
        pfeats = FeatureConfig.for_world(world, priced=True)
        pparams, _ = _load_buy_params(args.priced)
        priced = NeuralPolicy(pparams, pfeats, name="priced")
        peak = float(reference_volumes(world, pparams, start).max())
        paths = sample_capacity_paths(peak, world.horizon - split, args.paths, args.path_seed)
        if args.coord:
            cparams, _ = _load_buy_params(args.coord)
            unit = price_unit(world)
            coords["neural"] = lambda k: NeuralCoordinator(cparams, k, world.lead_llt, unit)
        if args.mpc:
            mcfg = MpcConfig(tol=args.mpc_tol, max_iter=args.mpc_iter)
            coords["mpc"] = lambda k: MpcCoordinator(priced, k, world.lead_llt, mcfg)
    report = run_backtest(world, policies, split, priced_policy=priced, coordinators=coords,
                          capacity_paths=paths, start_state=start,
                          meta={"tbs_alpha": alpha, "seed": args.seed, "path_seed": args.path_seed,
                                "paths": args.paths if priced else 0})
    out = _out_path(args, args.out)
    report.save(out)
    if args.trajectories:
        export_trajectories(report, _out_path(args, args.trajectories))
    _write_run_config(args, out)
    print(json.dumps({"report": str(out), "pct_of_baseline": report.pct_of_baseline,
                      "constrained": report.summary}, sort_keys=True))
    if criteria is not None:
        failures = check_criteria(report, criteria)
        for f in failures:
            print(f"criterion failed: {f}", file=sys.stderr)
        return 1 if failures else 0
    return 0


def cmd_report(args) -> int:
    from .backtest import BacktestReport, reward_rows, violation_rows
    report = BacktestReport.load(_existing(args.report))
    rewards_tab = reward_rows(report)
    violations_tab = violation_rows(report)
    if args.format == "csv":
        print("policy,reward,pct_of_baseline")
        for n, r, p in rewards_tab:
            print(f"{n},{r!r},{p!r}")
        if violations_tab:
            print("coordinator,M1,M2,M3,M4,reward_pct")
            for row in violations_tab:
                print(",".join([row[0]] + [repr(x) for x in row[1:]]))
        return 0
    print(f"{'policy':<12}{'reward':>16}{'% of ' + report.meta.get('baseline', 'bsht'):>12}")
    for n, r, p in rewards_tab:
        print(f"{n:<12}{r:>16.1f}{p:>12.2f}")
    if violations_tab:
        print()
        print(f"{'coordinator':<12}{'M1':>8}{'M2':>8}{'M3':>8}{'M4':>8}{'reward':>9}")
        for n, *vals in violations_tab:
            print(f"{n:<12}" + "".join(f"{v:>8.2f}" for v in vals[:4]) + f"{vals[4]:>9.2f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values (flags win)")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true",
                        help="bit-reproducible runs (single-threaded numerics)")
    common.add_argument("--threads", type=int, help="cap on numeric worker threads")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualsrc", description="dual-sourcing inventory engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic world")
    g.add_argument("--spec", help="generator spec JSON")
    g.add_argument("--products", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--out", default="world.dsw")
    g.set_defaults(func=cmd_gen)

    def training_flags(sp):
        sp.add_argument("--world", required=True)
        sp.add_argument("--batches", type=int)
        sp.add_argument("--step-size", type=float)
        sp.add_argument("--train-mode", choices=("resample", "fixed"))
        sp.add_argument("--train-horizon", type=int)
        sp.add_argument("--log", help="training log CSV")

    b = sub.add_parser("train-buy", parents=[common], help="train a buy policy")
    training_flags(b)
    b.add_argument("--mode", choices=("dualsrc-rl", "jit-rl", "priced"), default="dualsrc-rl")
    b.add_argument("--batch-size", type=int)
    b.add_argument("--optimizer", choices=("adam", "sgd"))
    b.add_argument("--out", default="policy.ckpt")
    b.set_defaults(func=cmd_train_buy)

    c = sub.add_parser("train-coord", parents=[common], help="train the neural coordinator")
    training_flags(c)
    c.add_argument("--buy", required=True, help="priced buy-policy checkpoint")
    c.add_argument("--unconstrained", action="store_true", help="train with K = inf throughout")
    c.add_argument("--out", default="coordinator.ckpt")
    c.set_defaults(func=cmd_train_coord)

    t = sub.add_parser("backtest", parents=[common], help="evaluate on the held-out weeks")
    t.add_argument("--world", required=True)
    t.add_argument("--split", type=int, default=72)
    t.add_argument("--alpha", type=float, help="TBS alpha (default: tuned on the training weeks)")
    t.add_argument("--dualsrc", help="DualSrc-RL checkpoint, or 'zero' for an untrained network")
    t.add_argument("--jit", help="JIT-RL checkpoint")
    t.add_argument("--priced", help="priced buy-policy checkpoint for constrained runs")
    t.add_argument("--coord", help="neural coordinator checkpoint")
    t.add_argument("--mpc", action="store_true", help="also run the MPC coordinator")
    t.add_argument("--mpc-tol", type=float, default=0.01)
    t.add_argument("--mpc-iter", type=int, default=200)
    t.add_argument("--paths", type=int, default=20, help="number of capacity paths")
    t.add_argument("--path-seed", type=int, default=0)
    t.add_argument("--criteria", help="JSON list of acceptance checks; exit 1 if any fails")
    t.add_argument("--trajectories", help="directory for per-run trajectory CSVs")
    t.add_argument("--out", default="report.json")
    t.set_defaults(func=cmd_backtest)

    r = sub.add_parser("report", parents=[common], help="render tables from a report")
    r.add_argument("--report", required=True)
    r.add_argument("--format", choices=("text", "csv"), default="text")
    r.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        parser.error(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        parser.error(f"config file {path}: {e}")
    if not isinstance(values, dict):
        parser.error(f"config file {path}: expected a JSON object")
    known = vars(args)
    unknown = [k for k in values if k.replace("-", "_") not in known]
    if unknown:
        parser.error(f"unknown config keys: {', '.join(unknown)}")
    # file values become defaults, then the command line is parsed again so flags win
    defaults = {k.replace("-", "_"): v for k, v in values.items() if k not in ("command", "func")}
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = _apply_config(parser, sys.argv[1:] if argv is None else argv)
    if args.threads is not None or args.deterministic:
        n = str(1 if args.deterministic else max(1, args.threads))
        for var in THREAD_VARS:
            os.environ.setdefault(var, n)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .datagen import WorldFormatError
    from .exo import DomainError
    try:
        return args.func(args)
    except (ValidationError, DomainError, WorldFormatError, ValueError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
