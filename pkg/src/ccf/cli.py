"""Command-line pipelines: generate, train, eval, predict, optimize, surplus.

Exit status is 0 on success, 2 for usage or input-validation errors and 1 for
runtime failures. ``CCF_LOG_LEVEL`` (error, info or debug) controls the
diagnostics written to standard error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import baselines, policy, synth, trainer
from .choice_model import ModelParams, choice_probabilities, predict_reaction, ranking_matrix, read_model, write_model
from .core import parse_log, split_dataset, write_log
from .eval import (
    RandomPredictor,
    build_probe_days,
    offline_eval,
    reaction_accuracy,
    relative_surplus,
)

log = logging.getLogger("ccf")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad flags or inputs; mapped to exit status 2."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None


def _write_text(path: str, text: str):
    Path(path).write_text(text)
    log.info("wrote %s", path)


def _load_log(path: str):
    return parse_log(_read_text(path))


def _load_model(path: str) -> ModelParams:
    return read_model(_read_text(path))


def _load_world(path: str) -> synth.SyntheticWorld:
    return synth.read_world(_read_text(path))


def _print_progress(epoch, value, eta, seconds):
    print(f"{epoch}\t{value:.10g}\t{eta:.6g}\t{seconds:.3f}", flush=True)


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    world = synth.generate_world(args.users, args.items, args.factors, args.action_len,
                                 args.dates, args.pool_size, args.seed,
                                 production_noise=args.production_noise,
                                 production_corruption=args.production_corruption)
    data = synth.generate_interactions(world, args.records, seed=args.seed + 1)
    _write_text(args.world, synth.write_world(world))
    _write_text(args.log, write_log(data))
    responded = sum(r.responded for r in data.records)
    print(f"users\t{args.users}\nitems\t{args.items}\ndates\t{args.dates}\n"
          f"records\t{len(data)}\nresponded\t{responded}")
    return 0


# ---------------------------------------------------------------- train

def _hyper(args) -> trainer.Hyperparams:
    return trainer.Hyperparams(k=args.k, lambda_U=args.lambda_u, lambda_I=args.lambda_i,
                               lambda_P=args.lambda_p, eta0=args.eta0, anneal=args.anneal,
                               epochs=args.epochs, init_scale=args.init_scale, seed=args.seed,
                               workers=args.workers, position_bias=args.bias == "on")


def cmd_train(args) -> int:
    data = _load_log(args.log)
    if args.train_fraction is not None:
        data, held_out = split_dataset(data, args.train_fraction, args.split_seed)
        if args.test_out:
            _write_text(args.test_out, write_log(held_out))
    elif args.test_out:
        raise UsageError("--test-out needs --train-fraction")
    hyper = _hyper(args)
    if args.model == "mlf":
        report = trainer.train(data, hyper, progress=_print_progress)
    else:
        dyads = baselines.dyads_from_log(data)
        fit = baselines.train_cf_l2 if args.model == "cf-l2" else baselines.train_cf_logistic
        report = fit(dyads, data.catalog, hyper, progress=_print_progress)
    _write_text(args.out, write_model(report.params))
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    test = _load_log(args.log)
    if args.model == "random":
        model = np.random.default_rng(args.seed).standard_normal(
            (test.catalog.num_users, test.catalog.num_items))
        predictor = RandomPredictor(args.seed)
        name = "random"
    else:
        model = predictor = _load_model(args.model)
        name = Path(args.model).name
    out = []
    if args.metric in ("offline", "all"):
        m = offline_eval(model, test, n=args.n)
        out.append(f"model\tAP@{args.n}\tAR@{args.n}\tnDCG@{args.n}")
        out.append(f"{name}\t{m[f'AP@{args.n}']:.10g}\t{m[f'AR@{args.n}']:.10g}\t{m[f'nDCG@{args.n}']:.10g}")
    if args.metric in ("accuracy", "all"):
        acc = reaction_accuracy(predictor, test.responded())
        out.append("model\taccuracy")
        out.append(f"{name}\t{acc:.10g}")
    text = "\n".join(out) + "\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- predict

def _parse_action(text: str) -> list:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"--action must be comma-separated item ids, got {text!r}") from None


def cmd_predict(args) -> int:
    params = _load_model(args.model)
    if args.log:
        data = _load_log(args.log)
        lines = ["timestamp\tuser\tpredicted"]
        for rec in data.records:
            lines.append(f"{rec.timestamp}\t{rec.user}\t{predict_reaction(params, rec.user, rec.action)}")
    else:
        if args.user is None or args.action is None:
            raise UsageError("predict needs --log, or both --user and --action")
        action = _parse_action(args.action)
        dist = choice_probabilities(params, args.user, action)
        lines = ["item\tprobability"]
        lines += [f"{i}\t{p:.10g}" for i, p in dist.item_probs]
        lines.append(f"-\t{dist.null_prob:.10g}")
        lines.append(f"predicted\t{predict_reaction(params, args.user, action)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- optimize

def _prices(args, num_items: int):
    if args.world:
        prices = _load_world(args.world).catalog.prices
    elif args.prices:
        prices = [float(t) for t in _read_text(args.prices).split()]
    else:
        return None
    if len(prices) != num_items:
        raise UsageError(f"got {len(prices)} prices for {num_items} items")
    return prices


def cmd_optimize(args) -> int:
    params = _load_model(args.model)
    prices = _prices(args, params.num_items)
    spec = policy.PayoffSpec(args.payoff, prices=prices, ctr_floor_ratio=args.ctr_floor)
    if args.log:
        visits = Counter(r.user for r in _load_log(args.log).records)
        users = sorted(visits)
        weights = [visits[u] for u in users]
    else:
        users = list(range(params.num_users))
        weights = [1.0] * len(users)
    result = policy.optimize_alpha(spec, params, users, weights, num_samples=args.samples,
                                   seed=args.seed)
    rankings = {u: policy.base_ranking(spec, params, u, params.action_length)
                for u in range(params.num_users)}
    _write_text(args.out, policy.write_policy(result.alpha, rankings))
    print("alpha\tvalue\tctr\tstderr")
    print(f"{result.alpha:.10g}\t{result.value:.10g}\t{result.ctr:.10g}\t{result.stderr:.10g}")
    return 0


# ---------------------------------------------------------------- surplus

def cmd_surplus(args) -> int:
    world = _load_world(args.world)
    probe_log = _load_log(args.log)
    prices = world.catalog.prices
    l = world.catalog.action_length
    if args.model == "production":
        model_policy = world.production_policy()
    else:
        params = _load_model(args.model)
        alpha = args.alpha
        if args.policy:
            alpha, _ = policy.read_policy(_read_text(args.policy))
        spec = policy.PayoffSpec(args.payoff, prices=prices)
        model_policy = policy.ScorePolicy(ranking_matrix(params), l, alpha, spec)
    pools = {d: pool for d, pool in enumerate(world.pools)}
    days = build_probe_days(probe_log, pools=pools, num_users=args.probe_users)
    report = relative_surplus(model_policy, world.production_policy(), days, prices,
                              seed=args.seed, literal=args.literal)
    text = report.to_tsv(args.name)
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a synthetic world and an interaction log")
    g.add_argument("--users", type=_positive_int, default=1000)
    g.add_argument("--items", type=_positive_int, default=200)
    g.add_argument("--factors", type=_positive_int, default=5)
    g.add_argument("--action-len", type=_positive_int, default=4)
    g.add_argument("--dates", type=_positive_int, default=40)
    g.add_argument("--pool-size", type=_positive_int, default=None,
                   help="items per date (default: min(50, items))")
    g.add_argument("--records", type=int, default=200_000)
    g.add_argument("--production-noise", type=float, default=0.5)
    g.add_argument("--production-corruption", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--world", default="world.txt")
    g.add_argument("--log", default="log.tsv")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit an MLF model or a CF baseline")
    t.add_argument("--log", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=("mlf", "cf-l2", "cf-logistic"), default="mlf")
    t.add_argument("--bias", choices=("on", "off"), default="on")
    t.add_argument("--k", type=_positive_int, default=50)
    t.add_argument("--lambda-u", type=float, default=1e-4)
    t.add_argument("--lambda-i", type=float, default=1e-4)
    t.add_argument("--lambda-p", type=float, default=1e-4)
    t.add_argument("--eta0", type=float, default=0.05)
    t.add_argument("--anneal", type=float, default=0.9)
    t.add_argument("--epochs", type=_positive_int, default=20)
    t.add_argument("--init-scale", type=float, default=0.1)
    t.add_argument("--workers", type=_positive_int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--train-fraction", type=float, default=None,
                   help="train on a random share of the log")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--test-out", default=None, help="write the held-out records here")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="offline ranking metrics and reaction accuracy")
    e.add_argument("--model", required=True, help="model file, or 'random'")
    e.add_argument("--log", required=True)
    e.add_argument("--metric", choices=("offline", "accuracy", "all"), default="all")
    e.add_argument("--n", type=_positive_int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="reaction distribution or per-record predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--user", type=int, default=None)
    p.add_argument("--action", default=None, help="comma-separated item ids")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    o = sub.add_parser("optimize", help="tune the randomization rate alpha for a payoff")
    o.add_argument("--model", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--payoff", choices=policy.PAYOFF_KINDS, type=str.upper, default="CTR")
    o.add_argument("--ctr-floor", type=float, default=0.995)
    o.add_argument("--log", default=None, help="log whose visit counts weight users")
    o.add_argument("--world", default=None, help="world file supplying prices")
    o.add_argument("--prices", default=None, help="whitespace-separated price file")
    o.add_argument("--samples", type=_positive_int, default=1000)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("surplus", help="replay a policy against production on probe days")
    s.add_argument("--world", required=True)
    s.add_argument("--log", required=True, help="log the probe days are drawn from")
    s.add_argument("--model", required=True, help="model file, or 'production'")
    s.add_argument("--policy", default=None, help="policy file whose alpha is used")
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--payoff", choices=policy.PAYOFF_KINDS, type=str.upper, default="CTR")
    s.add_argument("--probe-users", type=_positive_int, default=None)
    s.add_argument("--literal", action="store_true",
                   help="take each shown positive with probability 1/|A & N|")
    s.add_argument("--name", default="model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_surplus)
    return parser


def _configure_logging():
    level_name = os.environ.get("CCF_LOG_LEVEL", "error").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"CCF_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        if args.command == "generate" and args.pool_size is None:
            args.pool_size = min(50, args.items)
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"ccf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"ccf {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
