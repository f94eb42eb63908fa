"""Command-line entry point: ``deferqa <subcommand> [options]``.

Options given on the command line override the ``--config`` file, which
overrides the built-in defaults.  All randomness derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import evaluation, oracle, presets
from .core import PERMISSIVE, STRICT, AgentPredictionRecord, SpanPair, validate_cost_params
from .errors import DeferError
from .io import RunConfig, dump_agent_log, load_agent_log, load_config, write_json
from .rejector import ConstantRejector, allocate, init_model, load_model, save_model
from .training import TrainConfig, train, write_trace

log = logging.getLogger("deferqa")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _spans(text: str) -> tuple[SpanPair, ...]:
    try:
        return tuple(SpanPair.of([int(v) for v in pair.split(",")]) for pair in text.split(";"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 's,e;s,e;...', got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["joint", "per-head"])
    strict = common.add_mutually_exclusive_group()
    strict.add_argument("--strict", dest="cost_mode", action="store_const", const=STRICT)
    strict.add_argument("--permissive", dest="cost_mode", action="store_const", const=PERMISSIVE)
    common.add_argument("--nu", type=float)
    common.add_argument("--beta1", type=float, help="expert 1 cost; later experts scale by the GFLOPs ratio")
    common.add_argument("--grid", type=_floats, help="comma-separated beta1 values")
    common.add_argument("--output-dir")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deferqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic world and log")
    p.add_argument("--num-records", type=int)

    p = sub.add_parser("train", parents=[common], help="train a rejector on a log")
    p.add_argument("--log")
    p.add_argument("--model-out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--architecture", choices=["linear", "mlp"])

    p = sub.add_parser("evaluate", parents=[common], help="score a log under a rejector")
    p.add_argument("--log")
    p.add_argument("--model", dest="model_in")
    p.add_argument("--force-agent", type=int, help="route every query to this agent")

    p = sub.add_parser("sweep", parents=[common], help="train/evaluate across a beta1 grid")
    p.add_argument("--log")
    p.add_argument("--eval-log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)

    p = sub.add_parser("oracle", parents=[common], help="Bayes risk and oracle agreement on a world")
    p.add_argument("--world")

    p = sub.add_parser("bound", parents=[common], help="check the consistency bound on a world")
    p.add_argument("--world")
    p.add_argument("--model", dest="model_in")

    p = sub.add_parser("allocate", parents=[common], help="route one query given on the command line")
    p.add_argument("--model", dest="model_in", required=True)
    p.add_argument("--features", type=_floats, required=True)
    p.add_argument("--predictions", type=_spans, required=True, help="'s,e;s,e;...' one pair per agent")
    return parser


_OVERRIDES = (
    "seed", "mode", "cost_mode", "nu", "grid", "output_dir", "workers", "num_records",
    "log", "eval_log", "model_out", "model_in", "world", "epochs", "learning_rate", "architecture",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    cfg = dataclasses.replace(cfg, **updates)
    if args.beta1 is not None:
        params = cfg.cost_params
        betas = evaluation.sweep_betas(params, args.beta1, cfg.cost_ratio_divisor)
        agents = (cfg.agents[0],) + tuple(
            dataclasses.replace(a, beta=b) for a, b in zip(cfg.agents[1:], betas)
        )
        cfg = dataclasses.replace(cfg, agents=agents)
    return cfg


def _train_config(cfg: RunConfig, costs) -> TrainConfig:
    return TrainConfig(
        costs=costs,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        warmup_fraction=cfg.warmup_fraction,
        schedule=cfg.schedule,
        momentum=cfg.momentum,
        seed=cfg.seed,
        nu=cfg.nu,
        cost_mode=cfg.cost_mode,
    )


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _require(value, flag: str):
    if value is None:
        raise DeferError(f"{flag} is required (flag or config)")
    return value


def _world(cfg: RunConfig, costs):
    if cfg.world:
        w = oracle.load_world(cfg.world)
        if w.num_agents != costs.num_agents:
            return w
        return dataclasses.replace(w, costs=costs, beta_per_head=cfg.beta_per_head)
    w = presets.acceptance_world(costs, seed=cfg.seed)
    return dataclasses.replace(w, beta_per_head=cfg.beta_per_head)


def cmd_simulate(cfg: RunConfig) -> dict:
    costs = validate_cost_params(cfg.cost_params, cfg.cost_mode)
    world = dataclasses.replace(presets.acceptance_world(costs, seed=cfg.seed), beta_per_head=cfg.beta_per_head)
    records = oracle.sample_log(world, cfg.num_records, seed=cfg.seed)
    world_path, log_path = _out(cfg, "world.json"), _out(cfg, "log.jsonl")
    oracle.save_world(world, world_path)
    dump_agent_log(records, log_path)
    return {"world": world_path, "log": log_path, "records": len(records),
            "bayes_risk_joint": oracle.bayes_risk(world, mode="joint")}


def _fresh_model(cfg: RunConfig, records: Sequence[AgentPredictionRecord]):
    return init_model(cfg.architecture, records[0].dim, records[0].num_agents, cfg.seed, cfg.hidden, cfg.pin_zero)


def cmd_train(cfg: RunConfig) -> dict:
    records = load_agent_log(_require(cfg.log, "--log"))
    costs = validate_cost_params(cfg.cost_params, cfg.cost_mode)
    model, trace = train(records, _fresh_model(cfg, records), _train_config(cfg, costs))
    model_path = cfg.model_out or _out(cfg, "rejector.bin")
    trace_path = _out(cfg, "trace.csv")
    save_model(model, model_path, meta={"config_hash": cfg.digest(), "seed": cfg.seed})
    write_trace(trace, trace_path, comment=cfg.provenance())
    return {"model": model_path, "trace": trace_path, "steps": len(trace), "final_loss": trace[-1].mean_loss}


def cmd_evaluate(cfg: RunConfig, force_agent: int | None) -> dict:
    records = load_agent_log(_require(cfg.log, "--log"))
    costs = validate_cost_params(cfg.cost_params, cfg.cost_mode)
    if force_agent is not None:
        model = ConstantRejector(force_agent, records[0].num_agents, records[0].dim)
    else:
        model = load_model(_require(cfg.model_in, "--model"))
    rep = evaluation.evaluate_system(records, model, costs, cfg.mode, workers=cfg.workers)
    tpr, fpr = rep.tpr, rep.fpr
    cm = evaluation.confusion_matrix(records, model, 1)
    ens = evaluation.ensemble_baseline(records, costs)
    out = {
        "report": rep.to_dict(),
        "confusion": dataclasses.asdict(cm),
        "tpr": tpr,
        "fpr": fpr,
        "ensemble": ens.to_dict(),
    }
    write_json(out, _out(cfg, "report.json"), cfg.provenance())
    return out


def cmd_sweep(cfg: RunConfig) -> dict:
    records = load_agent_log(_require(cfg.log, "--log"))
    eval_records = load_agent_log(cfg.eval_log) if cfg.eval_log else None
    costs = validate_cost_params(cfg.cost_params, PERMISSIVE if cfg.cost_mode == PERMISSIVE else STRICT)
    rows = evaluation.beta_sweep(
        records,
        lambda: _fresh_model(cfg, records),
        costs,
        cfg.grid,
        _train_config(cfg, costs),
        mode=cfg.mode,
        divisor=cfg.cost_ratio_divisor,
        eval_records=eval_records,
    )
    path = _out(cfg, "curve.csv")
    evaluation.write_curve(rows, path, num_agents=costs.num_agents, comment=cfg.provenance())
    return {"curve": path, "rows": [dataclasses.asdict(r) for r in rows]}


def cmd_oracle(cfg: RunConfig) -> dict:
    costs = validate_cost_params(cfg.cost_params, cfg.cost_mode)
    world = _world(cfg, costs)
    agree = 0
    rows = world.error.reshape(-1, world.num_agents)
    for row in rows:
        agree += oracle.bayes_decide(row, world.costs) == oracle.brute_force_conditional_min(row, world.costs)[0]
    out = {
        "bayes_risk_per_head": oracle.bayes_risk(world, mode="per-head"),
        "bayes_risk_joint": oracle.bayes_risk(world, mode="joint"),
        "allocation_joint": oracle.allocation_fractions(
            oracle.bayes_decisions(world, "joint"), world.mass, world.num_agents
        ).tolist(),
        "oracle_agreement": agree / len(rows),
    }
    write_json(out, _out(cfg, "oracle.json"), cfg.provenance())
    return out


def cmd_bound(cfg: RunConfig) -> dict:
    costs = validate_cost_params(cfg.cost_params, cfg.cost_mode)
    world = _world(cfg, costs)
    if cfg.model_in:
        model = load_model(cfg.model_in)
    else:
        model = init_model(cfg.architecture, world.features.shape[1], world.num_agents, cfg.seed, cfg.hidden)
    rep = oracle.bound_check(world, model, nu=cfg.nu)
    out = dataclasses.asdict(rep)
    write_json(out, _out(cfg, "bound.json"), cfg.provenance())
    return out


def cmd_allocate(cfg: RunConfig, features, predictions) -> dict:
    model = load_model(cfg.model_in)
    gold = predictions[0]  # unknown at inference; unused by allocation
    rec = AgentPredictionRecord("cli", tuple(features), gold, tuple(predictions))
    alloc = allocate(model, rec, cfg.mode)
    return {"agents": list(alloc.agents), "span": list(alloc.span)}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            out = cmd_simulate(cfg)
        elif args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "evaluate":
            out = cmd_evaluate(cfg, args.force_agent)
        elif args.command == "sweep":
            out = cmd_sweep(cfg)
        elif args.command == "oracle":
            out = cmd_oracle(cfg)
        elif args.command == "bound":
            out = cmd_bound(cfg)
        else:
            out = cmd_allocate(cfg, args.features, args.predictions)
    except (DeferError, OSError, ValueError, KeyError) as exc:
        print(f"deferqa {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    json.dump(out, sys.stdout, indent=2, sort_keys=True, default=_plain)
    sys.stdout.write("\n")
    return 0


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(type(value).__name__)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
