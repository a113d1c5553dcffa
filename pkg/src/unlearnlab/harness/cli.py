"""Command-line entry point: ``unlearnlab <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from ..corpus import CorpusError
from ..metrics import evaluate, extraction_attack
from ..model import CheckpointError, load_checkpoint
from .config import ConfigValidationError, ExperimentConfig, load_config
from .experiment import (
    PreconditionError,
    load_reports,
    memorized_checkpoint,
    prepare,
    run_dir,
    run_experiment,
    run_sweep,
    target_ids,
    threshold_record,
    write_json,
    write_report,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PRECONDITION = 0, 1, 2, 3
SUBCOMMANDS = {
    "pretrain": "memorize the target pool and cache the checkpoint",
    "threshold": "compute the forgetting threshold on the held-out set",
    "unlearn": "run the configured repetitions and write the report",
    "metrics": "evaluate EL and MA of the pool under a checkpoint",
    "attack": "prefix-continuation attack on the first pool targets",
    "sweep": "unlearn once per learning rate in --lrs",
    "report": "re-render charts and summarize every run under --out-dir",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unlearnlab", description="Memorize, unlearn and measure extraction risk.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("metrics", "attack"):
            p.add_argument("--eval-checkpoint", help="checkpoint to evaluate (default: the memorized one)")
        for f in fields(ExperimentConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="VALUE")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    return load_config(args.config, overrides)


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def _eval_state(args, cfg):
    if getattr(args, "eval_checkpoint", None):
        return load_checkpoint(args.eval_checkpoint)
    return memorized_checkpoint(cfg)[0]


def cmd_pretrain(args) -> str:
    cfg = _config(args)
    state, info = memorized_checkpoint(cfg)
    return (f"pretrained {info.get('steps', 0)} steps, target MA {_fmt(info.get('target_ma'))}, "
            f"checkpoint {state.checkpoint_id}")


def cmd_threshold(args) -> str:
    cfg = _config(args)
    setup = prepare(cfg)
    rec = {**threshold_record(setup.threshold), "config_hash": cfg.config_hash(), "seeds": cfg.seeds,
           "m": cfg.m, "d_prime": setup.d_prime.descriptor()}
    path = write_json(run_dir(cfg) / "threshold.json", rec)
    return f"threshold EL {setup.threshold.el:.4f} MA {setup.threshold.ma:.4f} over {cfg.m} sequences -> {path}"


def cmd_unlearn(args) -> str:
    cfg = _config(args)
    report = run_experiment(cfg)
    agg = report["aggregate"]
    if not agg["completed"]:
        raise PreconditionError(f"every repetition failed the memorization precondition: {agg['failed']}")
    forgotten = sum(1 for r in report["repetitions"] if r.get("forgotten"))
    return (f"{cfg.mode} unlearning of s={cfg.s}: mean {agg['epochs']:g} epochs, "
            f"EL {_fmt(agg['el_before'])} -> {_fmt(agg['el_after'])}, MA {_fmt(agg['ma_before'])} -> "
            f"{_fmt(agg['ma_after'])}, forgotten {forgotten}/{agg['completed']} "
            f"-> {run_dir(cfg) / 'report.json'}")


def cmd_metrics(args) -> str:
    cfg = _config(args)
    setup = prepare(cfg)
    state = _eval_state(args, cfg)
    rep = evaluate(state, setup.pool.array(), cfg.metrics_config(), target_ids(setup.pool))
    doc = {**rep.to_json(setup.threshold), "config_hash": cfg.config_hash(), "seeds": cfg.seeds,
           "threshold_checkpoint": setup.threshold.checkpoint_id}
    path = write_json(run_dir(cfg) / "metrics.json", doc)
    return f"pool EL {rep.el_mean:.4f} MA {rep.ma_mean:.4f} forgotten {doc['forgotten']} -> {path}"


def cmd_attack(args) -> str:
    cfg = _config(args)
    setup = prepare(cfg)
    state = _eval_state(args, cfg)
    where = run_dir(cfg) / "attack"
    overlaps = []
    for i, x in enumerate(setup.pool.array()[:cfg.attack_targets]):
        tr = extraction_attack(state, x, cfg.T // 2, cfg.n)
        head = f"# config {cfg.config_hash()} checkpoint {state.checkpoint_id} target {target_ids(setup.pool)[i]}\n"
        where.mkdir(parents=True, exist_ok=True)
        (where / f"attack-{i}.txt").write_text(head + tr.render())
        overlaps.append(tr.overlap)
    return "attack overlaps " + " ".join(f"{o:.3f}" for o in overlaps) + f" -> {where}"


def cmd_sweep(args) -> str:
    cfg = _config(args)
    doc = run_sweep(cfg)
    parts = [f"lr {r['lr']:g}: {r['epochs']} epochs ({r['status']})" for r in doc["rows"]]
    return "sweep " + "; ".join(parts) + ("" if doc["monotone"] else " [non-monotone]")


def cmd_report(args) -> str:
    from .plotting import emit_charts

    out = args.out_dir or (load_config(args.config).out_dir if args.config else "out")
    reports = load_reports(out)
    if not reports:
        raise FileNotFoundError(f"no runs found under {out}")
    lines = []
    for path, rep in reports:
        cfg = ExperimentConfig(**{**rep["config"], "out_dir": str(out)})
        emit_charts(rep, path.parent / "charts")
        write_report(cfg, rep)
        agg = rep["aggregate"]
        lines.append(f"{rep['config_hash']}: {agg['completed']} reps, mean {agg['epochs']} epochs, "
                     f"MA {_fmt(agg['ma_before'])} -> {_fmt(agg['ma_after'])}")
    return "\n".join(lines)


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(COMMANDS[args.command](args))
    except ConfigValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (FileNotFoundError, CorpusError, CheckpointError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
