"""``preroute`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl

log = logging.getLogger("preroute")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", default="run", help="run directory (default: ./run)")
    p.add_argument("--config", default=None, help="JSON experiment config; defaults to the run's saved config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preroute", description="Preemptive MoE routing laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("corpus", "generate the synthetic source/target corpora"),
        ("pretrain-source", "train the source MoE model"),
        ("distill", "distill the grouter from the source's first router"),
        ("fold", "fold the grouter to the target expert count"),
        ("tune", "re-balance the folded grouter on the target corpus"),
        ("diagnose", "routing-stability and gradient diagnostics for target runs"),
        ("report", "consolidated JSON/CSV report"),
    ):
        _common(sub.add_parser(name, help=help_text))

    p = sub.add_parser("cache", help="pre-compute grouter routing decisions")
    _common(p)
    p.add_argument("--grouter", default=None, help="frozen grouter checkpoint (default: tuned grouter)")
    p.add_argument("--corpus", default=None, help="corpus .npz (default: both target splits)")
    p.add_argument("--out", default=None, help="output cache file")

    p = sub.add_parser("plan", help="offline expert-parallel placement plan")
    _common(p)
    p.add_argument("--cache", default=None)
    p.add_argument("--partitions", type=int, default=None)
    p.add_argument("--granularity", choices=("node", "gpu"), default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("simulate", help="dispatch volume of the plan against baselines")
    _common(p)
    p.add_argument("--cache", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--payload-bytes", type=int, default=None)

    p = sub.add_parser("train-target", help="train one or more target arms")
    _common(p)
    p.add_argument("--router", choices=pl.ARMS, action="append", help="arm(s); default: the config's arms")
    p.add_argument("--seed", type=int, action="append", help="seed(s); default: the config's target seeds")
    p.add_argument("--steps", type=int, default=None, help="override the token budget")
    p.add_argument("--compare", default=None, help="write final validation losses per run to this CSV")

    p = sub.add_parser("all", help="run every stage in order")
    _common(p)
    return parser


def _train_targets(run: pl.Run, arms, seeds, steps) -> list[dict]:
    entries = []
    for arm in arms:
        for seed in seeds:
            entry = pl.stage_train_target(run, arm, seed, steps)
            log.info("%s seed %d: valid loss %s", arm, seed, entry["stats"]["final_valid_loss"])
            entries.append(entry)
    return entries


def _write_compare(path: str, entries: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("run,arm,seed,final_valid_loss,final_maxvio,max_cv_100\n")
        for e in entries:
            s = e["stats"]
            cv = "" if s["max_cv_100"] is None else s["max_cv_100"]
            fh.write(f"{pl.run_name(s['arm'], e['seed'])},{s['arm']},{e['seed']},{s['final_valid_loss']},{s['final_maxvio']},{cv}\n")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        run = pl.Run.open(args.run, args.config)
        cmd = args.command
        if cmd == "corpus":
            entry = pl.stage_corpus(run)
        elif cmd == "pretrain-source":
            entry = pl.stage_pretrain_source(run)
        elif cmd == "distill":
            entry = pl.stage_distill(run)
        elif cmd == "fold":
            entry = pl.stage_fold(run)
        elif cmd == "tune":
            entry = pl.stage_tune(run)
        elif cmd == "cache":
            entry = pl.stage_cache(run, args.grouter, args.corpus, args.out)
        elif cmd == "plan":
            entry = pl.stage_plan(run, args.cache, args.partitions, args.granularity, args.out)
        elif cmd == "simulate":
            entry = pl.stage_simulate(run, args.cache, args.plan, args.payload_bytes)
        elif cmd == "train-target":
            arms = args.router or run.config.arms
            seeds = args.seed if args.seed is not None else run.config.target_seeds
            entries = _train_targets(run, arms, seeds, args.steps)
            if args.compare:
                _write_compare(args.compare, entries)
            entry = {"stage": "train-target", "stats": {"runs": len(entries)}}
        elif cmd == "diagnose":
            entry = pl.stage_diagnose(run)
        elif cmd == "report":
            entry = pl.stage_report(run)
        elif cmd == "all":
            for stage in (pl.stage_corpus, pl.stage_pretrain_source, pl.stage_distill, pl.stage_fold, pl.stage_tune, pl.stage_cache, pl.stage_plan, pl.stage_simulate):
                e = stage(run)
                log.info("%s done in %.1fs", e["stage"], e["duration_s"])
            entries = _train_targets(run, run.config.arms, run.config.target_seeds, None)
            _write_compare(str(run.path("compare.csv")), entries)
            pl.stage_diagnose(run)
            entry = pl.stage_report(run)
        else:  # pragma: no cover - argparse rejects unknown commands
            raise SystemExit(2)
    except (pl.StageError, ValueError) as exc:
        print(f"preroute {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({k: entry[k] for k in ("stage", "duration_s", "stats") if k in entry}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
