"""Command-line entry point: ``ftloop <command> [--seed N] [--config PATH] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from . import harness
from .errors import FtloopError, NoFixableFailures
from .logs import generate_logs, write_logs
from .search import write_trajectory

log = logging.getLogger("ftloop")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_FIXABLE = 2
EXIT_REJECTED = 3


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def write_reports(out: str, records: Sequence[dict], trajectory: Sequence[dict] | None = None) -> None:
    os.makedirs(out, exist_ok=True)
    md, jsonl = harness.report(records)
    _write(os.path.join(out, "report.md"), md)
    _write(os.path.join(out, "report.jsonl"), jsonl)
    if trajectory is not None:
        with open(os.path.join(out, "trajectory.jsonl"), "w", encoding="utf-8") as fh:
            write_trajectory(trajectory, fh)


def _parse_stages(text: str | None) -> tuple[float, ...] | None:
    if not text:
        return None
    return tuple(float(x) for x in text.split(",") if x.strip())


def cmd_generate_logs(args, cfg: dict) -> int:
    cfg = harness.merge_config(cfg)
    env = harness.Environment(cfg, args.seed)
    count = args.count or cfg["logs"]["count"]
    records = generate_logs(env.task, env.model, count, env.rng("logs"))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "logs.jsonl"), "w", encoding="utf-8") as fh:
        write_logs(records, fh)
    _write(os.path.join(args.out, "task.json"), json.dumps(env.task.to_config(), sort_keys=True, indent=2) + "\n")
    log.info("wrote %d log records to %s", len(records), args.out)
    return EXIT_OK


def cmd_run_coldstart(args, cfg: dict) -> int:
    res = harness.run_coldstart(cfg, seed=args.seed, budget=args.budget)
    write_reports(args.out, res["records"], res["result"].trajectory)
    return EXIT_OK if res["result"].converged else EXIT_REJECTED


def cmd_run_production(args, cfg: dict) -> int:
    logs = None
    if args.logs:
        with open(args.logs, encoding="utf-8") as fh:
            logs = [line for line in fh if line.strip()]
    try:
        res = harness.run_production(logs, model_id=args.model_id, cfg=cfg, seed=args.seed, budget=args.budget)
    except NoFixableFailures as exc:
        records = exc.args[0] if exc.args and isinstance(exc.args[0], list) else []
        write_reports(args.out, records, [])
        log.warning("no fixable failures; wrote diagnosis-only report")
        return EXIT_NO_FIXABLE
    write_reports(args.out, res["records"], res["result"].trajectory)
    res["ledger"].save(os.path.join(args.out, "ledger"))
    return EXIT_OK if res["decision"] == "accept" else EXIT_REJECTED


def cmd_run_stages(args, cfg: dict) -> int:
    merged = harness.merge_config(cfg)
    stage_cfg = harness.StageConfig.from_config(merged, _parse_stages(args.stages))
    seeds = range(args.seed, args.seed + args.seeds)
    res = harness.run_stages(stage_cfg, cfg, seeds)
    traj = [r for run in res["runs"] for r in run["trajectory"]]
    write_reports(args.out, res["records"], traj)
    summary = harness.stage_gap_summary(res["runs"])
    log.info("mean gap %.4f, adaptive ahead on %d/%d seeds", summary["mean_gap"], summary["wins"], summary["n"])
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    src = args.input or os.path.join(args.out, "report.jsonl")
    with open(src, encoding="utf-8") as fh:
        text = fh.read()
    md = harness.report_from_jsonl(text)
    if args.markdown:
        _write(args.markdown, md)
    else:
        sys.stdout.write(md)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON config merged over the defaults")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--budget", type=int, default=None, help="search evaluation budget")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ftloop", description="Closed-loop fine-tuning on a toy task.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-logs", parents=[common], help="write synthetic judged inference logs")
    g.add_argument("--count", type=int, default=None)
    g.set_defaults(func=cmd_generate_logs)

    c = sub.add_parser("run-coldstart", parents=[common], help="search from scratch on the toy task")
    c.set_defaults(func=cmd_run_coldstart)

    r = sub.add_parser("run-production", parents=[common], help="diagnose logs, search, gate and deploy")
    r.add_argument("--logs", help="JSONL log file (default: generate from the config)")
    r.add_argument("--model-id", default="toy-nb-v1")
    r.set_defaults(func=cmd_run_production)

    s = sub.add_parser("run-stages", parents=[common], help="adaptive vs naive staged deployment")
    s.add_argument("--stages", help="comma-separated poison rates, e.g. 0.15,0.25,0.40")
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    s.set_defaults(func=cmd_run_stages)

    rep = sub.add_parser("report", parents=[common], help="regenerate report.md from report.jsonl")
    rep.add_argument("--input", help="report.jsonl (default: <out>/report.jsonl)")
    rep.add_argument("--markdown", help="write markdown here instead of stdout")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (FtloopError, OSError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
