"""Operator entry points.

    aflow validate PROGRAM [--channels ...]     exit 0 well-formed, 1 ill-formed, 2 parse error
    aflow topology PROGRAM                      dump the compiled topology
    aflow run PROGRAM --targets F --tasks F --task ID [--backend ID]
    aflow optimize CONFIG [--seed N] [--max-retries N] [--window N]
    aflow replay HISTORY [--csv F]

Campaign configs are declarative JSON; input paths resolve relative to the
config file, output paths relative to the working directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import BACKEND_IDS, EchoBackend, HashBackend, StagedCampaignAgents, make_backends
from .checker import check
from .errors import ParseError
from .feedback import write_bundle_archive
from .history import read_history, running_max, write_history
from .optimizer import SCORE_FUNCTIONS, EditFamilyMask, harness_opt
from .parser import parse_program
from .program import FanoutNode
from .runtime import RunLimits, run
from .simenv import SIM_TOOLS, SimEnv, grade, load_targets, load_tasks, sim_campaign


class ConfigError(Exception):
    pass


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        source = _read(args.program)
        program = parse_program(source)
    except (FileNotFoundError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    channels = (
        frozenset(c.strip() for c in args.channels.split(",") if c.strip())
        if args.channels
        else None
    )
    report = check(program, channels)
    print(report.to_text(), end="")
    return 0 if report.well_formed else 1


def cmd_topology(args: argparse.Namespace) -> int:
    try:
        program = parse_program(_read(args.program))
    except (FileNotFoundError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"channels: {', '.join(sorted(program.channels))}")
    for name in program.topology_nodes():
        node = program.nodes[name]
        if isinstance(node, FanoutNode):
            print(f"node {name} = fanout({node.inner.name}, k={node.k})")
        else:
            refs = ", ".join(sorted(node.template.variables)) or "-"
            print(f"node {name} ({node.role}) reads: {refs}")
    for e in program.edges:
        kind = "data" if e.guard is None else f"on_{e.guard}"
        print(f"edge {e.src} -> {e.dst} [{kind}]")
    return 0


def _agent_backend(name: str, seed: int):
    if name == "echo":
        return EchoBackend()
    if name == "hash":
        return HashBackend(seed=seed)
    if name == "staged-crash":
        return StagedCampaignAgents()
    raise ConfigError(f"unknown agent backend {name!r} (echo, hash, staged-crash)")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        program = parse_program(_read(args.program), tool_registry=SIM_TOOLS)
        targets = load_targets(_read(args.targets))
        tasks = load_tasks(_read(args.tasks), targets)
        backend = _agent_backend(args.backend, args.seed)
    except (FileNotFoundError, ParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    wanted = [t for t in tasks if t.id == args.task]
    if not wanted:
        print(f"error: task {args.task!r} not found", file=sys.stderr)
        return 2
    task = wanted[0]
    env = SimEnv(task)
    report = check(program, env.channels)
    if not report.well_formed:
        print(report.to_text(), end="", file=sys.stderr)
        return 1
    record = run(
        program,
        backend,
        env,
        RunLimits(max_retries=args.max_retries),
        nonce=f"run{args.seed}",
    )
    verdict = grade(task, record)
    print(f"task {task.id}: verdict {verdict}, outcome {record.bundle.outcome}")
    print(f"dispatches: {record.dispatch_count()}, crashes: {len(record.bundle.san)}")
    if args.trace_out:
        Path(args.trace_out).write_text(
            "\n".join(record.trace_lines()) + "\n", encoding="utf-8"
        )
        print(f"trace written to {args.trace_out}")
    if args.bundle_out:
        write_bundle_archive(args.bundle_out, {task.id: record.bundle})
        print(f"bundle written to {args.bundle_out}")
    return 0


def load_campaign_config(path: str | Path) -> dict:
    """Parse and sanity-check a campaign config file."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such config: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    required = ("initial", "targets", "tasks", "backends", "score", "budget", "seed")
    for key in required:
        if key not in raw:
            raise ConfigError(f"config missing {key!r}")
    if raw["backends"] not in BACKEND_IDS:
        raise ConfigError(f"unknown backends id {raw['backends']!r}")
    if raw["score"] not in SCORE_FUNCTIONS:
        raise ConfigError(f"unknown score function {raw['score']!r}")
    mask_spec = raw.get("mask", {})
    try:
        raw["mask_obj"] = EditFamilyMask(
            structural=bool(mask_spec.get("structural", True)),
            prompt=bool(mask_spec.get("prompt", True)),
            tool=bool(mask_spec.get("tool", True)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))
    base = p.parent
    for key in ("initial", "targets", "tasks"):
        raw[key + "_path"] = base / raw[key]
    return raw


def cmd_optimize(args: argparse.Namespace) -> int:
    try:
        cfg = load_campaign_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg["seed"])
        window = args.window if args.window is not None else int(cfg.get("window", 3))
        max_retries = (
            args.max_retries
            if args.max_retries is not None
            else int(cfg.get("max_retries", 3))
        )
        initial_source = _read(cfg["initial_path"])
        targets = load_targets(_read(cfg["targets_path"]))
        tasks = load_tasks(_read(cfg["tasks_path"]), targets)
        backends = make_backends(cfg["backends"], seed, initial_source)
    except (FileNotFoundError, ParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    campaign = sim_campaign(tasks, smoke_task_id=cfg.get("smoke_task"))
    result = harness_opt(
        backends,
        campaign,
        SCORE_FUNCTIONS[cfg["score"]],
        budget=int(cfg["budget"]),
        mask=cfg["mask_obj"],
        seed=seed,
        initial_source=initial_source,
        window=window,
        limits=RunLimits(max_retries=max_retries),
    )
    history_path = Path(cfg.get("history", "history.jsonl"))
    write_history(history_path, result.history)
    print(
        f"best score {result.best_score:g} at iteration {result.best_iteration}"
        f" ({len(result.history)} iterations, history: {history_path})"
    )
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        records = read_history(args.history)
    except (FileNotFoundError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    peaks = running_max(records)
    rows = [("iteration", "score", "best", "accepted", "families")]
    for record, peak in zip(records, peaks):
        rows.append(
            (
                str(record["iteration"]),
                f"{record['score']:g}",
                f"{peak:g}",
                "yes" if record["accepted"] else "no",
                ",".join(record.get("families_vs_initial", [])) or "-",
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    if args.csv:
        lines = ["iteration,score,best,accepted,families"]
        for record, peak in zip(records, peaks):
            families = ";".join(record.get("families_vs_initial", []))
            lines.append(
                f"{record['iteration']},{record['score']},{peak},"
                f"{int(record['accepted'])},{families}"
            )
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and check a program")
    p.add_argument("program")
    p.add_argument("--channels", help="comma-separated channel set to check against")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("topology", help="dump the compiled topology")
    p.add_argument("program")
    p.set_defaults(func=cmd_topology)

    p = sub.add_parser("run", help="run a harness once against a simulated task")
    p.add_argument("program")
    p.add_argument("--targets", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--backend", default="echo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--trace-out")
    p.add_argument("--bundle-out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("optimize", help="run a full optimization campaign")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--max-retries", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("replay", help="print the trajectory table for a history file")
    p.add_argument("history")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
