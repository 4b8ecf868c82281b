"""Command-line entry point.

Subcommands: train, analyze-trace, plan-budget, report. Every run writes a
manifest.json echoing its resolved configuration so any result file can be
reproduced exactly. A JSON config file may preset any flag; explicit flags
win. Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, budget, freezing, harness, report, semantics, tasks, traceio
from .model import DivergenceError, LOSS_KINDS, MODULE_MASKS, ModelConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_config_defaults(argv: list[str], parser: argparse.ArgumentParser) -> None:
    """Apply --config file values as subcommand defaults (flags still override)."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    sub = parser.subparsers_by_name.get(argv[0]) if argv else None
    if sub is None:
        return
    with open(known.config) as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ValueError("config file must hold a JSON object")
    valid = {a.dest for a in sub._actions}
    unknown = set(values) - valid
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    sub.set_defaults(**values)


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {"tool": "semfreeze", "version": __version__, "subcommand": subcommand,
                "config": resolved}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------- train

def _cmd_train(args) -> int:
    model_cfg = ModelConfig(
        layers=args.layers,
        dim=args.dim,
        heads=args.heads,
        vocab=args.vocab,
        context_len=args.seq_len,
        seed=args.seed,
    )
    task = tasks.TaskSpec(
        kind=args.task,
        classes=args.classes,
        seq_len=args.seq_len,
        vocab=args.vocab,
        train_n=args.train_n,
        test_n=args.test_n,
        seed=args.seed,
    )
    run_cfg = harness.RunConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        loss_kind=args.loss,
        module_mask=args.modules,
    )
    if args.growth is not None and not freezing.needs_profile(args.policy):
        raise ValueError("budget plans need a deviation-driven policy (seft family)")

    out = _ensure_out(args.out)
    _write_manifest(out, "train", args)
    rep = harness.run_experiment(
        model_cfg, task, args.policy, run_cfg, growth=args.growth, infill=args.infill
    )

    with open(out / "report.json", "w") as fh:
        json.dump(rep.to_json_dict(), fh, indent=2)
        fh.write("\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "task", "accuracy", "cost_saving", "decisions", "diverged"])
        w.writerow([rep.policy, rep.task,
                    "" if rep.accuracy is None else repr(rep.accuracy),
                    repr(rep.cost_saving), rep.decisions, rep.diverged])
    harness.emit_violin_data(rep.layer_stats, out / "violin.csv")
    if rep.scheduler_ledger is not None:
        rep.scheduler_ledger.write_csv(out / "schedule_ledger.csv")

    print(f"policy={rep.policy} task={rep.task} "
          f"accuracy={rep.accuracy} cost_saving={rep.cost_saving:.6f}")
    if rep.diverged:
        print("training diverged; report is partial", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# ----------------------------------------------------------- analyze-trace

def _cmd_analyze_trace(args) -> int:
    trace = traceio.read_trace(args.trace)
    analysis = traceio.analyze_trace(trace, args.measure)
    out = _ensure_out(args.out)
    _write_manifest(out, "analyze-trace", args)

    with open(out / "deviations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "token", "label", "natural_eof"]
                   + [f"d{k}" for k in range(analysis.m + 1)])
        for i in range(analysis.eofs.shape[0]):
            w.writerow([i, int(analysis.tokens[i]), int(analysis.labels[i]),
                        int(analysis.eofs[i])]
                       + [repr(float(x)) for x in analysis.deviations[i]])
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eof", "count"])
        for b, c in enumerate(analysis.histogram):
            w.writerow([b, int(c)])
    with open(out / "plans.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["growth", "boundary", "quota"])
        for growth, quotas in analysis.plans.items():
            for b, q in enumerate(quotas):
                w.writerow([growth, b, q])
    stats = harness.layer_statistics(analysis.deviations, "trace")
    harness.emit_violin_data(stats, out / "violin.csv")
    summary = {
        "records": int(analysis.eofs.shape[0]),
        "layers": analysis.m,
        "measure": analysis.measure,
        "expected_saving": analysis.expected_saving,
        "plan_savings": analysis.plan_savings,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"records={summary['records']} layers={analysis.m} "
          f"expected_saving={analysis.expected_saving:.6f}")
    return EXIT_OK


# ------------------------------------------------------------- plan-budget

def _cmd_plan_budget(args) -> int:
    plan = budget.make_plan(args.growth, args.layers, args.batches)
    saving = budget.expected_saving(plan)
    print(f"growth={plan.growth} layers={plan.layers} batches={plan.total}")
    print("boundary quota")
    for b, q in enumerate(plan.quotas):
        print(f"{b:8d} {q}")
    print(f"expected_saving={saving:.6f}")
    for order in budget.ORDERS:
        slots = budget.infill_order(plan, order).slots
        head = ",".join(str(s) for s in slots[:24])
        more = "..." if len(slots) > 24 else ""
        print(f"{order}: {head}{more}")
    if args.out:
        out = _ensure_out(args.out)
        _write_manifest(out, "plan-budget", args)
        with open(out / "plans.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["growth", "boundary", "quota"])
            for b, q in enumerate(plan.quotas):
                w.writerow([plan.growth, b, q])
    return EXIT_OK


# ------------------------------------------------------------------ report

def _cmd_report(args) -> int:
    made = report.render_run_dir(args.run)
    for path in made:
        print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semfreeze",
        description="Layer-freezing finetuning testbed and latent-trace analyzer",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="finetune a toy model under a freeze policy")
    p.add_argument("--config", help="JSON file presetting any flag")
    p.add_argument("--task", choices=tasks.TASK_KINDS, default="trigger_token")
    p.add_argument("--policy", choices=freezing.POLICIES, default="seft")
    p.add_argument("--growth", choices=budget.GROWTHS, default=None,
                   help="run through the budgeted scheduler")
    p.add_argument("--infill", choices=budget.ORDERS, default=None)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--train-n", type=int, default=1024)
    p.add_argument("--test-n", type=int, default=256)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=LOSS_KINDS, default="standard_ce")
    p.add_argument("--modules", choices=MODULE_MASKS, default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("analyze-trace", help="deviation analysis of a trace file")
    p.add_argument("--config", help="JSON file presetting any flag")
    p.add_argument("--trace", required=True)
    p.add_argument("--measure", choices=semantics.MEASURES,
                   default=semantics.COSINE_TO_ANCHOR)
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_analyze_trace)

    p = sub.add_parser("plan-budget", help="print budget quotas and infill preview")
    p.add_argument("--config", help="JSON file presetting any flag")
    p.add_argument("--growth", choices=budget.GROWTHS, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--batches", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plan_budget)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_report)

    parser.subparsers_by_name = {name: sp for name, sp in sub.choices.items()}
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _load_config_defaults(argv, parser)
        args = parser.parse_args(argv)
        return args.func(args)
    except (FileNotFoundError, traceio.TraceFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, json.JSONDecodeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
