"""Command-line entry point.

Every command prints JSON on stdout and diagnostics on stderr. Exit status
is 0 on success, 1 for invalid input and 2 for an internal invariant
violation. ``--config file.json`` supplies any flag (snake or kebab case);
explicit flags take precedence over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import fields

from . import __version__
from .epidemic import OracleScaleError, SimConfig, generate
from .events import EventError, read_event_log
from .ontology import SchemaError, load_schema
from .state import EntityRef, StateError
from .trainer import (CheckpointError, TrainConfig, evaluate, infer, read_checkpoint,
                      select_holdout, train, write_checkpoint)

VALIDATION_ERRORS = (SchemaError, EventError, StateError, CheckpointError, OracleScaleError,
                     ValueError, KeyError, OSError)


class UsageError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    # a default of None or a bare switch says nothing useful
    def _get_help_string(self, action):
        if action.default is None or isinstance(action.default, bool):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _entity(text: str) -> EntityRef:
    sep = ":" if ":" in text else ","
    j, _, k = text.partition(sep)
    try:
        return EntityRef(j, int(k))
    except ValueError:
        raise argparse.ArgumentTypeError(f"entity must look like TYPE:INDEX, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


# ------------------------------------------------------------------ parser

def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """With ``suppress`` every default is hidden, so the parsed namespace
    holds only flags that were given explicitly."""
    fmt = _Formatter

    def d(value):
        return argparse.SUPPRESS if suppress else value

    parser = _Parser(prog="hyperlearn", description="Temporal hypergraph estimators over typed entities.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--seed", type=int, default=d(0), help="random seed")
        p.add_argument("--config", default=d(None), help="JSON file with flag values")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False), help="debug logging")
        return p

    sim_defaults = SimConfig()
    p = command("simulate", "generate an epidemic scenario: schema, event log and ground truth")
    p.add_argument("--out", default=d("sim"), help="output directory")
    for f in fields(SimConfig):
        if f.name in ("seed", "initial_infected"):
            continue
        value = getattr(sim_defaults, f.name)
        kind = _pair if isinstance(value, tuple) else type(value)
        p.add_argument("--" + f.name.replace("_", "-"), type=kind, default=d(value),
                       help=f.name.replace("_", " ") + (" as LO,HI" if isinstance(value, tuple) else ""))

    tc = TrainConfig()
    p = command("train", "fit the estimators on an event log and write a checkpoint")
    _io_flags(p, d)
    p.add_argument("--mode", choices=("markovian", "full_history"), default=d(tc.mode), help="time aggregation")
    p.add_argument("--epochs", type=int, default=d(tc.epochs), help="offline passes over the log")
    p.add_argument("--online", action="store_true", default=d(tc.online), help="single online pass")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=d(tc.optimizer), help="optimizer")
    p.add_argument("--lr", type=float, default=d(tc.lr), help="learning rate")
    p.add_argument("--beta1", type=float, default=d(tc.beta1), help="Adam first-moment decay")
    p.add_argument("--beta2", type=float, default=d(tc.beta2), help="Adam second-moment decay")
    p.add_argument("--eps", type=float, default=d(tc.eps), help="Adam epsilon")
    p.add_argument("--update", choices=("step", "epoch"), default=d(tc.update), help="optimizer step cadence")
    p.add_argument("--lookback", type=int, default=d(tc.lookback), help="history window in steps")
    p.add_argument("--bptt-horizon", type=int, default=d(tc.bptt_horizon), help="truncation depth (markovian)")
    p.add_argument("--readout-hidden", type=int, default=d(tc.readout_hidden), help="readout hidden width")
    p.add_argument("--space-hidden", type=int, default=d(tc.space_hidden),
                   help="space encoder width, twice the largest takeaway if unset")
    p.add_argument("--no-self-mask", dest="mask_self_belief", action="store_false", default=d(True),
                   help="feed each participant its own belief block (leaks targets)")
    p.add_argument("--checkpoint", default=d("checkpoint.json"), help="checkpoint output path")
    p.add_argument("--metrics", default=d(None), help="StepReport JSON-lines path, '-' for stdout")
    _holdout_flags(p, d, 0.0)

    p = command("evaluate", "score a checkpoint on held-out label points")
    _io_flags(p, d)
    p.add_argument("--checkpoint", default=d("checkpoint.json"), help="checkpoint path")
    _holdout_flags(p, d, 0.2)

    p = command("infer", "estimate one entity's belief at one step")
    _io_flags(p, d)
    p.add_argument("--checkpoint", default=d("checkpoint.json"), help="checkpoint path")
    p.add_argument("--entity", type=_entity, default=d(None), help="TYPE:INDEX, e.g. human:3")
    p.add_argument("--t", type=int, default=d(None), help="time step")

    p = command("inspect", "summary statistics of an event log")
    _io_flags(p, d, schema_required=False)

    command("gradcheck", "finite-difference check of every differentiable op and the toy objective")
    return parser


def _io_flags(p, d, schema_required: bool = True):
    p.add_argument("--schema", default=d(None),
                   help="schema JSON path" + ("" if schema_required else " (enables validation)"))
    p.add_argument("--events", default=d("-"), help="event log path, '-' for stdin")


def _holdout_flags(p, d, fraction: float):
    p.add_argument("--holdout-fraction", type=float, default=d(fraction),
                   help="fraction of observed label points withheld")
    p.add_argument("--holdout-seed", type=int, default=d(0), help="seed of the holdout split")
    p.add_argument("--holdout-types", nargs="*", default=d(None),
                   help="entity types eligible for holdout (default all)")


def parse(argv: list[str]) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("--config must hold a JSON object")
        known = vars(args)
        for key, value in doc.items():
            name = key.replace("-", "_")
            if name not in known or name in ("command", "config"):
                raise ValueError(f"unknown key {key!r} in config file for {args.command!r}")
            if name not in explicit:
                setattr(args, name, value)
    return args


# ---------------------------------------------------------------- commands

def _emit(obj):
    json.dump(obj, sys.stdout)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) " +
                         ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(args):
    _need(args, "schema")
    schema = load_schema(args.schema)
    return schema, read_event_log(args.events, schema)


def _holdout(args, log_):
    if not args.holdout_fraction:
        return frozenset()
    return select_holdout(log_, args.holdout_fraction, args.holdout_seed, args.holdout_types)


def cmd_simulate(args) -> int:
    names = {f.name for f in fields(SimConfig)}
    cfg = SimConfig.from_dict({k: v for k, v in vars(args).items() if k in names})
    sim = generate(cfg)
    sim.write(args.out)
    prev = sim.prevalence()
    _emit({"out": args.out, "files": ["schema.json", "events.jsonl", "truth.jsonl"],
           "schema_hash": sim.schema.hash(), "events": len(sim.log), "labels": len(sim.observations),
           "prevalence": {"min": float(prev.min()), "mean": float(prev.mean()), "max": float(prev.max())}})
    return 0


def cmd_train(args) -> int:
    schema, log_ = _load(args)
    names = {f.name for f in fields(TrainConfig)}
    config = TrainConfig.from_dict({k: v for k, v in vars(args).items() if k in names})
    holdout = _holdout(args, log_)
    out = None
    if args.metrics == "-":
        out = sys.stdout
    elif args.metrics:
        out = open(args.metrics, "w", encoding="utf-8")

    def on_report(epoch, report):
        if out is not None:
            out.write(json.dumps({"epoch": epoch, **report.to_dict()}) + "\n")

    def on_epoch(epoch, mean):
        print(f"epoch {epoch + 1}/{config.epochs if not config.online else 1} mean loss {mean:.6f}",
              file=sys.stderr)

    try:
        result = train(schema, log_, config, holdout=holdout, on_report=on_report, on_epoch=on_epoch)
    finally:
        if out is not None and out is not sys.stdout:
            out.close()
    write_checkpoint(result.checkpoint, args.checkpoint)
    _emit({"summary": True, "checkpoint": args.checkpoint, "epochs": len(result.trajectory),
           "trajectory": result.trajectory, "parameters": result.params.count(),
           "holdout_points": len(holdout)})
    return 0


def cmd_evaluate(args) -> int:
    schema, log_ = _load(args)
    holdout = _holdout(args, log_)
    if not holdout:
        raise ValueError("holdout is empty: raise --holdout-fraction or check the log has labels")
    metrics = evaluate(schema, log_, read_checkpoint(args.checkpoint), holdout)
    metrics["holdout"] = {"fraction": args.holdout_fraction, "seed": args.holdout_seed}
    _emit(metrics)
    return 0


def cmd_infer(args) -> int:
    _need(args, "entity", "t")
    schema, log_ = _load(args)
    entity = args.entity if isinstance(args.entity, EntityRef) else _entity(str(args.entity))
    _emit(infer(schema, log_, read_checkpoint(args.checkpoint), entity, args.t))
    return 0


def _inspect_raw(source) -> dict:
    fh = sys.stdin if source == "-" else open(source, encoding="utf-8")
    kinds, itypes, entities = Counter(), Counter(), {}
    t_min = t_max = None
    try:
        header = None
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EventError(f"malformed JSON ({exc.msg})", n) from None
            if header is None:
                header = obj
                continue
            if not isinstance(obj, dict) or "t" not in obj or "kind" not in obj:
                raise EventError("event needs 't' and 'kind'", n)
            kinds[obj["kind"]] += 1
            t_min = obj["t"] if t_min is None else min(t_min, obj["t"])
            t_max = obj["t"] if t_max is None else max(t_max, obj["t"])
            refs = list(obj.get("participants", {}).values()) if obj["kind"] == "interaction" else [obj.get("entity")]
            if obj["kind"] == "interaction":
                itypes[obj.get("itype")] += 1
            for r in refs:
                if isinstance(r, list) and len(r) == 2:
                    entities.setdefault(r[0], set()).add(r[1])
    finally:
        if fh is not sys.stdin:
            fh.close()
    if header is None:
        raise EventError("empty event log (missing header)", 1)
    return {"header": header, "events": sum(kinds.values()), "by_kind": dict(sorted(kinds.items())),
            "by_interaction_type": dict(sorted(itypes.items())),
            "entities_by_type": {j: len(v) for j, v in sorted(entities.items())},
            "t_range": None if t_min is None else [t_min, t_max], "validated": False}


def cmd_inspect(args) -> int:
    if args.schema is None:
        _emit(_inspect_raw(args.events))
        return 0
    schema, log_ = _load(args)
    kinds = Counter(ev.kind for ev in log_.events)
    itypes = Counter(ev.itype for ev in log_.events if ev.kind == "interaction")
    entities: dict[str, set] = {}
    labels = Counter()
    for ev in log_.events:
        refs = [r for _, r in ev.participants] if ev.kind == "interaction" else [ev.entity]
        for r in refs:
            entities.setdefault(r.entity_type, set()).add(r.index)
        if ev.kind == "belief_update":
            labels[ev.entity.entity_type] += 1
    _emit({"header": log_.header(), "events": len(log_), "by_kind": dict(sorted(kinds.items())),
           "by_interaction_type": dict(sorted(itypes.items())),
           "entities_by_type": {j: len(v) for j, v in sorted(entities.items())},
           "labels_by_type": dict(sorted(labels.items())),
           "t_range": list(log_.t_range) if log_.t_range else None, "validated": True})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run as run_gradcheck
    report = run_gradcheck(args.seed)
    _emit(report)
    if not report["pass"]:
        print("gradcheck failed: " + ", ".join(c["name"] for c in report["checks"] if not c["pass"]),
              file=sys.stderr)
        return 2
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "infer": cmd_infer,
            "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort invariant report
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
