"""Command line front end.

Subcommands: ``simulate`` (scenario -> observation log + ground truth),
``classify`` (observation log -> report stream on stdout), ``score``
(report stream vs ground truth) and ``mine`` (behavior mining over a trip
log).  Exit codes are the only success/failure channel: 0 ok, 1 for any
module or input error, 2 for an unsorted observation log.  Diagnostics go
to stderr, payload to stdout.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .behavior import HistoryStore, ModeLabel, mine_companions, mine_periodic_routes
from .cdr import UnsortedInput, format_observation_log, parse_observation_log
from .engine import EngineConfig, parse_report_line, run_engine
from .simulate import format_ground_truth, parse_ground_truth, parse_scenario, simulate
from .topology import load_topology
from .travel_graph import export_dot

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNSORTED = 2


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = EngineConfig()
    parser.add_argument("--slot-len", type=float, default=defaults.slot_len,
                        help="slot length in seconds")
    parser.add_argument("--walk-max", type=float, default=defaults.walk_max,
                        help="upper bound of the slow band, km/h")
    parser.add_argument("--medium-max", type=float, default=defaults.medium_max,
                        help="upper bound of the medium band, km/h")
    parser.add_argument("--theta", type=float, default=defaults.theta,
                        help="line coverage threshold for public transport")
    parser.add_argument("--group-min", type=int, default=defaults.group_min,
                        help="smallest group treated as a vehicle")
    parser.add_argument("--shared-levels", type=int, default=defaults.shared_levels,
                        help="levels compared for co-travel grouping")
    parser.add_argument("--depth", type=int, default=defaults.depth,
                        help="backward enrichment depth in levels")
    parser.add_argument("--gap-slots", type=int, default=defaults.gap_slots,
                        help="silent slots that end a trip")
    parser.add_argument("--seed", type=int, default=defaults.seed,
                        help="seed recorded in the run configuration")


def _config_from(args: argparse.Namespace) -> EngineConfig:
    return EngineConfig(
        slot_len=args.slot_len, walk_max=args.walk_max,
        medium_max=args.medium_max, theta=args.theta,
        group_min=args.group_min, shared_levels=args.shared_levels,
        depth=args.depth, gap_slots=args.gap_slots, seed=args.seed)


def cmd_simulate(args: argparse.Namespace) -> int:
    topo = load_topology(Path(args.topology).read_text())
    spec = parse_scenario(Path(args.scenario).read_text(), topo)
    if args.jitter is not None or args.seed_override is not None:
        from dataclasses import replace
        spec = replace(
            spec,
            jitter_fraction=spec.jitter_fraction if args.jitter is None else args.jitter,
            seed=spec.seed if args.seed_override is None else args.seed_override)
    observations, truth = simulate(spec)
    Path(args.log_out).write_text(format_observation_log(observations))
    Path(args.truth_out).write_text(format_ground_truth(truth))
    return EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    topo = load_topology(Path(args.topology).read_text())
    observations = parse_observation_log(Path(args.log).read_text())
    config = _config_from(args)
    history = HistoryStore(slot_len=config.slot_len)
    if args.history:
        history.load_trips(Path(args.history).read_text())

    dumped: list = []
    hook = dumped.append if args.dump_graphs else None
    try:
        result = run_engine(observations, topo, config, history=history,
                            graph_hook=hook)
    except UnsortedInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSORTED
    for note in result.anomalies:
        print(f"warning: {note}", file=sys.stderr)
    sys.stdout.write(result.report_text())
    if args.dump_graphs:
        out_dir = Path(args.dump_graphs)
        out_dir.mkdir(parents=True, exist_ok=True)
        for task in dumped:
            if task.graph is not None:
                name = f"{task.task_id}.dot"
                (out_dir / name).write_text(export_dot(task.graph))
    if args.history_out:
        result.history.save_trips(args.history_out)
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    truth = parse_ground_truth(Path(args.truth).read_text())
    final: dict[str, ModeLabel] = {}
    for line in Path(args.reports).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        report = parse_report_line(line)
        final[report.entity_id] = report.label
    if set(final) != set(truth.labels):
        missing = sorted(set(truth.labels) ^ set(final))
        print(f"error: entity ids disagree between reports and truth: "
              f"{', '.join(missing)}", file=sys.stderr)
        return EXIT_ERROR

    entities = sorted(truth.labels)
    total = len(entities)
    correct = sum(1 for e in entities
                  if final[e] is not ModeLabel.UNRESOLVED
                  and final[e] is truth.labels[e])
    unresolved = sum(1 for e in entities if final[e] is ModeLabel.UNRESOLVED)
    print(f"entities {total}")
    print(f"accuracy {correct / total if total else 0.0:.6f}")
    print(f"unresolved_rate {unresolved / total if total else 0.0:.6f}")
    labels = sorted({l.value for l in truth.labels.values()}
                    | {l.value for l in final.values() if l is not ModeLabel.UNRESOLVED})
    for value in labels:
        label = ModeLabel(value)
        predicted = [e for e in entities if final[e] is label]
        actual = [e for e in entities if truth.labels[e] is label]
        hits = [e for e in predicted if truth.labels[e] is label]
        precision = len(hits) / len(predicted) if predicted else 0.0
        recall = len(hits) / len(actual) if actual else 0.0
        print(f"label {value} precision {precision:.6f} recall {recall:.6f} "
              f"support {len(actual)}")
    return EXIT_OK


def cmd_mine(args: argparse.Namespace) -> int:
    store = HistoryStore(slot_len=args.slot_len)
    store.load_trips(Path(args.history).read_text())
    for entity_id in store.entities():
        counts = " ".join(
            f"{label.value}={store.mode_count(entity_id, label)}"
            for label in ModeLabel
            if label is not ModeLabel.UNRESOLVED
            and store.mode_count(entity_id, label))
        prior = store.prior(entity_id)
        print(f"entity {entity_id} trips {len(store.trips(entity_id))} "
              f"{counts} prior {prior.p_public:.3f}/{prior.support}")
        for route in mine_periodic_routes(store, entity_id):
            window = f"{route.window[0]:.0f}-{route.window[1]:.0f}"
            days = ",".join(str(d) for d in sorted(route.weekdays))
            print(f"periodic {entity_id} {window}s days {days} "
                  + " ".join(route.cells))
    for a, b, shared in mine_companions(store):
        print(f"companions {a} {b} {shared}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellmotion",
        description="Travel-mode mining over BTS location events")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("scenario")
    p.add_argument("topology")
    p.add_argument("log_out")
    p.add_argument("truth_out")
    p.add_argument("--jitter", type=float, default=None,
                   help="override the scenario's jitter fraction")
    p.add_argument("--seed-override", type=int, default=None,
                   help="override the scenario's seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", help="classify an observation log")
    p.add_argument("log")
    p.add_argument("topology")
    p.add_argument("--history", default=None,
                   help="trip log that seeds the historical priors")
    p.add_argument("--history-out", default=None,
                   help="write the updated trip log here")
    p.add_argument("--dump-graphs", default=None, metavar="DIR",
                   help="write one DOT file per coordination task")
    _add_config_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("score", help="compare reports against ground truth")
    p.add_argument("reports")
    p.add_argument("truth")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("mine", help="mine a trip log")
    p.add_argument("history")
    p.add_argument("--slot-len", type=float, default=EngineConfig().slot_len)
    p.set_defaults(func=cmd_mine)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnsortedInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSORTED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps errors to codes
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entry() -> None:
    sys.exit(main())
