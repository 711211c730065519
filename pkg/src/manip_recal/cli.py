"""``manip-recal`` command line.

Exit codes: 0 success, 1 run finished but failed its check, 2 identification
did not converge, 3 configuration error, 4 mission ended in safe mode.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import scenario as sc
from .calib import NotConverged, write_result_json, write_validation_csv
from .executive import ExecState, write_mission_jsonl
from .monsid import ComponentGraph, analyze_ambiguity_groups, format_group_table, write_health_jsonl

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3
EXIT_SAFE_MODE = 4

log = logging.getLogger("manip_recal")


def _say(args, *msg) -> None:
    if not args.quiet:
        print(*msg)


def _load(args) -> dict:
    if args.config is None:
        raise sc.ConfigError("--config is required")
    path = Path(args.config)
    if not path.exists() and path.suffix == "" and path.name in sc.builtin_names():
        cfg = sc.builtin(path.name)
        return sc.prepare(cfg, args.seed)
    return sc.load(path, args.seed)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("MANIP_RECAL_OUT") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_calibrate(args) -> int:
    from .pipeline import run_calibration

    cfg = _load(args)
    try:
        run = run_calibration(cfg)
    except NotConverged as exc:
        log.error("%s", exc)
        return EXIT_NOT_CONVERGED
    out = _out_dir(args)
    run.trace.to_csv(out / "boed_trace.csv")
    truth = run.ground_truth or None
    write_result_json(out / "calibration.json", run.result, truth)
    with open(out / "calibration.json") as fh:
        d = json.load(fh)
    if run.accuracy:
        d["accuracy"] = run.accuracy
    d["validation"] = run.validation.summary()
    _dump(out / "calibration.json", d)
    write_validation_csv(out / "validation.csv", run.validation.table())
    for name, acc in run.accuracy.items():
        est = run.result.correction_of(name)
        _say(args, f"{name}: true {run.ground_truth[name]:+.4f}  estimated {est:+.4f}  accuracy {acc if acc is None else round(acc, 2)}%")
    _say(args, f"validation {'passed' if run.validation.passed else 'FAILED'}; orientation error reduced "
         f"{100 * run.validation.orientation_reduction:.1f}%")
    return EXIT_OK if run.validation.passed else EXIT_FAILED


def cmd_detect(args) -> int:
    from .pipeline import run_detection

    cfg = _load(args)
    run = run_detection(cfg)
    out = _out_dir(args)
    write_health_jsonl(out / "health.jsonl", run.engine.records)
    _dump(out / "engine_state.json", run.engine_state())
    for rec in run.engine.records:
        if rec["event"] != "suspect" and rec["event"] != "cleared":
            _say(args, f"t={rec['t']:.3f}s {rec['event']}: {', '.join(rec['elements'])}")
    c = run.coordination
    _say(args, f"{len(c.slices)} slices, {c.dropped} dropped, {run.engine.declarations} declarations")
    return EXIT_OK


def cmd_mission(args) -> int:
    from .pipeline import run_mission_scenario

    cfg = _load(args)
    if "mission" not in cfg:
        raise sc.ConfigError("mission: section required")
    outcome = run_mission_scenario(cfg)
    out = _out_dir(args)
    write_mission_jsonl(out / "mission.jsonl", outcome.log)
    _say(args, " -> ".join(outcome.transitions))
    _say(args, "mission complete" if outcome.completed else f"mission ended in {outcome.final_state.value}")
    if outcome.final_state is ExecState.SAFE_MODE:
        return EXIT_SAFE_MODE
    return EXIT_OK if outcome.completed else EXIT_FAILED


def cmd_ambiguity(args) -> int:
    graph = ComponentGraph()
    if args.config is not None:
        cfg = _load(args)
        m = cfg.get("monsid", {})
        n = m.get("n_joints", sc.build_chain(cfg).n_joints)
        graph = ComponentGraph(n, m.get("duplicate_encoders", False))
    if args.joints is not None:
        graph = ComponentGraph(args.joints, args.duplicate_encoders or graph.duplicate_encoders)
    elif args.duplicate_encoders:
        graph = ComponentGraph(graph.n_joints, True)
    groups = analyze_ambiguity_groups(graph)
    _say(args, format_group_table(groups))
    _say(args, f"{len(groups)} groups")
    out = _out_dir(args)
    _dump(out / "ambiguity_groups.json", {"graph": graph.to_dict(), "groups": [g.to_dict() for g in groups]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON file, or the name of a built-in scenario")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", help="output directory (default $MANIP_RECAL_OUT or ./out)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    p = argparse.ArgumentParser(prog="manip-recal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="design, identify and validate a calibration").set_defaults(fn=cmd_calibrate)
    sub.add_parser("detect", parents=[common], help="run fault detection on scripted telemetry").set_defaults(fn=cmd_detect)
    sub.add_parser("mission", parents=[common], help="replay a mission under the executive").set_defaults(fn=cmd_mission)
    amb = sub.add_parser("ambiguity", parents=[common], help="print the ambiguity-group table")
    amb.add_argument("--joints", type=int, help="number of joints in the graph")
    amb.add_argument("--duplicate-encoders", action="store_true", help="add a second encoder per joint")
    amb.set_defaults(fn=cmd_ambiguity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except sc.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
