"""Command-line front end: simulate, compare-patients, delay-sweep.

Every command reads one TOML config, writes its artifacts (CSV traces,
plain-text summaries, the fully resolved config snapshot) into --out, and
finishes with a manifest listing each file and its digest. Exit codes:
0 success, 1 config/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

from . import __version__
from . import config as config_mod
from .scenario import CONTROLLER_KINDS, compute_metrics, max_tolerable_delay, run_closed_loop


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _finish_run(out_dir: str, rc, command: str, filenames: list) -> None:
    """Write the resolved snapshot and the manifest covering every artifact."""
    snap = os.path.join(out_dir, "resolved_config.toml")
    with open(snap, "w") as fh:
        fh.write(config_mod.resolved_toml(rc))
    filenames = filenames + ["resolved_config.toml"]
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config_path": rc.source_path,
        "config_sha256": rc.source_sha256,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "out_dir": os.path.abspath(out_dir),
        "outputs": {
            name: _sha256_file(os.path.join(out_dir, name)) for name in sorted(filenames)
        },
        "seed": rc.seed,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metrics_lines(metrics, extra=()) -> str:
    d = metrics.as_dict()
    lines = [
        f"settling_time_s = {d['settling_time_s']!r}",
        f"undershoot_bis = {d['undershoot_bis']!r}",
        f"total_drug_ugkg = {d['total_drug_ugkg']!r}",
        f"steady_state_error_bis = {d['steady_state_error_bis']!r}",
        f"in_bound = {'true' if d['in_bound'] else 'false'}",
        f'reason = "{d["reason"]}"',
    ]
    lines.extend(extra)
    return "\n".join(lines) + "\n"


def cmd_simulate(rc, out_dir: str) -> int:
    trace = run_closed_loop(rc.scenario())
    metrics = compute_metrics(trace, band=rc.band)
    trace.to_csv(os.path.join(out_dir, "trace.csv"))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(_metrics_lines(metrics, [f"qp_fallback_steps = {len(trace.failures)}"]))
    _finish_run(out_dir, rc, "simulate", ["trace.csv", "metrics.txt"])
    print(f"simulate: {rc.plant_name} / {rc.controller_kind} -> {out_dir} "
          f"(settling {metrics.settling_time:.0f} s, in_bound={metrics.in_bound})")
    return 0


def cmd_compare_patients(rc, out_dir: str) -> int:
    header = (f"{'patient':<12} {'controller':<16} {'settling_time_s':>15} "
              f"{'undershoot_bis':>14} {'total_drug_ugkg':>15} "
              f"{'steady_state_error_bis':>22} {'in_bound':>8}")
    rows = [header]
    files = []
    for name, patient in rc.roster.items():
        for kind in CONTROLLER_KINDS:
            trace = run_closed_loop(rc.scenario(patient=patient, controller_kind=kind))
            m = compute_metrics(trace, band=rc.band)
            fname = f"trace_{name}_{kind}.csv"
            trace.to_csv(os.path.join(out_dir, fname))
            files.append(fname)
            rows.append(f"{name:<12} {kind:<16} {m.settling_time:>15.1f} "
                        f"{m.undershoot:>14.2f} {m.total_drug:>15.1f} "
                        f"{m.steady_state_error:>22.3f} "
                        f"{str(m.in_bound).lower():>8}")
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    _finish_run(out_dir, rc, "compare-patients", files + ["summary.txt"])
    print("\n".join(rows))
    print(f"compare-patients: {len(files)} traces -> {out_dir}")
    return 0


def cmd_delay_sweep(rc, out_dir: str) -> int:
    base_td = rc.nominal.td
    files = []
    table = {}
    for direction, sign in (("increase", 1.0), ("decrease", -1.0)):
        for kind in CONTROLLER_KINDS:
            sc = rc.scenario(controller_kind=kind)
            diff = max_tolerable_delay(sc, band=rc.band,
                                       resolution=rc.resolution, direction=direction)
            table[(direction, kind)] = diff
            boundary = rc.scenario(
                patient=replace(rc.plant, td=base_td + sign * diff),
                controller_kind=kind,
            )
            fname = f"trace_boundary_{kind}_{direction}.csv"
            run_closed_loop(boundary).to_csv(os.path.join(out_dir, fname))
            files.append(fname)

    lines = [f"# tolerable delay mismatch, band = {rc.band} BIS, "
             f"resolution = {rc.resolution} s",
             f"{'controller':<16} {'tolerable_diff_s':>16} {'absolute_td_s':>14}"]
    for kind in CONTROLLER_KINDS:
        d = table[("increase", kind)]
        lines.append(f"{kind:<16} {d:>16.1f} {base_td + d:>14.1f}")
    lines.append("")
    lines.append("# decreased-delay boundary (reported separately)")
    for kind in CONTROLLER_KINDS:
        d = table[("decrease", kind)]
        lines.append(f"{kind:<16} {d:>16.1f} {base_td - d:>14.1f}")
    with open(os.path.join(out_dir, "delay_sweep.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _finish_run(out_dir, rc, "delay-sweep", files + ["delay_sweep.txt"])
    print("\n".join(lines))
    return 0


def _add_common(sub, with_controller: bool) -> None:
    sub.add_argument("--config", required=True, help="TOML config path")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="dotted config override, repeatable")
    sub.add_argument("--out", default=None, help="output directory (created if absent)")
    sub.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    if with_controller:
        sub.add_argument("--controller",
                         choices=["state-space-ekf", "baseline"], default=None,
                         help="override the configured controller")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="doasim",
        description="Closed-loop depth-of-anesthesia simulation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("simulate", help="run one closed-loop scenario"), True)
    _add_common(sub.add_parser("compare-patients",
                               help="run every patient under both controllers"), False)
    _add_common(sub.add_parser("delay-sweep",
                               help="bisect the tolerable delay mismatch per controller"),
                False)
    args = parser.parse_args(argv)

    try:
        rc = config_mod.load(
            args.config,
            overrides=args.overrides,
            controller=getattr(args, "controller", None),
            seed=args.seed,
            allow_plant_override=(args.command != "compare-patients"),
        )
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out_dir = args.out or os.path.join("runs", args.command)
    os.makedirs(out_dir, exist_ok=True)
    commands = {
        "simulate": cmd_simulate,
        "compare-patients": cmd_compare_patients,
        "delay-sweep": cmd_delay_sweep,
    }
    try:
        return commands[args.command](rc, out_dir)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
