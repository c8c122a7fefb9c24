"""Command-line entry point: ``msgcontrol {simulate,retro,fit}``.

Exit codes: 0 success, 2 configuration or input-path problems, 3 runtime
failures (bad data, insufficient data, simulation errors).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from . import __version__
from .config import (
    ConfigError,
    RetroConfig,
    load_toml,
    load_trial_config,
    retro_config_from_dict,
)
from .identification import IdentificationError, TrainingWindow, fit
from .protocol import load_protocol
from .retro import RetroDataError, ingest, replay, write_events_csv
from .stats import emit_report, summarize, write_table4_counts

log = logging.getLogger("msgcontrol")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunManifest:
    command: str
    config_hash: str
    root_seed: int | None
    version: str = __version__
    started_at: str = ""
    finished_at: str | None = None
    outputs: list[str] = field(default_factory=list)
    status: str = "running"

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        tmp = path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2) + "\n")
        os.replace(tmp, path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True) + "\n")
    os.replace(tmp, path)


def cmd_simulate(args: argparse.Namespace) -> int:
    from .trial import run_trial

    try:
        config = load_trial_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        protocols = args.protocol or list(config.protocols)
        for p in protocols:
            load_protocol(p)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        "simulate", config.digest(), config.root_seed, started_at=_now(),
        outputs=["results.json", "summary.json", "boxplot_data.csv"],
    )
    manifest.write(out)
    jobs = args.jobs or os.cpu_count() or 1
    log.info("simulating %d patients x %d protocol(s) with %d worker(s)", config.n_patients, len(protocols), jobs)
    try:
        result = run_trial(config, jobs=jobs, protocols=protocols)
    except Exception as exc:  # noqa: BLE001 - any failure inside the trial is a runtime error
        print(f"error: trial failed: {exc}", file=sys.stderr)
        manifest.status = "failed"
        manifest.write(out)
        return EXIT_RUNTIME

    _write_json(out / "results.json", result.to_dict())
    summaries = [
        summarize(pairs, name, result.specs[name].target_range) for name, pairs in result.records.items()
    ]
    meta = {
        "command": "simulate",
        "config_hash": config.digest(),
        "root_seed": config.root_seed,
        "version": __version__,
        "n_patients": config.n_patients,
        "protocols": protocols,
    }
    emit_report(summaries, meta, out)
    manifest.finished_at, manifest.status = _now(), "ok"
    manifest.write(out)
    for s in summaries:
        for stat in ("min", "max", "avg"):
            t = s.tests[stat]
            if t is not None:
                log.info("%s %s diff %.2f CI [%.2f, %.2f] p=%.3g", s.protocol, stat, t.mean, *t.ci95, t.p)
    return EXIT_OK


def _retro_config(path: str | None) -> RetroConfig:
    return RetroConfig() if path is None else retro_config_from_dict(load_toml(path))


def cmd_retro(args: argparse.Namespace) -> int:
    data = Path(args.data)
    try:
        config = _retro_config(args.config)
        spec = load_protocol(args.protocol)
        if not data.is_dir():
            raise ConfigError(f"data directory not found: {data}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest_src = json.dumps({"retro": asdict(config), "protocol": spec.name}, sort_keys=True, default=str)
    manifest = RunManifest(
        "retro", hashlib.sha256(digest_src.encode()).hexdigest(), config.fit.seed,
        started_at=_now(), outputs=["events.csv", "table4_counts.csv"],
    )
    manifest.write(out)
    try:
        records = ingest(data)
        result = replay(records, spec, config)
    except (RetroDataError, IdentificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest.status = "failed"
        manifest.write(out)
        return EXIT_RUNTIME
    write_events_csv(result.events, out / "events.csv", spec.name)
    write_table4_counts(result.counts(), out / "table4_counts.csv")
    manifest.finished_at, manifest.status = _now(), "ok"
    manifest.write(out)
    n = {k: sum(v.values()) for k, v in result.counts().items()}
    log.info("%d record(s), %s classified, %d unevaluable", len(records), n, result.unevaluable)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    data = Path(args.data)
    try:
        config = _retro_config(args.config)
        if not data.is_dir() or not (data / "bg.csv").is_file():
            raise ConfigError(f"cannot read BG data in {data}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records = ingest(data)
        if args.patient is not None:
            records = [r for r in records if r.patient_id == args.patient]
        if len(records) != 1:
            raise IdentificationError(
                f"expected exactly one usable patient record, found {len(records)}"
                + ("" if args.patient else "; pass --patient")
            )
        rec = records[0]
        start = rec.insulin.start if args.start is None else args.start
        end = start + args.window
        window = TrainingWindow(rec.bg.window(start, end), rec.insulin, rec.nutrition, start, end)
        result = fit(window, config.fit)
    except (RetroDataError, IdentificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"patient_id": rec.patient_id, "window": [start, end], **result.to_dict()}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msgcontrol", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the virtual-patient trial")
    s.add_argument("--config", required=True, help="trial TOML")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: all CPUs)")
    s.add_argument("--seed", type=int, default=None, help="override the root seed")
    s.add_argument("--protocol", action="append", help="protocol name or TOML path (repeatable)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("retro", help="replay recorded data against a protocol")
    r.add_argument("--data", default=None, help="directory with bg.csv, insulin.csv, nutrition.csv "
                   "(default: shipped synthetic fixture)")
    r.add_argument("--protocol", required=True, help="protocol name or TOML path")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--config", default=None, help="retro TOML ([retro], [controller], [fit])")
    r.set_defaults(func=cmd_retro)

    f = sub.add_parser("fit", help="fit MSG parameters to one patient's data")
    f.add_argument("--data", required=True, help="directory with one patient's CSV files")
    f.add_argument("--patient", default=None, help="patient id if the files hold several")
    f.add_argument("--window", type=float, default=24.0, help="training window length, hr")
    f.add_argument("--start", type=float, default=None, help="window start, hr (default: record start)")
    f.add_argument("--config", default=None, help="TOML with a [fit] table")
    f.set_defaults(func=cmd_fit)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "data", "") is None:
        with resources.as_file(resources.files("msgcontrol") / "data" / "retro_fixture") as p:
            args.data = str(p)
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
