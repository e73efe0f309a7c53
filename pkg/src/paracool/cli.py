"""Command line entry point: ``paracool {run,sweep,reproduce,replay}``.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 no trapped
trajectories anywhere.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dsp
from . import experiment as ex

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DEGENERATE = 0, 1, 2, 3

log = logging.getLogger("paracool")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paracool", description="Parametric feedback cooling simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML experiment config")
        sp.add_argument("--out", help="output file (run/sweep/replay) or directory (reproduce)")
        sp.add_argument("--seed", type=int, help="override experiment.master_seed")
        sp.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    common(sub.add_parser("run", help="one ensemble at the configured operating point"))
    common(sub.add_parser("sweep", help="ensemble per value of the [sweep] parameter"))
    rp = sub.add_parser("reproduce", help="run a bundled figure config")
    rp.add_argument("figure", choices=ex.FIGURES)
    rp.add_argument("--scale", choices=ex.SCALES, default="desk")
    common(rp, config_required=False)
    pp = sub.add_parser("replay", help="feed a recorded count stream through the controller only")
    common(pp)
    pp.add_argument("--input", required=True, help="count stream (.csv or .bin)")
    return p


def _emit(text: str, out):
    if out:
        ex._write(out, text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _load(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _records_out(records, cfg, args) -> int:
    text = ex.records_csv(records) if args.format == "csv" else ex.records_json(records, cfg)
    _emit(text, args.out or cfg.output)
    return EXIT_DEGENERATE if all(r.degenerate for r in records) else EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    rec = ex.run_point(cfg, args.workers)
    log.info("%s: %s", cfg.name, ex._describe(rec))
    return _records_out([rec], cfg, args)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    records = ex.run_sweep(cfg, args.workers)
    return _records_out(records, cfg, args)


def cmd_reproduce(args) -> int:
    if args.config:
        raise ex.ConfigError("--config: reproduce uses the bundled figure configs")
    tables = ex.reproduce_figure(args.figure, args.scale, args.workers, args.seed, progress=log.info)
    out = Path(args.out or f"{args.figure}_{args.scale}")
    for t in tables.values():
        ex.write_table(t, out)
        log.info("wrote %s", out / f"{t.name}.csv")
    point_tables = [t for t in tables.values() if t.columns == ex.CSV_COLUMNS]
    if point_tables and all(row[4] == 0 for t in point_tables for row in t.rows):
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _load(args)
    if cfg.controller is None:
        raise ex.ConfigError("controller: replay needs a feedback mode config")
    counts = dsp.read_stream(args.input)
    trace = dsp.run_pipeline(counts, cfg.controller)
    out = args.out or "drive.csv"
    dsp.write_stream(out, trace.drive, header="modulation")
    log.info("replayed %d ticks to %s", counts.size, out)
    return EXIT_OK


COMMANDS = dict(run=cmd_run, sweep=cmd_sweep, reproduce=cmd_reproduce, replay=cmd_replay)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as a runtime failure with its message
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
