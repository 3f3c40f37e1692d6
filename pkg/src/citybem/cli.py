"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 input parse error,
4 runtime error. Logs go to stderr; results only go to files.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from citybem import pipeline
from citybem.config import ConfigError, RunConfig, load_config
from citybem.geo_ingest import ElevationError, GeoParseError

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("citybem")

_PARSE_ERRORS = (GeoParseError, ElevationError)


def _common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    p.add_argument("--config", type=Path, required=needs_config, help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="citybem", description="Urban building energy pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("reconstruct", help="footprints to an OBJ scene"))
    _common(sub.add_parser("shading", help="shading mask CSVs per exterior face"))
    _common(sub.add_parser("viewfactor", help="building-to-building view factor JSON"))
    p = sub.add_parser("partition", help="partition plan JSON")
    _common(p)
    p.add_argument("--case", type=int, choices=(0, 1))
    p = sub.add_parser("simulate", help="full run")
    _common(p)
    p.add_argument("--archetype")
    p.add_argument("--aggregate-output", action="store_true")
    p = sub.add_parser("bench", help="scaling sweep over worker counts")
    _common(p)
    p.add_argument("--counts", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p = sub.add_parser("report", help="convert a bench report between json and csv")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.workers is not None:
        kw["n_workers"] = args.workers
    if args.out is not None:
        kw["out"] = args.out
    if getattr(args, "archetype", None):
        kw["archetype"] = args.archetype
    if getattr(args, "aggregate_output", False):
        kw["aggregate_output"] = True
    if getattr(args, "case", None) is not None:
        kw["partition_case"] = args.case
    cfg = cfg.with_(**kw) if kw else cfg
    cfg.check_paths()
    return cfg


def _run(args) -> int:
    if args.command == "report":
        rep = pipeline.load_report(args.input)
        fmt = "csv" if args.output.suffix.lower() == ".csv" else "json"
        pipeline.emit_report(rep, args.output, fmt)
        log.info("wrote %s", args.output)
        return EXIT_OK
    cfg = _config(args)
    if args.command == "reconstruct":
        path = pipeline.reconstruct(cfg)
    elif args.command == "shading":
        path = pipeline.write_masks(cfg)
    elif args.command == "viewfactor":
        path = pipeline.write_view_factors(cfg)
    elif args.command == "partition":
        path = pipeline.write_plan(cfg)
    elif args.command == "simulate":
        res = pipeline.run_pipeline(cfg)
        path = res.out_dir
    elif args.command == "bench":
        try:
            counts = [int(c) for c in args.counts.split(",") if c.strip()]
        except ValueError:
            raise ConfigError(f"bad --counts value {args.counts!r}") from None
        rep = pipeline.bench_scaling(cfg, counts)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        path = pipeline.emit_report(rep, Path(cfg.out) / f"bench.{args.format}", args.format)
        if not rep.complete:
            log.error("sweep incomplete; see %s", path)
            return EXIT_RUNTIME
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {args.command}")
    log.info("wrote %s", path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except _PARSE_ERRORS as exc:
        log.error("input: %s", exc)
        return EXIT_PARSE
    except pipeline.PipelineError as exc:
        log.error("%s", exc)
        if isinstance(exc.cause, _PARSE_ERRORS):
            return EXIT_PARSE
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
