"""Command-line interface: ``gsremoval {eval,refine,gen-fixture,report,validate}``.

Exit codes: 0 success, 1 usage error, 2 invalid manifest or inputs, 3 the
batch finished but some views failed, 4 refinement found an empty graph (the
seed removal set is left untouched).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .fixtures import FixtureError, gen_fixture
from .gaussians import GraphEmpty, PlyFormatError, load_ply, load_removal_set, save_ply, save_removal_set
from .pipeline import (
    EvalConfig,
    ManifestError,
    atomic_write,
    emit_report,
    load_report,
    run_eval,
    summary_csv,
    table_rows,
    validate_manifest,
)
from .refine import MissingFeatures, RefineConfig, refine

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_VIEW_ERRORS = 3
EXIT_GRAPH_EMPTY = 4

log = logging.getLogger("gsremoval")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this tool reserves 2 for invalid inputs."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsremoval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ev = sub.add_parser("eval", help="evaluate a scene manifest")
    ev.add_argument("manifest", type=Path)
    ev.add_argument("--config", type=Path, help="JSON evaluation config")
    ev.add_argument("--out", type=Path, required=True, help="report path (.json or .csv)")
    ev.add_argument("--format", choices=("json", "csv"), help="default: from the --out suffix")
    ev.add_argument("--workers", type=int, help="worker threads (overrides GSREMOVAL_WORKERS)")

    rf = sub.add_parser("refine", help="graph-refine a removal set")
    rf.add_argument("ply", type=Path)
    rf.add_argument("removal_set", type=Path, help="seed removal set (index list, or .bits)")
    rf.add_argument("--config", type=Path, help="JSON refinement config")
    rf.add_argument("--features", type=Path, help="feature sidecar (default: <ply>.features.json)")
    rf.add_argument("--out", type=Path, required=True, help="output directory")

    gf = sub.add_parser("gen-fixture", help="write a synthetic scene with known metrics")
    gf.add_argument("spec", type=Path, help="fixture spec JSON")
    gf.add_argument("--out", type=Path, required=True)

    rp = sub.add_parser("report", help="merge JSON reports into a summary table")
    rp.add_argument("reports", type=Path, nargs="+")
    rp.add_argument("--out", type=Path, help="output file (default: stdout)")
    rp.add_argument("--style", choices=("csv", "table"), default="csv",
                    help="csv: 4-decimal summary rows; table: 2-decimal rows with the 'drop / pct' cell")

    va = sub.add_parser("validate", help="check that every manifest input exists")
    va.add_argument("manifest", type=Path)
    return p


def _cmd_validate(args) -> int:
    try:
        manifest = validate_manifest(args.manifest)
    except ManifestError as exc:
        print(f"invalid manifest: {exc}", file=sys.stderr)
        return EXIT_INVALID
    missing = manifest.missing_paths
    for p in missing:
        print(f"missing: {p}")
    for v in manifest.views:
        if v.skip_reason:
            print(f"view {v.view_id} skipped: {v.skip_reason}")
    print(f"{len(manifest.usable_views)} of {len(manifest.views)} views usable")
    return EXIT_INVALID if missing else EXIT_OK


def _cmd_eval(args) -> int:
    try:
        manifest = validate_manifest(args.manifest)
        cfg = EvalConfig.from_mapping(json.loads(args.config.read_text())) if args.config else EvalConfig()
    except (ManifestError, ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.workers:
        cfg = EvalConfig(cfg.ght, cfg.sam_overlap, cfg.sam_overlap_mode, cfg.iou_thresholds, args.workers)
    report = run_eval(manifest, cfg)
    fmt = args.format or ("csv" if args.out.suffix.lower() == ".csv" else "json")
    emit_report(report, fmt, args.out)
    for row in report.rows:
        if row.error:
            print(f"view {row.view_id}: {row.error}", file=sys.stderr)
    if report.summary.iou_drop_cell:
        print(f"{report.scene_id}/{report.object_id}/{report.method_id}: IoU drop {report.summary.iou_drop_cell}")
    return EXIT_VIEW_ERRORS if report.has_errors else EXIT_OK


def _cmd_refine(args) -> int:
    try:
        cloud = load_ply(args.ply, args.features)
        seed = load_removal_set(args.removal_set, len(cloud), "seed")
        cfg = RefineConfig.from_json(args.config) if args.config else RefineConfig()
    except (PlyFormatError, ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = refine(cloud, seed, cfg)
    except MissingFeatures as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except GraphEmpty as exc:  # pragma: no cover - refine reports this through its status
        print(str(exc), file=sys.stderr)
        return EXIT_GRAPH_EMPTY
    if result.status == "graph-empty":
        print(result.message or "graph empty", file=sys.stderr)
        return EXIT_GRAPH_EMPTY

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_removal_set(result.refined_set, out / "refined_removal.txt")
    save_ply(cloud, out / "refined.ply", result.refined_set)
    lines = ["iteration,energy"] + [f"{i},{e!r}" for i, e in enumerate(result.energy_trace)]
    atomic_write(out / "energy_trace.csv", "\n".join(lines) + "\n")
    print(f"{result.status}: {result.message}; removed {result.refined_set.n_removed} "
          f"(seed {seed.n_removed}, added {len(result.added)})")
    return EXIT_OK


def _cmd_gen_fixture(args) -> int:
    try:
        spec = json.loads(args.spec.read_text())
        gen_fixture(spec, args.out)
    except (FixtureError, json.JSONDecodeError, OSError) as exc:
        print(f"invalid fixture spec: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"fixture written to {args.out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        reports = [load_report(p) for p in args.reports]
    except (ValueError, KeyError, OSError) as exc:
        print(f"invalid report: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.style == "csv":
        text = summary_csv(reports)
    else:
        import io

        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(table_rows(reports))
        text = buf.getvalue()
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "eval": _cmd_eval,
    "refine": _cmd_refine,
    "gen-fixture": _cmd_gen_fixture,
    "report": _cmd_report,
    "validate": _cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
