"""Command-line entry point: generate cohorts, run experiments, export artifacts.

Exit codes: 0 success, 1 runtime failure, 2 configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .dataio import IngestError, load_records, write_events_csv, write_students_csv
from .evaluate import (
    EvalReport,
    cross_validate,
    embeddings_to_csv,
    export_embeddings,
    report_to_csv,
    rounds_to_csv,
)
from .params import ParamFormatError, load_params, save_params
from .splits import SplitError
from .synthgen import CohortSpecError, generate_cohort, load_cohort_spec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_generate(spec_path: str, seed: int, out_dir: str) -> int:
    try:
        if not os.path.exists(spec_path):
            print(f"error: cohort spec not found: {spec_path}", file=sys.stderr)
            return EXIT_CONFIG
        spec = load_cohort_spec(spec_path)
    except CohortSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records = generate_cohort(spec, seed)
        os.makedirs(out_dir, exist_ok=True)
        events_path = os.path.join(out_dir, "events.csv")
        students_path = os.path.join(out_dir, "students.csv")
        write_events_csv(records, events_path)
        write_students_csv(records, students_path)
    except Exception as exc:
        print(f"error: generation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {events_path} and {students_path} ({len(records)} students, seed {seed})")
    return EXIT_OK


def _load_dataset(config: ExperimentConfig):
    if config.dataset.kind == "generated":
        spec = load_cohort_spec(config.dataset.spec_path)
        return generate_cohort(spec, config.dataset.seed)
    return load_records(
        config.dataset.events_path,
        config.dataset.students_path,
        n_videos=config.dataset.n_videos,
        max_sequence=config.dataset.max_sequence,
    )


def _write_manifest(config: ExperimentConfig, out_dir: str, artifacts: list[str]) -> None:
    manifest = {
        "config": config.raw,
        "seeds": list(config.plan.seeds),
        "artifacts": {os.path.basename(p): _sha256_file(p) for p in sorted(artifacts)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_report(report: EvalReport) -> None:
    print(f"{'strategy':<14} {'subgroup':<16} {'mean_auc':>9} {'std':>7} {'runs':>5}")
    for row in report.rows:
        print(f"{row.strategy:<14} {row.subgroup:<16} {row.mean_auc:>9.4f} "
              f"{row.std_auc:>7.4f} {row.n_runs:>5}")
    for warning in report.warnings:
        print(f"warning: {warning}")


def cmd_run(config_path: str, seed_override: int | None, jobs: int, out_override: str | None) -> int:
    try:
        config = load_config(config_path)
        if seed_override is not None:
            config.plan = dataclasses.replace(config.plan, seeds=(seed_override,))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = out_override or config.output_dir
    try:
        records = _load_dataset(config)
        report = cross_validate(records, config.plan, jobs=jobs)
        os.makedirs(out_dir, exist_ok=True)
        models_dir = os.path.join(out_dir, "models")
        os.makedirs(models_dir, exist_ok=True)
        artifacts = []
        report_path = os.path.join(out_dir, "report.csv")
        rounds_path = os.path.join(out_dir, "rounds.csv")
        report_to_csv(report, report_path)
        rounds_to_csv(report, rounds_path)
        artifacts.extend([report_path, rounds_path])
        for outcome in report.outcomes:
            for subgroup, model in sorted(outcome.eval_models.items()):
                tag = subgroup.replace(":", "_")
                path = os.path.join(
                    models_dir,
                    f"{outcome.strategy}_f{outcome.fold}_s{outcome.seed}_{tag}.params",
                )
                save_params(model, path)
                artifacts.append(path)
        _write_manifest(config, out_dir, artifacts)
    except (CohortSpecError, IngestError, SplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _print_report(report)
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_dump_embeddings(
    model_path: str,
    events_path: str,
    students_path: str,
    out_path: str,
    variable: str,
    include_unspecified: bool,
) -> int:
    try:
        params = load_params(model_path)
    except (ParamFormatError, OSError) as exc:
        print(f"error: cannot load model: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        n_videos = params.input_dim - 7
        records = load_records(events_path, students_path, n_videos=n_videos)
        dump = export_embeddings(params, records, variable, include_unspecified)
        embeddings_to_csv(dump, out_path)
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: embedding export failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(dump.rows)} embeddings to {out_path}")
    return EXIT_OK


def cmd_report(report_path: str) -> int:
    if not os.path.exists(report_path):
        print(f"error: report not found: {report_path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with open(report_path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                print("error: report is empty", file=sys.stderr)
                return EXIT_RUNTIME
            print(" | ".join(f"{h:<14}" for h in header))
            for row in reader:
                print(" | ".join(f"{cell:<14}" for cell in row))
    except csv.Error as exc:
        print(f"error: cannot parse report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedstudent",
        description="Federated personalization experiments on clickstream cohorts",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a synthetic cohort from a spec")
    p_gen.add_argument("--spec", required=True, help="cohort spec JSON path")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("--config", required=True, help="experiment config JSON path")
    p_run.add_argument("--seed", type=int, default=None, help="override the config's seed list")
    p_run.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="parallel runs (default: hardware threads)")
    p_run.add_argument("--out", default=None, help="override the config's output directory")

    p_dump = sub.add_parser("dump-embeddings", help="export pooled representations to CSV")
    p_dump.add_argument("--model", required=True, help="serialized model path")
    p_dump.add_argument("--events", required=True)
    p_dump.add_argument("--students", required=True)
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--variable", default="G", choices=["G", "C", "Y"])
    p_dump.add_argument("--include-unspecified", action="store_true")

    p_rep = sub.add_parser("report", help="pretty-print an existing report.csv")
    p_rep.add_argument("--report", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "generate":
        return cmd_generate(args.spec, args.seed, args.out)
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.jobs, args.out)
    if args.command == "dump-embeddings":
        return cmd_dump_embeddings(args.model, args.events, args.students, args.out,
                                   args.variable, args.include_unspecified)
    if args.command == "report":
        return cmd_report(args.report)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
