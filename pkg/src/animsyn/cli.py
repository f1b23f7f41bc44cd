"""Command-line entry point: ``animsyn gen-data | run-experiment | report``.

Exit codes:
    0  success
    2  usage error (bad arguments, unknown plan kind)
    3  configuration error (invalid plan or dataset values)
    4  schema error (malformed spec, manifest or report files)
    5  runtime error (a pipeline stage failed; partial outputs are kept)

Environment: ANIMSYN_OUT sets the default output root, ANIMSYN_THREADS the
torch thread count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_SCHEMA, EXIT_RUNTIME = 0, 2, 3, 4, 5

log = logging.getLogger("animsyn")


class SchemaFileError(ValueError):
    pass


def _out_root(arg: str | None, default: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get("ANIMSYN_OUT", "runs")) / default


def _threads():
    n = os.environ.get("ANIMSYN_THREADS")
    if n:
        import torch
        torch.set_num_threads(int(n))


def cmd_gen_data(spec_file, seed: int, out) -> list[Path]:
    """Render every dataset in a YAML/JSON spec file; returns manifest paths."""
    from .toydata import DatasetSpec, generate_toy_dataset

    try:
        raw = yaml.safe_load(Path(spec_file).read_text())
    except yaml.YAMLError as exc:
        raise SchemaFileError(f"{spec_file}: cannot parse: {exc}") from exc
    if isinstance(raw, dict) and "datasets" in raw:
        raw = raw["datasets"]
    specs = raw if isinstance(raw, list) else [raw]
    parsed = []
    for d in specs:
        if not isinstance(d, dict):
            raise SchemaFileError(f"{spec_file}: each dataset spec must be a mapping")
        try:
            parsed.append(DatasetSpec.from_dict(d))
        except (TypeError, ValueError) as exc:
            raise SchemaFileError(f"{spec_file}: {exc}") from exc
    out = Path(out)
    paths = []
    for spec in parsed:
        name = spec.id_prefix or spec.domain
        generate_toy_dataset(spec, seed, out / name, manifest_name=f"{name}.jsonl")
        paths.append(out / name / f"{name}.jsonl")
    return paths


def cmd_run_experiment(plan_file, seed: int | None = None, out=None) -> dict:
    from .experiments import ExperimentPlan, run_plan

    plan = ExperimentPlan.from_file(plan_file)
    if seed is not None:
        plan.seed = seed
    if out:
        out_dir = Path(out)
    elif os.environ.get("ANIMSYN_OUT"):
        out_dir = Path(os.environ["ANIMSYN_OUT"]) / plan.name
    else:
        out_dir = Path(plan.output_dir or Path("runs") / plan.name)
    return run_plan(plan, out_dir)


def cmd_report(run_dirs, out=None) -> dict:
    from .report import load_report, merge_reports, write_report

    merged = merge_reports([load_report(d) for d in run_dirs])
    if out:
        write_report(merged, out)
    return merged


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="animsyn", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render toy datasets from a spec file")
    g.add_argument("spec_file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)

    r = sub.add_parser("run-experiment", help="run a plan file end to end")
    r.add_argument("plan_file")
    r.add_argument("--seed", type=int, default=None, help="override the plan's seed")
    r.add_argument("--out", default=None)

    m = sub.add_parser("report", help="merge run directories into tables and radar data")
    m.add_argument("run_dirs", nargs="+")
    m.add_argument("--seed", type=int, default=0, help="accepted for symmetry; reports are pure")
    m.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    from .experiments import ExperimentError, PlanKindError
    from .manifest import ManifestError
    from .report import SchemaError, render
    from .training import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        if args.command == "gen-data":
            for path in cmd_gen_data(args.spec_file, args.seed, _out_root(args.out, "data")):
                print(path)
        elif args.command == "run-experiment":
            rep = cmd_run_experiment(args.plan_file, args.seed, args.out)
            print(render(rep))
        else:
            rep = cmd_report(args.run_dirs, args.out)
            print(render(rep))
            if "radar" in rep:
                print(json.dumps(rep["radar"]["values"], indent=2))
    except PlanKindError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, SchemaFileError, ManifestError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
