"""Command line entry point: ``idbr run|report|export-embeddings|probe``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import checkpoint as ckpt
from .corpus import build_task_sequence
from .evaluation import export_embeddings, probe_disentanglement
from .experiment import SpecError, load_spec, prepare_data, report, run_experiment
from .model import ModelConfig, build_model

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SPLITS = ("train", "val", "test")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idbr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every cell of an experiment spec")
    run.add_argument("spec", help="YAML experiment spec")
    run.add_argument("overrides", nargs="*", metavar="key=value",
                     help="override spec fields, e.g. train.learning_rate=0.01 seeds=[0,1]")
    run.add_argument("--no-report", action="store_true", help="skip the aggregate report")

    rep = sub.add_parser("report", help="aggregate completed cells into tables")
    rep.add_argument("results_dir")

    for name, help_ in (("export-embeddings", "write g/s features of a split to CSV"),
                        ("probe", "linear task-id probe on generic and specific features")):
        q = sub.add_parser(name, help=help_)
        q.add_argument("checkpoint", help="a task-*.pt checkpoint written by `run`")
        q.add_argument("dataset", choices=SPLITS,
                       help="split of the checkpoint's own data to use")
        q.add_argument("--tasks", default=None,
                       help="comma-separated task names (default: tasks seen so far)")
        if name == "export-embeddings":
            q.add_argument("-o", "--output", default="embeddings.csv")
        else:
            q.add_argument("--seed", type=int, default=0, help="split seed of the probe")
    return p


def _load_model(path):
    state = ckpt.load(path)
    meta = state.metadata
    model = build_model(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(state.state_dict)
    model.eval()
    return model, meta


def _examples(meta: dict, split: str, tasks: str | None):
    if "data" not in meta or "seed" not in meta:
        raise SpecError("checkpoint carries no data description; it was not written by `run`")
    data = prepare_data(meta["data"], meta["seed"])
    seen = meta["tasks"][: meta["task"]]
    names = seen if tasks is None else [t.strip() for t in tasks.split(",")]
    sequence = build_task_sequence(",".join(meta["tasks"]), data.registry, data.num_classes)
    by_name = dict(zip(sequence.names, sequence.tasks))
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise SpecError(f"--tasks: unknown task(s) {unknown}")
    return [ex for n in names for ex in getattr(by_name[n], split)]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            spec = load_spec(args.spec, args.overrides)
            summary = run_experiment(spec)
            print(f"{len(summary.completed)} cell(s) run, {len(summary.skipped)} skipped, "
                  f"{len(summary.failed)} failed -> {spec.output_dir}")
            for path, err in summary.failed:
                print(f"FAILED {path}: {err}", file=sys.stderr)
            if not args.no_report and (summary.completed or summary.skipped):
                print(report(spec.output_dir)["report"].read_text())
            return EXIT_RUNTIME if summary.failed else EXIT_OK

        if args.command == "report":
            files = report(args.results_dir)
            print(files["report"].read_text())
            return EXIT_OK

        model, meta = _load_model(args.checkpoint)
        examples = _examples(meta, args.dataset, args.tasks)
        if args.command == "export-embeddings":
            out = export_embeddings(model, examples, args.output)
            print(f"{len(examples)} rows -> {out}")
        else:
            result = {space: probe_disentanglement(model, examples, space, args.seed)
                      for space in ("generic", "specific")}
            print(json.dumps(result))
        return EXIT_OK
    except SpecError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
