"""Experiment specs, the cell runner, and aggregate reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import traceback
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .corpus import DATA_ROOT_ENV, BENCHMARK_ORDERS, build_task_sequence
from .data import PreparedData, prepare_benchmark, prepare_synthetic, synthetic_config
from .evaluation import AccuracyMatrix, average_accuracy, forgetting
from .trainer import METHODS, TrainConfig, run_sequence

logger = logging.getLogger(__name__)

# named variants usable in a spec's method list
VARIANTS: dict[str, dict[str, Any]] = {
    "idbr-reg-g-only": {"method": "idbr", "reg_g_only": True},
    "idbr-reg-s-only": {"method": "idbr", "reg_s_only": True},
    "idbr-no-nsp": {"method": "idbr", "no_nsp": True},
    "idbr-no-task": {"method": "idbr", "no_task": True},
    "idbr-random-selection": {"method": "idbr", "random_selection": True},
}

# report groupings: ablation table -> variants it compares
ABLATION_TABLES = {
    "Regularized spaces": ["idbr-reg-g-only", "idbr-reg-s-only", "idbr"],
    "Auxiliary losses": ["idbr-no-nsp", "idbr-no-task", "idbr"],
    "Memory selection": ["idbr-random-selection", "idbr"],
}

MANIFEST = "manifest.json"


class SpecError(ValueError):
    """An experiment spec that does not validate; the message names the field."""


@dataclass
class ExperimentSpec:
    orders: list
    methods: list[str]
    seeds: list[int]
    output_dir: Path
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"kind": "synthetic"})
    checkpoints: bool = True

    def method_overrides(self, name: str) -> dict:
        return VARIANTS.get(name, {"method": name})

    def train_config(self, method: str, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, **self.method_overrides(method), "seed": seed})

    def to_dict(self) -> dict:
        return {"orders": self.orders, "methods": self.methods, "seeds": self.seeds,
                "output_dir": str(self.output_dir), "train": self.train, "data": self.data,
                "checkpoints": self.checkpoints}


# ---------------------------------------------------------------------------
# Parsing


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise SpecError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    if not key:
        raise SpecError(f"override {item!r} has an empty key")
    return key.split("."), yaml.safe_load(raw) if raw else ""


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))  # deep copy of plain data
    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SpecError(f"override {item!r}: {part!r} is not a section")
        node[path[-1]] = value
    return raw


def _as_list(raw: dict, key: str) -> list:
    value = raw.get(key)
    if value is None:
        raise SpecError(f"{key}: missing")
    if not isinstance(value, list):
        value = [value]
    if not value:
        raise SpecError(f"{key}: must be non-empty")
    return value


def spec_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise SpecError("spec must be a mapping")
    known = {"orders", "methods", "seeds", "output_dir", "train", "data", "checkpoints"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise SpecError(f"unknown field(s): {unknown}")

    orders = _as_list(raw, "orders")
    methods = [str(m) for m in _as_list(raw, "methods")]
    for m in methods:
        if m not in METHODS and m not in VARIANTS:
            raise SpecError(f"methods: unknown method {m!r}")
    if len(set(methods)) != len(methods):
        raise SpecError("methods: duplicate entries")
    seeds = _as_list(raw, "seeds")
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise SpecError("seeds: must be non-negative integers")

    out = raw.get("output_dir")
    if not out:
        raise SpecError("output_dir: missing")
    out = Path(os.path.expanduser(str(out)))
    if not out.is_absolute() and base_dir is not None:
        out = base_dir / out

    train = raw.get("train") or {}
    if not isinstance(train, dict):
        raise SpecError("train: must be a mapping")
    if "seed" in train or "method" in train:
        raise SpecError("train: 'seed' and 'method' are set per cell")
    data = raw.get("data") or {"kind": "synthetic"}
    if not isinstance(data, dict) or data.get("kind") not in ("synthetic", "benchmark"):
        raise SpecError("data.kind: must be 'synthetic' or 'benchmark'")

    spec = ExperimentSpec(orders, methods, seeds, out, train, data, bool(raw.get("checkpoints", True)))
    for m in methods:
        try:
            spec.train_config(m, seeds[0])
        except (TypeError, ValueError) as exc:
            raise SpecError(f"train: {exc}") from exc
    try:
        options = _synthetic_options(data)
        if data["kind"] == "synthetic":
            synthetic_config(options)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"data: {exc}") from exc
    for order in orders:
        order_names(spec, order)
    return spec


def load_spec(path, overrides: list[str] = ()) -> ExperimentSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: invalid YAML: {exc}") from exc
    return spec_from_dict(apply_overrides(raw, list(overrides)), base_dir=path.parent)


# ---------------------------------------------------------------------------
# Data and orders


def _synthetic_options(data: dict) -> dict:
    return {k: v for k, v in data.items() if k != "kind"} if data.get("kind") == "synthetic" else {}


def prepare_data(data: dict, seed: int) -> PreparedData:
    if data["kind"] == "synthetic":
        return prepare_synthetic(synthetic_config(_synthetic_options(data)), seed)
    root = data.get("root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise SpecError(f"data.root: not set and ${DATA_ROOT_ENV} is empty")
    return prepare_benchmark(root, seed, data.get("per_class_train", 2000), data.get("per_class_val", 2000))


def order_names(spec: ExperimentSpec, order) -> str:
    """Comma-separated task names for an order id.

    Integer ids select fixed orders: the reference orders for real data, the
    cyclic shifts of the task list for synthetic data.
    """
    if isinstance(order, int) and not isinstance(order, bool):
        if spec.data["kind"] == "benchmark":
            if order not in BENCHMARK_ORDERS:
                raise SpecError(f"orders: unknown order id {order}")
            return ",".join(BENCHMARK_ORDERS[order])
        names = synthetic_config(_synthetic_options(spec.data)).task_names
        if not 1 <= order <= len(names):
            raise SpecError(f"orders: synthetic order id must lie in 1..{len(names)}")
        i = order - 1
        return ",".join(names[i:] + names[:i])
    if isinstance(order, str) and order.strip():
        return ",".join(p.strip() for p in order.split(","))
    raise SpecError(f"orders: invalid entry {order!r}")


def order_label(order) -> str:
    return str(order).replace(",", "-").replace(" ", "")


def cell_dir(spec: ExperimentSpec, order, method: str, seed: int) -> Path:
    return spec.output_dir / f"order-{order_label(order)}" / f"method-{method}" / f"seed-{seed}"


# ---------------------------------------------------------------------------
# Running


@dataclass
class Cell:
    order: Any
    method: str
    seed: int
    path: Path


@dataclass
class RunSummary:
    completed: list[Path] = field(default_factory=list)
    skipped: list[Path] = field(default_factory=list)
    failed: list[tuple[Path, str]] = field(default_factory=list)


def cells(spec: ExperimentSpec) -> list[Cell]:
    return [Cell(o, m, s, cell_dir(spec, o, m, s))
            for o in spec.orders for m in spec.methods for s in spec.seeds]


def _fingerprint(spec: ExperimentSpec, cell: Cell) -> dict:
    return {"order": order_names(spec, cell.order), "data": spec.data,
            "train": spec.train_config(cell.method, cell.seed).to_dict()}


def read_manifest(path: Path) -> dict | None:
    f = path / MANIFEST
    if not f.exists():
        return None
    return json.loads(f.read_text())


def _write_json(path: Path, payload: dict):
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(path)


def run_cell(spec: ExperimentSpec, cell: Cell, data: PreparedData) -> dict:
    fp = _fingerprint(spec, cell)
    config = spec.train_config(cell.method, cell.seed)
    sequence = build_task_sequence(fp["order"], data.registry, data.num_classes)
    cell.path.mkdir(parents=True, exist_ok=True)
    steps_path = cell.path / "steps.jsonl"
    ckpt_dir = cell.path / "checkpoints" if spec.checkpoints else None
    metadata = {"data": spec.data, "seed": cell.seed, "method": cell.method}
    start = time.perf_counter()
    result = run_sequence(sequence, config, data.vocab_size, checkpoint_dir=ckpt_dir, metadata=metadata)
    elapsed = time.perf_counter() - start
    # the full log (resumed runs restore earlier tasks from the checkpoint)
    with steps_path.open("w") as fh:
        for record in result.logs:
            fh.write(json.dumps(record) + "\n")
    (cell.path / "accuracy_matrix.csv").write_text(result.accuracy.to_csv())
    rows = result.accuracy.rows
    metrics = {"average_accuracy": average_accuracy(rows)}
    if config.method != "mtl":
        metrics["forgetting"] = {str(k): forgetting(rows, k) for k in range(2, len(rows) + 1)}
    manifest = {"status": "complete", **fp, "method": cell.method, "seed": cell.seed,
                "tasks": sequence.names, "metrics": metrics, "seconds": elapsed,
                "buffer_size": len(result.buffer)}
    _write_json(cell.path / MANIFEST, manifest)
    return manifest


def run_experiment(spec: ExperimentSpec) -> RunSummary:
    """Execute every (order, method, seed) cell, skipping completed ones."""
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(spec.output_dir / "spec.json", spec.to_dict())
    summary = RunSummary()
    data_cache: dict[int, PreparedData] = {}
    for cell in cells(spec):
        manifest = read_manifest(cell.path)
        if manifest is not None and manifest.get("status") == "complete":
            fp = _fingerprint(spec, cell)
            if all(manifest.get(k) == v for k, v in json.loads(json.dumps(fp)).items()):
                summary.skipped.append(cell.path)
                continue
            summary.failed.append((cell.path, "cell holds results for a different configuration"))
            logger.error("%s: holds results for a different configuration", cell.path)
            continue
        try:
            if cell.seed not in data_cache:
                data_cache[cell.seed] = prepare_data(spec.data, cell.seed)
            run_cell(spec, cell, data_cache[cell.seed])
            summary.completed.append(cell.path)
        except SpecError:
            raise
        except Exception as exc:  # isolate the failing cell
            logger.error("cell %s failed: %s", cell.path, exc)
            cell.path.mkdir(parents=True, exist_ok=True)
            (cell.path / "error.txt").write_text(traceback.format_exc())
            summary.failed.append((cell.path, f"{type(exc).__name__}: {exc}"))
    return summary


# ---------------------------------------------------------------------------
# Reports


@dataclass
class CellResult:
    order: str
    method: str
    seed: int
    accuracy: AccuracyMatrix


def collect(results_dir) -> list[CellResult]:
    results_dir = Path(results_dir)
    found = []
    for manifest_path in sorted(results_dir.glob(f"order-*/method-*/seed-*/{MANIFEST}")):
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("status") != "complete":
            continue
        cell = manifest_path.parent
        acc = AccuracyMatrix.from_csv((cell / "accuracy_matrix.csv").read_text())
        found.append(CellResult(cell.parent.parent.name[len("order-"):],
                                cell.parent.name[len("method-"):], int(cell.name[len("seed-"):]), acc))
    return found


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _fmt(mean, std, n):
    return f"{100 * mean:.2f}" if n == 1 else f"{100 * mean:.2f} ± {100 * std:.2f}"


def _markdown(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(out)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _ordered(items, preferred):
    rank = {m: i for i, m in enumerate(preferred)}
    return sorted(items, key=lambda m: (rank.get(m, len(rank)), m))


def report(results_dir) -> dict[str, Path]:
    """Write accuracy, forgetting and ablation tables (markdown and CSV)."""
    results_dir = Path(results_dir)
    results = collect(results_dir)
    if not results:
        raise FileNotFoundError(f"{results_dir}: no completed cells")
    method_order = ["finetune", "replay", "regularization", "idbr", "mtl", *VARIANTS]
    methods = _ordered({r.method for r in results}, method_order)
    orders = sorted({r.order for r in results}, key=lambda o: (not o.isdigit(), int(o) if o.isdigit() else 0, o))

    acc = defaultdict(list)
    for r in results:
        acc[(r.method, r.order)].append(average_accuracy(r.accuracy))

    md = ["# Results", "", "## Average accuracy after the last task (%)", ""]
    header = ["Method"] + [f"Order {o}" for o in orders] + ["Average"]
    rows, csv_rows = [], []
    for m in methods:
        cells_ = []
        per_order = []
        for o in orders:
            vals = acc.get((m, o))
            if vals:
                mean, std = _mean_std(vals)
                per_order.append(mean)
                cells_.append(_fmt(mean, std, len(vals)))
                csv_rows.append([m, o, len(vals), repr(mean), repr(std)])
            else:
                cells_.append("")
        overall = f"{100 * np.mean(per_order):.2f}" if per_order else ""
        rows.append([m] + cells_ + [overall])
    md += [_markdown(header, rows), ""]
    files = {"accuracy": results_dir / "accuracy.csv"}
    files["accuracy"].write_text(_csv(["method", "order", "n_seeds", "mean", "std"], csv_rows))

    # forgetting after k tasks, averaged over seeds and orders of equal length
    forget = defaultdict(list)
    for r in results:
        if r.method == "mtl" or len(r.accuracy) < 2:
            continue
        for k in range(2, len(r.accuracy) + 1):
            forget[(r.method, len(r.accuracy), k)].append(forgetting(r.accuracy.rows, k))
    f_rows_csv = []
    for length in sorted({key[1] for key in forget}):
        f_methods = [m for m in methods if any(key[0] == m and key[1] == length for key in forget)]
        md += [f"## Forgetting, sequences of {length} tasks (%)", ""]
        rows = []
        for k in range(2, length + 1):
            row = [f"After {k} tasks"]
            for m in f_methods:
                vals = forget[(m, length, k)]
                mean, _ = _mean_std(vals)
                row.append(f"{100 * mean:.2f}")
                f_rows_csv.append([m, length, k, len(vals), repr(mean)])
            rows.append(row)
        md += [_markdown(["Checkpoint"] + f_methods, rows), ""]
    files["forgetting"] = results_dir / "forgetting.csv"
    files["forgetting"].write_text(_csv(["method", "length", "after_task", "n_cells", "mean"], f_rows_csv))

    overall = {m: float(np.mean([v for (mm, _), vals in acc.items() if mm == m for v in vals]))
               for m in methods}
    abl_csv = []
    for title, members in ABLATION_TABLES.items():
        present = [m for m in members if m in overall]
        if len(present) < 2 or not any(m in VARIANTS for m in present):
            continue
        md += [f"## Ablation: {title.lower()} (%)", ""]
        md += [_markdown(["Variant", "Average accuracy"],
                         [[m, f"{100 * overall[m]:.2f}"] for m in present]), ""]
        abl_csv += [[title, m, repr(overall[m])] for m in present]
    if abl_csv:
        files["ablations"] = results_dir / "ablations.csv"
        files["ablations"].write_text(_csv(["table", "variant", "mean"], abl_csv))

    files["report"] = results_dir / "report.md"
    files["report"].write_text("\n".join(md))
    return files
