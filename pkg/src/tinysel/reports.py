"""Machine-readable JSON reports with matching plain-text summaries."""

from __future__ import annotations

import csv
import json
import os

import numpy as np

SCHEMA_VERSION = 1

REPORT_KINDS = (
    "eval", "analyze", "plan-memory", "train-history", "baseline", "infer",
)


class ReportError(ValueError):
    """A report dict does not satisfy the schema."""


def _to_plain(value):
    """numpy scalars/arrays to builtin types so json can serialize them."""
    if isinstance(value, np.ndarray):
        return [_to_plain(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, dict):
        return {str(k): _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def validate_report(report: dict):
    """Checks the envelope fields; raises ReportError on violation."""
    for key in ("schema_version", "kind", "results"):
        if key not in report:
            raise ReportError(f"report is missing {key!r}")
    if report["schema_version"] != SCHEMA_VERSION:
        raise ReportError(f"unsupported schema version {report['schema_version']}")
    if report["kind"] not in REPORT_KINDS:
        raise ReportError(f"unknown report kind {report['kind']!r}")
    if not isinstance(report["results"], dict):
        raise ReportError("results must be an object")


def make_report(kind: str, results: dict) -> dict:
    report = {"schema_version": SCHEMA_VERSION, "kind": kind,
              "results": _to_plain(results)}
    validate_report(report)
    return report


def _summary_lines(value, prefix=""):
    lines = []
    if isinstance(value, dict):
        for k in sorted(value):
            lines += _summary_lines(value[k], f"{prefix}{k}." if prefix else f"{k}.")
    elif isinstance(value, list):
        if len(value) > 12:
            lines.append(f"{prefix[:-1]} = <{len(value)} items>")
        else:
            body = ", ".join(_fmt(v) for v in value)
            lines.append(f"{prefix[:-1]} = [{body}]")
    else:
        lines.append(f"{prefix[:-1]} = {_fmt(value)}")
    return lines


def _fmt(value):
    if isinstance(value, float):
        return repr(round(value, 6))
    if isinstance(value, (dict, list)):
        return json.dumps(_to_plain(value), sort_keys=True)
    return repr(value)


def report_to_text(report: dict) -> str:
    """Human-readable rendering; every number equals its JSON field."""
    head = [f"report kind: {report['kind']}",
            f"schema version: {report['schema_version']}"]
    return "\n".join(head + _summary_lines(report["results"])) + "\n"


def write_report(results: dict, out_dir, name: str, kind: str) -> dict:
    """Writes <name>.json and <name>.txt under out_dir; returns the report."""
    report = make_report(kind, results)
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f"{name}.json")
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
        f.write(report_to_text(report))
    return report


def load_report(path) -> dict:
    with open(path) as f:
        report = json.load(f)
    validate_report(report)
    return report


def write_csv_records(records, out_dir, name: str):
    """Per-step records (list of flat dicts) as a CSV for plotting."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}.csv")
    if not records:
        open(path, "w").close()
        return path
    fields = list(records[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: _to_plain(v) for k, v in rec.items()})
    return path
