"""Atomic JSON / CSV report files and their readers."""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

from . import __version__
from .evaluation import AblationReport, EvalReport, SweepReport

TEXT_COLUMNS = {"subset", "encoding", "layout", "error"}
KINDS = {"eval": EvalReport, "sweep": SweepReport, "ablation": AblationReport}


def report_kind(report) -> str:
    for kind, cls in KINDS.items():
        if isinstance(report, cls):
            return kind
    if isinstance(report, dict) and all(isinstance(v, EvalReport) for v in report.values()):
        return "transfer"
    raise TypeError(f"not a report: {type(report).__name__}")


def report_document(report, config_hash: str | None = None) -> dict:
    kind = report_kind(report)
    if kind == "transfer":
        body = {"layouts": {k: r.to_dict() for k, r in report.items()}}
    else:
        body = report.to_dict()
    return {"kind": kind, "tool_version": __version__, "config_hash": config_hash, **body}


def report_rows(report) -> list[dict]:
    kind = report_kind(report)
    if kind == "eval":
        return report.rows()
    if kind == "sweep":
        return report.rows()
    if kind == "ablation":
        return report.rows_flat()
    return [{"layout": k, **row} for k, r in report.items() for row in r.rows()]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report {path}: {exc.strerror}") from None


def write_report(report, path, fmt: str | None = None, config_hash: str | None = None) -> Path:
    """Write ``report`` as JSON (full document) or CSV (flat table), atomically."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    if fmt == "json":
        text = json.dumps(report_document(report, config_hash), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        rows = report_rows(report)
        buf = io.StringIO()
        fieldnames = list(rows[0]) if rows else []
        writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    _atomic_write(path, text)
    return path


def _cell(key: str, text: str):
    if text == "":
        return None
    if key in TEXT_COLUMNS:
        return text
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _cell(k, v) for k, v in row.items()} for row in csv.DictReader(fh)]


def read_report(path):
    """Inverse of :func:`write_report`: a report object for JSON, rows for CSV."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_csv_rows(path)
    doc = json.loads(path.read_text())
    kind = doc.get("kind")
    if kind == "transfer":
        return {k: EvalReport.from_dict(v) for k, v in doc["layouts"].items()}
    if kind not in KINDS:
        raise ValueError(f"{path}: unknown report kind {kind!r}")
    return KINDS[kind].from_dict(doc)
