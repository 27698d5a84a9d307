"""Run report: schema-versioned JSON document, text summary and TSV table."""

from __future__ import annotations

import json
import os
from pathlib import Path

import jsonschema

SCHEMA_VERSION = 1
REPORT_NAME = "report.json"

_num = {"type": "number"}
_trace = {"type": "array", "items": _num}
_nullable = lambda s: {"anyOf": [{"type": "null"}, s]}  # noqa: E731

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "status", "failed_stage", "error", "config", "dataset",
                 "stages", "split", "pretrain", "continual", "evals"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "status": {"enum": ["complete", "partial"]},
        "failed_stage": _nullable({"type": "string"}),
        "error": _nullable({"type": "string"}),
        "config": {"type": "object"},
        "dataset": _nullable({"type": "object"}),
        "stages": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["status"],
                "properties": {"status": {"enum": ["completed", "failed", "not_run"]},
                               "seconds": _num},
            },
        },
        "split": _nullable({
            "type": "object",
            "required": ["detector", "threshold", "n_in", "n_ood", "n_in_train", "n_in_holdout"],
        }),
        "pretrain": _nullable({"type": "object", "required": ["loss_trace"],
                               "properties": {"loss_trace": _trace}}),
        "continual": _nullable({
            "type": "object",
            "required": ["loss_trace", "fisher", "s_in", "s_ood"],
            "properties": {"loss_trace": _trace,
                           "fisher": {"type": "object", "required": ["min", "mean", "max"]}},
        }),
        "evals": _nullable({
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metric", "value", "n", "split", "model"],
                "properties": {"metric": {"enum": ["F1", "RMSE"]}, "value": _num,
                               "n": {"type": "integer"}, "split": {"enum": ["in", "ood"]},
                               "model": {"type": "string"}},
            },
        }),
    },
}


def new_report(cfg, stages) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "status": "partial",
        "failed_stage": None,
        "error": None,
        "config": cfg.to_dict(),
        "dataset": None,
        "stages": {s: {"status": "not_run"} for s in stages},
        "split": None,
        "pretrain": None,
        "continual": None,
        "evals": None,
    }


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def parse_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text())
    validate_report(report)
    return report


def strip_timings(report: dict) -> dict:
    """Copy of ``report`` without wall-clock fields, for run-to-run comparison."""
    out = json.loads(json.dumps(report))
    for rec in out["stages"].values():
        rec.pop("seconds", None)
    return out


def eval_lookup(report: dict) -> dict[tuple[str, str], dict]:
    return {(e["model"], e["split"]): e for e in report.get("evals") or []}


def summary_text(report: dict) -> str:
    ds = report.get("dataset") or {}
    lines = [f"dataset   {ds.get('path', '?')}  (n={ds.get('n', '?')}, d={ds.get('d', '?')}, "
             f"{ds.get('task', '?')})",
             f"status    {report['status']}"
             + (f"  (failed at {report['failed_stage']}: {report['error']})"
                if report["status"] != "complete" else "")]
    sp = report.get("split")
    if sp:
        lines.append(f"split     {sp['detector']}  in={sp['n_in']} (train {sp['n_in_train']}, "
                     f"holdout {sp['n_in_holdout']})  ood={sp['n_ood']}  threshold={sp['threshold']:.4g}")
    stages = "  ".join(f"{k}:{v['status']}" for k, v in report["stages"].items())
    lines.append(f"stages    {stages}")
    evals = eval_lookup(report)
    if evals:
        metric = next(iter(evals.values()))["metric"]
        lines += ["", f"{metric:<8}{'in-dist':>10}{'OOD':>10}"]
        for model in ("M^a", "M^b", "baseline"):
            row = [evals.get((model, s)) for s in ("in", "ood")]
            cells = "".join(f"{r['value']:>10.4f}" if r else f"{'-':>10}" for r in row)
            lines.append(f"{model:<8}{cells}")
        a, b = evals.get(("M^a", "ood")), evals.get(("M^b", "ood"))
        if a and b:
            lines.append(f"\nOOD {metric} before/after continual phase: "
                         f"{a['value']:.4f} -> {b['value']:.4f}")
    return "\n".join(lines) + "\n"


def metrics_tsv(report: dict) -> str:
    rows = ["model\tsplit\tmetric\tvalue\tn"]
    for e in report.get("evals") or []:
        rows.append(f"{e['model']}\t{e['split']}\t{e['metric']}\t{e['value']!r}\t{e['n']}")
    return "\n".join(rows) + "\n"


def _atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def emit_report(report: dict, out: str | Path, scores_path: str | Path | None = None) -> Path:
    """Write report.json, summary.txt, metrics.tsv and figures/ under ``out``."""
    from . import plotting

    validate_report(report)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic(out / REPORT_NAME, json.dumps(report, indent=1, sort_keys=True))
    _atomic(out / "summary.txt", summary_text(report))
    _atomic(out / "metrics.tsv", metrics_tsv(report))
    plotting.render_all(report, out / "figures", scores_path)
    return out / REPORT_NAME
