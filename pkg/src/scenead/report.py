"""Ablation tables: per-dataset F1/AUROC grids, cross-dataset means and relative gains."""
from __future__ import annotations

import math
from typing import Sequence

from .training import METHODS, VARIANT_LABELS

BASELINE = ("RD", "none")
GAP = "--"


def improvement(a: float, b: float) -> float:
    """Relative gain of ``a`` over baseline ``b``: (a - b) / b."""
    if b == 0:
        raise ZeroDivisionError("baseline score is zero")
    return (a - b) / b


def _cell_value(report: dict, method: str, variant: str, key: str) -> float | None:
    cell = report.get("cells", {}).get(method, {}).get(variant)
    if not cell or "error" in cell:
        return None
    v = cell.get(key)
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def _axes(reports: Sequence[dict]) -> tuple[list[str], list[str]]:
    methods = [m for m in METHODS if any(m in r.get("methods", []) for r in reports)]
    variants = [v for v in VARIANT_LABELS if any(v in r.get("variants", []) for r in reports)]
    return methods, variants


def grid_table(report: dict, key: str) -> dict:
    methods, variants = _axes([report])
    return {m: {v: _cell_value(report, m, v, key) for v in variants} for m in methods}


def mean_table(reports: Sequence[dict], key: str = "pixel_f1") -> dict:
    """Mean over datasets per cell; a cell missing in any dataset stays a gap."""
    methods, variants = _axes(reports)
    out = {}
    for m in methods:
        out[m] = {}
        for v in variants:
            vals = [_cell_value(r, m, v, key) for r in reports]
            out[m][v] = None if any(x is None for x in vals) else sum(vals) / len(vals)
    return out


def improvement_table(table: dict, baseline: tuple[str, str] = BASELINE) -> dict:
    base = table.get(baseline[0], {}).get(baseline[1])
    out = {}
    for m, row in table.items():
        out[m] = {}
        for v, val in row.items():
            ok = val is not None and base is not None and base != 0
            out[m][v] = improvement(val, base) if ok else None
    return out


def format_table(table: dict, title: str, percent: bool = False) -> str:
    variants = list(next(iter(table.values())).keys()) if table else []
    head = ["Method"] + [VARIANT_LABELS[v] for v in variants]
    rows = []
    for m, row in table.items():
        cells = []
        for v in variants:
            x = row[v]
            cells.append(GAP if x is None else (f"{100 * x:+.2f}%" if percent else f"{x:.3f}"))
        rows.append([m] + cells)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    line = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([f"### {title}", "", line(head), sep] + [line(r) for r in rows]) + "\n"


def build_report(reports: Sequence[dict], names: Sequence[str] | None = None) -> dict:
    names = list(names or [r.get("dataset", f"dataset{i}") for i, r in enumerate(reports)])
    per_dataset = {n: {"pixel_f1": grid_table(r, "pixel_f1"), "pixel_auroc": grid_table(r, "pixel_auroc")}
                   for n, r in zip(names, reports)}
    mean_f1 = mean_table(reports, "pixel_f1")
    return {
        "datasets": names,
        "per_dataset": per_dataset,
        "mean_f1": mean_f1,
        "improvement_over_rd": improvement_table(mean_f1),
        "baseline": list(BASELINE),
    }


def render_markdown(rep: dict) -> str:
    parts = []
    for name in rep["datasets"]:
        parts.append(format_table(rep["per_dataset"][name]["pixel_f1"], f"Pixel F1 ({name})"))
        parts.append(format_table(rep["per_dataset"][name]["pixel_auroc"], f"Pixel AUROC ({name})"))
    parts.append(format_table(rep["mean_f1"], "Mean pixel F1 across datasets"))
    parts.append(format_table(rep["improvement_over_rd"], "Improvement over RD / No Aug", percent=True))
    return "\n".join(parts)
