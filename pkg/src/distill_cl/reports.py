"""Run comparison tables and report rendering.

The comparison table has one row per regime (baseline, largest, adaptive,
naive order) with end accuracy, average accuracy over steps, FLOPs fraction
relative to the fixed-largest run, and buffer memory fraction. Rendering is a
pure function of its inputs: identical inputs give identical bytes.
"""

import io
import json
from dataclasses import dataclass

from .errors import ValidationError
from .training import RunLog, aggregate

REPORT_SCHEMA = 1

_ROW_ORDER = ("cumulative_baseline", "fixed_largest", "adaptive", "naive_forgetting")
_ROW_LABELS = {
    "cumulative_baseline": "baseline",
    "fixed_largest": "largest",
    "adaptive": "adaptive",
    "naive_forgetting": "naive",
}
_COLUMNS = ("end_accuracy", "average_accuracy", "needed_flops_fraction", "memory_fraction")


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple  # ((regime, {column: value}), ...) in canonical order

    def row(self, regime):
        for name, values in self.rows:
            if name == regime:
                return values
        raise KeyError(regime)

    @property
    def regimes(self):
        return tuple(name for name, _ in self.rows)


def compare(logs) -> ComparisonTable:
    """Build the table from one RunLog per regime; exactly one fixed_largest
    log must be present (it defines the FLOPs denominator)."""
    logs = list(logs)
    references = [log for log in logs if log.regime == "fixed_largest"]
    if len(references) != 1:
        raise ValidationError(
            f"compare needs exactly one fixed_largest log, got {len(references)}"
        )
    reference = references[0]
    seen = {}
    for log in logs:
        if log.regime in seen:
            raise ValidationError(f"duplicate regime {log.regime!r}")
        seen[log.regime] = log
    rows = []
    for regime in _ROW_ORDER:
        if regime in seen:
            rows.append((regime, aggregate(seen[regime], reference)))
    return ComparisonTable(rows=tuple(rows))


def accuracy_flops_series(log: RunLog):
    """(cumulative_flops, accuracy) per step; flops strictly increasing."""
    series = [(s.cumulative_flops, s.accuracy) for s in log.steps]
    for (a, _), (b, _) in zip(series, series[1:]):
        if b <= a:
            raise ValidationError("cumulative_flops must be strictly increasing")
    return series


def _table_dict(table: ComparisonTable):
    return {
        "schema": REPORT_SCHEMA,
        "columns": list(_COLUMNS),
        "rows": [
            {"regime": regime, "label": _ROW_LABELS[regime], **values}
            for regime, values in table.rows
        ],
    }


def table_from_json(text) -> ComparisonTable:
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValidationError(f"unsupported report schema {doc.get('schema')!r}")
    rows = tuple(
        (row["regime"], {c: row[c] for c in _COLUMNS}) for row in doc["rows"]
    )
    return ComparisonTable(rows=rows)


def render_report(table: ComparisonTable, series=None, format="text_table") -> str:
    """Render the table (and optionally per-regime series) to csv, json or an
    aligned text table. Output bytes are stable for identical inputs."""
    if format == "json":
        doc = _table_dict(table)
        if series:
            doc["series"] = {
                regime: [[int(f), a] for f, a in pts] for regime, pts in sorted(series.items())
            }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    if format == "csv":
        out = io.StringIO()
        out.write("regime," + ",".join(_COLUMNS) + "\n")
        for regime, values in table.rows:
            out.write(
                ",".join([_ROW_LABELS[regime]] + [repr(float(values[c])) for c in _COLUMNS])
                + "\n"
            )
        return out.getvalue()
    if format == "text_table":
        header = ["model", "end acc", "avg acc", "needed flops", "memory"]
        lines = [header]
        for regime, v in table.rows:
            lines.append(
                [
                    _ROW_LABELS[regime],
                    f"{100 * v['end_accuracy']:.1f} %",
                    f"{100 * v['average_accuracy']:.1f} %",
                    f"{100 * v['needed_flops_fraction']:.1f} %",
                    f"{100 * v['memory_fraction']:.1f} %",
                ]
            )
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        rendered = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in lines
        ]
        return "\n".join(rendered) + "\n"
    raise ValidationError(f"unknown report format {format!r}")


def plot_data_csv(logs) -> str:
    """Per-regime (flops, accuracy) series as csv for external plotting."""
    out = io.StringIO()
    out.write("regime,step,cumulative_flops,accuracy\n")
    for log in sorted(logs, key=lambda lg: _ROW_ORDER.index(lg.regime)):
        for t, (f, a) in enumerate(accuracy_flops_series(log), start=1):
            out.write(f"{_ROW_LABELS[log.regime]},{t},{int(f)},{a!r}\n")
    return out.getvalue()
