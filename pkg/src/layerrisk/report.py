"""Plain-text CV / MCR tables and tab-separated plot series for a run directory."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

from . import metrics as mx
from .errors import FormatError
from .runner import RunManifest

BLANK = ""
NO_ATTACK = "—"
UNDEFINED_CELL = "undef"
# plot series kinds: the four metric figures plus the raw values they are derived from
FIGURE_KINDS = ("cv", "mcr", "value")


def format_cv_cell(row: mx.SummaryRow | None) -> str:
    """``"24 (9)"``: the largest CV and how far the final CV sits below it."""
    if row is None:
        return BLANK
    return f"{row.max_cv} ({row.max_cv_minus_final})"


def format_mcr_cell(row: mx.SummaryRow | None) -> str:
    if row is None:
        return BLANK
    if row.final_mcr_percent is None:
        return UNDEFINED_CELL
    return mx.format_percent(row.final_mcr_percent)


def format_accuracy(acc: float | None) -> str:
    return NO_ATTACK if acc is None else mx.format_percent(acc)


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _rows_by_layer(rows) -> tuple[list[str], dict]:
    layers, table = [], {}
    for r in rows:
        if r.layer_id not in table:
            layers.append(r.layer_id)
            table[r.layer_id] = {}
        table[r.layer_id][r.kind] = r
    return layers, table


def render_tables(rows, title: str = "") -> str:
    layers, table = _rows_by_layer(rows)
    if not layers:
        return f"{title}\n(no metrics)\n" if title else "(no metrics)\n"

    def first(layer, attr):
        for r in table[layer].values():
            value = getattr(r, attr)
            if value is not None:
                return value
        return None

    t1 = [["Layer", "Parameter Amount", "CV^(DoF)", "CV^(Rank)", "Attack Accuracy"]]
    t2 = [["Layer", "Parameter Amount", "MCR^(DoF)", "MCR^(Rank)", "Attack Accuracy"]]
    for layer in layers:
        params = f"{first(layer, 'parameter_amount'):,}"
        acc = format_accuracy(first(layer, "attack_accuracy_percent"))
        dof, rank = table[layer].get("dof"), table[layer].get("rank")
        t1.append([layer, params, format_cv_cell(dof), format_cv_cell(rank), acc])
        t2.append([layer, params, format_mcr_cell(dof), format_mcr_cell(rank), acc])
    head = f"{title}\n\n" if title else ""
    return (f"{head}CV and Attack Accuracy (max CV, reduction to final in parentheses)\n{_align(t1)}\n\n"
            f"MCR and Attack Accuracy (final epoch)\n{_align(t2)}\n")


def emit_tables(manifest: RunManifest) -> str:
    cfg = manifest.config
    title = f"{cfg.get('model')} on {cfg.get('dataset')}, {len(manifest.epochs)} epoch(s), seed {cfg.get('seed')}"
    if manifest.status != "complete":
        title += f" [{manifest.status}]"
    if "summary" in manifest.artifacts:
        rows = mx.read_summary_json(manifest.path("summary"))
    elif "metrics" in manifest.artifacts:
        rows = [mx.summarize(s, 0) for s in mx.read_metrics_csv(manifest.path("metrics"))]
    else:
        rows = []
    return render_tables(rows, title)


# ---------------------------------------------------------------- plot series

def series_filename(figure: str, kind: str, layer: str) -> str:
    return f"{figure}_{kind}__{layer}.tsv"


def _tsv_number(value) -> str:
    if value is None:
        return "nan"
    return str(value) if isinstance(value, int) else repr(float(value))


def write_plot_series(series_list, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in series_list:
        columns = {"value": s.values, "cv": s.cv, "mcr": s.mcr}
        for figure in FIGURE_KINDS:
            buf = io.StringIO()
            w = csv.writer(buf, delimiter="\t", lineterminator="\n")
            w.writerow(["epoch", "value"])
            for t, v in enumerate(columns[figure], start=1):
                w.writerow([t, _tsv_number(v)])
            path = out_dir / series_filename(figure, s.kind, s.layer_id)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(buf.getvalue(), encoding="utf-8")
            tmp.replace(path)
            written.append(path)
    return written


def emit_plot_data(manifest: RunManifest, out_dir=None) -> list[Path]:
    out_dir = Path(out_dir) if out_dir is not None else Path(manifest.run_dir) / "plots"
    return write_plot_series(mx.read_metrics_csv(manifest.path("metrics")), out_dir)


def read_plot_file(path) -> list[tuple[int, float]]:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines(), delimiter="\t"))
    if not rows or rows[0] != ["epoch", "value"]:
        raise FormatError(f"{path}: expected header 'epoch<TAB>value'")
    return [(int(e), float(v)) for e, v in rows[1:]]


def read_plot_series(directory) -> list[mx.MetricSeries]:
    """Rebuild MetricSeries from the ``value_*`` files written by :func:`write_plot_series`."""
    out = []
    for path in sorted(Path(directory).glob("value_*__*.tsv")):
        kind, layer = path.stem[len("value_"):].split("__", 1)
        values = [v for _, v in read_plot_file(path)]
        if any(math.isnan(v) or v != int(v) for v in values):
            raise FormatError(f"{path}: values must be integers")
        out.append(mx.MetricSeries(layer, kind, [int(v) for v in values]))
    return out
