"""Change Value / Modified Change Ratio series, summary rows and their files.

For a per-epoch series ``v_1 .. v_T`` (DoF or Jacobian rank of one layer):

* ``cv_t = v_1 - v_t``
* ``mcr_t = (v_t - min_s v_s) / min_s v_s``, reported in percent. The
  minimum is taken over the whole series; :func:`compute_mcr_running` uses
  the minimum seen so far and is meant for live monitoring only.

Epochs are 1-based throughout.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ContractError, FormatError

KINDS = ("dof", "rank")
METRICS_HEADER = ("epoch", "layer", "kind", "value", "cv", "mcr_percent")
UNDEFINED = "undefined"


def compute_cv(series) -> list[int]:
    values = [int(v) for v in series]
    if not values:
        raise ContractError("CV needs a non-empty series")
    return [values[0] - v for v in values]


def compute_mcr(series) -> list[float | None]:
    """MCR in percent against the global minimum; all ``None`` when that minimum is 0."""
    values = [int(v) for v in series]
    if not values:
        raise ContractError("MCR needs a non-empty series")
    low = min(values)
    if low <= 0:
        return [None] * len(values)
    return [100.0 * (v - low) / low for v in values]


def compute_mcr_running(series) -> list[float | None]:
    """Live-monitoring MCR: each epoch is compared with the minimum seen so far."""
    out: list[float | None] = []
    low = None
    for v in (int(x) for x in series):
        low = v if low is None else min(low, v)
        out.append(None if low <= 0 else 100.0 * (v - low) / low)
    if not out:
        raise ContractError("MCR needs a non-empty series")
    return out


def format_percent(value: float | None) -> str:
    """Two decimals, truncated toward zero: 466.666... -> ``"466.66%"``."""
    if value is None:
        return "—"
    scaled = math.floor(abs(value) * 100 + 1e-6) / 100
    return f"{math.copysign(scaled, value) if scaled else 0.0:.2f}%"


@dataclass
class MetricSeries:
    layer_id: str
    kind: str
    values: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"metric kind must be one of {KINDS}, got {self.kind!r}")
        self.values = [int(v) for v in self.values]

    def append(self, value: int) -> None:
        self.values.append(int(value))

    @property
    def cv(self) -> list[int]:
        return compute_cv(self.values)

    @property
    def mcr(self) -> list[float | None]:
        return compute_mcr(self.values)

    @property
    def mcr_defined(self) -> bool:
        return bool(self.values) and min(self.values) > 0


@dataclass(frozen=True)
class SummaryRow:
    layer_id: str
    kind: str
    parameter_amount: int
    max_cv: int
    max_cv_minus_final: int
    final_mcr_percent: float | None
    attack_accuracy_percent: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def summarize(series: MetricSeries, params: int, attack_acc: float | None = None, *,
              epochs: int | None = None) -> SummaryRow:
    """Table-style summary of one series; ``epochs`` asserts the series is complete."""
    if not series.values:
        raise ContractError(f"{series.layer_id}/{series.kind}: empty series")
    if epochs is not None and len(series.values) != epochs:
        raise ContractError(f"{series.layer_id}/{series.kind}: series has {len(series.values)} "
                            f"epochs, expected {epochs}")
    cv = series.cv
    max_cv = max(cv)
    return SummaryRow(layer_id=series.layer_id, kind=series.kind, parameter_amount=int(params),
                      max_cv=max_cv, max_cv_minus_final=max_cv - cv[-1],
                      final_mcr_percent=series.mcr[-1],
                      attack_accuracy_percent=None if attack_acc is None else float(attack_acc))


# ---------------------------------------------------------------- persistence

def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def _fmt_mcr(value: float | None) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


def metrics_csv_text(series_list) -> str:
    """Rows ordered by epoch, then by the order of ``series_list``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    prepared = [(s, s.cv, s.mcr) for s in series_list if s.values]
    epochs = max((len(s.values) for s, _, _ in prepared), default=0)
    for t in range(epochs):
        for s, cv, mcr in prepared:
            if t < len(s.values):
                writer.writerow([t + 1, s.layer_id, s.kind, s.values[t], cv[t], _fmt_mcr(mcr[t])])
    return buf.getvalue()


def write_metrics_csv(path, series_list) -> None:
    _atomic_write(path, metrics_csv_text(series_list))


def read_metrics_csv(path) -> list[MetricSeries]:
    """Rebuild the series from a metrics.csv; CV/MCR are recomputed, not trusted."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise FormatError(f"{path}: missing or wrong header, expected {','.join(METRICS_HEADER)}")
    found: dict[tuple[str, str], MetricSeries] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(row)}")
        try:
            epoch, value = int(row[0]), int(row[3])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer epoch or value") from None
        key = (row[1], row[2])
        s = found.setdefault(key, MetricSeries(row[1], row[2]))
        if epoch != len(s.values) + 1:
            raise FormatError(f"{path}:{lineno}: epoch {epoch} out of order for {row[1]}/{row[2]}")
        s.append(value)
    return list(found.values())


def write_summary_json(path, rows) -> None:
    _atomic_write(path, json.dumps([r.to_json() for r in rows], indent=2) + "\n")


def read_summary_json(path) -> list[SummaryRow]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return [SummaryRow(**row) for row in data]
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: not a summary array ({exc})") from None
