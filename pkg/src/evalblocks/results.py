"""Central result store and report generation.

One JSON record per (dataset, embedder, channel, evaluation, fold) under
``<results_dir>/records/``, where channel is the evaluated vector stream:
the aggregation id, or the modality name for identity aggregation. The
layout is file-per-record so reruns overwrite only their own keys and
stores merge/diff cleanly. Reports aggregate metrics across folds as
mean and sample standard deviation.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import _svg
from .blocks.evaluate import aggregate_folds
from .config import ExperimentSpec
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

GROUP_AXES = ("dataset", "embedder", "aggregation", "evaluation")


@dataclass
class MetricRecord:
    dataset: str
    embedder: str
    channel: str  # the aggregation axis as reported
    evaluation: str
    fold: int
    metrics: dict
    params: dict = field(default_factory=dict)

    def axis_value(self, axis: str) -> str:
        if axis == "aggregation":
            return self.channel
        if axis == "fold":
            return str(self.fold)
        return getattr(self, axis)


class ResultStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records_dir = self.root / "records"

    def record_path(self, dataset: str, embedder: str, channel: str, evaluation: str, fold: int) -> Path:
        return self.records_dir / dataset / embedder / channel / evaluation / f"fold{fold}.json"

    def record_result(
        self, spec: ExperimentSpec, channel: str, metrics: dict, params: dict | None = None
    ) -> None:
        """Persist one record, overwriting only its own key, then reindex."""
        path = self.record_path(spec.dataset, spec.embedder, channel, spec.evaluation, spec.fold)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "spec": {**spec.as_dict(), "channel": channel},
            "metrics": metrics,
            "params": params or {},
        }
        text = json.dumps(doc, indent=1, sort_keys=True)
        try:  # byte-identical re-record (cached rerun): store already correct
            if path.read_text() == text:
                return
        except OSError:
            pass
        self._write_atomic(path, text)
        self._regenerate_index(str(path.relative_to(self.records_dir)))

    def load_records(self) -> list[MetricRecord]:
        records = []
        for path in sorted(self.records_dir.glob("*/*/*/*/fold*.json")):
            doc = json.loads(path.read_text())
            spec = doc["spec"]
            records.append(
                MetricRecord(
                    dataset=spec["dataset"],
                    embedder=spec["embedder"],
                    channel=spec.get("channel", spec.get("aggregation", "")),
                    evaluation=spec["evaluation"],
                    fold=int(spec["fold"]),
                    metrics=doc.get("metrics", {}),
                    params=doc.get("params", {}),
                )
            )
        return records

    def _regenerate_index(self, new_key: str | None = None) -> None:
        # incremental when possible: only this store's coordinator writes
        # records, so the on-disk index plus the new key is the full truth
        index_path = self.records_dir / "index.json"
        keys = None
        if new_key is not None and index_path.is_file():
            try:
                keys = set(json.loads(index_path.read_text()))
                keys.add(new_key)
            except (json.JSONDecodeError, TypeError):
                keys = None
        if keys is None:
            keys = {
                str(p.relative_to(self.records_dir))
                for p in self.records_dir.glob("*/*/*/*/fold*.json")
            }
        self._write_atomic(index_path, json.dumps(sorted(keys), indent=1))

    def _write_atomic(self, path: Path, text: str) -> None:
        fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)


@dataclass
class MetricSummary:
    mean: float
    std: float | None
    n_defined: int
    n_total: int

    def format(self) -> str:
        text = f"{self.mean:.4f}"
        if self.std is not None:
            text += f" ± {self.std:.4f}"
        if self.n_defined < self.n_total:
            text += f" (n={self.n_defined}/{self.n_total})"
        return text


@dataclass
class TableRow:
    key: tuple[str, ...]
    metrics: dict[str, MetricSummary]


@dataclass
class Table:
    axes: list[str]
    rows: list[TableRow]

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            for name in row.metrics:
                if name not in names:
                    names.append(name)
        return names


def report_table(
    store: ResultStore, group_by: list[str], axis_order: dict[str, list[str]] | None = None
) -> Table:
    """Fold-aggregated metric table, one row per distinct group.

    Undefined (null) fold metrics are excluded from the aggregation and
    surfaced through the defined/total counts rather than fabricated.
    """
    for axis in group_by:
        if axis not in GROUP_AXES:
            raise ConfigError(f"unknown group axis {axis!r}; valid: {', '.join(GROUP_AXES)}")
    records = store.load_records()
    if not records:
        raise DataError(f"result store {store.records_dir} is empty")

    groups: dict[tuple[str, ...], list[MetricRecord]] = {}
    for record in records:
        groups.setdefault(tuple(record.axis_value(a) for a in group_by), []).append(record)

    def sort_key(key: tuple[str, ...]):
        parts = []
        for axis, value in zip(group_by, key):
            order = (axis_order or {}).get(axis)
            parts.append((order.index(value) if order and value in order else len(order or []), value))
        return parts

    rows = []
    for key in sorted(groups, key=sort_key):
        members = groups[key]
        names: list[str] = []
        for record in members:
            for name in record.metrics:
                if name not in names:
                    names.append(name)
        summary = {}
        for name in names:
            values = [r.metrics.get(name) for r in members]
            defined = [v for v in values if v is not None and math.isfinite(v)]
            if not defined:
                continue
            if len(defined) < len(values):
                log.warning(
                    "group %s: %d of %d %s values undefined; excluded from aggregation",
                    "/".join(key), len(values) - len(defined), len(values), name,
                )
            mean, std = aggregate_folds(defined)
            summary[name] = MetricSummary(mean, std, len(defined), len(values))
        rows.append(TableRow(key=key, metrics=summary))
    return Table(axes=list(group_by), rows=rows)


def markdown_table(table: Table, metrics: list[str] | None = None) -> str:
    names = metrics or table.metric_names()
    header = "| " + " | ".join(table.axes + names) + " |"
    rule = "|" + "|".join([" --- "] * (len(table.axes) + len(names))) + "|"
    lines = [header, rule]
    for row in table.rows:
        cells = list(row.key)
        for name in names:
            cells.append(row.metrics[name].format() if name in row.metrics else "—")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_barchart(table: Table, metric: str, out: str | Path) -> None:
    """Grouped bar chart with symmetric ±1 sample-std error bars.

    Outer groups come from the first group axis; one bar per remaining
    axis combination. Accuracy/AUC-style metrics pin the y-axis to [0, 1].
    Output bytes are deterministic for identical input.
    """
    out = Path(out)
    rows = [r for r in table.rows if metric in r.metrics]
    if not rows:
        raise ConfigError(f"metric {metric!r} not present in table")

    groups: list[str] = []
    bars: list[str] = []
    cells: dict[tuple[str, str], MetricSummary] = {}
    for row in rows:
        group = row.key[0] if row.key else "all"
        bar = " / ".join(row.key[1:]) or metric
        if group not in groups:
            groups.append(group)
        if bar not in bars:
            bars.append(bar)
        cells[(group, bar)] = row.metrics[metric]

    unit_scale = metric.startswith(("accuracy", "auc"))
    y_max = 1.0 if unit_scale else max(c.mean + (c.std or 0) for c in cells.values()) * 1.1
    y_max = y_max or 1.0

    width, height, margin = 720, 420, 60
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    group_w = plot_w / len(groups)
    bar_w = group_w * 0.8 / len(bars)

    def y_px(v: float) -> float:
        return height - margin - (v / y_max) * plot_h

    body = [_svg.text(width / 2, 24, metric, size=15)]
    body.append(_svg.line(margin, height - margin, width - margin, height - margin))
    body.append(_svg.line(margin, margin, margin, height - margin))
    for tick in range(5):
        v = y_max * tick / 4
        body.append(_svg.line(margin - 4, y_px(v), margin, y_px(v)))
        body.append(_svg.text(margin - 8, y_px(v) + 4, f"{v:.2f}", size=10, anchor="end"))

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"]
    for gi, group in enumerate(groups):
        gx = margin + gi * group_w
        body.append(_svg.text(gx + group_w / 2, height - margin + 18, group, size=11))
        for bi, bar in enumerate(bars):
            cell = cells.get((group, bar))
            if cell is None:
                continue
            x = gx + group_w * 0.1 + bi * bar_w
            top = y_px(cell.mean)
            color = palette[bi % len(palette)]
            body.append(
                f'<rect class="bar" x="{_svg.fmt(x)}" y="{_svg.fmt(top)}" '
                f'width="{_svg.fmt(bar_w * 0.9)}" height="{_svg.fmt(height - margin - top)}" '
                f'fill="{color}"/>'
            )
            if cell.std is not None:
                cx = x + bar_w * 0.45
                y_lo, y_hi = y_px(max(cell.mean - cell.std, 0.0)), y_px(min(cell.mean + cell.std, y_max))
                cap = bar_w * 0.2
                body.append(
                    f'<path class="errorbar" d="M {_svg.fmt(cx)} {_svg.fmt(y_lo)} '
                    f"L {_svg.fmt(cx)} {_svg.fmt(y_hi)} "
                    f"M {_svg.fmt(cx - cap)} {_svg.fmt(y_lo)} L {_svg.fmt(cx + cap)} {_svg.fmt(y_lo)} "
                    f'M {_svg.fmt(cx - cap)} {_svg.fmt(y_hi)} L {_svg.fmt(cx + cap)} {_svg.fmt(y_hi)}" '
                    f'stroke="#333333" fill="none" stroke-width="1"/>'
                )
    for bi, bar in enumerate(bars):
        color = palette[bi % len(palette)]
        lx, ly = margin + 10, 40 + bi * 16
        body.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        body.append(_svg.text(lx + 16, ly, bar, size=10, anchor="start"))

    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_svg.document(width, height, body))
