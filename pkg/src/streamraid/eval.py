"""Metrics, experiment drivers, and report serialization.

Metrics are pure functions of (outputs, targets). Reports hold flat rows
keyed by full provenance (dataset, attack, objective, epsilon, k, max_count,
eta, seed); the CSV schema is fixed and the row order deterministic, so a
report written twice from the same rows is byte-identical. Wall-clock
columns are informational and excluded from reproducibility claims.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import (
    GreedySource,
    RealTimeObjective,
    SumObjective,
    SurpriseObjective,
    TimeWindowObjective,
    objective_name,
    run_online_attack_batch,
    source_name,
)
from .errors import ConfigError, DataError, NumericError, StreamraidError

METRIC_NAMES = ("tasr", "tmse", "fool_rate", "fool_mse", "surprise_error",
                "clean_acc", "clean_mse")

SWEEP_AXES = ("epsilon", "k", "max_count", "eta", "target_frequency")

CSV_HEADER = "dataset,attack,objective,epsilon,k,max_count,eta,seed,metric,value,wall_time_s"

SHOWCASE_KINDS = ("realtime", "timewindow", "surprise")


# ---------------------------------------------------------------------------
# metrics


def _check_lengths(outputs, targets, what):
    if len(outputs) == 0:
        raise DataError(f"{what}: empty outputs")
    if len(outputs) != len(targets):
        raise DataError(f"{what}: {len(outputs)} outputs vs {len(targets)} targets")


def tasr(outputs, targets) -> float:
    """Targeted attack success ratio: the fraction of steps whose predicted
    class equals the adversarial target (argmax ties break to the lowest
    index)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets)
    if outputs.ndim != 2:
        raise DataError(f"tasr: outputs must be (L, C) logits, got shape {outputs.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise DataError("tasr: targets must be integer class labels")
    _check_lengths(outputs, targets, "tasr")
    return float((outputs.argmax(axis=1) == targets).mean())


def _value_rows(outputs, targets, what):
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    _check_lengths(outputs, targets, what)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    if targets.ndim == 1:
        targets = targets[:, None]
    if outputs.shape[0] != targets.shape[0] or targets.shape[1] not in (1, outputs.shape[1]):
        raise DataError(f"{what}: outputs {outputs.shape} vs targets {targets.shape}")
    return outputs, np.broadcast_to(targets, outputs.shape)


def tmse(outputs, targets) -> float:
    """Targeted MSE: mean squared distance from the adversarial targets."""
    outputs, targets = _value_rows(outputs, targets, "tmse")
    return float(((outputs - targets) ** 2).mean(axis=1).mean())


def fool_metrics(outputs, truth, task):
    """Per-step and aggregate disagreement with the clean truth.

    Classification: fool_rate_i = 1[argmax(output_i) != y_i]. Regression:
    fool_mse_i = squared error at step i. Returns (per_step, aggregate).
    """
    if task == "classification":
        outputs = np.asarray(outputs, dtype=np.float64)
        truth = np.asarray(truth)
        if outputs.ndim != 2:
            raise DataError(f"fool_metrics: outputs must be (L, C), got shape {outputs.shape}")
        if not np.issubdtype(truth.dtype, np.integer):
            raise DataError("fool_metrics: classification truth must be integer labels")
        _check_lengths(outputs, truth, "fool_metrics")
        per_step = (outputs.argmax(axis=1) != truth).astype(np.float64)
    else:
        outputs, truth = _value_rows(outputs, truth, "fool_metrics")
        per_step = ((outputs - truth) ** 2).mean(axis=1)
    return per_step, float(per_step.mean())


def surprise_error(outputs, truth) -> float:
    """Max absolute error minus mean absolute error over steps: large when
    the victim is mostly right but badly wrong somewhere."""
    outputs, truth = _value_rows(outputs, truth, "surprise_error")
    err = np.abs(outputs - truth).mean(axis=1)
    return float(err.max() - err.mean())


def sequence_metrics(trace, task) -> dict:
    """Standard metric set for one attacked sequence, given what the trace
    carries: targeted metrics need adversarial targets, fool/clean metrics
    need the truth."""
    out = {}
    if task == "classification":
        if trace.targets_adv is not None:
            out["tasr"] = tasr(trace.adv_outputs, trace.targets_adv)
        if trace.targets_true is not None:
            out["fool_rate"] = fool_metrics(trace.adv_outputs, trace.targets_true, task)[1]
            clean = np.asarray(trace.clean_outputs).argmax(axis=1)
            out["clean_acc"] = float((clean == trace.targets_true).mean())
    else:
        if trace.targets_adv is not None:
            out["tmse"] = tmse(trace.adv_outputs, trace.targets_adv)
        if trace.targets_true is not None:
            out["fool_mse"] = fool_metrics(trace.adv_outputs, trace.targets_true, task)[1]
            out["clean_mse"] = fool_metrics(trace.clean_outputs, trace.targets_true, task)[1]
            out["surprise_error"] = surprise_error(trace.adv_outputs, trace.targets_true)
    if not out:
        raise DataError("sequence_metrics: trace carries no targets")
    return out


# ---------------------------------------------------------------------------
# report rows


@dataclass
class MetricsRow:
    dataset: str
    attack: str
    objective: str
    epsilon: float
    k: int
    max_count: int
    eta: float
    seed: int
    metric: str
    value: float
    wall_time_s: float

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRIC_NAMES}")
        for name in ("dataset", "attack", "objective"):
            text = getattr(self, name)
            if any(ch in text for ch in ",\n\r"):
                raise ConfigError(f"{name} {text!r} contains CSV-breaking characters")

    def sort_key(self):
        return (self.dataset, self.attack, self.objective, float(self.epsilon), int(self.k),
                int(self.max_count), float(self.eta), int(self.seed), self.metric)


@dataclass
class SweepError:
    """One failed sweep cell; the sweep continues past it."""

    dataset: str
    attack: str
    axis: str
    value: float
    seed: int
    message: str
    category: str = "data"  # "config" | "data" | "numeric"


def summarize_traces(traces, task, dataset, attack, objective_label, cfg, seed,
                     wall_time_s=0.0):
    """One MetricsRow per metric: the unweighted mean over per-sequence values."""
    per_seq = [sequence_metrics(tr, task) for tr in traces]
    rows = []
    for metric in sorted(per_seq[0]):
        mean = float(np.mean([m[metric] for m in per_seq]))
        rows.append(MetricsRow(dataset, attack, objective_label, cfg.epsilon, cfg.k,
                               cfg.max_count, cfg.eta, seed, metric, mean, wall_time_s))
    return rows


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)
        self.errors.extend(other.errors)

    def values(self, metric, **filters):
        """Row values for one metric, filtered by column equality."""
        picked = [r.value for r in self.rows
                  if r.metric == metric and all(getattr(r, k) == v for k, v in filters.items())]
        return np.asarray(picked)


def _fnum(v) -> str:
    return repr(float(v))


def write_csv(report: MetricsReport, path) -> None:
    """Fixed header, deterministic sort, shortest round-trip float repr.

    The same rows always produce byte-identical files; an empty report is an
    error and creates nothing.
    """
    if not report.rows:
        raise DataError("write_csv: report has no rows")
    lines = [CSV_HEADER]
    for row in sorted(report.rows, key=MetricsRow.sort_key):
        lines.append(",".join((
            row.dataset, row.attack, row.objective, _fnum(row.epsilon), str(int(row.k)),
            str(int(row.max_count)), _fnum(row.eta), str(int(row.seed)), row.metric,
            _fnum(row.value), _fnum(row.wall_time_s),
        )))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> MetricsReport:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise DataError(f"{path}: expected header {CSV_HEADER!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 11:
            raise DataError(f"{path}:{i}: expected 11 columns, got {len(parts)}")
        try:
            rows.append(MetricsRow(
                dataset=parts[0], attack=parts[1], objective=parts[2],
                epsilon=float(parts[3]), k=int(parts[4]), max_count=int(parts[5]),
                eta=float(parts[6]), seed=int(parts[7]), metric=parts[8],
                value=float(parts[9]), wall_time_s=float(parts[10])))
        except (ValueError, ConfigError) as exc:
            raise DataError(f"{path}:{i}: {exc}") from exc
    return MetricsReport(rows=rows)


# ---------------------------------------------------------------------------
# SVG rendering


SVG_WIDTH = 800
SVG_HEIGHT = 500
SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
               "#17becf", "#7f7f7f")


def _svg_escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _ticks(lo, hi, count=5):
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def render_svg(report, x_axis, metric, path, title=None) -> None:
    """Line chart of one metric over one sweep axis, one polyline per attack.

    Values sharing (attack, x) are averaged (over seeds). Fixed 800x500
    canvas with 10% margins, no external assets; identical rows give
    byte-identical files.
    """
    if x_axis not in ("epsilon", "k", "max_count", "eta", "seed"):
        raise ConfigError(f"cannot plot over {x_axis!r}")
    if metric not in METRIC_NAMES:
        raise ConfigError(f"unknown metric {metric!r}")
    rows = [r for r in report.rows if r.metric == metric]
    if not rows:
        raise DataError(f"render_svg: no rows with metric {metric!r}")

    series = {}
    for row in rows:
        series.setdefault(row.attack, {}).setdefault(float(getattr(row, x_axis)), []).append(
            row.value)
    curves = {attack: sorted((x, float(np.mean(vals))) for x, vals in pts.items())
              for attack, pts in sorted(series.items())}

    xs = [x for pts in curves.values() for x, _ in pts]
    ys = [y for pts in curves.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        pad = max(abs(y_lo), 1.0) * 0.05
        y_lo, y_hi = y_lo - pad, y_hi + pad

    mx, my = SVG_WIDTH * 0.10, SVG_HEIGHT * 0.10
    px = lambda x: mx + (x - x_lo) / (x_hi - x_lo) * (SVG_WIDTH - 2 * mx)
    py = lambda y: SVG_HEIGHT - my - (y - y_lo) / (y_hi - y_lo) * (SVG_HEIGHT - 2 * my)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="#ffffff"/>',
        f'<text x="{SVG_WIDTH / 2:.2f}" y="{my * 0.6:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{_svg_escape(title or metric)}</text>',
    ]
    axis_style = 'stroke="#333333" stroke-width="1"'
    parts.append(f'<line x1="{mx:.2f}" y1="{SVG_HEIGHT - my:.2f}" x2="{SVG_WIDTH - mx:.2f}" '
                 f'y2="{SVG_HEIGHT - my:.2f}" {axis_style}/>')
    parts.append(f'<line x1="{mx:.2f}" y1="{my:.2f}" x2="{mx:.2f}" '
                 f'y2="{SVG_HEIGHT - my:.2f}" {axis_style}/>')
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(tx):.2f}" y1="{SVG_HEIGHT - my:.2f}" x2="{px(tx):.2f}" '
                     f'y2="{SVG_HEIGHT - my + 5:.2f}" {axis_style}/>')
        parts.append(f'<text x="{px(tx):.2f}" y="{SVG_HEIGHT - my + 20:.2f}" '
                     f'text-anchor="middle" font-family="sans-serif" font-size="11">'
                     f'{format(tx, "g")}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{mx - 5:.2f}" y1="{py(ty):.2f}" x2="{mx:.2f}" '
                     f'y2="{py(ty):.2f}" {axis_style}/>')
        parts.append(f'<text x="{mx - 8:.2f}" y="{py(ty) + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{format(ty, "g")}</text>')
    parts.append(f'<text x="{SVG_WIDTH / 2:.2f}" y="{SVG_HEIGHT - my * 0.2:.2f}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13">'
                 f'{_svg_escape(x_axis)}</text>')
    parts.append(f'<text x="{mx * 0.35:.2f}" y="{SVG_HEIGHT / 2:.2f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 {mx * 0.35:.2f} {SVG_HEIGHT / 2:.2f})">'
                 f'{_svg_escape(metric)}</text>')

    for i, (attack, pts) in enumerate(curves.items()):
        color = SVG_PALETTE[i % len(SVG_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                     f'points="{coords}"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = my + 16 + 18 * i
        parts.append(f'<line x1="{SVG_WIDTH - mx - 130:.2f}" y1="{ly:.2f}" '
                     f'x2="{SVG_WIDTH - mx - 104:.2f}" y2="{ly:.2f}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{SVG_WIDTH - mx - 98:.2f}" y="{ly + 4:.2f}" '
                     f'font-family="sans-serif" font-size="12">{_svg_escape(attack)}</text>')

    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# sweep driver


def _cast_axis_value(axis, value):
    if axis in ("epsilon", "eta"):
        return float(value)
    return int(value)


def _cell_config(base_cfg, axis, value, seed):
    if axis == "target_frequency":
        return replace(base_cfg, seed=seed)
    return replace(base_cfg, seed=seed, **{axis: _cast_axis_value(axis, value)})


def sweep(victim, sequences, schedule, sources, base_cfg, axis, grid, seeds,
          objective=SumObjective(), dataset="dataset", schedule_for_frequency=None,
          jobs=1) -> MetricsReport:
    """Cartesian run of {attack x grid x seed} cells over one config axis.

    Each cell attacks the whole evaluation set once with cfg.seed set to the
    repetition seed and the axis field set to the grid value, then appends
    one row per metric (averaged over sequences, full provenance). A failed
    cell lands in report.errors and the sweep continues. Cells are
    independent; jobs > 1 runs them in a thread pool, and the result is
    sorted afterward so it never depends on completion order.

    axis="target_frequency" rebuilds the target schedule per grid value via
    schedule_for_frequency(value) and tags the dataset column with
    "|freq=<value>" since the CSV schema has no frequency column.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    grid = list(grid)
    seeds = [int(s) for s in seeds]
    if not grid:
        raise ConfigError("sweep: empty grid")
    if not seeds:
        raise ConfigError("sweep: no seeds")
    if not sources:
        raise ConfigError("sweep: no attack sources")
    if axis == "target_frequency" and schedule_for_frequency is None:
        raise ConfigError("target_frequency sweep needs schedule_for_frequency")

    def run_cell(source, value, seed):
        name = source_name(source)
        cell_dataset = dataset if axis != "target_frequency" else f"{dataset}|freq={int(value)}"
        try:
            cfg = _cell_config(base_cfg, axis, value, seed)
            sched = schedule if axis != "target_frequency" else schedule_for_frequency(int(value))
            start = time.perf_counter()
            traces = run_online_attack_batch(victim, sequences, sched, source, cfg, objective)
            elapsed = time.perf_counter() - start
            rows = summarize_traces(traces, victim.task, cell_dataset, name,
                                    objective_name(objective), cfg, seed, elapsed)
            return rows, None
        except StreamraidError as exc:
            category = ("config" if isinstance(exc, ConfigError) else
                        "numeric" if isinstance(exc, NumericError) else "data")
            return [], SweepError(cell_dataset, name, axis, float(value), seed,
                                  str(exc), category)

    cells = [(source, value, seed) for source in sources for value in grid for seed in seeds]
    report = MetricsReport()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda cell: run_cell(*cell), cells))
    else:
        outcomes = [run_cell(*cell) for cell in cells]
    for rows, error in outcomes:
        report.rows.extend(rows)
        if error is not None:
            report.errors.append(error)
    report.rows.sort(key=MetricsRow.sort_key)
    report.errors.sort(key=lambda e: (e.dataset, e.attack, e.axis, e.value, e.seed))
    return report


# ---------------------------------------------------------------------------
# objective showcases


@dataclass
class ShowcaseResult:
    report: MetricsReport
    series: dict


def _safe_ratio(numerator, denominator) -> float:
    """inside/outside contrast with an infinity sentinel for a perfectly
    clean outside."""
    if denominator == 0.0:
        return math.inf
    return numerator / denominator


def _per_step_fool(traces, task):
    per = np.stack([fool_metrics(tr.adv_outputs, tr.targets_true, task)[0] for tr in traces])
    return per.mean(axis=0)


def _per_step_abs_error(traces):
    per = []
    for tr in traces:
        outputs, truth = _value_rows(tr.adv_outputs, tr.targets_true, "showcase")
        per.append(np.abs(outputs - truth).mean(axis=1))
    return np.stack(per).mean(axis=0)


def objective_showcase(kind, victim, sequences, schedule, source, cfg,
                       dataset="dataset", window=None) -> ShowcaseResult:
    """Side-by-side runs that isolate what one objective buys.

    realtime: RealTime objective (with lookahead) vs a greedy baseline;
    timewindow: TimeWindow over [a, b] (default [ceil(3L/4), L]) vs Sum,
    reporting per-step fooling inside vs outside the window; surprise
    (regression only): Surprise vs Sum vs greedy on surprise_error. The
    per-step curves live in .series; aggregate rows in .report.
    """
    if kind not in SHOWCASE_KINDS:
        raise ConfigError(f"unknown showcase {kind!r}; expected one of {SHOWCASE_KINDS}")
    sequences = np.asarray(sequences, dtype=np.float64)
    length = sequences.shape[1]
    if schedule.true is None or schedule.adv is None:
        raise ConfigError("objective_showcase needs both adversarial and true targets")
    if kind == "surprise" and victim.task != "regression":
        raise ConfigError("the surprise showcase needs a regression victim")

    if kind == "timewindow":
        if window is None:
            window = (math.ceil(3 * length / 4), length)
        a, b = window
        variants = [("timewindow", source, TimeWindowObjective(a, b)),
                    ("sum", source, SumObjective())]
    elif kind == "realtime":
        variants = [("realtime", source, RealTimeObjective()),
                    ("greedy", GreedySource(), SumObjective())]
    else:
        variants = [("surprise", source, SurpriseObjective()),
                    ("sum", source, SumObjective()),
                    ("greedy", GreedySource(), SumObjective())]

    report = MetricsReport()
    series = {"step": np.arange(1, length + 1)}
    for label, src, objective in variants:
        start = time.perf_counter()
        traces = run_online_attack_batch(victim, sequences, schedule, src, cfg, objective)
        elapsed = time.perf_counter() - start
        per_seq = [sequence_metrics(tr, victim.task) for tr in traces]
        for metric in sorted(per_seq[0]):
            mean = float(np.mean([m[metric] for m in per_seq]))
            report.rows.append(MetricsRow(dataset, source_name(src), objective_name(objective),
                                          cfg.epsilon, cfg.k, cfg.max_count, cfg.eta, cfg.seed,
                                          metric, mean, elapsed))
        if kind == "surprise":
            series[f"abs_error_{label}"] = _per_step_abs_error(traces)
            series[f"surprise_error_{label}"] = float(np.mean(
                [surprise_error(tr.adv_outputs, tr.targets_true) for tr in traces]))
        else:
            fool = _per_step_fool(traces, victim.task)
            series[f"fool_{label}"] = fool
            if kind == "realtime":
                series[f"final_fool_{label}"] = float(fool[-1])
            else:
                inside = (series["step"] >= a) & (series["step"] <= b)
                outside = fool[~inside]
                series[f"fool_inside_{label}"] = float(fool[inside].mean())
                series[f"fool_outside_{label}"] = float(outside.mean()) if outside.size else math.nan
                series[f"in_out_ratio_{label}"] = _safe_ratio(
                    series[f"fool_inside_{label}"], series[f"fool_outside_{label}"])
    if kind == "timewindow":
        series["a"], series["b"] = a, b
    report.rows.sort(key=MetricsRow.sort_key)
    return ShowcaseResult(report, series)
