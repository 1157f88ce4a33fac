"""AUC, multi-seed aggregation and results tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, MetricError

TASKS = ("click", "purchase")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    model: str
    config_hash: str
    per_seed: dict[str, list[float]]
    seeds: list[int] = field(default_factory=list)

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.per_seed.items()}

    @property
    def std(self) -> dict[str, float] | None:
        """Sample standard deviation; absent for a single seed."""
        if min(len(v) for v in self.per_seed.values()) < 2:
            return None
        return {k: float(np.std(v, ddof=1)) for k, v in self.per_seed.items()}


def aggregate_seeds(reports: list[EvalReport]) -> EvalReport:
    if not reports:
        raise ConfigError("nothing to aggregate")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise ConfigError(f"cannot aggregate runs with different configs: {sorted(hashes)}")
    keys = set(reports[0].per_seed)
    if any(set(r.per_seed) != keys for r in reports):
        raise ConfigError("reports disagree on metric keys")
    per_seed = {k: [v for r in reports for v in r.per_seed[k]] for k in reports[0].per_seed}
    seeds = [s for r in reports for s in r.seeds]
    return EvalReport(reports[0].model, reports[0].config_hash, per_seed, seeds)


def compare(report: EvalReport, baseline: EvalReport) -> dict[str, float]:
    """Mean difference per metric (report minus baseline)."""
    if set(report.per_seed) != set(baseline.per_seed):
        raise ConfigError(f"metric keys differ: {sorted(set(report.per_seed) ^ set(baseline.per_seed))}")
    a, b = report.mean, baseline.mean
    return {k: a[k] - b[k] for k in a}


REPORT_COLUMNS = ("model", "click_auc", "click_std", "click_gain", "purchase_auc", "purchase_std", "purchase_gain")


def _rows(reports: list[EvalReport], baseline: EvalReport | None):
    for r in reports:
        mean, std = r.mean, r.std
        gains = compare(r, baseline) if baseline is not None and r is not baseline else None
        row = {"model": r.model}
        for t in TASKS:
            row[f"{t}_auc"] = mean[t]
            row[f"{t}_std"] = std[t] if std else None
            row[f"{t}_gain"] = gains[t] if gains else None
        yield row


def report_csv(reports: list[EvalReport], baseline: EvalReport | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in _rows(reports, baseline):
        w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def report_table(reports: list[EvalReport], baseline: EvalReport | None = None) -> str:
    """Aligned text table: model, click AUC (mean±std), gain, purchase AUC (mean±std), gain."""
    header = ["Model", "Click AUC", "Gain", "Purchase AUC", "Gain"]
    body = []
    for row in _rows(reports, baseline):
        cells = [row["model"]]
        for t in TASKS:
            m, s, g = row[f"{t}_auc"], row[f"{t}_std"], row[f"{t}_gain"]
            cells.append(f"{m:.4f}" + (f"±{s:.4f}" if s is not None else ""))
            cells.append("_" if g is None else f"{g:+.4f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: list[dict], fields, path) -> None:
    """Deterministic CSV: floats via repr, NaN as empty."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return v
