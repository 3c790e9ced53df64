"""Rank aggregation over downstream tasks and diversity/performance correlation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._io import atomic_write_text
from ._rng import stream
from .errors import (
    AlignmentError,
    DegenerateInputError,
    ParseError,
    PersistenceError,
    UndefinedCorrelationError,
    ValidationError,
)

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


@dataclass
class ScoreTable:
    """Mean downstream score per (dataset, task); ``None`` marks an absent cell."""

    datasets: list
    tasks: list
    mean_score: dict
    higher_is_better: dict
    ci_halfwidth: dict = field(default_factory=dict)

    def __post_init__(self):
        for d in self.datasets:
            row = self.mean_score.setdefault(d, {})
            for t in self.tasks:
                row.setdefault(t, None)
        for t in self.tasks:
            self.higher_is_better.setdefault(t, True)

    @classmethod
    def from_csv(cls, source) -> "ScoreTable":
        """Parse ``dataset,task,mean,ci,higher_is_better`` rows (``ci`` may be empty)."""
        if isinstance(source, (str, Path)) and Path(source).exists():
            try:
                text = Path(source).read_text(encoding="utf-8")
            except OSError as exc:
                raise PersistenceError(str(exc), path=source) from exc
        elif hasattr(source, "read"):
            text = source.read()
        else:
            raise PersistenceError("score table not found", path=source)
        reader = csv.DictReader(io.StringIO(text))
        expected = ["dataset", "task", "mean", "ci", "higher_is_better"]
        if [c.strip() for c in (reader.fieldnames or [])] != expected:
            raise ParseError(f"header must be {','.join(expected)}", line=1)
        datasets, tasks, means, cis, hib = [], [], {}, {}, {}
        for lineno, row in enumerate(reader, start=2):
            d, t = row["dataset"].strip(), row["task"].strip()
            if d not in datasets:
                datasets.append(d)
            if t not in tasks:
                tasks.append(t)
            if (d, t) in {(dd, tt) for dd in means for tt in means[dd]}:
                raise ParseError(f"duplicate cell ({d}, {t})", line=lineno)
            try:
                mean = float(row["mean"]) if row["mean"].strip() else None
                ci = float(row["ci"]) if row["ci"] and row["ci"].strip() else None
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            flag = row["higher_is_better"].strip().lower()
            if flag not in _TRUE | _FALSE:
                raise ParseError(f"higher_is_better must be a boolean, got {flag!r}", line=lineno)
            if t in hib and hib[t] != (flag in _TRUE):
                raise ParseError(f"task {t!r} has inconsistent higher_is_better", line=lineno)
            hib[t] = flag in _TRUE
            means.setdefault(d, {})[t] = mean
            if ci is not None:
                cis.setdefault(d, {})[t] = ci
        return cls(datasets, tasks, means, hib, cis)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "task", "mean", "ci", "higher_is_better"])
        for d in self.datasets:
            for t in self.tasks:
                m = self.mean_score[d][t]
                ci = self.ci_halfwidth.get(d, {}).get(t)
                w.writerow([d, t, "" if m is None else repr(m), "" if ci is None else repr(ci),
                            "true" if self.higher_is_better[t] else "false"])
        return buf.getvalue()


def load_table2() -> ScoreTable:
    """Linear-probe scores on the global downstream subsets, as printed (two decimals)."""
    path = resources.files("geodiverse") / "data" / "table2_global_linear_probe.csv"
    return ScoreTable.from_csv(io.StringIO(path.read_text(encoding="utf-8")))


def load_table3() -> ScoreTable:
    """FMoW global kNN and full-finetuning accuracies, as printed."""
    path = resources.files("geodiverse") / "data" / "table3_fmow_knn_full_finetune.csv"
    return ScoreTable.from_csv(io.StringIO(path.read_text(encoding="utf-8")))


# -- ranking -----------------------------------------------------------------------


@dataclass
class RankResult:
    order: list
    average_rank: dict
    ranks: dict
    ties: list
    method: str = "average"


class RankAggregator(BaseEstimator):
    """Average per-task ranks (0 = best) of datasets in a :class:`ScoreTable`.

    ``method="average"`` gives tied datasets their midrank; ``"dense"``,
    ``"min"`` and ``"max"`` follow :func:`scipy.stats.rankdata`, shifted to
    start at 0. Absent cells are left out of that task's ranking.
    """

    def __init__(self, method="average"):
        self.method = method

    def fit(self, table: ScoreTable, y=None):
        if self.method not in ("average", "dense", "min", "max"):
            raise ValidationError(f"unsupported rank method {self.method!r}")
        if len(table.datasets) < 2 or not table.tasks:
            raise DegenerateInputError("ranking needs >= 2 datasets and >= 1 task")
        ranks = {d: {} for d in table.datasets}
        ties = []
        for t in table.tasks:
            present = [d for d in table.datasets if table.mean_score[d][t] is not None]
            scores = []
            for d in present:
                s = float(table.mean_score[d][t])
                if not math.isfinite(s):
                    raise ValidationError(f"non-finite score in cell ({d!r}, {t!r})")
                scores.append(s)
            if not present:
                continue
            key = -np.array(scores) if table.higher_is_better[t] else np.array(scores)
            r = stats.rankdata(key, method=self.method) - 1.0
            for d, v in zip(present, r):
                ranks[d][t] = float(v)
            by_score: dict = {}
            for d, s in zip(present, scores):
                by_score.setdefault(s, []).append(d)
            ties.extend((t, group) for group in by_score.values() if len(group) > 1)
        avg = {}
        for d in table.datasets:
            vals = list(ranks[d].values())
            if not vals:
                raise DegenerateInputError(f"dataset {d!r} has no scored task")
            avg[d] = math.fsum(vals) / len(vals)
        position = {d: i for i, d in enumerate(table.datasets)}
        self.average_rank_ = avg
        self.ranks_ = ranks
        self.ties_ = ties
        self.order_ = sorted(table.datasets, key=lambda d: (avg[d], position[d]))
        return self

    @property
    def result_(self) -> RankResult:
        check_is_fitted(self, "average_rank_")
        return RankResult(list(self.order_), dict(self.average_rank_), self.ranks_, self.ties_, self.method)


def rank_datasets(table: ScoreTable, method: str = "average") -> RankResult:
    return RankAggregator(method).fit(table).result_


# -- correlation -------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: float
    n: int
    method: str

    def to_dict(self) -> dict:
        return {"rho": self.rho, "p_value": self.p_value, "n": self.n, "method": self.method}


def spearman_pvalue(rho: float, n: int) -> float:
    """Two-sided p-value of a Spearman coefficient via Student's t with ``n - 2`` dof."""
    if n < 3:
        raise DegenerateInputError("p-value needs n >= 3")
    rho = max(-1.0, min(1.0, float(rho)))
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return max(-1.0, min(1.0, float(a @ b) / denom))


def spearman(x, y, method: str = "t", n_permutations: int = 1_000_000, seed: int = 0,
             batch: int = 50_000) -> CorrelationResult:
    """Spearman's rho (Pearson correlation of midranks) with a two-sided p-value.

    ``method="t"`` uses the t approximation; ``method="permutation"`` counts
    the fraction of seeded random pairings of ``y`` with ``x`` at least as
    extreme, ``(hits + 1) / (n_permutations + 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 3:
        raise DegenerateInputError("spearman needs n >= 3")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("spearman inputs must be finite")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise UndefinedCorrelationError("correlation is undefined for constant input")
    rho = _pearson(rx, ry)
    if method == "t":
        return CorrelationResult(rho, spearman_pvalue(rho, n), n, "t")
    if method != "permutation":
        raise ValidationError(f"unknown p-value method {method!r}")
    rng = stream(seed, "spearman-permutation")
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    norm = math.sqrt(float(cx @ cx) * float(cy @ cy))
    hits, done = 0, 0
    threshold = abs(rho) - 1e-12
    while done < n_permutations:
        m = min(batch, n_permutations - done)
        perm = rng.permuted(np.broadcast_to(cy, (m, n)), axis=1)
        r = perm @ cx / norm
        hits += int(np.count_nonzero(np.abs(r) >= threshold))
        done += m
    return CorrelationResult(rho, (hits + 1) / (n_permutations + 1), n, f"permutation({n_permutations})")


def mean_performance(table: ScoreTable, datasets: Sequence[str], normalization: str = "minmax") -> dict:
    """Per-dataset mean over tasks, optionally min-max scaling each task first.

    Scaling is over ``datasets`` only; lower-is-better tasks are flipped so 1
    is always best. Tasks where those datasets all score the same carry no
    ordering information and are skipped in ``minmax`` mode.
    """
    if normalization not in ("minmax", "raw"):
        raise ValidationError(f"normalization must be 'minmax' or 'raw', got {normalization!r}")
    per = {d: [] for d in datasets}
    for t in table.tasks:
        vals = {d: table.mean_score[d][t] for d in datasets if table.mean_score[d][t] is not None}
        if not vals:
            continue
        if normalization == "raw":
            for d, v in vals.items():
                per[d].append(float(v))
            continue
        lo, hi = min(vals.values()), max(vals.values())
        if hi == lo:
            continue
        for d, v in vals.items():
            s = (v - lo) / (hi - lo)
            per[d].append(s if table.higher_is_better[t] else 1.0 - s)
    out = {}
    for d, v in per.items():
        if not v:
            raise DegenerateInputError(f"dataset {d!r} has no usable task score")
        out[d] = math.fsum(v) / len(v)
    return out


def correlate_diversity(reports, table: ScoreTable, measures: Optional[Sequence[str]] = None,
                        normalization: str = "minmax", method: str = "t", **kwargs) -> dict:
    """Spearman correlation between each diversity measure and mean performance.

    Every report must name a dataset of ``table``; table rows without a report
    (such as a no-pretraining baseline) are left out.
    """
    reports = list(reports)
    unmatched = [r.dataset for r in reports if r.dataset not in table.datasets]
    if unmatched:
        raise AlignmentError(f"reports without a score-table row: {unmatched}", unmatched)
    names = [r.dataset for r in reports]
    if len(set(names)) != len(names):
        raise AlignmentError("duplicate dataset names among reports", names)
    if len(reports) < 3:
        raise DegenerateInputError("correlation needs >= 3 matched datasets")
    y_map = mean_performance(table, names, normalization)
    y = [y_map[n] for n in names]
    if measures is None:
        measures = [m for m in reports[0].SCALAR_MEASURES
                    if all(r.measure(m) is not None for r in reports)]
    out = {}
    for m in measures:
        x = [r.measure(m) for r in reports]
        if any(v is None for v in x):
            missing = [r.dataset for r, v in zip(reports, x) if v is None]
            raise ValidationError(f"measure {m!r} missing for {missing}")
        out[m] = spearman(x, y, method=method, **kwargs)
    return out


# -- output ------------------------------------------------------------------------


def emit_report(ranks: RankResult, correlations: dict, destination, metadata: Optional[dict] = None) -> list:
    """Write ``analysis.json``, ``ranks.csv`` and (if any) ``correlations.csv``.

    Returns the written paths. Column order is fixed, so reruns are
    byte-identical.
    """
    out = Path(destination)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(str(exc), path=out) from exc
    tasks = list(dict.fromkeys(t for d in ranks.order for t in ranks.ranks[d]))
    doc = {
        "ranks": {
            "method": ranks.method,
            "order": ranks.order,
            "average_rank": {d: ranks.average_rank[d] for d in ranks.order},
            "per_task": {d: {t: ranks.ranks[d].get(t) for t in tasks} for d in ranks.order},
            "ties": [{"task": t, "datasets": g} for t, g in ranks.ties],
        }
    }
    if correlations:
        doc["correlations"] = {m: c.to_dict() for m, c in correlations.items()}
    if metadata:
        doc["metadata"] = metadata
    written = []
    atomic_write_text(out / "analysis.json", json.dumps(doc, indent=2) + "\n")
    written.append(out / "analysis.json")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "average_rank", *tasks])
    for d in ranks.order:
        w.writerow([d, repr(ranks.average_rank[d])] + [
            "" if ranks.ranks[d].get(t) is None else repr(ranks.ranks[d][t]) for t in tasks
        ])
    atomic_write_text(out / "ranks.csv", buf.getvalue())
    written.append(out / "ranks.csv")

    if correlations:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["measure", "rho", "p_value", "n", "method"])
        for m, c in correlations.items():
            w.writerow([m, repr(c.rho), repr(c.p_value), c.n, c.method])
        atomic_write_text(out / "correlations.csv", buf.getvalue())
        written.append(out / "correlations.csv")
    return written
