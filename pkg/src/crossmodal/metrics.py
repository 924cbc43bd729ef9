"""PR curves, AUPRC, weak-label quality, cross-over and factor analysis."""

from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .core_types import POSITIVE, DataPoint, Dataset
from .lf_miner import UndefinedMetricError
from .trainers import TrainConfig, gold_targets, train_early_fusion, train_on_parts


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype == bool:
        return y
    return y == POSITIVE


def _groups(scores, labels) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative true positives and predicted counts at the end of each tie group."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr_curve needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each tie group
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return np.cumsum(y)[ends], ends + 1, n_pos


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) after each group of tied scores, highest scores first.

    The curve starts at (0, precision of the first group).
    """
    tp, n_pred, n_pos = _groups(scores, labels)
    recall = tp / n_pos
    precision = tp / n_pred
    curve = [(0.0, float(precision[0]))]
    curve.extend(zip(recall.tolist(), precision.tolist()))
    return curve


def auprc(scores, labels) -> float:
    """Average-precision area: sum over tie groups of (R_k - R_{k-1}) * P_k.

    Summed in exact rational arithmetic and rounded once, so the result does
    not depend on accumulation order.
    """
    tp, n_pred, n_pos = _groups(scores, labels)
    gain = np.diff(tp, prepend=0)
    hit = gain > 0
    total = sum((Fraction(int(g) * int(t), int(m)) for g, t, m in zip(gain[hit], tp[hit], n_pred[hit])),
                Fraction(0))
    return float(total / n_pos)


@dataclass(frozen=True)
class PRF:
    precision: float | None
    recall: float | None
    f1: float | None
    coverage: float
    note: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "coverage": self.coverage, "note": self.note}


def weak_label_prf(prob_labels, gold, eps: float = 0.0, threshold: float = 0.5) -> PRF:
    """Positive-class P/R/F1 of hard labels derived from probabilistic labels.

    A point abstains when ``|p - threshold| <= eps`` (with ``eps = 0`` only
    ``p == threshold`` abstains); otherwise it is positive iff ``p > threshold``.
    ``gold`` is a Dataset or an array of +1/-1 labels aligned with ``prob_labels``.
    """
    p = np.asarray(prob_labels, dtype=np.float64)
    y = gold.gold() if isinstance(gold, Dataset) else np.asarray(gold)
    if p.shape != y.shape:
        raise ValueError("prob_labels and gold must align")
    is_pos = y == POSITIVE
    if not is_pos.any():
        raise UndefinedMetricError("no gold positives; recall undefined")
    abstain = np.abs(p - threshold) <= eps
    coverage = float(np.mean(~abstain)) if len(p) else 0.0
    if abstain.all():
        return PRF(None, None, None, coverage, "undefined: every point abstains")
    pred_pos = (~abstain) & (p > threshold)
    tp = int(np.sum(pred_pos & is_pos))
    n_pred = int(pred_pos.sum())
    recall = tp / int(is_pos.sum())
    if n_pred == 0:
        return PRF(None, recall, None, coverage, "undefined precision: no positive predictions")
    precision = tp / n_pred
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1, coverage)


@dataclass(frozen=True)
class MetricsReport:
    auprc: float
    pr_curve: list[tuple[float, float]]
    baseline: str | None = None
    relative_auprc: float | None = None
    prf: PRF | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "auprc": self.auprc,
            "pr_curve": [list(pt) for pt in self.pr_curve],
            "baseline": self.baseline,
            "relative_auprc": self.relative_auprc,
            "prf": None if self.prf is None else self.prf.to_dict(),
        }


def report(scores, labels, baseline: str | None = None, baseline_auprc: float | None = None) -> MetricsReport:
    curve = pr_curve(scores, labels)
    area = auprc(scores, labels)
    rel = None
    if baseline_auprc is not None and baseline_auprc > 0:
        rel = area / baseline_auprc
    return MetricsReport(area, curve, baseline, rel)


def curve_csv(curve: Sequence[tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["recall", "precision"])
    for r, p in curve:
        w.writerow([repr(float(r)), repr(float(p))])
    return buf.getvalue()


# -- cross-over ---------------------------------------------------------------


@dataclass(frozen=True)
class CrossOverResult:
    sample_sizes: list[int]
    supervised_auprc: list[float]
    cross_modal_auprc: float
    cross_over_n: int | None
    per_repeat: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_sizes": self.sample_sizes,
            "supervised_auprc": self.supervised_auprc,
            "cross_modal_auprc": self.cross_modal_auprc,
            "cross_over_n": self.cross_over_n,
            "per_repeat": self.per_repeat,
        }


def cross_over(cross_modal_auprc: float, gold_pool: Dataset, test: Dataset, sizes: Sequence[int],
               repeats: int, config: TrainConfig, seed: int = 0,
               feature_subset=None) -> CrossOverResult:
    """Smallest fully supervised sample size whose mean test AUPRC reaches ``cross_modal_auprc``."""
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if sizes and sizes[-1] > len(gold_pool):
        raise ValueError("sizes may not exceed the gold pool")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    y_pool = gold_targets(gold_pool)
    y_test = test.gold()
    rng = np.random.default_rng(seed)
    means, per_repeat = [], []
    for n in sizes:
        runs = []
        for r in range(repeats):
            idx = np.sort(rng.choice(len(gold_pool), n, replace=False))
            sub = gold_pool.with_split("train_labeled", [gold_pool.points[i] for i in idx])
            model = train_on_parts([(sub, y_pool[idx])], gold_pool.schema,
                                   replace(config, seed=config.seed + r), feature_subset)
            runs.append(auprc(model.score_points(test.points), y_test))
        per_repeat.append(runs)
        means.append(float(np.mean(runs)))
    hit = next((n for n, m in zip(sizes, means) if m >= cross_modal_auprc), None)
    return CrossOverResult(sizes, means, float(cross_modal_auprc), hit, per_repeat)


# -- factor analysis ----------------------------------------------------------


@dataclass(frozen=True)
class FactorRow:
    config: list[tuple[str, str]]
    auprc: float
    relative_auprc: float

    def to_dict(self) -> dict[str, Any]:
        return {"config": [list(c) for c in self.config], "auprc": self.auprc,
                "relative_auprc": self.relative_auprc}


def factor_analysis(feature_sets: Sequence[tuple[str, str]], config: TrainConfig,
                    parts: Sequence[tuple[Dataset, np.ndarray]], test: Dataset) -> list[FactorRow]:
    """Early-fusion AUPRC for each prefix of ``(modality, feature-set tag)`` additions.

    Training points of a modality keep only the feature sets added for that
    modality, and contribute nothing until one is added. Test points are read
    through every feature the model encodes. Ratios are relative to the first row.
    """
    if not feature_sets:
        raise ValueError("factor_analysis needs at least one (modality, feature set) entry")
    schema = test.schema
    known = {f.feature_set for f in schema.features}
    for _, tag in feature_sets:
        if tag not in known:
            raise ValueError(f"feature set {tag!r} not in schema")
    y_test = test.gold()
    rows: list[FactorRow] = []
    base = None
    for k in range(1, len(feature_sets) + 1):
        prefix = list(feature_sets[:k])
        allowed: dict[str, set[str]] = {}
        for modality, tag in prefix:
            feats = schema.ids_in_sets([tag]) & schema.ids_for_modality(modality)
            allowed.setdefault(modality, set()).update(feats)
        active = []
        for ds, y in parts:
            keep = [i for i, p in enumerate(ds.points) if allowed.get(p.modality)]
            if not keep:
                continue
            pts = [_restrict(ds.points[i], allowed[ds.points[i].modality]) for i in keep]
            active.append((ds.with_split(ds.split, pts), np.asarray(y)[keep]))
        used = set().union(*allowed.values())
        fm = train_early_fusion(active, schema, config, feature_subset=used)
        area = auprc(fm.score_points(test.points), y_test)
        base = area if base is None else base
        rows.append(FactorRow(prefix, area, area / base if base > 0 else float("nan")))
    return rows


def _restrict(point: DataPoint, features: set[str]) -> DataPoint:
    return DataPoint(point.id, point.modality,
                     {k: v for k, v in point.features.items() if k in features}, point.gold_label)
