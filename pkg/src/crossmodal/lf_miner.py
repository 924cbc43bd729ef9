"""Labeling functions and their automatic mining from a labeled dev set.

Value-set LFs fire when every token of the set is present in one
multivalent categorical feature. Mining runs level-wise: a value set is
extended only while it stays frequent (enough correctly-labeled fires and
enough recall), both of which can only shrink as the set grows. Precision is
not anti-monotone, so it gates emission but never pruning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core_types import ABSTAIN, NEGATIVE, POSITIVE, DataPoint, Dataset, FeatureKind

VALUE_MATCH = "value_match"
NUMERIC_THRESHOLD = "numeric_threshold"
PROPAGATION_THRESHOLD = "propagation_threshold"
LF_KINDS = (VALUE_MATCH, NUMERIC_THRESHOLD, PROPAGATION_THRESHOLD)
PROPAGATION_FEATURE = "label_propagation"


class UndefinedMetricError(ValueError):
    """A metric's denominator is empty (e.g. recall with no gold points of a class)."""


class MissingScoresError(RuntimeError):
    """A propagation LF was applied before a score table was attached."""


@dataclass(frozen=True, eq=False)
class LabelingFunction:
    lf_id: str
    kind: str
    feature_id: str
    params: Mapping[str, Any]
    emit_label: int | None
    servable: bool = True
    scores: Mapping[str, float] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind == VALUE_MATCH:
            tokens = self.params.get("tokens")
            if not tokens or set(self.params) != {"tokens"}:
                raise ValueError(f"{self.lf_id}: value_match needs a non-empty 'tokens' set")
            object.__setattr__(self, "params", {"tokens": frozenset(tokens)})
        elif self.kind == NUMERIC_THRESHOLD:
            if set(self.params) != {"comparator", "threshold"}:
                raise ValueError(f"{self.lf_id}: numeric_threshold needs comparator and threshold")
            if self.params["comparator"] not in (">=", "<="):
                raise ValueError(f"{self.lf_id}: comparator must be '>=' or '<='")
            if not math.isfinite(self.params["threshold"]):
                raise ValueError(f"{self.lf_id}: threshold must be finite")
        elif self.kind == PROPAGATION_THRESHOLD:
            if set(self.params) != {"theta_pos", "theta_neg"}:
                raise ValueError(f"{self.lf_id}: propagation LF needs theta_pos and theta_neg")
            if self.params["theta_pos"] < self.params["theta_neg"]:
                raise ValueError(f"{self.lf_id}: theta_pos must be >= theta_neg")
        else:
            raise ValueError(f"unknown LF kind {self.kind!r}")
        if self.kind != PROPAGATION_THRESHOLD and self.emit_label not in (POSITIVE, NEGATIVE):
            raise ValueError(f"{self.lf_id}: emit_label must be +1 or -1")

    def key(self) -> tuple:
        """Identity used for deduplication and deterministic ordering."""
        if self.kind == VALUE_MATCH:
            p: tuple = tuple(sorted(self.params["tokens"]))
        elif self.kind == NUMERIC_THRESHOLD:
            p = (self.params["comparator"], float(self.params["threshold"]))
        else:
            p = (float(self.params["theta_pos"]), float(self.params["theta_neg"]))
        return (self.feature_id, self.kind, p, self.emit_label or 0)

    def with_scores(self, scores: Mapping[str, float]) -> "LabelingFunction":
        return LabelingFunction(self.lf_id, self.kind, self.feature_id, dict(self.params),
                                self.emit_label, self.servable, scores)


@dataclass(frozen=True)
class LFStats:
    precision: float
    recall: float
    coverage: float
    n_fired: int
    n_correct: int = 0
    degenerate: bool = False

    @property
    def f1(self) -> float:
        if self.precision + self.recall == 0:
            return 0.0
        return 2 * self.precision * self.recall / (self.precision + self.recall)

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "coverage": self.coverage,
            "n_fired": self.n_fired,
            "n_correct": self.n_correct,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class MinerConfig:
    min_precision: float = 0.8
    min_recall: float = 0.05
    max_order: int = 1
    min_support: int = 5
    mine_negatives: bool = True
    numeric_split_candidates: int = 32

    def __post_init__(self) -> None:
        for name in ("min_precision", "min_recall"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if self.numeric_split_candidates < 1:
            raise ValueError("numeric_split_candidates must be >= 1")


def value_match(feature_id: str, tokens: Iterable[str], emit_label: int) -> LabelingFunction:
    toks = frozenset(tokens)
    sign = "+" if emit_label == POSITIVE else "-"
    return LabelingFunction(
        f"{feature_id}:has:{'&'.join(sorted(toks))}->{sign}", VALUE_MATCH, feature_id,
        {"tokens": toks}, emit_label,
    )


def numeric_threshold(feature_id: str, comparator: str, threshold: float,
                      emit_label: int) -> LabelingFunction:
    sign = "+" if emit_label == POSITIVE else "-"
    op = "ge" if comparator == ">=" else "le"
    return LabelingFunction(
        f"{feature_id}:{op}:{float(threshold)!r}->{sign}", NUMERIC_THRESHOLD, feature_id,
        {"comparator": comparator, "threshold": float(threshold)}, emit_label,
    )


def apply_lf(lf: LabelingFunction, point: DataPoint) -> int:
    """Vote of ``lf`` on ``point``: +1, -1, or 0 (abstain)."""
    if lf.kind == PROPAGATION_THRESHOLD:
        if lf.scores is None:
            raise MissingScoresError(f"{lf.lf_id}: no propagation scores attached; run the propagate stage")
        score = lf.scores.get(point.id)
        if score is None:
            return ABSTAIN
        if score >= lf.params["theta_pos"]:
            return POSITIVE
        if score <= lf.params["theta_neg"]:
            return NEGATIVE
        return ABSTAIN
    value = point.features.get(lf.feature_id)
    if value is None:
        return ABSTAIN
    if lf.kind == VALUE_MATCH:
        return lf.emit_label if lf.params["tokens"] <= value else ABSTAIN
    threshold = lf.params["threshold"]
    hit = value >= threshold if lf.params["comparator"] == ">=" else value <= threshold
    return lf.emit_label if hit else ABSTAIN


def _stats_from_counts(n_fired: int, n_correct: int, n_class: int, n_total: int) -> LFStats:
    if n_class == 0:
        raise UndefinedMetricError("dev set has no gold points of the LF's class; recall undefined")
    degenerate = n_fired == 0
    precision = 1.0 if degenerate else n_correct / n_fired
    return LFStats(
        precision=precision,
        recall=n_correct / n_class,
        coverage=n_fired / n_total if n_total else 0.0,
        n_fired=n_fired,
        n_correct=n_correct,
        degenerate=degenerate,
    )


def evaluate_lf(lf: LabelingFunction, dev: Dataset) -> LFStats:
    """Precision, recall and coverage of ``lf`` against dev gold labels.

    Two-sided propagation LFs are scored on their positive votes' class
    for recall; precision counts both emitted classes.
    """
    gold = dev.gold()
    votes = np.asarray([apply_lf(lf, p) for p in dev.points], dtype=np.int64)
    fired = votes != ABSTAIN
    n_fired = int(fired.sum())
    n_correct = int(np.sum(fired & (votes == gold)))
    if lf.emit_label is not None:
        return _stats_from_counts(n_fired, n_correct, int(np.sum(gold == lf.emit_label)), len(gold))
    n_pos = int(np.sum(gold == POSITIVE))
    if n_pos == 0:
        raise UndefinedMetricError("dev set has no positive gold points; recall undefined")
    return LFStats(
        precision=1.0 if n_fired == 0 else n_correct / n_fired,
        recall=int(np.sum((votes == POSITIVE) & (gold == POSITIVE))) / n_pos,
        coverage=n_fired / len(gold),
        n_fired=n_fired,
        n_correct=n_correct,
        degenerate=n_fired == 0,
    )


# -- mining -------------------------------------------------------------------


class MiningError(ValueError):
    pass


def _passes(stats: LFStats, config: MinerConfig) -> bool:
    return (
        stats.n_fired > 0
        and stats.n_correct >= config.min_support
        and stats.precision >= config.min_precision
        and stats.recall >= config.min_recall
    )


def _frequent(n_correct: int, n_class: int, config: MinerConfig) -> bool:
    # anti-monotone part of the emission test; safe for pruning
    return n_correct >= config.min_support and n_correct / n_class >= config.min_recall


def _token_masks(dev: Dataset, feature_id: str) -> dict[str, np.ndarray]:
    n = len(dev)
    masks: dict[str, np.ndarray] = {}
    for i, p in enumerate(dev.points):
        value = p.features.get(feature_id)
        if value is None:
            continue
        for tok in value:
            m = masks.get(tok)
            if m is None:
                m = masks[tok] = np.zeros(n, dtype=bool)
            m[i] = True
    return masks


def _mine_value_sets(feature_id: str, masks: Mapping[str, np.ndarray], gold: np.ndarray,
                     emit: int, config: MinerConfig) -> list[tuple[LabelingFunction, LFStats]]:
    is_class = gold == emit
    n_class = int(is_class.sum())
    n = len(gold)
    out = []

    def score(itemset: frozenset[str], fired: np.ndarray) -> LFStats:
        return _stats_from_counts(int(fired.sum()), int(np.sum(fired & is_class)), n_class, n)

    level: dict[frozenset[str], np.ndarray] = {}
    for tok in sorted(masks):
        fired = masks[tok]
        if _frequent(int(np.sum(fired & is_class)), n_class, config):
            level[frozenset([tok])] = fired
    k = 1
    while level:
        for itemset in sorted(level, key=lambda s: sorted(s)):
            stats = score(itemset, level[itemset])
            if _passes(stats, config):
                out.append((value_match(feature_id, itemset, emit), stats))
        if k >= config.max_order:
            break
        keys = sorted(level, key=lambda s: sorted(s))
        candidates: dict[frozenset[str], np.ndarray] = {}
        for a, b in combinations(keys, 2):
            union = a | b
            if len(union) != k + 1 or union in candidates:
                continue
            if any(frozenset(sub) not in level for sub in combinations(sorted(union), k)):
                continue
            fired = level[a] & level[b]
            if _frequent(int(np.sum(fired & is_class)), n_class, config):
                candidates[union] = fired
        level = candidates
        k += 1
    return out


def _mine_numeric(feature_id: str, dev: Dataset, gold: np.ndarray, emits: Sequence[int],
                  config: MinerConfig) -> list[tuple[LabelingFunction, LFStats]]:
    values = np.full(len(dev), np.nan)
    for i, p in enumerate(dev.points):
        v = p.features.get(feature_id)
        if v is not None:
            values[i] = v
    present = ~np.isnan(values)
    if not present.any():
        return []
    c = config.numeric_split_candidates
    levels = np.arange(1, c + 1) / (c + 1)
    thresholds = np.unique(np.quantile(values[present], levels))
    out = []
    n = len(gold)
    for emit in emits:
        is_class = gold == emit
        n_class = int(is_class.sum())
        for comparator in (">=", "<="):
            for thr in thresholds:
                with np.errstate(invalid="ignore"):
                    fired = present & (values >= thr if comparator == ">=" else values <= thr)
                stats = _stats_from_counts(int(fired.sum()), int(np.sum(fired & is_class)), n_class, n)
                if _passes(stats, config):
                    out.append((numeric_threshold(feature_id, comparator, float(thr), emit), stats))
    return out


def _sort_key(item: tuple[LabelingFunction, LFStats]) -> tuple:
    lf, stats = item
    return (-stats.f1, lf.key())


def mine_lfs(dev: Dataset, config: MinerConfig) -> list[tuple[LabelingFunction, LFStats]]:
    """Mine single-feature LFs that clear the precision/recall/support gates on ``dev``.

    Positive LFs are mined first, then (optionally) negative ones. Output is
    deduplicated and sorted by descending dev F1, ties by feature and params.
    """
    gold = dev.gold()
    if not np.any(gold == POSITIVE) or not np.any(gold == NEGATIVE):
        raise MiningError("dev set must contain both positive and negative gold labels")
    emits = [POSITIVE, NEGATIVE] if config.mine_negatives else [POSITIVE]
    found: list[tuple[LabelingFunction, LFStats]] = []
    for fdef in dev.schema.features:
        if fdef.kind is FeatureKind.CATEGORICAL:
            masks = _token_masks(dev, fdef.feature_id)
            for emit in emits:
                found.extend(_mine_value_sets(fdef.feature_id, masks, gold, emit, config))
        elif fdef.kind is FeatureKind.NUMERIC:
            found.extend(_mine_numeric(fdef.feature_id, dev, gold, emits, config))
    unique: dict[tuple, tuple[LabelingFunction, LFStats]] = {}
    for item in found:
        unique.setdefault(item[0].key(), item)
    return sorted(unique.values(), key=_sort_key)


# -- serialization ------------------------------------------------------------


def lf_to_record(lf: LabelingFunction, stats: LFStats | None = None) -> dict[str, Any]:
    params = dict(lf.params)
    if lf.kind == VALUE_MATCH:
        params["tokens"] = sorted(params["tokens"])
    return {
        "lf_id": lf.lf_id,
        "kind": lf.kind,
        "feature_id": lf.feature_id,
        "params": params,
        "emit_label": lf.emit_label,
        "servable": lf.servable,
        "stats": None if stats is None else stats.to_dict(),
    }


def lf_from_record(rec: Mapping[str, Any]) -> tuple[LabelingFunction, LFStats | None]:
    lf = LabelingFunction(
        rec["lf_id"], rec["kind"], rec["feature_id"], dict(rec["params"]),
        rec.get("emit_label"), bool(rec.get("servable", True)),
    )
    stats = None
    if rec.get("stats") is not None:
        stats = LFStats(**rec["stats"])
    return lf, stats


def dump_lfs(items: Iterable[tuple[LabelingFunction, LFStats | None]]) -> str:
    return "".join(json.dumps(lf_to_record(lf, st), sort_keys=True) + "\n" for lf, st in items)


def load_lfs(text: str) -> list[tuple[LabelingFunction, LFStats | None]]:
    return [lf_from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
