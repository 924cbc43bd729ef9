"""Similarity graph over the shared feature space and label propagation.

Edge weights sum one similarity in [0, 1] per feature present in both
endpoints: Jaccard for categorical sets, ``1 - |a - b|`` on min-max scaled
numerics, and ``1 - ||a - b|| / d_max`` for embeddings.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist, pdist

from .core_types import NEGATIVE, POSITIVE, Dataset, FeatureKind, FeatureSchema, scale
from .lf_miner import PROPAGATION_FEATURE, PROPAGATION_THRESHOLD, LabelingFunction

log = logging.getLogger(__name__)

_BLOCK = 512


@dataclass(frozen=True)
class GraphConfig:
    k_neighbors: int = 10
    min_weight: float = 0.0
    tol: float = 1e-6
    max_iters: int = 1000
    feature_subset: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.min_weight < 0:
            raise ValueError("min_weight must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass(frozen=True)
class NormStats:
    numeric: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    embedding: Mapping[str, float] = field(default_factory=dict)


def fit_norm_stats(datasets: Sequence[Dataset], sample_size: int = 512, seed: int = 0) -> NormStats:
    """Numeric min/max and an embedding ``d_max`` estimate over the node population.

    ``d_max`` is the exact maximum pairwise distance within a seeded sample of
    at most ``sample_size`` vectors (exact when the population is smaller).
    """
    schema = datasets[0].schema
    numeric: dict[str, tuple[float, float]] = {}
    vectors: dict[str, list[np.ndarray]] = {}
    for ds in datasets:
        for p in ds.points:
            for fid, value in p.features.items():
                kind = schema[fid].kind
                if kind is FeatureKind.NUMERIC:
                    lo, hi = numeric.get(fid, (value, value))
                    numeric[fid] = (min(lo, value), max(hi, value))
                elif kind is FeatureKind.EMBEDDING:
                    vectors.setdefault(fid, []).append(value)
    rng = np.random.default_rng(seed)
    embedding = {}
    for fid in sorted(vectors):
        X = np.asarray(vectors[fid], dtype=np.float64)
        if len(X) > sample_size:
            X = X[np.sort(rng.choice(len(X), sample_size, replace=False))]
        embedding[fid] = float(pdist(X).max()) if len(X) > 1 else 0.0
    return NormStats(numeric, embedding)


def jaccard(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _embedding_similarity(dist: float | np.ndarray, d_max: float):
    if d_max <= 0:
        return np.where(np.asarray(dist) <= 0, 1.0, 0.0)
    return np.clip(1.0 - np.asarray(dist) / d_max, 0.0, 1.0)


def compute_weight(F_i: Mapping[str, Any], F_j: Mapping[str, Any], schema: FeatureSchema,
                   norm_stats: NormStats) -> float:
    """Edge weight between two feature maps; features missing on either side add 0."""
    w = 0.0
    # schema order keeps the float sum identical for (i, j) and (j, i)
    for fid in schema.ids:
        a, b = F_i.get(fid), F_j.get(fid)
        if a is None or b is None:
            continue
        kind = schema[fid].kind
        if kind is FeatureKind.CATEGORICAL:
            w += jaccard(frozenset(a), frozenset(b))
        elif kind is FeatureKind.NUMERIC:
            lo, hi = norm_stats.numeric.get(fid, (0.0, 0.0))
            w += 1.0 - abs(scale(a, lo, hi) - scale(b, lo, hi))
        else:
            dist = float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
            w += float(_embedding_similarity(dist, norm_stats.embedding.get(fid, 0.0)))
    return w


@dataclass
class SimilarityGraph:
    """Symmetric sparse graph; node ``i`` is ``nodes[i]`` = (point id, modality)."""

    nodes: list[tuple[str, str]]
    weights: sp.csr_matrix

    def __post_init__(self) -> None:
        self.index = {pid: i for i, (pid, _) in enumerate(self.nodes)}

    @property
    def n_edges(self) -> int:
        return int(sp.triu(self.weights, k=1).nnz)

    def edges(self) -> list[tuple[str, str, float]]:
        upper = sp.triu(self.weights, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return [
            (self.nodes[upper.row[k]][0], self.nodes[upper.col[k]][0], float(upper.data[k]))
            for k in order
        ]

    def weight(self, a: str, b: str) -> float:
        return float(self.weights[self.index[a], self.index[b]])


class _FeatureColumns:
    """Column-wise view of node features for blocked weight computation."""

    def __init__(self, points, schema: FeatureSchema, norm_stats: NormStats, feature_ids: Iterable[str]):
        self.parts: list[tuple[str, Any]] = []
        n = len(points)
        for fid in feature_ids:
            kind = schema[fid].kind
            present = np.array([fid in p.features for p in points], dtype=bool)
            if not present.any():
                continue
            if kind is FeatureKind.CATEGORICAL:
                vocab = sorted({t for p in points if fid in p.features for t in p.features[fid]})
                index = {t: i for i, t in enumerate(vocab)}
                if len(vocab) <= 64:
                    bits = np.zeros(n, dtype=np.uint64)
                    for r, p in enumerate(points):
                        for t in p.features.get(fid, ()):
                            bits[r] |= np.uint64(1) << np.uint64(index[t])
                    sizes = np.bitwise_count(bits).astype(np.uint16)
                    self.parts.append(("bits", (bits, sizes)))
                else:
                    rows, cols = [], []
                    for r, p in enumerate(points):
                        for t in p.features.get(fid, ()):
                            rows.append(r)
                            cols.append(index[t])
                    X = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, len(vocab)))
                    sizes = np.asarray(X.sum(axis=1)).ravel()
                    self.parts.append(("sparse", (X, sizes, present)))
            elif kind is FeatureKind.NUMERIC:
                lo, hi = norm_stats.numeric.get(fid, (0.0, 0.0))
                vals = np.array([scale(p.features[fid], lo, hi) if fid in p.features else 0.0
                                 for p in points])
                self.parts.append(("numeric", (vals, present)))
            else:
                dim = schema[fid].embedding_dim
                X = np.zeros((n, dim))
                for r, p in enumerate(points):
                    if fid in p.features:
                        X[r] = p.features[fid]
                self.parts.append(("embedding", (X, present, norm_stats.embedding.get(fid, 0.0))))

    def block(self, rows: slice) -> np.ndarray | None:
        out = None
        for kind, data in self.parts:
            if kind == "bits":
                # absent features have no bits, so their intersection is 0 as required
                bits, sizes = data
                code = np.bitwise_count(bits[rows, None] & bits[None, :]).astype(np.uint16)
                code *= _SIZE_STRIDE
                code += sizes[rows, None]
                code += sizes[None, :]
                sim = _JACCARD_TABLE[code]
            elif kind == "sparse":
                X, sizes, _ = data
                inter = (X[rows] @ X.T).toarray()
                union = sizes[rows, None] + sizes[None, :] - inter
                np.maximum(union, 1.0, out=union)
                sim = np.divide(inter, union, out=inter)
            elif kind == "numeric":
                vals, present = data
                sim = 1.0 - np.abs(vals[rows, None] - vals[None, :])
                if not present.all():
                    sim *= present[rows, None] & present[None, :]
            else:
                X, present, d_max = data
                sim = _embedding_similarity(cdist(X[rows], X), d_max)
                if not present.all():
                    sim *= present[rows, None] & present[None, :]
            if out is None:
                out = sim
            else:
                out += sim
        return out


# _JACCARD_TABLE[129 * |A & B| + |A| + |B|] for sets over a vocabulary of at most 64
_SIZE_STRIDE = 129
_JACCARD_TABLE = np.array([i / max(s - i, 1) if i <= s - i else 0.0
                           for i in range(65) for s in range(_SIZE_STRIDE)])


def _top_k(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest finite entries; ties go to the lower index."""
    valid = np.isfinite(row)
    n_valid = int(valid.sum())
    if n_valid <= k:
        return np.flatnonzero(valid)
    kth = -np.partition(-row[valid], k - 1)[k - 1]
    above = np.flatnonzero(row > kth)
    tied = np.flatnonzero(row == kth)[: k - len(above)]
    return np.concatenate([above, tied])


def _top_k_rows(W: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`_top_k` as a boolean mask; ``-inf`` entries are never chosen."""
    n = W.shape[1]
    if n <= k:
        return np.isfinite(W)
    kth = -np.partition(-W, k - 1, axis=1)[:, k - 1 : k]
    above = W > kth
    room = k - above.sum(axis=1, keepdims=True)
    tied = W == kth
    chosen = above | (tied & (np.cumsum(tied, axis=1) <= room))
    return chosen & np.isfinite(W)


def build_graph(datasets: Sequence[Dataset], config: GraphConfig, norm_stats: NormStats) -> SimilarityGraph:
    """Top-k similarity graph over every point of ``datasets``, symmetrized by union.

    Nodes are ordered by point id, so equal weights resolve to the
    lexicographically smaller neighbour.
    """
    schema = datasets[0].schema
    points = sorted((p for ds in datasets for p in ds.points), key=lambda p: p.id)
    n = len(points)
    if n < 2:
        raise ValueError("build_graph needs at least 2 nodes")
    ids = [p.id for p in points]
    if len(set(ids)) != n:
        raise ValueError("point ids must be unique across graph datasets")
    feature_ids = config.feature_subset if config.feature_subset is not None else schema.ids
    cols = _FeatureColumns(points, schema, norm_stats, feature_ids)

    src: list[np.ndarray] = []
    dst: list[np.ndarray] = []
    val: list[np.ndarray] = []
    for start in range(0, n, _BLOCK):
        rows = slice(start, min(start + _BLOCK, n))
        W = cols.block(rows)
        if W is None:
            W = np.zeros((rows.stop - rows.start, n))
        W = np.asarray(W, dtype=np.float64)
        W[np.arange(W.shape[0]), np.arange(rows.start, rows.stop)] = -np.inf
        chosen = _top_k_rows(W, config.k_neighbors)
        chosen &= (W > 0) & (W >= config.min_weight)
        r, c = np.nonzero(chosen)
        src.append(r + rows.start)
        dst.append(c)
        val.append(W[r, c])
    s = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
    d = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
    v = np.concatenate(val) if val else np.zeros(0)
    A = sp.coo_matrix((v, (s, d)), shape=(n, n)).tocsr()
    # union symmetrization; w_ij == w_ji so max keeps the shared value
    W = A.maximum(A.T).tocsr()
    W.setdiag(0)
    W.eliminate_zeros()
    W.sort_indices()
    return SimilarityGraph([(p.id, p.modality) for p in points], W)


def graph_from_edges(nodes: Sequence[tuple[str, str]], edges: Iterable[tuple[str, str, float]]) -> SimilarityGraph:
    """Assemble a graph from an explicit edge list (used for hand-built graphs and reloads)."""
    index = {pid: i for i, (pid, _) in enumerate(nodes)}
    rows, cols, vals = [], [], []
    for a, b, w in edges:
        if a == b:
            raise ValueError("self-edges are not allowed")
        if w < 0 or not np.isfinite(w):
            raise ValueError("edge weights must be finite and >= 0")
        i, j = index[a], index[b]
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    n = len(nodes)
    W = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    W.sum_duplicates()
    return SimilarityGraph(list(nodes), W)


# -- propagation ----------------------------------------------------------------


@dataclass
class PropagationScores:
    scores: dict[str, float]
    clamped: frozenset[str]
    iterations_run: int
    final_delta: float
    converged: bool

    def __getitem__(self, pid: str) -> float:
        return self.scores[pid]


def _sweep(W: sp.csr_matrix, deg: np.ndarray, s: np.ndarray, free: np.ndarray) -> np.ndarray:
    new = s.copy()
    ws = W @ s
    new[free] = ws[free] / deg[free]
    return new


def propagate(graph: SimilarityGraph, seeds: Mapping[str, float], config: GraphConfig) -> PropagationScores:
    """Iterate neighbour-weighted averaging with clamped seeds until the max change < tol.

    Sweeps are synchronous: each update reads only the previous sweep's scores.
    Unseeded nodes start at 0.5; isolated unseeded nodes keep 0.5.
    """
    if not seeds:
        raise ValueError("propagate needs at least one seed")
    n = len(graph.nodes)
    s = np.full(n, 0.5)
    clamped = np.zeros(n, dtype=bool)
    for pid, value in seeds.items():
        if pid not in graph.index:
            raise KeyError(f"seed {pid!r} is not a graph node")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"seed {pid!r} must lie in [0, 1]")
        i = graph.index[pid]
        s[i] = float(value)
        clamped[i] = True
    W = graph.weights
    deg = np.asarray(W.sum(axis=1)).ravel()
    free = (~clamped) & (deg > 0)
    iterations = 0
    delta = 0.0
    converged = True
    if free.any():
        converged = False
        while iterations < config.max_iters:
            new = _sweep(W, deg, s, free)
            delta = float(np.max(np.abs(new - s)))
            s = new
            iterations += 1
            if delta < config.tol:
                converged = True
                break
        if not converged:
            log.warning("propagation stopped at max_iters=%d with delta %.3g", config.max_iters, delta)
    scores = {pid: float(min(1.0, max(0.0, s[i]))) for i, (pid, _) in enumerate(graph.nodes)}
    return PropagationScores(
        scores, frozenset(pid for pid in seeds), iterations, delta, converged,
    )


def seeds_from(dataset: Dataset) -> dict[str, float]:
    """Gold labels as seed scores: +1 -> 1.0, -1 -> 0.0."""
    return {p.id: 1.0 if p.gold_label == POSITIVE else 0.0 for p in dataset.points}


# -- threshold tuning -------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    theta_pos: float
    theta_neg: float
    dev_f1: float
    warning: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"theta_pos": self.theta_pos, "theta_neg": self.theta_neg,
                "dev_f1": self.dev_f1, "warning": self.warning}


def _f1(tp: np.ndarray, emitted: np.ndarray, actual: int) -> np.ndarray:
    denom = emitted + actual
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2.0 * tp / denom, 0.0)


def tune_thresholds(scores: PropagationScores, dev: Dataset, chunk: int = 256) -> Thresholds:
    """Pick the two-sided band maximizing macro F1 of the induced labeler on ``dev``.

    The labeler emits +1 for score >= theta_pos, -1 for score <= theta_neg
    (strictly below theta_pos), and abstains otherwise. Candidate thresholds
    are the observed dev scores plus 0 and 1; ties prefer the wider band, then
    the lower theta_neg.
    """
    if len(dev) == 0:
        raise ValueError("dev set is empty")
    gold = dev.gold()
    n_pos = int(np.sum(gold == POSITIVE))
    n_neg = int(np.sum(gold == NEGATIVE))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("dev set must contain both classes")
    leaked = [p.id for p in dev.points if p.id in scores.clamped]
    if leaked:
        raise ValueError(f"dev points were used as seeds: {leaked[:5]}")
    missing = [p.id for p in dev.points if p.id not in scores.scores]
    if missing:
        raise ValueError(f"dev points have no propagation score: {missing[:5]}")
    s = np.asarray([scores.scores[p.id] for p in dev.points])
    pos_s = np.sort(s[gold == POSITIVE])
    neg_s = np.sort(s[gold == NEGATIVE])
    cand = np.unique(np.concatenate([s, [0.0, 1.0]]))

    # counts as functions of a threshold t
    p_ge = n_pos - np.searchsorted(pos_s, cand, side="left")
    n_ge = n_neg - np.searchsorted(neg_s, cand, side="left")
    n_le = np.searchsorted(neg_s, cand, side="right")
    p_le = np.searchsorted(pos_s, cand, side="right")
    n_lt = np.searchsorted(neg_s, cand, side="left")
    p_lt = np.searchsorted(pos_s, cand, side="left")
    f1_pos = _f1(p_ge, p_ge + n_ge, n_pos)
    f1_neg_le = _f1(n_le, n_le + p_le, n_neg)
    f1_neg_lt = _f1(n_lt, n_lt + p_lt, n_neg)

    m = len(cand)
    best = (-1.0, -1.0, 0.0, 0, 0)  # (f1, width, -theta_neg, i_neg, i_pos)
    for start in range(0, m, chunk):
        tn = np.arange(start, min(start + chunk, m))
        tp = np.arange(m)
        obj = 0.5 * (f1_pos[None, :] + f1_neg_le[tn, None])
        same = tn[:, None] == tp[None, :]
        obj = np.where(same, 0.5 * (f1_pos[None, :] + f1_neg_lt[tn, None]), obj)
        obj = np.where(tp[None, :] >= tn[:, None], obj, -np.inf)
        obj = np.round(obj, 12)
        top = obj.max()
        if top < best[0]:
            continue
        ri, ci = np.nonzero(obj == top)
        width = cand[ci] - cand[tn[ri]]
        order = np.lexsort((cand[tn[ri]], -width))
        k = order[0]
        cand_best = (float(top), float(width[k]), -float(cand[tn[ri[k]]]), int(tn[ri[k]]), int(ci[k]))
        if cand_best[:3] > best[:3]:
            best = cand_best
    f1, _, _, i_neg, i_pos = best
    theta_pos, theta_neg = float(cand[i_pos]), float(cand[i_neg])
    warning = None
    emits_pos = p_ge[i_pos] + n_ge[i_pos]
    emits_neg = (n_lt[i_neg] + p_lt[i_neg]) if i_neg == i_pos else (n_le[i_neg] + p_le[i_neg])
    if len(np.unique(s)) == 1:
        warning = "all dev scores are identical"
    elif emits_pos == 0 or emits_neg == 0:
        warning = "tuned labeler emits only one class on dev"
    return Thresholds(theta_pos, theta_neg, f1, warning)


def as_lf(scores: PropagationScores, theta_pos: float, theta_neg: float) -> LabelingFunction:
    """Two-sided, nonservable threshold LF over a propagation score table."""
    return LabelingFunction(
        f"{PROPAGATION_FEATURE}:band:{theta_neg!r}:{theta_pos!r}",
        PROPAGATION_THRESHOLD,
        PROPAGATION_FEATURE,
        {"theta_pos": float(theta_pos), "theta_neg": float(theta_neg)},
        None,
        servable=False,
        scores=scores.scores,
    )


# -- file formats -----------------------------------------------------------------


def dump_scores(scores: PropagationScores) -> str:
    return "".join(json.dumps({"id": pid, "score": scores.scores[pid]}) + "\n"
                   for pid in sorted(scores.scores))


def load_score_table(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = float(rec["score"])
    return out


def dump_edges(graph: SimilarityGraph) -> str:
    return "".join(json.dumps({"src": a, "dst": b, "weight": w}) + "\n" for a, b, w in graph.edges())
