"""Combining LF votes into probabilistic labels.

The generative model treats LFs as conditionally independent given the true
label. Abstention carries no class information; when LF ``j`` fires it is
correct with probability ``alpha_j``. Parameters are fitted by EM.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core_types import ABSTAIN, NEGATIVE, POSITIVE, Dataset
from .lf_miner import LabelingFunction, PROPAGATION_THRESHOLD, MissingScoresError, apply_lf


@dataclass(frozen=True)
class WeakLabelMatrix:
    values: np.ndarray  # (n_points, n_lfs) int8 in {-1, 0, +1}
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.int8)
        if v.ndim != 2 or v.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError("matrix shape does not match row/column ids")
        if not np.all(np.isin(v, (NEGATIVE, ABSTAIN, POSITIVE))):
            raise ValueError("entries must lie in {-1, 0, +1}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def columns(self, keep: Sequence[int]) -> "WeakLabelMatrix":
        keep = list(keep)
        return WeakLabelMatrix(self.values[:, keep], self.row_ids, tuple(self.col_ids[j] for j in keep))


def apply_lfs(lfs: Sequence[LabelingFunction], data: Dataset,
              scores: Mapping[str, float] | None = None) -> WeakLabelMatrix:
    """Vote matrix of ``lfs`` over ``data``; propagation LFs read ``scores`` unless already attached.

    A two-sided propagation LF is a pair of emitters and contributes two
    columns, ``<id>:+`` and ``<id>:-``, so each side gets its own accuracy.
    """
    cols: list[np.ndarray] = []
    col_ids: list[str] = []
    for lf in lfs:
        if lf.kind == PROPAGATION_THRESHOLD and lf.scores is None:
            if scores is None:
                raise MissingScoresError(f"{lf.lf_id} needs propagation scores")
            lf = lf.with_scores(scores)
        votes = np.fromiter((apply_lf(lf, p) for p in data.points), dtype=np.int8, count=len(data))
        if lf.emit_label is None:
            cols += [np.where(votes == POSITIVE, votes, 0), np.where(votes == NEGATIVE, votes, 0)]
            col_ids += [f"{lf.lf_id}:+", f"{lf.lf_id}:-"]
        else:
            cols.append(votes)
            col_ids.append(lf.lf_id)
    values = np.stack(cols, axis=1) if cols else np.zeros((len(data), 0), dtype=np.int8)
    return WeakLabelMatrix(values, tuple(data.ids), tuple(col_ids))


def column_accuracies(matrix: WeakLabelMatrix, gold: np.ndarray, default: float = 0.5,
                      laplace: float = 1.0) -> np.ndarray:
    """Per-column alpha matched to labeled data: ``r_own / (r_own + r_other)``.

    For a column voting ``c``, ``r_own`` is its firing rate on gold class
    ``c`` and ``r_other`` its rate on the other class. Under the model a vote's
    likelihood ratio is ``alpha / (1 - alpha)``, so this matches it; raw
    precision would instead fold the class prior into alpha. Columns are
    assumed one-sided (as :func:`apply_lfs` produces); silent ones get ``default``.
    """
    v = matrix.values
    y = np.asarray(gold)
    n_pos = int(np.sum(y == POSITIVE))
    n_neg = int(np.sum(y == NEGATIVE))
    is_pos = (y == POSITIVE)[:, None]
    is_neg = (y == NEGATIVE)[:, None]
    fired = (v != ABSTAIN).any(axis=0)
    out = np.full(v.shape[1], default, dtype=np.float64)
    for label, own, other, n_own, n_other in ((POSITIVE, is_pos, is_neg, n_pos, n_neg),
                                             (NEGATIVE, is_neg, is_pos, n_neg, n_pos)):
        votes = v == label
        cols = votes.any(axis=0) & fired
        # Laplace-smoothed firing rates on each gold class
        r_own = (np.sum(votes & own, axis=0) + laplace) / (n_own + 2 * laplace)
        r_other = (np.sum(votes & other, axis=0) + laplace) / (n_other + 2 * laplace)
        out = np.where(cols, r_own / (r_own + r_other), out)
    return out


def majority_vote(matrix: WeakLabelMatrix) -> np.ndarray:
    total = matrix.values.sum(axis=1, dtype=np.int64)
    return np.where(total > 0, 1.0, np.where(total < 0, 0.0, 0.5))


@dataclass(frozen=True)
class LabelModelConfig:
    pi_init: float = 0.5
    alpha_init: float | tuple[float, ...] = 0.7
    max_em_iters: int = 100
    em_tol: float = 1e-6
    clamp: tuple[float, float] = (0.01, 0.99)
    fit_alpha: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.clamp
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("clamp must satisfy 0 < lo < hi < 1")
        alphas = np.atleast_1d(np.asarray(self.alpha_init, dtype=np.float64))
        if not 0.0 < self.pi_init < 1.0 or np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
            raise ValueError("pi_init and alpha_init must lie in (0, 1)")


@dataclass(frozen=True)
class LabelModelParams:
    alpha: np.ndarray
    beta: np.ndarray
    pi: float
    lf_ids: tuple[str, ...] = ()
    log_likelihood: tuple[float, ...] = field(default=(), repr=False)
    iterations: int = 0
    flipped: bool = False

    def records(self) -> list[dict[str, Any]]:
        return [
            {"lf_id": lid, "alpha": float(a), "beta": float(b), "pi": float(self.pi),
             "below_chance": bool(a < 0.5)}
            for lid, a, b in zip(self.lf_ids, self.alpha, self.beta)
        ]


class LabelModelError(ValueError):
    pass


def _log_evidence(values: np.ndarray, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row log P(votes | y=+1) and log P(votes | y=-1), dropping beta terms."""
    pos = (values == POSITIVE).astype(np.float64)
    neg = (values == NEGATIVE).astype(np.float64)
    la, lna = np.log(alpha), np.log1p(-alpha)
    return pos @ la + neg @ lna, neg @ la + pos @ lna


def _posterior(values: np.ndarray, alpha: np.ndarray, pi: float) -> np.ndarray:
    lp, ln = _log_evidence(values, alpha)
    a = np.log(pi) + lp
    b = np.log1p(-pi) + ln
    return 1.0 / (1.0 + np.exp(b - a))


def log_likelihood(values: np.ndarray, alpha: np.ndarray, beta: np.ndarray, pi: float) -> float:
    """Observed-data log-likelihood of the vote matrix, including firing propensities."""
    fired = values != ABSTAIN
    lp, ln = _log_evidence(values, alpha)
    prop = fired @ np.log(beta) + (~fired) @ np.log1p(-np.minimum(beta, 1 - 1e-12))
    return float(np.sum(np.logaddexp(np.log(pi) + lp, np.log1p(-pi) + ln) + prop))


def fit_label_model(matrix: WeakLabelMatrix, config: LabelModelConfig = LabelModelConfig()) -> LabelModelParams:
    """Fit per-LF accuracies and the class prior by EM, then align with majority vote.

    ``config.alpha_init`` may be one value for every LF or one value per column.
    With ``fit_alpha=False`` the accuracies stay at their initial values and
    only the class prior is re-estimated.
    """
    L = matrix.values
    n, m = L.shape
    if m < 1:
        raise LabelModelError("label model needs at least one LF")
    fired = L != ABSTAIN
    if not fired.any():
        raise LabelModelError("every entry abstains; nothing to fit")
    lo, hi = config.clamp
    n_fired = fired.sum(axis=0).astype(np.float64)
    beta = np.clip(n_fired / n, lo, hi)
    alpha = np.broadcast_to(np.asarray(config.alpha_init, dtype=np.float64), (m,)).copy()
    alpha = np.clip(alpha, lo, hi)
    pi = config.pi_init
    pos = (L == POSITIVE).astype(np.float64)
    neg = (L == NEGATIVE).astype(np.float64)
    trace = [log_likelihood(L, alpha, beta, pi)]
    it = 0
    for it in range(1, config.max_em_iters + 1):
        p = _posterior(L, alpha, pi)
        agree = p @ pos + (1.0 - p) @ neg
        with np.errstate(invalid="ignore", divide="ignore"):
            new_alpha = np.where(n_fired > 0, agree / n_fired, alpha)
        new_alpha = np.clip(new_alpha, lo, hi) if config.fit_alpha else alpha
        new_pi = float(np.clip(p.mean(), lo, hi))
        change = max(float(np.max(np.abs(new_alpha - alpha))), abs(new_pi - pi))
        alpha, pi = new_alpha, new_pi
        trace.append(log_likelihood(L, alpha, beta, pi))
        if change < config.em_tol:
            break

    flipped = False
    mv = majority_vote(matrix)
    decided = mv != 0.5
    if decided.any():
        p = _posterior(L, alpha, pi)
        agreement = np.mean((p[decided] > 0.5) == (mv[decided] > 0.5))
        if agreement < 0.5:
            alpha, pi, flipped = 1.0 - alpha, 1.0 - pi, True
    return LabelModelParams(alpha, beta, pi, tuple(matrix.col_ids), tuple(trace), it, flipped)


def predict_prob_labels(params: LabelModelParams, matrix: WeakLabelMatrix) -> np.ndarray:
    """P(y=+1 | votes) per row; all-abstain rows get the prior."""
    if matrix.shape[1] != len(params.alpha):
        raise ValueError(f"matrix has {matrix.shape[1]} columns, params describe {len(params.alpha)} LFs")
    return _posterior(matrix.values, np.asarray(params.alpha), params.pi)


def dump_prob_labels(ids: Sequence[str], probs: np.ndarray) -> str:
    return "".join(json.dumps({"id": pid, "p": float(p)}) + "\n" for pid, p in zip(ids, probs))


def load_prob_labels(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = float(rec["p"])
    return out


def dump_params(params: LabelModelParams) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in params.records())
