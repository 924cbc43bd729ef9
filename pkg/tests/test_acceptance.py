"""Acceptance gate: one test per numbered criterion, each under its runtime budget.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints
one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from crossmodal.cli import main as cli_main
from crossmodal.core_types import NEGATIVE, POSITIVE, FeatureDef, FeatureKind, FeatureSchema
from crossmodal.label_graph import GraphConfig, NormStats, compute_weight, graph_from_edges, propagate
from crossmodal.label_model import LabelModelConfig, WeakLabelMatrix, fit_label_model
from crossmodal.lf_miner import MinerConfig, mine_lfs
from crossmodal.metrics import auprc, weak_label_prf
from crossmodal.pipeline import PipelineSettings, split_dev, weak_supervision
from crossmodal.synthbench import SynthConfig, generate, latent_labels
from crossmodal.trainers import (
    TrainConfig,
    gold_targets,
    init_params,
    loss_and_grads,
    objective,
    train_devise,
    train_on_parts,
)

from conftest import SEEDS


# -- 1 -------------------------------------------------------------------------------


def _weight_schema() -> FeatureSchema:
    both = frozenset({"text", "image"})
    return FeatureSchema((
        FeatureDef("profanity", "profanity", FeatureKind.CATEGORICAL, both),
        FeatureDef("setting", "setting", FeatureKind.CATEGORICAL, both),
        FeatureDef("topics", "topics", FeatureKind.CATEGORICAL, both),
        FeatureDef("length", "length", FeatureKind.NUMERIC, both),
        FeatureDef("emb", "emb", FeatureKind.EMBEDDING, both, embedding_dim=4),
    ))


def _random_map(rng: np.random.Generator) -> dict:
    out: dict = {}
    for fid, vocab in (("profanity", ["True", "False"]), ("setting", ["outdoor", "indoor", "studio"]),
                       ("topics", [f"t{i}" for i in range(8)])):
        if rng.random() < 0.8:
            k = int(rng.integers(1, len(vocab) + 1))
            out[fid] = frozenset(rng.choice(vocab, size=k, replace=False).tolist())
    if rng.random() < 0.8:
        out["length"] = float(rng.uniform(-5, 15))
    if rng.random() < 0.8:
        out["emb"] = rng.normal(size=4)
    return out


@pytest.mark.criterion(1, 1.0)
def test_criterion_01_weight_example_symmetry_bounds(criterion):
    schema = _weight_schema()
    stats = NormStats({"length": (0.0, 10.0)}, {"emb": 4.0})
    rng = np.random.default_rng(1)
    pairs = [(_random_map(rng), _random_map(rng)) for _ in range(10_000)]
    with criterion.timed():
        example = compute_weight({"profanity": frozenset({"True"}), "setting": frozenset({"outdoor"})},
                                 {"profanity": frozenset({"False"}), "setting": frozenset({"outdoor"})},
                                 schema, stats)
        asym = bounds = 0
        for a, b in pairs:
            w_ab = compute_weight(a, b, schema, stats)
            w_ba = compute_weight(b, a, schema, stats)
            asym += w_ab != w_ba
            bounds += not (0.0 <= w_ab <= len(set(a) & set(b)))
    criterion.note(f"example weight {example!r}; asymmetric {asym}; out of bounds {bounds}")
    assert example == 1.0
    assert asym == 0
    assert bounds == 0


# -- 2 -------------------------------------------------------------------------------


def _oracle_lfs(dev, config: MinerConfig) -> dict[tuple, tuple]:
    """Every value set of size <= max_order, per categorical feature, filtered by the gates."""
    gold = dev.gold()
    out = {}
    emits = [POSITIVE, NEGATIVE] if config.mine_negatives else [POSITIVE]
    for fdef in dev.schema.features:
        if fdef.kind is not FeatureKind.CATEGORICAL:
            continue
        fid = fdef.feature_id
        vocab = sorted({t for p in dev.points for t in p.features.get(fid, ())})
        for size in range(1, config.max_order + 1):
            for combo in itertools.combinations(vocab, size):
                items = frozenset(combo)
                fired = np.array([items <= p.features.get(fid, frozenset()) for p in dev.points])
                for emit in emits:
                    n_class = int(np.sum(gold == emit))
                    n_fired = int(fired.sum())
                    n_correct = int(np.sum(fired & (gold == emit)))
                    if n_fired == 0 or n_correct < config.min_support:
                        continue
                    precision, recall = n_correct / n_fired, n_correct / n_class
                    if precision >= config.min_precision and recall >= config.min_recall:
                        out[(fid, tuple(sorted(items)), emit)] = (n_fired, n_correct)
    return out


@pytest.mark.criterion(2, 30.0)
def test_criterion_02_miner_matches_exhaustive_oracle(criterion):
    rng = np.random.default_rng(2)
    mismatches = 0
    total = 0
    for trial in range(50):
        cfg = SynthConfig(
            seed=1000 + trial, n_text=int(rng.integers(200, 501)), n_image_unlabeled=0, n_image_test=0,
            n_image_gold_pool=0, positive_rate=float(rng.uniform(0.1, 0.5)), n_shared_categorical=4,
            n_noise_categorical=1, n_nonservable_categorical=1, vocab_size=12, n_rare_tokens=4,
            n_image_only_embedding_dims=0, signal_strength=float(rng.uniform(0.3, 0.9)),
            background_rate=float(rng.uniform(0.3, 0.9)), rare_signal_strength=float(rng.uniform(0.2, 0.8)),
        )
        dev, _ = split_dev(generate(cfg)["text_labeled"], 0.99, cfg.seed)
        miner = MinerConfig(min_precision=float(rng.uniform(0.3, 0.95)), min_recall=float(rng.uniform(0.02, 0.3)),
                            max_order=int(rng.integers(1, 3)), min_support=int(rng.integers(1, 6)))
        with criterion.timed():
            mined = mine_lfs(dev, miner)
            got = {(lf.feature_id, tuple(sorted(lf.params["tokens"])), lf.emit_label): (st.n_fired, st.n_correct)
                   for lf, st in mined}
        want = _oracle_lfs(dev, miner)
        total += len(want)
        mismatches += got != want
    criterion.note(f"{50 - mismatches}/50 dev sets set-equal; {total} oracle LFs")
    assert mismatches == 0


# -- 3 -------------------------------------------------------------------------------


def _harmonic_oracle(W: np.ndarray, seeds: dict[int, float]) -> np.ndarray:
    """Direct solve of the clamped system; seedless components keep 0.5."""
    n = W.shape[0]
    s = np.full(n, 0.5)
    lab = np.array(sorted(seeds))
    for i in lab:
        s[i] = seeds[i]
    # components reachable from a seed are solved; the rest stay at 0.5
    reach = np.zeros(n, dtype=bool)
    stack = list(lab)
    reach[lab] = True
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(W[i] > 0):
            if not reach[j]:
                reach[j] = True
                stack.append(j)
    free = np.array([i for i in range(n) if reach[i] and i not in seeds], dtype=int)
    if len(free):
        L = np.diag(W[free].sum(axis=1)) - W[np.ix_(free, free)]
        s[free] = np.linalg.solve(L, W[np.ix_(free, lab)] @ s[lab])
    return s


@pytest.mark.criterion(3, 10.0)
def test_criterion_03_propagation_matches_harmonic_solve(criterion):
    rng = np.random.default_rng(3)
    cfg = GraphConfig(tol=1e-12, max_iters=200_000)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        mask = np.triu(rng.random((n, n)) < rng.uniform(0.2, 0.8), k=1)
        W = np.where(mask, rng.uniform(0.05, 3.0, (n, n)), 0.0)
        W = W + W.T
        k = int(rng.integers(1, n + 1))
        chosen = rng.choice(n, size=k, replace=False)
        seeds = {int(i): float(rng.integers(0, 2)) for i in chosen}
        nodes = [(f"n{i:02d}", "text") for i in range(n)]
        edges = [(nodes[i][0], nodes[j][0], W[i, j]) for i in range(n) for j in range(i + 1, n) if W[i, j] > 0]
        graph = graph_from_edges(nodes, edges)
        with criterion.timed():
            res = propagate(graph, {nodes[i][0]: v for i, v in seeds.items()}, cfg)
        got = np.array([res.scores[pid] for pid, _ in nodes])
        worst = max(worst, float(np.max(np.abs(got - _harmonic_oracle(W, seeds)))))
    path = graph_from_edges([("a", "text"), ("b", "text"), ("c", "text")], [("a", "b", 1.0), ("b", "c", 1.0)])
    with criterion.timed():
        middle = propagate(path, {"a": 1.0, "c": 0.0}, GraphConfig()).scores["b"]
    criterion.note(f"max |iterative - direct| {worst:.2e}; path middle {middle!r}")
    assert worst < 1e-5
    assert abs(middle - 0.5) <= 1e-6


# -- 4 -------------------------------------------------------------------------------


def _sample_votes(rng, alpha, beta, pi, n) -> tuple[np.ndarray, np.ndarray]:
    y = np.where(rng.random(n) < pi, 1, -1)
    fires = rng.random((n, len(alpha))) < beta
    correct = rng.random((n, len(alpha))) < alpha
    votes = np.where(fires, np.where(correct, y[:, None], -y[:, None]), 0)
    return votes.astype(np.int8), y


@pytest.mark.criterion(4, 60.0)
def test_criterion_04_label_model_recovers_accuracies(criterion):
    alpha = np.array([0.9, 0.7, 0.6])
    beta = np.array([0.8, 0.5, 0.9])
    good = 0
    monotone = True
    for trial in range(20):
        votes, _ = _sample_votes(np.random.default_rng(400 + trial), alpha, beta, 0.3, 10_000)
        m = WeakLabelMatrix(votes, tuple(f"r{i}" for i in range(len(votes))), ("a", "b", "c"))
        with criterion.timed():
            params = fit_label_model(m, LabelModelConfig())
        good += bool(np.all(np.abs(params.alpha - alpha) <= 0.05))
        monotone &= bool(np.all(np.diff(params.log_likelihood) >= -1e-9))
    criterion.note(f"{good}/20 trials within 0.05; log-likelihood monotone: {monotone}")
    assert good >= 18
    assert monotone


# -- 5 -------------------------------------------------------------------------------


def _numeric_grad(params, X, p, l2, h=1e-6):
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v, dtype=np.float64)
        flat = g.reshape(-1)
        for idx in range(v.size):
            plus = {kk: vv.copy() for kk, vv in params.items()}
            minus = {kk: vv.copy() for kk, vv in params.items()}
            plus[k].reshape(-1)[idx] += h
            minus[k].reshape(-1)[idx] -= h
            flat[idx] = (objective(plus, X, p, l2) - objective(minus, X, p, l2)) / (2 * h)
        out[k] = g
    return out


def _relative_error(a: dict, b: dict) -> float:
    da = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    db = np.concatenate([np.ravel(b[k]) for k in sorted(a)])
    return float(np.linalg.norm(da - db) / max(np.linalg.norm(da) + np.linalg.norm(db), 1e-12))


@pytest.mark.criterion(5, 30.0)
def test_criterion_05_gradients_match_finite_differences(criterion):
    rng = np.random.default_rng(5)
    worst = {"logreg": 0.0, "mlp": 0.0}
    for kind in worst:
        for _ in range(100):
            n, d, h = int(rng.integers(3, 12)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
            X = rng.normal(size=(n, d))
            p = rng.random(n)
            l2 = float(rng.uniform(0, 0.1))
            params = init_params(kind, d, TrainConfig(hidden_width=h, seed=int(rng.integers(1 << 30))))
            params = {k: np.asarray(rng.normal(scale=0.7, size=np.shape(v)), dtype=np.float64)
                      for k, v in params.items()}
            with criterion.timed():
                _, analytic = loss_and_grads(params, X, p, l2)
                numeric = _numeric_grad(params, X, p, l2)
            worst[kind] = max(worst[kind], _relative_error(analytic, numeric))
    criterion.note(f"max relative error logreg {worst['logreg']:.1e}, mlp {worst['mlp']:.1e}")
    assert worst["logreg"] < 1e-4
    assert worst["mlp"] < 1e-4


# -- 6 -------------------------------------------------------------------------------


def _brute_auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels == 1
    total, prev_r = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int(np.sum(pred & pos))
        r, p = tp / int(pos.sum()), tp / int(pred.sum())
        total += (r - prev_r) * p
        prev_r = r
    return total


@pytest.mark.criterion(6, 10.0)
def test_criterion_06_auprc_matches_brute_force(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 1001))
        labels = np.where(rng.random(n) < rng.uniform(0.05, 0.9), 1, -1)
        labels[rng.integers(n)] = 1
        # coarse scores force tie groups
        scores = rng.integers(0, int(rng.integers(2, 2 * n + 2)), size=n) / 7.0
        with criterion.timed():
            got = auprc(scores, labels)
        worst = max(worst, abs(got - _brute_auprc(scores, labels)))
    with criterion.timed():
        example = auprc([0.9, 0.8, 0.3], [1, -1, 1])
    criterion.note(f"max |auprc - brute force| {worst:.1e}; worked example {example!r}")
    assert worst <= 1e-12
    assert example == 5 / 6


# -- 7, 8 -------------------------------------------------------------------------------


@pytest.mark.criterion(7, 300.0)
def test_criterion_07_text_below_ws_image_below_early(criterion, default_runs):
    runs, elapsed = default_runs
    criterion.elapsed = elapsed
    med = {k: float(np.median([r[k] for r in runs])) for k in ("text", "ws_image", "early")}
    text_lt_ws = sum(r["text"] < r["ws_image"] for r in runs)
    ws_lt_early = sum(r["ws_image"] < r["early"] for r in runs)
    criterion.note("median text {text:.4f} < ws_image {ws_image:.4f} < early {early:.4f}".format(**med))
    criterion.note(f"per-seed wins {text_lt_ws}/5 and {ws_lt_early}/5")
    assert med["text"] < med["ws_image"] < med["early"]
    assert text_lt_ws >= 4 and ws_lt_early >= 4


@pytest.mark.criterion(8, 300.0)
def test_criterion_08_early_fusion_is_best_strategy(criterion, default_runs):
    runs, _ = default_runs  # same runs as criterion 7; runtime counted there
    med = {k: float(np.median([r[k] for r in runs])) for k in ("early", "intermediate", "devise")}
    criterion.note("median early {early:.4f}, intermediate {intermediate:.4f}, devise {devise:.4f}".format(**med))
    assert med["early"] >= med["intermediate"]
    assert med["early"] >= med["devise"]


# -- 9 -------------------------------------------------------------------------------


@pytest.mark.criterion(9, 180.0)
def test_criterion_09_propagation_lifts_weak_label_recall_and_f1(criterion):
    lifts = []
    with criterion.timed():
        for seed in SEEDS:
            synth = SynthConfig(seed=seed, signal_strength=0.3, n_image_test=0, n_image_gold_pool=0)
            data = generate(synth)
            y = latent_labels(synth, "image_unlabeled")
            with_prop = weak_supervision(PipelineSettings(synth=synth), data)[2]
            mined = weak_supervision(PipelineSettings(synth=synth, use_propagation=False), data)[2]
            a, b = weak_label_prf(with_prop.probs, y), weak_label_prf(mined.probs, y)
            lifts.append((a.recall, b.recall, a.f1 or 0.0, b.f1 or 0.0))
    r_prop, r_mined, f_prop, f_mined = (float(np.median(col)) for col in zip(*lifts))
    criterion.note(f"median recall {r_mined:.3f} -> {r_prop:.3f}; median F1 {f_mined:.3f} -> {f_prop:.3f}")
    assert r_prop > r_mined
    assert f_prop > f_mined


# -- 10 ------------------------------------------------------------------------------


def _digests(root: Path) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(10, 300.0)
def test_criterion_10_devise_freeze_and_run_all_determinism(criterion, tmp_path):
    synth = SynthConfig(seed=10, n_text=3000, n_image_unlabeled=2000, n_image_test=500, n_image_gold_pool=0)
    data = generate(synth)
    cfg = TrainConfig(epochs=5)
    text = data["text_labeled"]
    part = (text, gold_targets(text))
    image = (data["image_unlabeled"], np.full(len(data["image_unlabeled"]), 0.3))
    with criterion.timed():
        reference = train_on_parts([part], text.schema, cfg)
        devise = train_devise([part], image, text.schema, cfg)
    frozen = all(np.array_equal(reference.params[k], devise.members["A"].params[k])
                 and reference.params[k].dtype == devise.members["A"].params[k].dtype
                 for k in reference.params) and set(reference.params) == set(devise.members["A"].params)

    with criterion.timed():
        codes = [cli_main(["run-all", "--seed", "7", "--out", str(tmp_path / name)]) for name in ("a", "b")]
    da, db = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    criterion.note(f"A unchanged: {frozen}; exit codes {codes}; {len(da)} artifacts, identical: {da == db}")
    assert frozen
    assert codes == [0, 0]
    assert da == db
    assert set(manifest["artifacts"]) <= set(da)
    assert "reports/metrics.json" in da
