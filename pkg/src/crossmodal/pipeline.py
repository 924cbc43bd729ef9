"""In-memory composition of the stages: split, mine, propagate, weak-label, train, evaluate.

The CLI runs the same functions stage by stage through files; the end-to-end
tests call :func:`run_pipeline` directly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .core_types import Dataset
from .label_graph import (
    GraphConfig,
    PropagationScores,
    Thresholds,
    as_lf,
    build_graph,
    fit_norm_stats,
    propagate,
    seeds_from,
    tune_thresholds,
)
from .label_model import (
    LabelModelConfig,
    WeakLabelMatrix,
    apply_lfs,
    column_accuracies,
    fit_label_model,
    predict_prob_labels,
)
from .lf_miner import LabelingFunction, LFStats, MinerConfig, mine_lfs
from .metrics import auprc
from .synthbench import EMBEDDING_SET_TAG, SynthConfig, generate
from .trainers import (
    FusionModel,
    TrainConfig,
    gold_targets,
    train_devise,
    train_early_fusion,
    train_intermediate_fusion,
)

log = logging.getLogger(__name__)

STRATEGIES = ("early", "intermediate", "devise")


@dataclass(frozen=True)
class SplitConfig:
    dev_fraction: float = 0.2
    max_seed_points: int | None = 2000
    max_dev_graph_points: int | None = 2000
    balance_seeds: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must lie in (0, 1)")


def _from_dict(cls, d: Mapping[str, Any] | None):
    if d is None:
        return cls()
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kwargs = dict(d)
    if cls is LabelModelConfig and "clamp" in kwargs:
        kwargs["clamp"] = tuple(kwargs["clamp"])
    if cls is GraphConfig and kwargs.get("feature_subset") is not None:
        kwargs["feature_subset"] = tuple(kwargs["feature_subset"])
    return cls(**kwargs)


@dataclass(frozen=True)
class PipelineSettings:
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    miner: MinerConfig = field(default_factory=lambda: MinerConfig(min_precision=0.97, min_recall=0.05))
    graph: GraphConfig = field(default_factory=GraphConfig)
    label_model: LabelModelConfig = field(default_factory=lambda: LabelModelConfig(clamp=(0.001, 0.999)))
    train: TrainConfig = field(default_factory=TrainConfig)
    use_propagation: bool = True
    init_from_dev: bool = True
    strategies: tuple[str, ...] = STRATEGIES

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineSettings":
        return cls(
            synth=_from_dict(SynthConfig, d.get("synth")),
            split=_from_dict(SplitConfig, d.get("split")),
            miner=_from_dict(MinerConfig, d.get("miner")) if "miner" in d else cls().miner,
            graph=_from_dict(GraphConfig, d.get("graph")),
            label_model=_from_dict(LabelModelConfig, d.get("label_model")) if "label_model" in d else cls().label_model,
            train=_from_dict(TrainConfig, d.get("train")),
            use_propagation=bool(d.get("use_propagation", True)),
            init_from_dev=bool(d.get("init_from_dev", True)),
            strategies=tuple(d.get("strategies", STRATEGIES)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "synth": self.synth.to_dict(),
            "split": asdict(self.split),
            "miner": asdict(self.miner),
            "graph": asdict(self.graph),
            "label_model": asdict(self.label_model),
            "train": self.train.to_dict(),
            "use_propagation": self.use_propagation,
            "init_from_dev": self.init_from_dev,
            "strategies": list(self.strategies),
        }


def split_dev(labeled: Dataset, dev_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded partition of labeled existing-modality data into (dev, remainder)."""
    n = len(labeled)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_dev = int(round(dev_fraction * n))
    dev_idx = np.sort(order[:n_dev])
    rest_idx = np.sort(order[n_dev:])
    dev = labeled.with_split("dev", [labeled.points[i] for i in dev_idx])
    rest = labeled.with_split("train_labeled", [labeled.points[i] for i in rest_idx])
    return dev, rest


def cap(dataset: Dataset, limit: int | None) -> Dataset:
    if limit is None or len(dataset) <= limit:
        return dataset
    return dataset.with_split(dataset.split, dataset.points[:limit])


def seed_sample(labeled: Dataset, limit: int | None, balanced: bool) -> Dataset:
    """Seeds for propagation: the first ``limit`` points, or up to ``limit / 2`` of each class."""
    if not balanced:
        return cap(labeled, limit)
    gold = labeled.gold()
    pos = [p for p, y in zip(labeled.points, gold) if y == 1]
    neg = [p for p, y in zip(labeled.points, gold) if y != 1]
    half = len(labeled) if limit is None else limit // 2
    n = min(half, len(pos), len(neg))
    return labeled.with_split(labeled.split, sorted(pos[:n] + neg[:n], key=lambda p: p.id))


def shared_features(datasets: Sequence[Dataset]) -> tuple[str, ...]:
    """Schema features defined for every modality present in ``datasets``."""
    schema = datasets[0].schema
    modalities = set().union(*(ds.modalities() for ds in datasets))
    return tuple(f.feature_id for f in schema.features if modalities <= set(f.modalities))


@dataclass
class PropagationResult:
    scores: PropagationScores
    thresholds: Thresholds
    lf: LabelingFunction
    n_edges: int


def run_propagation(seeds: Dataset, dev: Dataset, unlabeled: Sequence[Dataset],
                    config: GraphConfig) -> PropagationResult:
    """Graph over seeds + dev + unlabeled points, propagate gold seeds, tune on dev.

    Without an explicit ``feature_subset`` the graph uses the features every
    modality shares; a one-modality feature would only link nodes within it.
    """
    node_sets = [seeds, dev, *unlabeled]
    if config.feature_subset is None:
        config = replace(config, feature_subset=shared_features(node_sets))
    norm = fit_norm_stats(node_sets)
    graph = build_graph(node_sets, config, norm)
    scores = propagate(graph, seeds_from(seeds), config)
    thresholds = tune_thresholds(scores, dev)
    lf = as_lf(scores, thresholds.theta_pos, thresholds.theta_neg)
    return PropagationResult(scores, thresholds, lf, graph.n_edges)


@dataclass
class WeakLabels:
    matrix: WeakLabelMatrix
    probs: np.ndarray
    params: Any


def weak_label(lfs: Sequence[LabelingFunction], data: Dataset, config: LabelModelConfig) -> WeakLabels:
    matrix = apply_lfs(lfs, data)
    params = fit_label_model(matrix, config)
    return WeakLabels(matrix, predict_prob_labels(params, matrix), params)


@dataclass
class PipelineResult:
    settings: PipelineSettings
    lfs: list[tuple[LabelingFunction, LFStats]]
    propagation: PropagationResult | None
    weak: WeakLabels
    models: dict[str, FusionModel]
    auprc: dict[str, float]
    data: dict[str, Dataset]

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "n_lfs": len(self.lfs),
            "auprc": dict(sorted(self.auprc.items())),
        }
        if self.propagation is not None:
            out["thresholds"] = self.propagation.thresholds.to_dict()
            out["propagation_iterations"] = self.propagation.scores.iterations_run
        return out


def train_models(settings: PipelineSettings, text: Dataset, image: Dataset, probs: np.ndarray,
                 gold_pool: Dataset | None = None) -> dict[str, FusionModel]:
    """Text-transfer, weak-supervision image, the fusion strategies and the embedding baseline."""
    schema = text.schema
    cfg = settings.train
    text_part = (text, gold_targets(text))
    image_part = (image, np.asarray(probs, dtype=np.float64))
    models: dict[str, FusionModel] = {
        "text": train_early_fusion([text_part], schema, cfg),
        "ws_image": train_early_fusion([image_part], schema, cfg),
    }
    if "early" in settings.strategies:
        models["early"] = train_early_fusion([text_part, image_part], schema, cfg)
    if "intermediate" in settings.strategies:
        models["intermediate"] = train_intermediate_fusion([text_part, image_part], schema, cfg)
    if "devise" in settings.strategies:
        models["devise"] = train_devise([text_part], image_part, schema, cfg)
    if gold_pool is not None:
        emb = schema.ids_in_sets([EMBEDDING_SET_TAG])
        if emb:
            models["baseline_embedding"] = train_early_fusion(
                [(gold_pool, gold_targets(gold_pool))], schema, cfg, feature_subset=emb)
    return models


def evaluate_models(models: Mapping[str, FusionModel], test: Dataset) -> dict[str, float]:
    y = test.gold()
    return {name: auprc(m.score_points(test.points), y) for name, m in models.items()}


def train_all(settings: PipelineSettings, text: Dataset, image: Dataset, probs: np.ndarray,
              test: Dataset, gold_pool: Dataset | None = None) -> tuple[dict[str, FusionModel], dict[str, float]]:
    models = train_models(settings, text, image, probs, gold_pool)
    return models, evaluate_models(models, test)


def dev_initialized(config: LabelModelConfig, lfs: Sequence[LabelingFunction], dev: Dataset) -> LabelModelConfig:
    """Hold each vote column's accuracy at its dev estimate; start the prior at the dev positive rate.

    With one-sided LFs and a rare positive class the accuracy-only model's
    likelihood is maximized by treating every positive vote as an error, so
    fitted accuracies collapse; dev estimates do not.
    """
    lo, hi = config.clamp
    gold = dev.gold()
    alpha = np.clip(column_accuracies(apply_lfs(lfs, dev), gold), lo, hi)
    pi = float(np.clip(np.mean(gold == 1), lo, hi))
    return replace(config, alpha_init=tuple(float(a) for a in alpha), pi_init=pi, fit_alpha=False)


def weak_supervision(settings: PipelineSettings, data: Mapping[str, Dataset]
                     ) -> tuple[list[tuple[LabelingFunction, LFStats]], PropagationResult | None, WeakLabels]:
    """Mine, optionally propagate, and weak-label ``image_unlabeled``."""
    seed = settings.synth.seed
    dev, rest = split_dev(data["text_labeled"], settings.split.dev_fraction, seed)
    lfs = mine_lfs(dev, settings.miner)
    lf_list = [lf for lf, _ in lfs]
    prop = None
    if settings.use_propagation:
        seeds = seed_sample(rest, settings.split.max_seed_points, settings.split.balance_seeds)
        graph_dev = cap(dev, settings.split.max_dev_graph_points)
        prop = run_propagation(seeds, graph_dev, [data["image_unlabeled"]], settings.graph)
        lf_list.append(prop.lf)
    if not lf_list:
        raise RuntimeError("no labeling functions survived mining")
    lm_config = settings.label_model
    if settings.init_from_dev:
        lm_config = dev_initialized(lm_config, lf_list, dev)
    return lfs, prop, weak_label(lf_list, data["image_unlabeled"], lm_config)


def run_pipeline(settings: PipelineSettings, data: Mapping[str, Dataset] | None = None) -> PipelineResult:
    data = dict(data) if data is not None else generate(settings.synth)
    lfs, prop, weak = weak_supervision(settings, data)
    models, scores = train_all(settings, data["text_labeled"], data["image_unlabeled"], weak.probs,
                               data["image_test"], data.get("image_gold_pool"))
    return PipelineResult(settings, lfs, prop, weak, models, scores, data)
