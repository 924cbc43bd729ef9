"""Seeded synthetic text/image benchmark with a planted, recoverable signal.

Every shared categorical feature has a small set of positive-indicative and
negative-indicative tokens, a longer tail of rare positive tokens, and
class-independent background tokens. A point of class ``y`` carries one of
its class's indicative tokens with probability ``signal_strength`` and a
background token with probability ``background_rate``; positives also carry
a rare token with probability ``rare_signal_strength`` (negatives with
probability ``rare_negative_rate``). A feature that draws no token is
Missing. Noise features always carry one background token.

Rare tokens are individually too infrequent to mine, so only models trained
on gold labels or similarity propagation can exploit them. Each image token
is replaced by a random background token at rate ``modality_noise``, and
image points carry an extra embedding whose mean is shifted along a fixed
direction by ``+/- embedding_shift``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import numpy as np

from .core_types import (
    NEGATIVE,
    POSITIVE,
    DataPoint,
    Dataset,
    FeatureDef,
    FeatureKind,
    FeatureSchema,
)

TEXT = "text"
IMAGE = "image"
EMBEDDING_FEATURE = "img_emb"
SIGNAL_SET_TAGS = ("A", "B", "C", "D")
NOISE_SET_TAG = "N"
EMBEDDING_SET_TAG = "E"
N_INDICATIVE = 2


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_text: int = 20_000
    n_image_unlabeled: int = 10_000
    n_image_test: int = 5_000
    n_image_gold_pool: int = 10_000
    positive_rate: float = 0.05
    n_shared_categorical: int = 4
    vocab_size: int = 64
    n_image_only_embedding_dims: int = 8
    signal_strength: float = 0.4
    modality_noise: float = 0.3
    embedding_shift: float = 1.0
    n_noise_categorical: int = 1
    n_nonservable_categorical: int = 1
    n_rare_tokens: int = 16
    rare_signal_strength: float = 0.6
    background_rate: float = 0.3
    rare_negative_rate: float = 0.03

    def __post_init__(self) -> None:
        for name in (
            "n_text", "n_image_unlabeled", "n_image_test", "n_image_gold_pool",
            "n_shared_categorical", "n_image_only_embedding_dims",
            "n_noise_categorical", "n_nonservable_categorical", "n_rare_tokens",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if not 0.0 <= self.modality_noise <= 1.0:
            raise ValueError("modality_noise must lie in [0, 1]")
        for name in ("rare_signal_strength", "background_rate", "rare_negative_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.vocab_size < self.background_start + 1:
            raise ValueError(f"vocab_size must be >= {self.background_start + 1}")
        if self.embedding_shift < 0:
            raise ValueError("embedding_shift must be >= 0")

    @property
    def background_start(self) -> int:
        return 2 * N_INDICATIVE + self.n_rare_tokens

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synth config keys: {sorted(extra)}")
        return cls(**dict(d))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def token(feature_id: str, i: int) -> str:
    return f"{feature_id}_t{i:02d}"


def positive_tokens(feature_id: str) -> list[str]:
    return [token(feature_id, i) for i in range(N_INDICATIVE)]


def negative_tokens(feature_id: str) -> list[str]:
    return [token(feature_id, i) for i in range(N_INDICATIVE, 2 * N_INDICATIVE)]


def rare_tokens(feature_id: str, config: SynthConfig) -> list[str]:
    return [token(feature_id, i) for i in range(2 * N_INDICATIVE, config.background_start)]


def make_schema(config: SynthConfig) -> FeatureSchema:
    both = frozenset({TEXT, IMAGE})
    defs = []
    for k in range(config.n_shared_categorical):
        defs.append(FeatureDef(
            f"cat{k}", f"shared categorical {k}", FeatureKind.CATEGORICAL, both,
            feature_set=SIGNAL_SET_TAGS[k % len(SIGNAL_SET_TAGS)],
        ))
    for k in range(config.n_nonservable_categorical):
        defs.append(FeatureDef(
            f"ns{k}", f"nonservable categorical {k}", FeatureKind.CATEGORICAL, both,
            servable=False, feature_set="S",
        ))
    for k in range(config.n_noise_categorical):
        defs.append(FeatureDef(
            f"noise{k}", f"noise categorical {k}", FeatureKind.CATEGORICAL, both,
            feature_set=NOISE_SET_TAG,
        ))
    if config.n_image_only_embedding_dims:
        defs.append(FeatureDef(
            EMBEDDING_FEATURE, "image embedding", FeatureKind.EMBEDDING, frozenset({IMAGE}),
            embedding_dim=config.n_image_only_embedding_dims, feature_set=EMBEDDING_SET_TAG,
        ))
    return FeatureSchema(tuple(defs))


def _signal_features(schema: FeatureSchema) -> list[str]:
    return [f.feature_id for f in schema.features
            if f.kind is FeatureKind.CATEGORICAL and f.feature_set != NOISE_SET_TAG]


def _draw_feature(rng: np.random.Generator, n: int, ys: np.ndarray, config: SynthConfig,
                  signal: bool, corrupt: bool) -> list[list[int]]:
    """Token indices for one categorical feature across ``n`` points (possibly empty).

    Slot 0 holds the planted indicative token, slot 1 the rare token and
    slot 2 a background token; each slot is present independently.
    """
    lo = config.background_start
    pos = ys == POSITIVE
    toks = np.empty((n, 3), dtype=np.int64)
    present = np.empty((n, 3), dtype=bool)
    which = rng.integers(0, N_INDICATIVE, size=n)
    toks[:, 0] = np.where(pos, which, N_INDICATIVE + which)
    present[:, 0] = signal & (rng.random(n) < config.signal_strength)
    toks[:, 1] = 2 * N_INDICATIVE + rng.integers(0, max(config.n_rare_tokens, 1), size=n)
    rare_rate = np.where(pos, config.rare_signal_strength, config.rare_negative_rate)
    present[:, 1] = signal & (config.n_rare_tokens > 0) & (rng.random(n) < rare_rate)
    toks[:, 2] = rng.integers(lo, config.vocab_size, size=n)
    present[:, 2] = (rng.random(n) < config.background_rate) if signal else True
    if corrupt and config.modality_noise > 0:
        hits = rng.random((n, 3)) < config.modality_noise
        repl = rng.integers(lo, config.vocab_size, size=(n, 3))
        toks = np.where(hits, repl, toks)
    return [row[mask].tolist() for row, mask in zip(toks, present)]


def _draw_points(rng: np.random.Generator, schema: FeatureSchema, config: SynthConfig,
                 n: int, modality: str, prefix: str, labeled: bool,
                 direction: np.ndarray | None) -> tuple[DataPoint, ...]:
    signal = _signal_features(schema)
    noise = [f.feature_id for f in schema.features if f.feature_set == NOISE_SET_TAG]
    ys = np.where(rng.random(n) < config.positive_rate, POSITIVE, NEGATIVE)
    is_image = modality == IMAGE
    columns: dict[str, list[list[int]]] = {}
    for fid in signal:
        columns[fid] = _draw_feature(rng, n, ys, config, True, is_image)
    for fid in noise:
        columns[fid] = _draw_feature(rng, n, ys, config, False, is_image)
    emb = None
    if is_image and direction is not None:
        emb = rng.standard_normal((n, direction.shape[0])) + (ys * config.embedding_shift)[:, None] * direction
    names = {fid: [token(fid, i) for i in range(config.vocab_size)] for fid in columns}
    width = len(str(max(n - 1, 0)))
    points = []
    for i in range(n):
        feats: dict[str, Any] = {
            fid: frozenset(names[fid][t] for t in col[i]) for fid, col in columns.items() if col[i]
        }
        if emb is not None:
            feats[EMBEDDING_FEATURE] = emb[i]
        y = int(ys[i])
        points.append(DataPoint(f"{prefix}{i:0{width}d}", modality, feats, y if labeled else None))
    return tuple(points)


def generate(config: SynthConfig) -> dict[str, Dataset]:
    """Draw the four benchmark splits; fully determined by ``config.seed``."""
    schema = make_schema(config)
    root = np.random.SeedSequence(config.seed)
    s_dir, s_text, s_unl, s_test, s_pool = (np.random.default_rng(s) for s in root.spawn(5))
    direction = None
    if config.n_image_only_embedding_dims:
        direction = s_dir.standard_normal(config.n_image_only_embedding_dims)
        direction /= np.linalg.norm(direction)
    return {
        "text_labeled": Dataset(schema, _draw_points(
            s_text, schema, config, config.n_text, TEXT, "t", True, None), "train_labeled"),
        "image_unlabeled": Dataset(schema, _draw_points(
            s_unl, schema, config, config.n_image_unlabeled, IMAGE, "iu", False, direction),
            "train_unlabeled"),
        "image_test": Dataset(schema, _draw_points(
            s_test, schema, config, config.n_image_test, IMAGE, "it", True, direction), "test"),
        "image_gold_pool": Dataset(schema, _draw_points(
            s_pool, schema, config, config.n_image_gold_pool, IMAGE, "ig", True, direction),
            "train_labeled"),
    }


def latent_labels(config: SynthConfig, split: str) -> np.ndarray:
    """Hidden labels of a split (including ``image_unlabeled``), for evaluation only."""
    schema = make_schema(config)
    root = np.random.SeedSequence(config.seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(5)]
    index = {"text_labeled": 1, "image_unlabeled": 2, "image_test": 3, "image_gold_pool": 4}[split]
    n = {
        "text_labeled": config.n_text,
        "image_unlabeled": config.n_image_unlabeled,
        "image_test": config.n_image_test,
        "image_gold_pool": config.n_image_gold_pool,
    }[split]
    direction = None
    if config.n_image_only_embedding_dims:
        direction = rngs[0].standard_normal(config.n_image_only_embedding_dims)
        direction /= np.linalg.norm(direction)
    modality = TEXT if split == "text_labeled" else IMAGE
    pts = _draw_points(rngs[index], schema, config, n, modality, "", True, direction)
    return np.asarray([p.gold_label for p in pts], dtype=np.int64)
