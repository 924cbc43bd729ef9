"""Discriminative models trained on (probabilistic) labels and their fusion composites.

Models are plain numpy: logistic regression, or one hidden layer followed by
a logistic output. Training is mini-batch gradient descent on the mean
noise-aware cross-entropy plus an L2 penalty on weights (biases excluded).
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from .core_types import (
    POSITIVE,
    DataPoint,
    Dataset,
    Encoding,
    FeatureSchema,
    encode_many,
    fit_encoding,
)

log = logging.getLogger(__name__)

LOGREG = "logreg"
MLP = "mlp"
Q_CLAMP = 1e-7
MODEL_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    kind: str = MLP
    learning_rate: float = 0.1
    l2_penalty: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    hidden_width: int = 64
    activation: str = "tanh"
    patience: int = 0
    init: str = "random"

    def __post_init__(self) -> None:
        if self.kind not in (LOGREG, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in ("random", "identity"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.hidden_width < 1:
            raise ValueError("learning_rate, batch_size and hidden_width must be positive")
        if self.epochs < 0 or self.l2_penalty < 0 or self.patience < 0:
            raise ValueError("epochs, l2_penalty and patience must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**dict(d))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def noise_aware_loss(p, q):
    """Cross-entropy of model score ``q`` against probabilistic label ``p``."""
    q = np.clip(q, Q_CLAMP, 1.0 - Q_CLAMP)
    return -(p * np.log(q) + (1.0 - p) * np.log(1.0 - q))


def _act(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    return 1.0 - a * a if activation == "tanh" else (z > 0).astype(z.dtype)


def _weights(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if not k.startswith("b")]


def forward(params: Mapping[str, np.ndarray], X: np.ndarray, activation: str):
    """Returns (logits, penultimate activations, hidden pre-activations or None)."""
    if "W1" in params:
        z1 = X @ params["W1"] + params["b1"]
        h = _act(z1, activation)
        return h @ params["w2"] + params["b2"], h, z1
    return X @ params["w"] + params["b"], X, None


def objective(params: Mapping[str, np.ndarray], X: np.ndarray, p: np.ndarray,
              l2: float, activation: str = "tanh") -> float:
    z, _, _ = forward(params, X, activation)
    loss = float(np.mean(noise_aware_loss(p, expit(z))))
    return loss + l2 * sum(float(np.sum(params[k] ** 2)) for k in _weights(params))


def loss_and_grads(params: Mapping[str, np.ndarray], X: np.ndarray, p: np.ndarray,
                   l2: float, activation: str = "tanh") -> tuple[float, dict[str, np.ndarray]]:
    """Objective value and its exact gradient (zero where the score clamp is active)."""
    n = X.shape[0]
    z, h, z1 = forward(params, X, activation)
    q = expit(z)
    inside = (q > Q_CLAMP) & (q < 1.0 - Q_CLAMP)
    loss = float(np.mean(noise_aware_loss(p, q)))
    dz = np.where(inside, q - p, 0.0) / n
    grads: dict[str, np.ndarray] = {}
    if z1 is not None:
        grads["w2"] = h.T @ dz
        grads["b2"] = np.asarray(dz.sum())
        dz1 = np.outer(dz, params["w2"]) * _act_grad(z1, h, activation)
        grads["W1"] = X.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
    else:
        grads["w"] = X.T @ dz
        grads["b"] = np.asarray(dz.sum())
    for k in _weights(params):
        loss += l2 * float(np.sum(params[k] ** 2))
        grads[k] = grads[k] + 2.0 * l2 * params[k]
    return loss, grads


def init_params(kind: str, width: int, config: TrainConfig, prior: float = 0.5) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    bias = np.asarray(float(logit(np.clip(prior, 1e-3, 1 - 1e-3))))
    if kind == LOGREG:
        return {"w": np.zeros(width), "b": bias}
    h = config.hidden_width
    if config.init == "identity":
        W1 = np.eye(width, h)
    else:
        W1 = rng.normal(0.0, np.sqrt(2.0 / (width + h)), size=(width, h))
    return {
        "W1": W1,
        "b1": np.zeros(h),
        "w2": rng.normal(0.0, np.sqrt(2.0 / (h + 1)), size=h),
        "b2": bias,
    }


@dataclass
class Model:
    kind: str
    params: dict[str, np.ndarray]
    encoding: Encoding | None = None
    activation: str = "tanh"
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return self.params["W1"].shape[0] if "W1" in self.params else self.params["w"].shape[0]

    @property
    def penultimate_width(self) -> int:
        return self.params["W1"].shape[1] if "W1" in self.params else self.params["w"].shape[0]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.input_width:
            raise ValueError(f"input width {X.shape[1]} does not match model width {self.input_width}")
        return X

    def penultimate(self, X: np.ndarray) -> np.ndarray:
        return forward(self.params, self._check(X), self.activation)[1]

    def final_logits(self, H: np.ndarray) -> np.ndarray:
        if "W1" in self.params:
            return H @ self.params["w2"] + self.params["b2"]
        return H @ self.params["w"] + self.params["b"]

    def scores(self, X: np.ndarray) -> np.ndarray:
        return expit(forward(self.params, self._check(X), self.activation)[0])

    def score_points(self, points: Sequence[DataPoint]) -> np.ndarray:
        if self.encoding is None:
            raise ValueError("model has no encoding; call scores() with vectors")
        return self.scores(encode_many(points, self.encoding))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "activation": self.activation,
            "encoding": None if self.encoding is None else self.encoding.to_dict(),
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for k, v in sorted(self.params.items())},
            "train_loss": self.train_loss,
            "dev_loss": self.dev_loss,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Model":
        params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        enc = None if d.get("encoding") is None else Encoding.from_dict(d["encoding"])
        return cls(d["kind"], params, enc, d.get("activation", "tanh"),
                   list(d.get("train_loss", [])), list(d.get("dev_loss", [])))


def train(X: np.ndarray, p: np.ndarray, config: TrainConfig, kind: str | None = None,
          X_dev: np.ndarray | None = None, p_dev: np.ndarray | None = None,
          encoding: Encoding | None = None, init: Mapping[str, np.ndarray] | None = None) -> Model:
    """Fit a model by seeded mini-batch gradient descent.

    ``train_loss[0]`` is the objective at initialization and ``train_loss[e]``
    the full-data objective after epoch ``e``. With ``patience`` > 0 and a dev
    set, training stops early and keeps the parameters of the best dev epoch.
    """
    kind = kind or config.kind
    X = np.asarray(X, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != p.shape[0]:
        raise ValueError("X must be (n, d) with one label per row")
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("labels must lie in [0, 1]")
    params = copy.deepcopy(dict(init)) if init is not None else init_params(kind, X.shape[1], config, float(p.mean()))
    l2, act = config.l2_penalty, config.activation
    rng = np.random.default_rng(config.seed)
    has_dev = X_dev is not None and p_dev is not None and len(p_dev) > 0
    model = Model(kind, params, encoding, act)
    model.train_loss.append(objective(params, X, p, l2, act))
    if has_dev:
        model.dev_loss.append(objective(params, X_dev, p_dev, 0.0, act))
    best = (model.dev_loss[0], copy.deepcopy(params)) if has_dev else None
    stale = 0
    n = X.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(params, X[idx], p[idx], l2, act)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}; learning rate {config.learning_rate} too high?")
            for k, g in grads.items():
                params[k] = params[k] - config.learning_rate * g
        full = objective(params, X, p, l2, act)
        if not np.isfinite(full) or not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingError(f"non-finite parameters after epoch {epoch}; learning rate {config.learning_rate} too high?")
        model.train_loss.append(full)
        if has_dev:
            dev = objective(params, X_dev, p_dev, 0.0, act)
            model.dev_loss.append(dev)
            if dev < best[0] - 1e-12:
                best, stale = (dev, copy.deepcopy(params)), 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    log.info("early stop after epoch %d", epoch + 1)
                    break
    if has_dev and config.patience:
        model.params = best[1]
    return model


def gold_targets(dataset: Dataset) -> np.ndarray:
    """Gold +1/-1 labels as probabilities 1.0/0.0."""
    return (dataset.gold() == POSITIVE).astype(np.float64)


# -- fusion -------------------------------------------------------------------

LabeledPart = tuple[Dataset, np.ndarray]


def _servable(schema: FeatureSchema, feature_subset) -> set[str]:
    ids = schema.servable_ids()
    return ids if feature_subset is None else ids & set(feature_subset)


def _stack(parts: Sequence[LabeledPart]) -> tuple[list[DataPoint], np.ndarray]:
    points: list[DataPoint] = []
    labels: list[np.ndarray] = []
    for ds, y in parts:
        y = np.asarray(y, dtype=np.float64)
        if len(y) != len(ds):
            raise ValueError(f"{ds.split} dataset has {len(ds)} points but {len(y)} labels")
        points.extend(ds.points)
        labels.append(y)
    return points, (np.concatenate(labels) if labels else np.zeros(0))


@dataclass
class FusionModel:
    strategy: str
    members: dict[str, Model]
    head: Model | None = None
    projection: np.ndarray | None = None  # (d_B + 1, d_A), last row is the bias

    def score_points(self, points: Sequence[DataPoint]) -> np.ndarray:
        points = list(points)
        if self.strategy == "early":
            return self.members["early"].score_points(points)
        if self.strategy == "intermediate":
            return self.head.scores(self.head_inputs(points))
        A, B = self.members["A"], self.members["B"]
        Y = B.penultimate(encode_many(points, B.encoding))
        return expit(A.final_logits(self.project(Y)))

    def head_inputs(self, points: Sequence[DataPoint]) -> np.ndarray:
        return np.hstack([
            m.penultimate(encode_many(points, m.encoding))
            for _, m in sorted(self.members.items())
        ])

    def project(self, Y: np.ndarray) -> np.ndarray:
        return np.hstack([Y, np.ones((Y.shape[0], 1))]) @ self.projection

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "strategy": self.strategy,
            "members": {k: m.to_dict() for k, m in sorted(self.members.items())},
            "head": None if self.head is None else self.head.to_dict(),
            "projection": None if self.projection is None else {
                "shape": list(self.projection.shape), "values": self.projection.ravel().tolist()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FusionModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {d.get('format_version')!r}")
        proj = d.get("projection")
        return cls(
            d["strategy"],
            {k: Model.from_dict(m) for k, m in d["members"].items()},
            None if d.get("head") is None else Model.from_dict(d["head"]),
            None if proj is None else np.asarray(proj["values"]).reshape(proj["shape"]),
        )


def dump_model(model: FusionModel) -> str:
    return json.dumps(model.to_dict(), sort_keys=True) + "\n"


def load_model(text: str) -> FusionModel:
    return FusionModel.from_dict(json.loads(text))


def train_on_parts(parts: Sequence[LabeledPart], schema: FeatureSchema, config: TrainConfig,
                   feature_subset=None, modality_features=None,
                   dev: LabeledPart | None = None) -> Model:
    """One model over the merged encoding of every part's points."""
    points, labels = _stack(parts)
    if not points:
        raise ValueError("no training points")
    features = _servable(schema, feature_subset)
    enc = fit_encoding([ds for ds, _ in parts], features, modality_features)
    X = encode_many(points, enc)
    X_dev = p_dev = None
    if dev is not None:
        X_dev, p_dev = encode_many(dev[0].points, enc), np.asarray(dev[1], dtype=np.float64)
    return train(X, labels, config, X_dev=X_dev, p_dev=p_dev, encoding=enc)


def train_early_fusion(parts: Sequence[LabeledPart], schema: FeatureSchema, config: TrainConfig,
                       feature_subset=None, modality_features=None,
                       dev: LabeledPart | None = None) -> FusionModel:
    """Single model over the union of all modalities; shared features share slots."""
    if sum(len(ds) for ds, _ in parts) == 0:
        raise ValueError("early fusion needs at least one training point")
    model = train_on_parts(parts, schema, config, feature_subset, modality_features, dev)
    return FusionModel("early", {"early": model})


def train_intermediate_fusion(parts: Sequence[LabeledPart], schema: FeatureSchema, config: TrainConfig,
                              head_config: TrainConfig | None = None, feature_subset=None,
                              member_init: Mapping[str, Mapping[str, np.ndarray]] | None = None,
                              ) -> FusionModel:
    """Per-modality models, frozen, then a head over their concatenated penultimate activations."""
    points, labels = _stack(parts)
    by_modality: dict[str, list[int]] = {}
    for i, p in enumerate(points):
        by_modality.setdefault(p.modality, []).append(i)
    if len(by_modality) < 2:
        raise ValueError("intermediate fusion needs >= 2 modalities; use early fusion instead")
    servable = _servable(schema, feature_subset)
    members: dict[str, Model] = {}
    for modality in sorted(by_modality):
        idx = by_modality[modality]
        mpoints = [points[i] for i in idx]
        feats = servable & schema.ids_for_modality(modality)
        enc = fit_encoding([Dataset(schema, tuple(mpoints), "train_labeled")], feats)
        X = encode_many(mpoints, enc)
        init = None if member_init is None else member_init.get(modality)
        members[modality] = train(X, labels[idx], config, encoding=enc, init=init)
    fm = FusionModel("intermediate", members)
    H = fm.head_inputs(points)
    hc = head_config or config
    fm.head = train(H, labels, hc)
    return fm


def fit_projection(Y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Least-squares affine map with ``[Y, 1] @ P ~= X``."""
    Y1 = np.hstack([Y, np.ones((Y.shape[0], 1))])
    P, *_ = np.linalg.lstsq(Y1, X, rcond=None)
    return P


def train_devise(existing: Sequence[LabeledPart], new: LabeledPart, schema: FeatureSchema,
                 config: TrainConfig, b_config: TrainConfig | None = None,
                 feature_subset=None) -> FusionModel:
    """Frozen existing-modality model A, new-modality model B, and a projection B -> A.

    Inference scores ``A.final_layer(P(B.penultimate(x)))``.
    """
    new_ds, new_y = new
    A = train_on_parts(existing, schema, config, feature_subset)
    servable = _servable(schema, feature_subset)
    old_ids = set().union(*(schema.ids_for_modality(m) for ds, _ in existing for m in ds.modalities()))
    shared = servable & old_ids
    for m in new_ds.modalities():
        shared &= schema.ids_for_modality(m)
    if not shared:
        raise ValueError("existing and new modalities share no features")
    frozen = {k: v.copy() for k, v in A.params.items()}
    B = train_on_parts([(new_ds, new_y)], schema, b_config or config, feature_subset)
    X = A.penultimate(encode_many(new_ds.points, A.encoding))
    Y = B.penultimate(encode_many(new_ds.points, B.encoding))
    P = fit_projection(Y, X)
    for k, v in frozen.items():
        if not np.array_equal(v, A.params[k]):
            raise AssertionError("model A changed during DeViSE training")
    return FusionModel("devise", {"A": A, "B": B}, projection=P)


def predict(model: Model | FusionModel, point: DataPoint) -> float:
    return float(model.score_points([point])[0])
