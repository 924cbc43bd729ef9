"""Stage-by-stage command line driver.

Every stage reads its inputs from files and writes its artifacts into the run
directory (``--out``), atomically, then records input and output digests in
``manifest.json``. Exit codes: 0 ok, 2 config error, 3 missing artifact,
4 runtime failure.
"""

from __future__ import annotations

import os

# thread caps must be set before numpy loads its BLAS
_THREADS = os.environ.get("CROSSMODAL_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse
import hashlib
import json
import logging
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .core_types import Dataset, DatasetError, FeatureSchema, dump_dataset, dump_schema, load_dataset, load_schema, validate
from .label_graph import dump_scores, load_score_table
from .label_model import dump_params, dump_prob_labels, load_prob_labels
from .lf_miner import PROPAGATION_THRESHOLD, dump_lfs, lf_from_record, lf_to_record, load_lfs, mine_lfs
from .metrics import cross_over, curve_csv, factor_analysis, report
from .pipeline import (
    PipelineSettings,
    cap,
    dev_initialized,
    run_propagation,
    seed_sample,
    split_dev,
    train_models,
    weak_label,
)
from .synthbench import generate
from .trainers import dump_model, gold_targets, load_model

log = logging.getLogger("crossmodal")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

STAGES = ("synth", "validate", "mine", "propagate", "weak-label", "train", "evaluate",
          "crossover", "factor", "run-all")
RUN_ALL = ("synth", "validate", "mine", "propagate", "weak-label", "train", "evaluate")
DATASET_KEYS = ("text_labeled", "image_unlabeled", "image_test", "image_gold_pool", "dev", "text_train")
PATH_KEYS = ("schema",) + DATASET_KEYS
SPLIT_OF = {
    "text_labeled": "train_labeled",
    "image_unlabeled": "train_unlabeled",
    "image_test": "test",
    "image_gold_pool": "train_labeled",
    "dev": "dev",
    "text_train": "train_labeled",
}
MODEL_NAMES = ("text", "ws_image", "early", "intermediate", "devise", "baseline_embedding")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class LockedError(RuntimeError):
    pass


# -- config ---------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSettings:
    crossover_sizes: tuple[int, ...] = (250, 500, 1000, 2000, 4000, 8000)
    crossover_repeats: int = 3
    crossover_model: str = "early"
    factor_feature_sets: tuple[tuple[str, str], ...] = (
        ("text", "A"), ("text", "B"), ("text", "C"), ("text", "D"),
        ("image", "A"), ("image", "B"), ("image", "C"), ("image", "D"),
        ("image", "N"), ("image", "E"),
    )


@dataclass(frozen=True)
class RunConfig:
    settings: PipelineSettings = field(default_factory=PipelineSettings)
    paths: dict[str, str] | None = None  # None: synthesize the benchmark into the run directory
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pipeline": self.settings.to_dict(),
            "paths": self.paths,
            "metrics": {
                "crossover_sizes": list(self.metrics.crossover_sizes),
                "crossover_repeats": self.metrics.crossover_repeats,
                "crossover_model": self.metrics.crossover_model,
                "factor_feature_sets": [list(x) for x in self.metrics.factor_feature_sets],
            },
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def parse_config(doc: Mapping[str, Any] | None, seed: int | None = None) -> RunConfig:
    """Validate a config document; every problem is a :class:`ConfigError` naming the field."""
    doc = dict(doc or {})
    known = {"synth", "split", "miner", "graph", "label_model", "train", "use_propagation",
             "init_from_dev", "strategies", "paths", "metrics", "seed"}
    extra = sorted(set(doc) - known)
    if extra:
        raise ConfigError(f"unknown config keys: {extra}")
    pipeline_doc = {k: v for k, v in doc.items() if k not in ("paths", "metrics", "seed")}
    if seed is None and doc.get("seed") is not None:
        seed = int(doc["seed"])
    if seed is not None:
        pipeline_doc["synth"] = {**(pipeline_doc.get("synth") or {}), "seed": seed}
    try:
        settings = PipelineSettings.from_dict(pipeline_doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"pipeline config: {e}") from e
    bad = [s for s in settings.strategies if s not in ("early", "intermediate", "devise")]
    if bad:
        raise ConfigError(f"strategies: unknown strategy {bad}")

    paths = doc.get("paths")
    if paths is not None:
        if not isinstance(paths, Mapping):
            raise ConfigError("paths: must be a mapping")
        extra = sorted(set(paths) - set(PATH_KEYS))
        if extra:
            raise ConfigError(f"paths: unknown keys {extra}")
        paths = {k: str(v) for k, v in paths.items()}

    m = dict(doc.get("metrics") or {})
    extra = sorted(set(m) - {"crossover_sizes", "crossover_repeats", "crossover_model", "factor_feature_sets"})
    if extra:
        raise ConfigError(f"metrics: unknown keys {extra}")
    metrics = MetricSettings()
    try:
        if "crossover_sizes" in m:
            metrics = replace(metrics, crossover_sizes=tuple(int(x) for x in m["crossover_sizes"]))
        if "crossover_repeats" in m:
            metrics = replace(metrics, crossover_repeats=int(m["crossover_repeats"]))
        if "crossover_model" in m:
            metrics = replace(metrics, crossover_model=str(m["crossover_model"]))
        if "factor_feature_sets" in m:
            metrics = replace(metrics, factor_feature_sets=tuple(
                (str(a), str(b)) for a, b in m["factor_feature_sets"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"metrics: {e}") from e
    return RunConfig(settings, paths, metrics)


def required_paths(stage: str, config: RunConfig) -> list[str]:
    """Path keys a stage reads; with user-supplied data each must be named in ``paths``."""
    needs = {
        "validate": ["schema", "text_labeled", "image_unlabeled", "image_test"],
        "mine": ["schema", "dev"],
        "propagate": ["schema", "dev", "text_train", "image_unlabeled"],
        "weak-label": ["schema", "dev", "image_unlabeled"],
        "train": ["schema", "text_labeled", "image_unlabeled"],
        "evaluate": ["schema", "image_test"],
        "crossover": ["schema", "image_gold_pool", "image_test"],
        "factor": ["schema", "text_labeled", "image_unlabeled", "image_test"],
    }
    return needs.get(stage, [])


def check_paths(stages: Sequence[str], config: RunConfig) -> None:
    if config.paths is None:
        # synthesized data lives in the run directory; each stage checks presence itself
        return
    if "synth" in stages:
        raise ConfigError("paths: the synth stage writes its own datasets; remove 'paths' to synthesize")
    for stage in stages:
        for key in required_paths(stage, config):
            if key not in config.paths:
                raise ConfigError(f"paths.{key}: required by the {stage} stage")


# -- run directory ----------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class RunDir:
    """Artifact locations, input resolution, manifest bookkeeping and the writer lock."""

    def __init__(self, root: Path, config: RunConfig):
        self.root = root
        self.config = config
        self.lock_path = root / ".lock"

    def __enter__(self) -> "RunDir":
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise LockedError(f"{self.lock_path} exists; another run is writing here") from e
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc) -> None:
        try:
            self.lock_path.unlink()
        except FileNotFoundError:
            pass

    def rel(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def data_path(self, key: str) -> Path:
        if self.config.paths is not None and key in self.config.paths:
            return Path(self.config.paths[key])
        if key == "schema":
            return self.root / "schema.yaml"
        return self.root / "data" / f"{key}.jsonl"

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise MissingArtifact(f"missing artifact: {path}")
        return path

    def schema(self, inputs: list[Path]) -> FeatureSchema:
        path = self.require(self.data_path("schema"))
        inputs.append(path)
        return load_schema(path)

    def dataset(self, key: str, schema: FeatureSchema, inputs: list[Path]) -> Dataset:
        path = self.require(self.data_path(key))
        inputs.append(path)
        return load_dataset(path, schema, SPLIT_OF[key])

    def read(self, rel: str, inputs: list[Path]) -> str:
        path = self.require(self.root / rel)
        inputs.append(path)
        return path.read_text(encoding="utf-8")

    def write(self, rel: str, text: str, outputs: list[Path]) -> None:
        path = self.root / rel
        atomic_write(path, text)
        outputs.append(path)

    def record(self, stage: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        manifest.update({
            "tool_version": __version__,
            "seed": self.config.settings.synth.seed,
            "config_digest": self.config.digest(),
        })
        in_digests = {self.rel(p): sha256_file(p) for p in sorted(set(inputs))}
        artifacts = manifest.setdefault("artifacts", {})
        for p in outputs:
            artifacts[self.rel(p)] = {"sha256": sha256_file(p), "stage": stage, "inputs": in_digests}
        manifest.setdefault("stages", {})[stage] = {
            "inputs": in_digests,
            "outputs": sorted(self.rel(p) for p in outputs),
        }
        atomic_write(mpath, dumps(manifest))


# -- stages -----------------------------------------------------------------------


def stage_synth(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    settings = run.config.settings
    data = generate(settings.synth)
    schema = data["text_labeled"].schema
    run.write("schema.yaml", dump_schema(schema), outputs)
    dev, rest = split_dev(data["text_labeled"], settings.split.dev_fraction, settings.synth.seed)
    data = {**data, "dev": dev, "text_train": rest}
    for key in DATASET_KEYS:
        run.write(f"data/{key}.jsonl", dump_dataset(data[key]), outputs)
    return {key: len(data[key]) for key in DATASET_KEYS}


def stage_validate(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    schema = run.schema(inputs)
    problems: dict[str, list[str]] = {}
    for key in DATASET_KEYS:
        path = run.data_path(key)
        if key in required_paths("validate", run.config) or path.exists():
            problems[key] = validate(run.dataset(key, schema, inputs))
    run.write("validation.json", dumps(problems), outputs)
    errors = {k: [m for m in v if not m.startswith("warning")] for k, v in problems.items()}
    n_errors = sum(len(v) for v in errors.values())
    if n_errors:
        raise RuntimeError(f"validation found {n_errors} problem(s); see validation.json")
    return {"warnings": sum(len(v) for v in problems.values())}


def stage_mine(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    schema = run.schema(inputs)
    dev = run.dataset("dev", schema, inputs)
    lfs = mine_lfs(dev, run.config.settings.miner)
    run.write("lfs.jsonl", dump_lfs(lfs), outputs)
    return {"n_lfs": len(lfs)}


def stage_propagate(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    settings = run.config.settings
    if not settings.use_propagation:
        run.write("propagation/disabled.json", dumps({"use_propagation": False}), outputs)
        return {"skipped": True}
    schema = run.schema(inputs)
    dev = run.dataset("dev", schema, inputs)
    rest = run.dataset("text_train", schema, inputs)
    unlabeled = run.dataset("image_unlabeled", schema, inputs)
    seeds = seed_sample(rest, settings.split.max_seed_points, settings.split.balance_seeds)
    prop = run_propagation(seeds, cap(dev, settings.split.max_dev_graph_points), [unlabeled], settings.graph)
    run.write("propagation/scores.jsonl", dump_scores(prop.scores), outputs)
    run.write("propagation/thresholds.json", dumps({
        **prop.thresholds.to_dict(),
        "iterations_run": prop.scores.iterations_run,
        "final_delta": prop.scores.final_delta,
        "converged": prop.scores.converged,
        "n_edges": prop.n_edges,
    }), outputs)
    run.write("propagation/lf.jsonl", json.dumps(lf_to_record(prop.lf), sort_keys=True) + "\n", outputs)
    return {"n_edges": prop.n_edges, **prop.thresholds.to_dict()}


def _load_all_lfs(run: RunDir, inputs: list[Path]):
    lfs = [lf for lf, _ in load_lfs(run.read("lfs.jsonl", inputs))]
    if run.config.settings.use_propagation:
        scores = load_score_table(run.read("propagation/scores.jsonl", inputs))
        for line in run.read("propagation/lf.jsonl", inputs).splitlines():
            if line.strip():
                lf, _ = lf_from_record(json.loads(line))
                lfs.append(lf.with_scores(scores) if lf.kind == PROPAGATION_THRESHOLD else lf)
    return lfs


def stage_weak_label(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    settings = run.config.settings
    schema = run.schema(inputs)
    dev = run.dataset("dev", schema, inputs)
    unlabeled = run.dataset("image_unlabeled", schema, inputs)
    lfs = _load_all_lfs(run, inputs)
    if not lfs:
        raise RuntimeError("no labeling functions available; mining produced none")
    lm = settings.label_model
    if settings.init_from_dev:
        lm = dev_initialized(lm, lfs, dev)
    weak = weak_label(lfs, unlabeled, lm)
    run.write("weak/prob_labels.jsonl", dump_prob_labels(unlabeled.ids, weak.probs), outputs)
    run.write("weak/label_model.jsonl", dump_params(weak.params), outputs)
    run.write("weak/summary.json", dumps({
        "n_points": len(unlabeled),
        "n_columns": weak.matrix.shape[1],
        "pi": weak.params.pi,
        "em_iterations": weak.params.iterations,
        "flipped": weak.params.flipped,
        "log_likelihood": list(weak.params.log_likelihood),
        "mean_prob": float(np.mean(weak.probs)),
    }), outputs)
    return {"pi": weak.params.pi, "n_columns": weak.matrix.shape[1]}


def _probs_for(run: RunDir, data: Dataset, inputs: list[Path]) -> np.ndarray:
    table = load_prob_labels(run.read("weak/prob_labels.jsonl", inputs))
    missing = [pid for pid in data.ids if pid not in table]
    if missing:
        raise RuntimeError(f"no probabilistic label for {len(missing)} point(s), e.g. {missing[0]}")
    return np.asarray([table[pid] for pid in data.ids])


def stage_train(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    schema = run.schema(inputs)
    text = run.dataset("text_labeled", schema, inputs)
    image = run.dataset("image_unlabeled", schema, inputs)
    pool_path = run.data_path("image_gold_pool")
    pool = run.dataset("image_gold_pool", schema, inputs) if pool_path.exists() else None
    probs = _probs_for(run, image, inputs)
    models = train_models(run.config.settings, text, image, probs, pool)
    for name, model in sorted(models.items()):
        run.write(f"models/{name}.json", dump_model(model), outputs)
    return {"models": sorted(models)}


def _load_models(run: RunDir, inputs: list[Path]):
    models = {}
    for name in MODEL_NAMES:
        path = run.root / "models" / f"{name}.json"
        if path.exists():
            models[name] = load_model(run.read(f"models/{name}.json", inputs))
    if not models:
        raise MissingArtifact(f"missing artifact: {run.root / 'models'} (run the train stage)")
    return models


def stage_evaluate(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    schema = run.schema(inputs)
    test = run.dataset("image_test", schema, inputs)
    models = _load_models(run, inputs)
    y = test.gold()
    scores = {name: m.score_points(test.points) for name, m in models.items()}
    base = None
    if "text" in scores:
        base = report(scores["text"], y).auprc
    out = {}
    for name in sorted(scores):
        rep = report(scores[name], y, baseline="text" if base is not None else None, baseline_auprc=base)
        run.write(f"reports/curves/{name}.csv", curve_csv(rep.pr_curve), outputs)
        out[name] = {"auprc": rep.auprc, "baseline": rep.baseline, "relative_auprc": rep.relative_auprc}
    run.write("reports/metrics.json", dumps(out), outputs)
    return {name: round(v["auprc"], 4) for name, v in out.items()}


def stage_crossover(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    schema = run.schema(inputs)
    pool = run.dataset("image_gold_pool", schema, inputs)
    test = run.dataset("image_test", schema, inputs)
    metrics = json.loads(run.read("reports/metrics.json", inputs))
    ms = run.config.metrics
    if ms.crossover_model not in metrics:
        raise MissingArtifact(f"missing artifact: metrics for model {ms.crossover_model!r}")
    sizes = [n for n in ms.crossover_sizes if n <= len(pool)]
    result = cross_over(metrics[ms.crossover_model]["auprc"], pool, test, sizes, ms.crossover_repeats,
                        run.config.settings.train, seed=run.config.settings.synth.seed)
    run.write("reports/crossover.json", dumps(result.to_dict()), outputs)
    return {"cross_over_n": result.cross_over_n}


def stage_factor(run: RunDir, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
    schema = run.schema(inputs)
    text = run.dataset("text_labeled", schema, inputs)
    image = run.dataset("image_unlabeled", schema, inputs)
    test = run.dataset("image_test", schema, inputs)
    probs = _probs_for(run, image, inputs)
    rows = factor_analysis(run.config.metrics.factor_feature_sets, run.config.settings.train,
                           [(text, gold_targets(text)), (image, probs)], test)
    run.write("reports/factor.json", dumps([r.to_dict() for r in rows]), outputs)
    return {"rows": len(rows)}


STAGE_FUNCS: dict[str, Callable[[RunDir, list[Path], list[Path]], dict[str, Any]]] = {
    "synth": stage_synth,
    "validate": stage_validate,
    "mine": stage_mine,
    "propagate": stage_propagate,
    "weak-label": stage_weak_label,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "crossover": stage_crossover,
    "factor": stage_factor,
}


def run_stages(stages: Sequence[str], config: RunConfig, out: Path) -> dict[str, Any]:
    check_paths(stages, config)
    summaries = {}
    with RunDir(out, config) as run:
        config_path = out / "config.json"
        atomic_write(config_path, dumps(config.to_dict()))
        for stage in stages:
            inputs: list[Path] = [config_path]
            outputs: list[Path] = []
            log.info("stage %s", stage)
            summaries[stage] = STAGE_FUNCS[stage](run, inputs, outputs)
            run.record(stage, inputs, outputs)
    return summaries


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmodal", description=__doc__.splitlines()[0])
    parser.add_argument("stage_pos", nargs="?", choices=STAGES, metavar="stage",
                        help=f"one of: {', '.join(STAGES)}")
    parser.add_argument("--stage", choices=STAGES, help="alternative to the positional stage")
    parser.add_argument("--config", type=Path, help="YAML or JSON config document")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def load_config_file(path: Path | None) -> dict[str, Any] | None:
    if path is None:
        return None
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if doc is not None and not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.stage or args.stage_pos
    try:
        if stage is None:
            raise ConfigError("no stage given (positional or --stage)")
        if args.stage and args.stage_pos and args.stage != args.stage_pos:
            raise ConfigError(f"conflicting stages {args.stage_pos!r} and --stage {args.stage!r}")
        config = parse_config(load_config_file(args.config), args.seed)
        stages = list(RUN_ALL) if stage == "run-all" else [stage]
        if stage == "run-all" and config.paths is not None:
            stages.remove("synth")
        summary = run_stages(stages, config, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(str(e), file=sys.stderr)
        return EXIT_MISSING
    except (LockedError, DatasetError, RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
