"""Chained multi-stage fine-tuning (source → transition(s) → target).

A plan names its stages once; arms pick ordered subsets of them ending at
the target stage. Arms that share a stage prefix share the executed
stages, so every arm starts from the very same source checkpoint file.
"""

from __future__ import annotations

import hashlib
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, file_sha256, load_checkpoint, save_checkpoint
from .data import DatasetManifest, load_split, rebase, relabel
from .errors import ConfigError, InputError, ResolutionError
from .graph import (ArchitectureSpec, FreezePolicy, ModelGraph, Task, adapt_task, apply_freeze, attach_head,
                    build_model)
from .metrics import EvalReport, compare_arms, evaluate
from .report import dump_json, emit
from .softlabel import DEFAULT_GRID, FeatureMatrix, create_soft_labels, extract_features
from .train import Hyperparams, TrainLog, train_stage

logger = logging.getLogger(__name__)

RANDOM, PREVIOUS = "random", "previous_stage"


@dataclass
class Labeling:
    kind: str = "hard"  # "hard" | "soft"
    grid: list[int] = field(default_factory=lambda: list(DEFAULT_GRID))
    folds: int = 10
    extractor: str = PREVIOUS  # "previous_stage" or a checkpoint path

    def __post_init__(self):
        if self.kind not in ("hard", "soft"):
            raise ConfigError(f"labeling must be hard or soft, got {self.kind!r}")


@dataclass
class TransferStage:
    name: str
    dataset: str
    labeling: Labeling = field(default_factory=Labeling)
    freeze: FreezePolicy = field(default_factory=lambda: FreezePolicy(0.5))
    head: str = "reinit"  # "reinit" | "keep"
    dropout_before_output: float = 0.0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    init_from: str = PREVIOUS
    hidden_units: int = 64
    task: str | None = None  # override for hard labels; soft labels derive multiclass(k)

    def __post_init__(self):
        if self.head not in ("reinit", "keep"):
            raise ConfigError(f"stage {self.name}: head policy must be reinit or keep, got {self.head!r}")
        if not 0.0 <= self.dropout_before_output < 1.0:
            raise ConfigError(f"stage {self.name}: dropout must be in [0, 1)")


@dataclass
class TransferPlan:
    stages: list[TransferStage]
    arms: dict[str, list[str]]
    architecture: ArchitectureSpec
    seed: int = 0
    baseline: str | None = "baseline"

    def stage(self, name: str) -> TransferStage:
        for s in self.stages:
            if s.name == name:
                return s
        raise ResolutionError(f"unknown stage {name!r}")

    @property
    def target(self) -> TransferStage:
        return self.stages[-1]

    def validate(self, datasets: Mapping[str, object] | None = None) -> None:
        names = [s.name for s in self.stages]
        if len(self.stages) < 2:
            raise ConfigError("a transfer plan needs at least two stages")
        if len(set(names)) != len(names):
            raise ConfigError(f"stage names must be unique: {names}")
        if not self.arms:
            raise ConfigError("a transfer plan needs at least one arm")
        order = {n: i for i, n in enumerate(names)}
        for arm, seq in self.arms.items():
            for n in seq:
                if n not in order:
                    raise ResolutionError(f"arm {arm!r} references unknown stage {n!r}")
            if not seq or seq[-1] != names[-1]:
                raise ConfigError(f"arm {arm!r} must end at the target stage {names[-1]!r}")
            if [order[n] for n in seq] != sorted(order[n] for n in seq) or len(set(seq)) != len(seq):
                raise ConfigError(f"arm {arm!r} must list stages in plan order without repeats")
            first = self.stage(seq[0])
            if first.init_from == PREVIOUS:
                raise ConfigError(f"arm {arm!r} starts at stage {first.name!r}, which has no previous stage to init from")
            for n in seq[1:]:
                if self.stage(n).init_from == RANDOM:
                    raise ConfigError(f"stage {n!r} follows another stage in arm {arm!r} and must name a weight source")
            for i, n in enumerate(seq):
                st = self.stage(n)
                if st.labeling.kind == "soft" and st.labeling.extractor == PREVIOUS and i == 0:
                    raise ConfigError(f"stage {n!r} uses soft labels from the previous stage but starts arm {arm!r}")
        if self.baseline is not None and self.baseline not in self.arms:
            raise ResolutionError(f"baseline arm {self.baseline!r} is not defined")
        for st in self.stages:
            if datasets is not None and st.dataset not in datasets:
                raise ResolutionError(f"stage {st.name!r} references missing dataset {st.dataset!r}")
            for ref in (st.init_from, st.labeling.extractor if st.labeling.kind == "soft" else PREVIOUS):
                if ref not in (RANDOM, PREVIOUS) and not Path(ref).is_file():
                    raise ResolutionError(f"stage {st.name!r} references missing checkpoint {ref!r}")


@dataclass
class StageResult:
    stage: str
    path: tuple[str, ...]
    directory: str
    checkpoint_file: str
    checkpoint_sha256: str
    task: str
    log: TrainLog
    report: EvalReport | None
    audit: dict

    def checkpoint(self) -> Checkpoint:
        return load_checkpoint(self.checkpoint_file)


# -- helpers ------------------------------------------------------------------------------


def external_parent(path) -> StageResult:
    """Wrap an existing checkpoint file as the predecessor of a stage."""
    path = Path(path)
    if not path.is_file():
        raise ResolutionError(f"checkpoint {path} not found")
    ckpt = load_checkpoint(path)
    return StageResult(ckpt.metadata.get("stage", path.stem), (), str(path.parent), str(path), file_sha256(path),
                       ckpt.graph_spec["task"], TrainLog(), None, {})


def derive_seed(seed: int, *parts: str) -> int:
    words = [seed] + [zlib.crc32(p.encode("utf-8")) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def params_digest(arrays: Mapping[str, np.ndarray], names: Sequence[str]) -> str:
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())
    return h.hexdigest()


def _base_names(spec: dict) -> list[str]:
    return [d["name"] for d in spec["params"] if not d["head"]]


def hard_task(manifest: DatasetManifest, override: str | None) -> Task:
    if override:
        return Task.parse(override)
    n = len(manifest.classes)
    return Task("binary") if n == 2 else Task("multiclass", n)


def adapt_or_attach(graph: ModelGraph, task: Task, stage: TransferStage, seed: int) -> ModelGraph:
    """Apply the stage's head policy."""
    if stage.head == "reinit" or not graph.has_head:
        return attach_head(graph, task, stage.hidden_units, stage.dropout_before_output, seed)
    return adapt_task(graph, graph.task, task, stage.dropout_before_output, seed)


# -- domain distance --------------------------------------------------------------------------


def domain_distance(a, b) -> float:
    """Diagonal-covariance Fréchet distance between two feature sets:
    ``||mu_a - mu_b||^2 + sum(var_a + var_b - 2 sqrt(var_a var_b))``."""
    xa = a.rows if isinstance(a, FeatureMatrix) else np.asarray(a, dtype=np.float64)
    xb = b.rows if isinstance(b, FeatureMatrix) else np.asarray(b, dtype=np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1]:
        raise InputError(f"feature dims differ: {xa.shape} vs {xb.shape}")
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    va, vb = xa.var(axis=0), xb.var(axis=0)
    mean_term = np.sum((mu_a - mu_b) ** 2)
    cov_term = np.sum(va + vb - 2.0 * np.sqrt(va * vb))
    return float(max(mean_term + cov_term, 0.0))


@dataclass
class DomainDistanceReport:
    stages: list[str]
    datasets: list[str]
    distances: list[float]  # distance of each stage's domain to the target domain
    strictly_decreasing: bool
    violations: list[str]
    pairwise: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"stages": self.stages, "datasets": self.datasets, "distances": self.distances,
                "strictly_decreasing": self.strictly_decreasing, "violations": self.violations,
                "pairwise": self.pairwise}


def verify_ordering(stage_names: Sequence[str], stage_images: Sequence[np.ndarray], extractor,
                    dataset_names: Sequence[str] | None = None) -> DomainDistanceReport:
    """Check that each successive domain is strictly closer to the last
    (target) domain. Reports only; never raises on a violation."""
    feats = [extract_features(extractor, imgs) for imgs in stage_images]
    target = feats[-1]
    dists = [domain_distance(f, target) for f in feats]
    violations = []
    for i in range(1, len(dists)):
        if not dists[i - 1] > dists[i]:
            violations.append(f"{stage_names[i - 1]} ({dists[i - 1]:.6g}) is not farther from the target "
                              f"than {stage_names[i]} ({dists[i]:.6g})")
    pairwise = {a: {b: domain_distance(fa, fb) for b, fb in zip(stage_names, feats)}
                for a, fa in zip(stage_names, feats)}
    return DomainDistanceReport(list(stage_names), list(dataset_names or stage_names), dists, not violations,
                                violations, pairwise)


# -- stage execution -----------------------------------------------------------------------------


class _Images:
    """Per-process cache of decoded splits."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.cache: dict = {}

    def get(self, manifest: DatasetManifest, split: str | None, labeled: bool = True):
        key = (str(Path(manifest.root).resolve()), manifest.content_hash(), split, labeled)
        if key not in self.cache:
            self.cache[key] = load_split(manifest, split, self.shape, labeled)
        return self.cache[key]


_IMAGE_CACHE: dict[tuple, _Images] = {}


def _images(shape) -> _Images:
    shape = tuple(shape)
    if shape not in _IMAGE_CACHE:
        _IMAGE_CACHE[shape] = _Images(shape)
    return _IMAGE_CACHE[shape]


def run_stage(plan: TransferPlan, path: tuple[str, ...], parent: StageResult | None,
              datasets: Mapping[str, DatasetManifest], out_dir: Path, config_hash: str = "") -> StageResult:
    stage = plan.stage(path[-1])
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _images(plan.architecture.input_shape)
    manifest = datasets[stage.dataset]
    init_seed = derive_seed(plan.seed, stage.name, "init")
    head_seed = derive_seed(plan.seed, stage.name, "head")
    hyper = Hyperparams(stage.hyper.learning_rate, stage.hyper.momentum, stage.hyper.batch_size,
                        stage.hyper.epochs, derive_seed(plan.seed, stage.name, "train"))
    audit: dict = {"stage": stage.name, "path": list(path)}

    # 1. weights
    parent_ckpt = parent.checkpoint() if parent is not None else None
    if stage.init_from == RANDOM:
        graph = build_model(plan.architecture, init_seed)
        audit["init"] = "random"
    elif stage.init_from == PREVIOUS:
        if parent_ckpt is None:
            raise ConfigError(f"stage {stage.name} needs a previous stage")
        graph = parent_ckpt.to_graph()
        audit["init"] = f"previous_stage:{parent.checkpoint_sha256}"
    else:
        graph = load_checkpoint(stage.init_from).to_graph()
        audit["init"] = f"checkpoint:{file_sha256(stage.init_from)}"
    base_names = graph.base_param_names()
    start_base = params_digest(graph.param_arrays(), base_names)
    if parent_ckpt is not None and stage.init_from == PREVIOUS:
        audit["weight_carry_bit_exact"] = start_base == params_digest(parent_ckpt.params, _base_names(parent_ckpt.graph_spec))

    # 2. labels
    if stage.labeling.kind == "hard":
        task = hard_task(manifest, stage.task)
        if task.units != (1 if len(manifest.classes) == 2 else len(manifest.classes)):
            raise ConfigError(f"stage {stage.name}: task {task} does not fit the {len(manifest.classes)} classes "
                              f"of dataset {stage.dataset}")
        work = manifest
    else:
        if stage.labeling.extractor == PREVIOUS:
            extractor, extractor_id = parent_ckpt, parent.checkpoint_sha256
        else:
            extractor, extractor_id = load_checkpoint(stage.labeling.extractor), file_sha256(stage.labeling.extractor)
        x_all, _ = images.get(manifest, None, labeled=False)
        soft, _, selection = create_soft_labels(extractor, x_all, stage.labeling.grid, stage.labeling.folds,
                                                derive_seed(plan.seed, stage.name, "cluster"),
                                                [e.ref for e in manifest.entries], extractor_id)
        task = Task("multiclass", soft.k)
        work = relabel(manifest, soft.labels, [f"cluster{j}" for j in range(soft.k)],
                       name=f"{manifest.name}-soft",
                       note=f"soft labels k={soft.k} extractor={extractor_id} seed={soft.provenance['clustering_seed']}")
        rebase(work, out_dir).save(out_dir / "soft_labels.tsv")
        dump_json({"k_best": selection["k_best"], "score": selection["score"], "folds": selection["folds"],
                   "grid": selection["grid"], "seed": selection["seed"],
                   "scores": {str(k): v for k, v in selection["scores"].items()},
                   "fold_scores": {str(k): v for k, v in selection["fold_scores"].items()},
                   "extractor": extractor_id}, out_dir / "selection.json")
        audit["soft_k"] = soft.k

    # 3. head, then freeze (freeze decides trainability of every parameter)
    old_head = {k: graph.params[k].value.copy() for k in graph.head_param_names()}
    adapt_or_attach(graph, task, stage, head_seed)
    apply_freeze(graph, stage.freeze)
    if old_head and stage.head == "reinit":
        new_head = {k: graph.params[k].value for k in graph.head_param_names()}
        audit["head_fresh"] = all(k not in new_head or new_head[k].shape != v.shape or not np.array_equal(new_head[k], v)
                                  for k, v in old_head.items())
    audit["base_unchanged_by_head_policy"] = params_digest(graph.param_arrays(), base_names) == start_base
    frozen = [k for k, p in graph.params.items() if not p.trainable]
    frozen_before = params_digest(graph.param_arrays(), frozen)

    # 4. train
    train = images.get(work, "train") if work is manifest else _relabelled(images, manifest, work, "train")
    val = images.get(work, "val") if work is manifest else _relabelled(images, manifest, work, "val")
    meta = {"stage": stage.name, "path": "/".join(path), "config_hash": config_hash, "dataset": stage.dataset,
            "manifest_hash": manifest.content_hash()}
    best, log = train_stage(graph, train, val, task, hyper, meta)
    audit["frozen_params"] = len(frozen)
    audit["frozen_bit_identical"] = params_digest(best.params, frozen) == frozen_before
    ckpt_file = out_dir / "checkpoint.mstl"
    sha = save_checkpoint(best, ckpt_file)
    reread = ckpt_file.read_bytes()
    audit["checkpoint_roundtrip_bytes_equal"] = Checkpoint.from_bytes(reread).to_bytes() == reread
    dump_json(log.to_dict(), out_dir / "train_log.json")

    # 5. evaluation: the target stage once on test, other binary stages on val
    report = None
    if task.kind == "binary":
        split = "test" if stage.name == plan.target.name else "val"
        x_eval, y_eval = images.get(manifest, split)
        if len(x_eval):
            scores = graph.predict(x_eval).reshape(-1)
            report = evaluate(scores, y_eval, model_id="/".join(path), stage=stage.name, split=split,
                              provenance={"checkpoint_sha256": sha, "manifest_hash": manifest.content_hash(),
                                          "seed": plan.seed, "dataset": stage.dataset})
            dump_json(report.to_dict(), out_dir / f"eval_{split}.json")
    return StageResult(stage.name, path, str(out_dir), str(ckpt_file), sha, str(task), log, report, audit)


def _relabelled(images: _Images, original: DatasetManifest, work: DatasetManifest, split: str):
    x, _ = images.get(original, split, labeled=False)
    return x, work.labels(split)


def _run_node(args):
    plan, path, parent, datasets, out_dir, config_hash = args
    return run_stage(plan, path, parent, datasets, Path(out_dir), config_hash)


# -- orchestration -----------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    stages: dict[tuple[str, ...], StageResult]
    arms: dict[str, list[StageResult]]
    comparison: dict | None
    ordering: dict[str, dict]
    audit: dict


def stage_dir(run_dir: Path, path: Sequence[str]) -> Path:
    return Path(run_dir, "stages", *path)


def run_mstl(plan: TransferPlan, datasets: Mapping[str, DatasetManifest], run_dir, jobs: int = 1,
             arms: Sequence[str] | None = None, config_hash: str = "") -> RunResult:
    """Execute every selected arm; shared stage prefixes run once."""
    plan.validate(datasets)
    run_dir = Path(run_dir)
    missing = [a for a in (arms or []) if a not in plan.arms]
    if missing:
        raise ResolutionError(f"unknown arm(s): {', '.join(missing)} (known: {', '.join(plan.arms)})")
    selected = {a: plan.arms[a] for a in (arms or plan.arms)}
    nodes = sorted({tuple(seq[:i + 1]) for seq in selected.values() for i in range(len(seq))}, key=lambda p: (len(p), p))
    results: dict[tuple[str, ...], StageResult] = {}
    depth = max(len(p) for p in nodes)
    for level in range(1, depth + 1):
        todo = [p for p in nodes if len(p) == level]
        args = [(plan, p, results.get(p[:-1]), datasets, str(stage_dir(run_dir, p)), config_hash) for p in todo]
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(todo))) as pool:
                outs = list(pool.map(_run_node, args))
        else:
            outs = [_run_node(a) for a in args]
        for p, r in zip(todo, outs):
            logger.info("stage %s done: best val acc %.3f", "/".join(p), r.log.best_val_acc)
            results[p] = r

    arm_results = {a: [results[tuple(seq[:i + 1])] for i in range(len(seq))] for a, seq in selected.items()}
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    finals = {a: rs[-1].report for a, rs in arm_results.items() if rs[-1].report is not None}
    for a, rep in finals.items():
        dump_json(rep.to_dict(), reports_dir / f"target_{a}.json")
    comparison = None
    if plan.baseline in finals and len(finals) > 1:
        names = list(finals)
        ordered = [finals[plan.baseline]] + [finals[a] for a in names if a != plan.baseline]
        comparison = compare_arms(ordered, baseline=0)
        labelled = {finals[a].model_id: a for a in names}
        comparison["arms"] = {labelled[r["model_id"]]: r["model_id"] for r in comparison["rows"]}
        comparison["baseline_arm"] = plan.baseline
        emit(ordered, reports_dir, stem="comparison", comparison=comparison)
    elif finals:
        emit(list(finals.values()), reports_dir, stem="targets")

    ordering = {}
    source_path = nodes[0]
    extractor = results[source_path].checkpoint()
    images = _images(plan.architecture.input_shape)
    for a, seq in selected.items():
        imgs = [images.get(datasets[plan.stage(n).dataset], None, labeled=False)[0] for n in seq]
        rep = verify_ordering(seq, imgs, extractor, [plan.stage(n).dataset for n in seq])
        ordering[a] = rep.to_dict()
    dump_json({"extractor": results[source_path].checkpoint_sha256, "arms": ordering}, run_dir / "domain_distance.json")

    audit = {
        "stages": {"/".join(p): r.audit for p, r in results.items()},
        "arm_roots": {a: arm_results[a][0].checkpoint_sha256 for a in selected},
    }
    roots = {plan.arms[a][0] for a in selected}
    audit["shared_source_checkpoint"] = len(roots) == 1 and len(set(audit["arm_roots"].values())) == 1
    dump_json(audit, run_dir / "audit.json")
    dump_json({a: {"stages": [Path(r.directory).relative_to(run_dir).as_posix() for r in rs], "checkpoint_sha256": [r.checkpoint_sha256 for r in rs],
                   "final_report": f"reports/target_{a}.json" if a in finals else None}
               for a, rs in arm_results.items()}, run_dir / "arms.json")
    return RunResult(run_dir, results, arm_results, comparison, ordering, audit)
