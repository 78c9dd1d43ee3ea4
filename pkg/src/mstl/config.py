"""Strict YAML experiment configs.

Every mapping is checked against a fixed key set; unknown or duplicate keys
and wrongly typed values raise ``ConfigError`` naming the file line and the
dotted key path. See ``configs/synthetic.yaml`` for a commented reference.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .data import DEFAULT_SHIFTS, DatasetManifest, SyntheticDomainConfig, gen_synthetic_domains
from .errors import ConfigError, ResolutionError
from .graph import ArchitectureSpec, FreezePolicy, Task
from .train import Hyperparams
from .transfer import PREVIOUS, RANDOM, Labeling, TransferPlan, TransferStage

OUTPUT_ROOT_ENV = "MSTL_OUTPUT_ROOT"
BUNDLED = Path(__file__).parent / "configs"

TOP_KEYS = {"seed", "output_dir", "architecture", "synthetic", "datasets", "stages", "arms", "baseline", "report"}
ARCH_KEYS = {"family", "stem_channels", "blocks_per_stage", "growth_or_width", "compression_theta", "input_shape"}
SYNTH_KEYS = {"n_classes", "image_size", "channels", "noise", "blob_amplitude", "blob_sigma", "style_offset",
              "style_contrast", "style_texture", "class_names", "samples_per_class", "domains"}
DOMAIN_KEYS = {"shift", "samples_per_class", "ratios"}
DATASET_KEYS = {"manifest", "synthetic"}
STAGE_KEYS = {"name", "dataset", "task", "labels", "freeze", "head", "hidden_units", "dropout", "init_from", "train"}
LABEL_KEYS = {"kind", "grid", "folds", "extractor"}
TRAIN_KEYS = {"learning_rate", "momentum", "batch_size", "epochs"}
REPORT_KEYS = {"formats"}


class _Lines:
    """Line numbers of every key path, from the composed YAML node tree."""

    def __init__(self, source: str):
        self.source = source
        self.lines: dict[str, int] = {}

    def walk(self, node, path: str = "") -> None:
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for key_node, value_node in node.value:
                key = str(key_node.value)
                sub = f"{path}.{key}" if path else key
                if key in seen:
                    raise ConfigError(f"{self.source}:{key_node.start_mark.line + 1}: duplicate key '{sub}'")
                seen.add(key)
                self.lines[sub] = key_node.start_mark.line + 1
                self.walk(value_node, sub)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                sub = f"{path}[{i}]"
                self.lines[sub] = item.start_mark.line + 1
                self.walk(item, sub)

    def error(self, path: str, msg: str, cls=ConfigError) -> ConfigError:
        probe = path
        while probe and probe not in self.lines:
            probe = probe.rsplit(".", 1)[0] if "." in probe else ""
        where = f"{self.source}:{self.lines[probe]}" if probe else self.source
        return cls(f"{where}: key '{path}': {msg}")


@dataclass
class DatasetRef:
    name: str
    manifest: Path | None = None
    synthetic: str | None = None  # domain name in the synthetic section


@dataclass
class SyntheticSpec:
    base: SyntheticDomainConfig
    shifts: dict[str, float]
    samples_per_class: dict[str, int]
    ratios: dict[str, tuple[float, ...]]


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    architecture: ArchitectureSpec
    datasets: dict[str, DatasetRef]
    plan: TransferPlan
    synthetic: SyntheticSpec | None = None
    report_formats: list[str] = field(default_factory=lambda: ["structured-report", "table-text", "roc-plot"])
    source: str = "<config>"
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        raw = dict(self.raw, seed=int(seed))
        return _build(raw, self.source, self.base_dir, _Lines(self.source))

    @property
    def base_dir(self) -> Path:
        return Path(self.source).parent if self.source not in ("<config>", "<string>") else Path(".")

    def config_hash(self) -> str:
        """SHA-256 of the canonical effective config (defaults filled in)."""
        text = json.dumps(self.effective(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def effective(self) -> dict:
        stages = []
        for s in self.plan.stages:
            stages.append({
                "name": s.name, "dataset": s.dataset, "task": s.task, "init_from": s.init_from,
                "labels": {"kind": s.labeling.kind, "grid": s.labeling.grid, "folds": s.labeling.folds,
                           "extractor": s.labeling.extractor},
                "freeze": s.freeze.fraction_shallowest_frozen, "head": s.head, "hidden_units": s.hidden_units,
                "dropout": s.dropout_before_output,
                "train": {"learning_rate": s.hyper.learning_rate, "momentum": s.hyper.momentum,
                          "batch_size": s.hyper.batch_size, "epochs": s.hyper.epochs},
            })
        synth = None
        if self.synthetic is not None:
            b = self.synthetic.base
            synth = {"base": {k: getattr(b, k) for k in ("n_classes", "image_size", "channels", "noise", "blob_amplitude",
                                                         "blob_sigma", "style_offset", "style_contrast",
                                                         "style_texture", "class_names")},
                     "shifts": self.synthetic.shifts, "samples_per_class": self.synthetic.samples_per_class,
                     "ratios": {k: list(v) for k, v in self.synthetic.ratios.items()}}
        return {
            "seed": self.seed, "architecture": self.architecture.to_dict(), "synthetic": synth,
            "datasets": {n: {"manifest": str(d.manifest) if d.manifest else None, "synthetic": d.synthetic}
                         for n, d in self.datasets.items()},
            "stages": stages, "arms": self.plan.arms, "baseline": self.plan.baseline,
            "report": {"formats": self.report_formats},
        }

    def resolve_paths(self) -> list[str]:
        """Cross-reference check: returns the list of dangling references."""
        missing = []
        for name, ref in self.datasets.items():
            if ref.manifest is not None and not ref.manifest.is_file():
                missing.append(f"dataset '{name}' manifest {ref.manifest}")
        for s in self.plan.stages:
            for what, ref in (("init_from", s.init_from), ("labels.extractor", s.labeling.extractor)):
                if ref not in (RANDOM, PREVIOUS) and not Path(ref).is_file():
                    missing.append(f"stage '{s.name}' {what} checkpoint {ref}")
        return missing

    def validate_refs(self) -> None:
        missing = self.resolve_paths()
        if missing:
            raise ResolutionError("unresolved reference: " + "; ".join(missing))

    def synthesize(self, data_dir) -> dict[str, DatasetManifest]:
        """Generate the synthetic domains (if any) under ``data_dir``."""
        if self.synthetic is None:
            return {}
        base = replace(self.synthetic.base, seed=self.seed)
        return gen_synthetic_domains(base, data_dir, self.synthetic.shifts, self.synthetic.samples_per_class,
                                     self.synthetic.ratios)

    def load_datasets(self, data_dir: Path | None = None) -> dict[str, DatasetManifest]:
        """Load manifests; synthetic datasets must already be generated under ``data_dir``."""
        out = {}
        for name, ref in self.datasets.items():
            if ref.manifest is not None:
                path = ref.manifest
            else:
                if data_dir is None:
                    raise ResolutionError(f"dataset '{name}' is synthetic and no data directory was given")
                path = Path(data_dir) / ref.synthetic / "manifest.tsv"
            if not path.is_file():
                raise ResolutionError(f"dataset '{name}': manifest {path} not found")
            out[name] = DatasetManifest.load(path)
        return out


# -- parsing -----------------------------------------------------------------------------------


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ResolutionError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def parse_config(text: str, source: str = "<string>", base_dir: Path = Path(".")) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        problem = getattr(exc, "problem", None) or str(exc).splitlines()[0]
        raise ConfigError(f"{where}: YAML syntax error: {problem}") from None
    lines = _Lines(source)
    if node is not None:
        lines.walk(node)
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return _build(raw, source, base_dir, lines)


def _keys(d: Any, allowed: set[str], path: str, lines: _Lines, required: set[str] = frozenset()) -> dict:
    if not isinstance(d, dict):
        raise lines.error(path or "<root>", f"expected a mapping, got {type(d).__name__}")
    for k in d:
        if k not in allowed:
            raise lines.error(f"{path}.{k}" if path else str(k),
                              f"unknown key (allowed: {', '.join(sorted(allowed))})")
    for k in required:
        if k not in d:
            raise lines.error(path or "<root>", f"missing required key '{k}'")
    return d


def _typed(value, kind, path: str, lines: _Lines):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise lines.error(path, f"expected {kind.__name__}, got {value!r}")
    return value


def _get(d: dict, key: str, kind, default, path: str, lines: _Lines):
    if key not in d:
        return default
    return _typed(d[key], kind, f"{path}.{key}" if path else key, lines)


def _int_list(value, path: str, lines: _Lines) -> list[int]:
    if not isinstance(value, list) or not value:
        raise lines.error(path, f"expected a non-empty list of integers, got {value!r}")
    return [_typed(v, int, f"{path}[{i}]", lines) for i, v in enumerate(value)]


def _float_list(value, path: str, lines: _Lines) -> list[float]:
    if not isinstance(value, list) or not value:
        raise lines.error(path, f"expected a non-empty list of numbers, got {value!r}")
    return [_typed(v, float, f"{path}[{i}]", lines) for i, v in enumerate(value)]


def _wrap(lines: _Lines, path: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigError as exc:
        if "key '" in str(exc):
            raise
        raise lines.error(path, str(exc), type(exc)) from None


def _build(raw: dict, source: str, base_dir: Path, lines: _Lines) -> ExperimentConfig:
    _keys(raw, TOP_KEYS, "", lines, required={"architecture", "datasets", "stages"})
    seed = _get(raw, "seed", int, 0, "", lines)
    default_root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    out = raw.get("output_dir")
    stem = Path(source).stem if source not in ("<config>", "<string>") else "run"
    output_dir = default_root / stem if out is None else Path(_typed(out, str, "output_dir", lines))

    a = _keys(raw["architecture"], ARCH_KEYS, "architecture", lines, required={"family"})
    arch_kw = {"family": _get(a, "family", str, None, "architecture", lines)}
    for key, kind in (("stem_channels", int), ("growth_or_width", int), ("compression_theta", float)):
        if key in a:
            arch_kw[key] = _get(a, key, kind, None, "architecture", lines)
    if "blocks_per_stage" in a:
        arch_kw["blocks_per_stage"] = _int_list(a["blocks_per_stage"], "architecture.blocks_per_stage", lines)
    if "input_shape" in a:
        shape = _int_list(a["input_shape"], "architecture.input_shape", lines)
        if len(shape) != 3:
            raise lines.error("architecture.input_shape", "expected [channels, height, width]")
        arch_kw["input_shape"] = tuple(shape)
    arch = ArchitectureSpec(**arch_kw)
    _wrap(lines, "architecture", arch.validate)

    synthetic = None
    if raw.get("synthetic") is not None:
        synthetic = _synthetic(raw["synthetic"], seed, lines)

    datasets = {}
    ds = raw["datasets"]
    if not isinstance(ds, dict) or not ds:
        raise lines.error("datasets", "expected a non-empty mapping of dataset name to source")
    for name, spec in ds.items():
        path = f"datasets.{name}"
        _keys(spec, DATASET_KEYS, path, lines)
        if ("manifest" in spec) == ("synthetic" in spec):
            raise lines.error(path, "give exactly one of 'manifest' or 'synthetic'")
        if "manifest" in spec:
            p = Path(_typed(spec["manifest"], str, f"{path}.manifest", lines))
            datasets[name] = DatasetRef(name, manifest=p if p.is_absolute() else base_dir / p)
        else:
            dom = _typed(spec["synthetic"], str, f"{path}.synthetic", lines)
            if synthetic is None or dom not in synthetic.shifts:
                raise lines.error(f"{path}.synthetic", f"unknown synthetic domain {dom!r}", ResolutionError)
            datasets[name] = DatasetRef(name, synthetic=dom)

    if not isinstance(raw["stages"], list):
        raise lines.error("stages", "expected a list of stages")
    stages = [_stage(s, f"stages[{i}]", datasets, base_dir, lines) for i, s in enumerate(raw["stages"])]
    names = [s.name for s in stages]

    arms_raw = raw.get("arms")
    if arms_raw is None:
        arms = {"mstl": names, "baseline": [names[0], names[-1]]}
    else:
        if not isinstance(arms_raw, dict) or not arms_raw:
            raise lines.error("arms", "expected a mapping of arm name to a list of stage names")
        arms = {}
        for arm, seq in arms_raw.items():
            if not isinstance(seq, list) or not all(isinstance(x, str) for x in seq):
                raise lines.error(f"arms.{arm}", "expected a list of stage names")
            for i, n in enumerate(seq):
                if n not in names:
                    raise lines.error(f"arms.{arm}[{i}]", f"unknown stage {n!r}", ResolutionError)
            arms[str(arm)] = list(seq)
    baseline = raw.get("baseline", "baseline" if "baseline" in arms else None)
    if baseline is not None:
        baseline = _typed(baseline, str, "baseline", lines)
        if baseline not in arms:
            raise lines.error("baseline", f"unknown arm {baseline!r}", ResolutionError)

    formats = ["structured-report", "table-text", "roc-plot"]
    if raw.get("report") is not None:
        r = _keys(raw["report"], REPORT_KEYS, "report", lines)
        if "formats" in r:
            formats = r["formats"]
            allowed = {"structured-report", "table-text", "roc-plot"}
            if not isinstance(formats, list) or not set(formats) <= allowed:
                raise lines.error("report.formats", f"expected a list drawn from {sorted(allowed)}")

    plan = TransferPlan(stages, arms, arch, seed, baseline)
    _wrap(lines, "stages", plan.validate)
    return ExperimentConfig(seed, output_dir, arch, datasets, plan, synthetic, list(formats), source, raw)


def _synthetic(s, seed: int, lines: _Lines) -> SyntheticSpec:
    s = _keys(s, SYNTH_KEYS, "synthetic", lines)
    kw: dict[str, Any] = {"seed": seed}
    for key, kind in (("n_classes", int), ("image_size", int), ("channels", int), ("noise", float),
                      ("blob_amplitude", float), ("blob_sigma", float), ("style_offset", float),
                      ("style_contrast", float), ("style_texture", float), ("samples_per_class", int)):
        if key in s:
            kw[key] = _get(s, key, kind, None, "synthetic", lines)
    if "class_names" in s:
        names = s["class_names"]
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise lines.error("synthetic.class_names", "expected a list of strings")
        kw["class_names"] = names
    base = SyntheticDomainConfig(**kw)
    _wrap(lines, "synthetic", base.validate)
    domains = s.get("domains")
    if domains is None:
        domains = {k: {"shift": v} for k, v in DEFAULT_SHIFTS.items()}
    if not isinstance(domains, dict) or not domains:
        raise lines.error("synthetic.domains", "expected a mapping of domain name to settings")
    shifts, counts, ratios = {}, {}, {}
    for name, d in domains.items():
        path = f"synthetic.domains.{name}"
        d = _keys(d or {}, DOMAIN_KEYS, path, lines)
        shift = _get(d, "shift", float, DEFAULT_SHIFTS.get(name), path, lines)
        if shift is None or not 0.0 <= shift <= 1.0:
            raise lines.error(f"{path}.shift", f"shift must be given and lie in [0, 1], got {shift!r}")
        shifts[name] = shift
        counts[name] = _get(d, "samples_per_class", int, base.samples_per_class, path, lines)
        if counts[name] < 1:
            raise lines.error(f"{path}.samples_per_class", "must be positive")
        if "ratios" in d:
            r = _float_list(d["ratios"], f"{path}.ratios", lines)
            if len(r) not in (2, 3) or abs(sum(r) - 1.0) > 1e-9 or min(r) < 0:
                raise lines.error(f"{path}.ratios", "expected 2 or 3 non-negative ratios summing to 1")
            ratios[name] = tuple(r)
    return SyntheticSpec(base, shifts, counts, ratios)


def _stage(s, path: str, datasets: dict, base_dir: Path, lines: _Lines) -> TransferStage:
    s = _keys(s, STAGE_KEYS, path, lines, required={"name", "dataset"})
    name = _typed(s["name"], str, f"{path}.name", lines)
    dataset = _typed(s["dataset"], str, f"{path}.dataset", lines)
    if dataset not in datasets:
        raise lines.error(f"{path}.dataset", f"stage '{name}' references missing dataset {dataset!r}", ResolutionError)
    task = None
    if "task" in s:
        task = _typed(s["task"], str, f"{path}.task", lines)
        _wrap(lines, f"{path}.task", Task.parse, task)

    lab = s.get("labels", "hard")
    if isinstance(lab, str):
        labeling = _wrap(lines, f"{path}.labels", Labeling, lab)
    else:
        lab = _keys(lab, LABEL_KEYS, f"{path}.labels", lines)
        kw = {"kind": _get(lab, "kind", str, "hard", f"{path}.labels", lines)}
        if "grid" in lab:
            kw["grid"] = _int_list(lab["grid"], f"{path}.labels.grid", lines)
            if any(k < 2 for k in kw["grid"]):
                raise lines.error(f"{path}.labels.grid", "every k must be >= 2")
        if "folds" in lab:
            kw["folds"] = _get(lab, "folds", int, 10, f"{path}.labels", lines)
            if kw["folds"] < 2:
                raise lines.error(f"{path}.labels.folds", "need at least 2 folds")
        if "extractor" in lab:
            kw["extractor"] = _ref(_typed(lab["extractor"], str, f"{path}.labels.extractor", lines), base_dir)
        labeling = _wrap(lines, f"{path}.labels", Labeling, **kw)
    if labeling.kind == "soft" and task is not None:
        raise lines.error(f"{path}.task", "soft-labelled stages derive their task from the selected k")

    freeze = _get(s, "freeze", float, 0.5, path, lines)
    freeze_policy = _wrap(lines, f"{path}.freeze", FreezePolicy, freeze)
    t = _keys(s.get("train", {}) or {}, TRAIN_KEYS, f"{path}.train", lines)
    hyper = _wrap(lines, f"{path}.train", Hyperparams,
                  learning_rate=_get(t, "learning_rate", float, 0.01, f"{path}.train", lines),
                  momentum=_get(t, "momentum", float, 0.9, f"{path}.train", lines),
                  batch_size=_get(t, "batch_size", int, 32, f"{path}.train", lines),
                  epochs=_get(t, "epochs", int, 30, f"{path}.train", lines))
    init = _ref(_get(s, "init_from", str, PREVIOUS, path, lines), base_dir)
    hidden = _get(s, "hidden_units", int, 64, path, lines)
    if not 1 <= hidden <= 1000:
        raise lines.error(f"{path}.hidden_units", "must be in [1, 1000]")
    return _wrap(lines, path, TransferStage, name=name, dataset=dataset, labeling=labeling, freeze=freeze_policy,
                 head=_get(s, "head", str, "reinit", path, lines),
                 dropout_before_output=_get(s, "dropout", float, 0.0, path, lines),
                 hyper=hyper, init_from=init, hidden_units=hidden, task=task)


def _ref(value: str, base_dir: Path) -> str:
    if value in (RANDOM, PREVIOUS):
        return value
    p = Path(value)
    return str(p if p.is_absolute() else base_dir / p)


def bundled_config(name: str = "synthetic.yaml") -> Path:
    return BUNDLED / name
