"""``mstl`` command-line entry point.

Failures print one line, ``error: <ErrorClass>: <message>``, to stderr and
exit with the class's code:

    1 MSTLError (generic)      2 ConfigError        3 ResolutionError
    4 NumericError             5 InputError         6 DataError
    7 FormatError              8 ComparisonError    9 GradientCheckError
    64 usage error             70 internal error
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .checkpoint import file_sha256, load_checkpoint
from .config import ExperimentConfig, load_config
from .data import DatasetManifest, load_split, rebase, relabel, split_manifest
from .errors import ConfigError, DataError, MSTLError, ResolutionError
from .metrics import compare_arms, evaluate
from .report import FORMATS, comparison_table, dump_json, emit, metrics_table, read_report, write_file_manifest
from .softlabel import DEFAULT_GRID, create_soft_labels
from .transfer import external_parent, run_mstl, run_stage

USAGE_EXIT = 64
INTERNAL_EXIT = 70

logger = logging.getLogger("mstl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mstl", description="Multi-stage transfer learning pipeline.")
    p.add_argument("--version", action="version", version=f"mstl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def out_flags(sp, required=False):
        sp.add_argument("--out", type=Path, required=required, help="output directory")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")

    sp = sub.add_parser("synth", help="generate the synthetic source/transition/target domains")
    sp.add_argument("--config", type=Path, required=True)
    sp.add_argument("--seed", type=int)
    out_flags(sp)

    sp = sub.add_parser("split", help="assign train/val/test splits to a manifest")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--ratios", type=_float_list, required=True, help="e.g. 0.6,0.15,0.25")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-stratify", action="store_true")
    out_flags(sp, required=True)

    sp = sub.add_parser("cluster", help="soft labels from k-means over checkpoint features")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--grid", type=_int_list, default=list(DEFAULT_GRID))
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    out_flags(sp, required=True)

    sp = sub.add_parser("train", help="run a single stage of a config")
    sp.add_argument("--config", type=Path, required=True)
    sp.add_argument("--stage", required=True)
    sp.add_argument("--init", type=Path, help="predecessor checkpoint for init_from: previous_stage")
    sp.add_argument("--data", type=Path, help="directory written by `mstl synth` (default <run dir>/data)")
    sp.add_argument("--seed", type=int)
    out_flags(sp)

    sp = sub.add_parser("mstl", help="run every arm of a config end to end")
    sp.add_argument("--config", type=Path, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1, help="max worker processes")
    sp.add_argument("--arm", action="append", help="run only this arm (repeatable)")
    out_flags(sp)

    sp = sub.add_parser("eval", help="evaluate a binary checkpoint on a manifest split")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--threshold", type=float, default=0.5)
    out_flags(sp, required=True)

    sp = sub.add_parser("report", help="render eval reports as JSON, tables and ROC plots")
    sp.add_argument("reports", nargs="+", type=Path)
    sp.add_argument("--format", action="append", choices=FORMATS, dest="formats")
    out_flags(sp, required=True)

    sp = sub.add_parser("compare", help="metric deltas of eval reports against a baseline")
    sp.add_argument("reports", nargs="+", type=Path)
    sp.add_argument("--baseline", help="model id of the baseline (default: first report)")
    out_flags(sp, required=True)

    sp = sub.add_parser("validate", help="check a config and its references; writes nothing")
    sp.add_argument("--config", type=Path, required=True)
    sp.add_argument("--seed", type=int)
    return p


# -- helpers -----------------------------------------------------------------------------


def fresh_dir(path: Path, force: bool) -> Path:
    """Create ``path``; an existing non-empty directory needs ``force``."""
    if path.exists():
        if path.is_file() or any(path.iterdir()):
            if not force:
                raise MSTLError(f"output directory {path} already exists (use --force to replace it)")
            if path.is_file():
                path.unlink()
            else:
                shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    return load_config(args.config).with_seed(getattr(args, "seed", None))


def _needs_synthetic(cfg: ExperimentConfig) -> bool:
    return any(ref.synthetic for ref in cfg.datasets.values())


# -- commands -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    if cfg.synthetic is None:
        raise ConfigError(f"{args.config}: no 'synthetic' section to generate from")
    out = fresh_dir(args.out or cfg.output_dir / "data", args.force)
    manifests = cfg.synthesize(out)
    write_file_manifest(out)
    for name, m in manifests.items():
        print(f"{name}: {len(m)} images -> {out / name / 'manifest.tsv'}")
    return 0


def cmd_split(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    out = fresh_dir(args.out, args.force)
    result = rebase(split_manifest(manifest, args.ratios, args.seed, stratified=not args.no_stratify), out)
    result.save(out / "manifest.tsv")
    write_file_manifest(out)
    counts = {s: len(result.indices(s)) for s in ("train", "val", "test")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()) + f" -> {out / 'manifest.tsv'}")
    return 0


def cmd_cluster(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    shape = tuple(ckpt.graph_spec["architecture"]["input_shape"])
    x, _ = load_split(manifest, None, shape, labeled=False)
    out = fresh_dir(args.out, args.force)
    extractor_id = file_sha256(args.checkpoint)
    labels, model, selection = create_soft_labels(ckpt, x, args.grid, args.folds, args.seed,
                                                  [e.ref for e in manifest.entries], extractor_id)
    derived = relabel(manifest, labels.labels, [f"cluster{j}" for j in range(labels.k)], name=f"{manifest.name}-soft",
                      note=f"soft labels k={labels.k} extractor={extractor_id} seed={args.seed}")
    rebase(derived, out).save(out / "manifest.tsv")
    dump_json({"k_best": selection["k_best"], "score": selection["score"], "grid": selection["grid"],
               "folds": selection["folds"], "seed": selection["seed"], "extractor": extractor_id,
               "scores": {str(k): v for k, v in selection["scores"].items()},
               "fold_scores": {str(k): v for k, v in selection["fold_scores"].items()},
               "inertia": model.inertia}, out / "selection.json")
    write_file_manifest(out)
    print(f"k={labels.k} (scores: " + ", ".join(f"{k}:{v:.4f}" for k, v in selection["scores"].items()) + ")")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    stage = cfg.plan.stage(args.stage)
    out = fresh_dir(args.out or cfg.output_dir / "stages" / stage.name, args.force)
    data_dir = args.data or cfg.output_dir / "data"
    datasets = cfg.load_datasets(data_dir if _needs_synthetic(cfg) else None)
    parent = None
    if stage.init_from == "previous_stage" or (stage.labeling.kind == "soft" and stage.labeling.extractor == "previous_stage"):
        if args.init is None:
            raise ResolutionError(f"stage '{stage.name}' starts from the previous stage; pass --init <checkpoint>")
        parent = external_parent(args.init)
    result = run_stage(cfg.plan, (stage.name,), parent, datasets, out, cfg.config_hash())
    write_file_manifest(out)
    print(f"{stage.name}: best epoch {result.log.best_epoch + 1}, val acc {result.log.best_val_acc:.4f}, "
          f"checkpoint {result.checkpoint_file}")
    return 0


def cmd_mstl(args) -> int:
    cfg = _config(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    unknown = [a for a in (args.arm or []) if a not in cfg.plan.arms]
    if unknown:
        raise ResolutionError(f"unknown arm(s): {', '.join(unknown)} (known: {', '.join(cfg.plan.arms)})")
    run_dir = fresh_dir(args.out or cfg.output_dir, args.force)
    dump_json({"config_hash": cfg.config_hash(), "config": cfg.effective()}, run_dir / "config.json")
    datasets_dir = run_dir / "data"
    if _needs_synthetic(cfg):
        cfg.synthesize(datasets_dir)
    datasets = cfg.load_datasets(datasets_dir)
    result = run_mstl(cfg.plan, datasets, run_dir, jobs=args.jobs, arms=args.arm, config_hash=cfg.config_hash())
    if result.comparison is not None:
        sys.stdout.write(comparison_table(result.comparison))
    else:
        finals = [rs[-1].report for rs in result.arms.values() if rs[-1].report is not None]
        if finals:
            sys.stdout.write(metrics_table(finals))
    for arm, rep in result.ordering.items():
        state = "strictly decreasing" if rep["strictly_decreasing"] else "NOT strictly decreasing"
        dists = ", ".join(f"{s}={d:.4g}" for s, d in zip(rep["stages"], rep["distances"]))
        print(f"domain distance to target ({arm}): {dists} [{state}]")
    write_file_manifest(run_dir)
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.graph_spec["task"] != "binary":
        raise DataError(f"eval needs a binary checkpoint, got task {ckpt.graph_spec['task']}")
    manifest = DatasetManifest.load(args.manifest)
    graph = ckpt.to_graph()
    x, y = load_split(manifest, args.split, graph.spec.input_shape)
    if len(x) == 0:
        raise DataError(f"manifest {manifest.name} has no '{args.split}' entries")
    out = fresh_dir(args.out, args.force)
    report = evaluate(graph.predict(x).reshape(-1), y, model_id=ckpt.metadata.get("path", args.checkpoint.stem),
                      stage=ckpt.metadata.get("stage", ""), split=args.split, threshold=args.threshold,
                      provenance={"checkpoint_sha256": file_sha256(args.checkpoint),
                                  "manifest_hash": manifest.content_hash()})
    emit([report], out, stem="eval")
    write_file_manifest(out)
    sys.stdout.write(metrics_table([report]))
    return 0


def cmd_report(args) -> int:
    reports = [read_report(p) for p in args.reports]
    out = fresh_dir(args.out, args.force)
    emit(reports, out, formats=args.formats or FORMATS, stem="report")
    write_file_manifest(out)
    sys.stdout.write(metrics_table(reports))
    return 0


def cmd_compare(args) -> int:
    reports = [read_report(p) for p in args.reports]
    comparison = compare_arms(reports, baseline=args.baseline if args.baseline is not None else 0)
    base = [r for r in reports if r.model_id == comparison["baseline"]][0]
    ordered = [base] + [r for r in reports if r is not base]
    out = fresh_dir(args.out, args.force)
    emit(ordered, out, stem="comparison", comparison=comparison)
    write_file_manifest(out)
    sys.stdout.write(comparison_table(comparison))
    return 0


def cmd_validate(args) -> int:
    cfg = _config(args)
    cfg.validate_refs()
    print(f"config OK: {args.config}")
    print(f"  config hash: {cfg.config_hash()}")
    print(f"  seed: {cfg.seed}; run directory: {cfg.output_dir}")
    print(f"  stages: {', '.join(s.name for s in cfg.plan.stages)}")
    for arm, seq in cfg.plan.arms.items():
        mark = " (baseline)" if arm == cfg.plan.baseline else ""
        print(f"  arm {arm}{mark}: {' -> '.join(seq)}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "cluster": cmd_cluster, "train": cmd_train, "mstl": cmd_mstl,
    "eval": cmd_eval, "report": cmd_report, "compare": cmd_compare, "validate": cmd_validate,
}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: UsageError: {_one_line(exc)}", file=sys.stderr)
        return USAGE_EXIT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except MSTLError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("error: Interrupted: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:  # a bug; still keep the one-line contract
        logger.debug("internal error", exc_info=True)
        print(f"error: InternalError: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return INTERNAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
