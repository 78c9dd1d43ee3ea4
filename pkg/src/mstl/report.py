"""Report emission: structured JSON, plain-text tables and standalone SVG
ROC plots. No plotting library is involved, so outputs are byte-stable."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import MSTLError
from .metrics import METRIC_NAMES, EvalReport

FORMATS = ("structured-report", "table-text", "roc-plot")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def dump_json(obj, path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise MSTLError(f"cannot write {path}: {exc}") from None
    return path


def read_report(path) -> EvalReport:
    try:
        return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise MSTLError(f"cannot read report {path}: {exc}") from None


def metrics_table(reports: Sequence[EvalReport]) -> str:
    header = f"{'model':<28} {'split':<6} {'acc':>6} {'prec':>6} {'recall':>6} {'f1':>6} {'auc':>6}  tp  fp  tn  fn"
    lines = [header, "-" * len(header)]
    for r in reports:
        cm = r.confusion
        flags = f"  (undefined: {', '.join(r.undefined)})" if r.undefined else ""
        lines.append(
            f"{r.model_id:<28} {r.split:<6} {r.accuracy:6.3f} {r.precision:6.3f} {r.recall:6.3f} "
            f"{r.f1:6.3f} {r.auc:6.3f} {cm.tp:3d} {cm.fp:3d} {cm.tn:3d} {cm.fn:3d}{flags}"
        )
    return "\n".join(lines) + "\n"


def comparison_table(comparison: dict) -> str:
    names = ", ".join(METRIC_NAMES)
    lines = [f"baseline: {comparison['baseline']}  (split {comparison['split']}; deltas = candidate - baseline: {names})"]
    header = f"{'model':<28} " + " ".join(f"{m:>10}" for m in METRIC_NAMES)
    lines += [header, "-" * len(header)]
    base = comparison["baseline_values"]
    lines.append(f"{comparison['baseline']:<28} " + " ".join(f"{base[m]:10.3f}" for m in METRIC_NAMES))
    for row in comparison["rows"]:
        lines.append(f"{row['model_id']:<28} " + " ".join(f"{row['deltas'][m]:+10.3f}" for m in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def roc_svg(reports: Sequence[EvalReport], title: str = "ROC", comparison: dict | None = None) -> str:
    """One polyline per report on the unit square, AUC in the legend."""
    size, margin = 320, 50
    width, height = size + 2 * margin + 160, size + 2 * margin

    def xy(fpr: float, tpr: float) -> str:
        return f"{margin + fpr * size:.2f},{margin + (1 - tpr) * size:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="none" stroke="#000"/>',
        f'<line x1="{margin}" y1="{margin + size}" x2="{margin + size}" y2="{margin}" stroke="#999" stroke-dasharray="4 4"/>',
        f'<text x="{margin + size / 2}" y="{height - 12}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="14" y="{margin + size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {margin + size / 2})">True positive rate</text>',
    ]
    for t in (0.0, 0.5, 1.0):
        out.append(f'<text x="{margin + t * size}" y="{margin + size + 14}" text-anchor="middle" font-size="10">{t:.1f}</text>')
        out.append(f'<text x="{margin - 6}" y="{margin + (1 - t) * size + 3}" text-anchor="end" font-size="10">{t:.1f}</text>')
    deltas = {}
    if comparison:
        deltas = {row["model_id"]: row["deltas"]["auc"] for row in comparison["rows"]}
    for i, r in enumerate(reports):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(xy(f, t) for f, t in r.roc)
        out.append(f'<path class="roc" d="M {pts.replace(" ", " L ")}" fill="none" stroke="{color}" stroke-width="2"/>')
        label = f"{r.model_id} (AUC {r.auc:.3f}"
        if r.model_id in deltas:
            label += f", {deltas[r.model_id]:+.3f}"
        label += ")"
        y = margin + 16 + 18 * i
        out.append(f'<g class="legend-entry"><line x1="{margin + size + 12}" y1="{y - 4}" x2="{margin + size + 32}" '
                   f'y2="{y - 4}" stroke="{color}" stroke-width="2"/>'
                   f'<text x="{margin + size + 36}" y="{y}" font-size="11">{escape(label)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit(reports: Sequence[EvalReport], out_dir, formats: Sequence[str] = FORMATS, stem: str = "report",
         comparison: dict | None = None) -> list[Path]:
    """Write the requested formats into ``out_dir``; returns the paths written."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MSTLError(f"cannot create output directory {out_dir}: {exc}") from None
    written = []
    for fmt in formats:
        if fmt == "structured-report":
            payload = [r.to_dict() for r in reports]
            doc = payload[0] if len(payload) == 1 else {"reports": payload}
            if comparison is not None:
                doc = {"reports": payload, "comparison": comparison}
            written.append(dump_json(doc, out_dir / f"{stem}.json"))
        elif fmt == "table-text":
            text = metrics_table(reports)
            if comparison is not None:
                text += "\n" + comparison_table(comparison)
            written.append(_write(out_dir / f"{stem}.txt", text))
        elif fmt == "roc-plot":
            written.append(_write(out_dir / f"{stem}_roc.svg", roc_svg(reports, title=stem, comparison=comparison)))
        else:
            raise MSTLError(f"unknown report format {fmt!r} (expected one of {', '.join(FORMATS)})")
    return written


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise MSTLError(f"cannot write {path}: {exc}") from None
    return path


def write_file_manifest(root, name: str = "files.json") -> Path:
    """List every file under ``root`` (relative path, size, sha256), sorted."""
    root = Path(root)
    rows = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != name:
            rows.append({"path": p.relative_to(root).as_posix(), "bytes": p.stat().st_size,
                         "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    return dump_json({"files": rows}, root / name)
