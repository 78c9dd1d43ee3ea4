"""Dataset manifests, image ingestion, seeded splitting and the synthetic
domain-shift generator.

Manifest file format (UTF-8, line oriented)::

    # mstl-manifest v1
    # name: target
    # classes: normal,lesion
    # ratios: 0.6,0.15,0.25
    # seed: 7
    # note: free text (repeatable)
    images/000000.png<TAB>1<TAB>train
    images/000001.png<TAB>-<TAB>unassigned

Refs are resolved relative to the manifest's directory; a label of ``-``
means unlabeled.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
MANIFEST_MAGIC = "# mstl-manifest v1"


@dataclass(frozen=True)
class Entry:
    ref: str
    label: int | None = None
    split: str = UNASSIGNED


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    entries: list[Entry]
    split_ratios: tuple[float, ...] = ()
    seed: int | None = None
    notes: list[str] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        for e in self.entries:
            if e.label is not None and not 0 <= e.label < len(self.classes):
                raise DataError(f"manifest {self.name}: label {e.label} of {e.ref} outside {len(self.classes)} classes")
            if e.split not in SPLITS + (UNASSIGNED,):
                raise DataError(f"manifest {self.name}: unknown split {e.split!r} for {e.ref}")
        if self.split_ratios and abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise DataError(f"manifest {self.name}: split ratios {self.split_ratios} do not sum to 1")

    def __len__(self) -> int:
        return len(self.entries)

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def labels(self, split: str | None = None) -> np.ndarray:
        rows = self.entries if split is None else [e for e in self.entries if e.split == split]
        if any(e.label is None for e in rows):
            raise DataError(f"manifest {self.name}: unlabeled entries in split {split or 'all'}")
        return np.array([e.label for e in rows], dtype=np.int64)

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p

    def to_text(self) -> str:
        lines = [MANIFEST_MAGIC, f"# name: {self.name}", f"# classes: {','.join(self.classes)}"]
        if self.split_ratios:
            lines.append(f"# ratios: {','.join(repr(float(r)) for r in self.split_ratios)}")
        if self.seed is not None:
            lines.append(f"# seed: {self.seed}")
        lines += [f"# note: {n}" for n in self.notes]
        for e in self.entries:
            lines.append(f"{e.ref}\t{'-' if e.label is None else e.label}\t{e.split}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        return cls.parse(text, root=path.parent, source=str(path))

    @classmethod
    def parse(cls, text: str, root: Path = Path("."), source: str = "<manifest>") -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MANIFEST_MAGIC:
            raise DataError(f"{source}: missing '{MANIFEST_MAGIC}' header")
        header: dict[str, str] = {}
        notes: list[str] = []
        entries: list[Entry] = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                key, value = key.strip(), value.strip()
                if key == "note":
                    notes.append(value)
                elif key in ("name", "classes", "ratios", "seed"):
                    header[key] = value
                else:
                    raise DataError(f"{source}:{lineno}: unknown header key {key!r}")
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{source}:{lineno}: expected ref<TAB>label<TAB>split, got {len(parts)} fields")
            ref, label, split = parts
            try:
                lab = None if label == "-" else int(label)
            except ValueError:
                raise DataError(f"{source}:{lineno}: bad label {label!r}") from None
            entries.append(Entry(ref, lab, split))
        for key in ("name", "classes"):
            if key not in header:
                raise DataError(f"{source}: header is missing '{key}'")
        try:
            ratios = tuple(float(r) for r in header["ratios"].split(",")) if header.get("ratios") else ()
            seed = int(header["seed"]) if "seed" in header else None
        except ValueError as exc:
            raise DataError(f"{source}: bad header value: {exc}") from None
        return cls(header["name"], header["classes"].split(","), entries, ratios, seed, notes, Path(root))


# -- image ingestion ------------------------------------------------------------


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize an (H, W, C) float array with half-pixel-centred bilinear
    interpolation and edge clamping. Identity when the shape already matches."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0)

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def load_image(ref, target_shape: Sequence[int]) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG, resize to (C, H, W), scale to [0, 1].

    Grayscale sources are replicated to 3 channels; RGB sources are
    channel-averaged for a 1-channel target.
    """
    c, h, w = (int(v) for v in target_shape)
    if c not in (1, 3):
        raise DataError(f"unsupported channel count {c} (expected 1 or 3)")
    try:
        with Image.open(ref) as im:
            mode = "L" if im.mode in ("L", "1", "I;16", "I", "F") else "RGB"
            arr = np.asarray(im.convert(mode), dtype=np.float64)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode image {ref}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr = bilinear_resize(arr / 255.0, h, w)
    if arr.shape[2] != c:
        arr = np.repeat(arr, c, axis=2) if arr.shape[2] == 1 else arr.mean(axis=2, keepdims=True)
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


def load_split(manifest: DatasetManifest, split: str | None, target_shape: Sequence[int], labeled: bool = True):
    """Load the images (N, C, H, W) and labels of one split, in entry order."""
    rows = manifest.entries if split is None else [e for e in manifest.entries if e.split == split]
    if rows:
        x = np.stack([load_image(manifest.resolve(e.ref), target_shape) for e in rows])
    else:
        x = np.zeros((0, *target_shape), np.float32)
    if not labeled:
        return x, None
    if any(e.label is None for e in rows):
        raise DataError(f"manifest {manifest.name}: unlabeled entries in split {split}")
    return x, np.array([e.label for e in rows], dtype=np.int64)


def save_png(arr: np.ndarray, path) -> None:
    """Write a (C, H, W) array in [0, 1] as an 8-bit PNG."""
    img = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    Image.fromarray(img).save(path, format="PNG")


# -- splitting ------------------------------------------------------------------


def split_manifest(manifest: DatasetManifest, ratios: Sequence[float], seed: int, stratified: bool = True) -> DatasetManifest:
    """Assign train/val(/test) splits.

    Each group (one per class when stratified) is shuffled with a seeded
    PCG64 generator; val and test take floor(n·ratio) entries and the
    remainder goes to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) not in (2, 3) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 2 or 3 non-negative values summing to 1, got {ratios}")
    if not manifest.entries:
        raise DataError(f"manifest {manifest.name} has no entries to split")
    if stratified:
        if any(e.label is None for e in manifest.entries):
            raise DataError(f"manifest {manifest.name}: stratified split needs labels on every entry")
        groups = [(manifest.classes[c], [i for i, e in enumerate(manifest.entries) if e.label == c])
                  for c in range(len(manifest.classes))]
        groups = [(name, idx) for name, idx in groups if idx]
    else:
        groups = [("<all>", list(range(len(manifest.entries))))]
    needed = sum(1 for r in ratios if r > 0)
    short = [f"{name} ({len(idx)} samples)" for name, idx in groups if len(idx) < needed]
    if short:
        raise DataError(f"classes with fewer samples than the {needed} non-empty splits: {', '.join(short)}")

    rng = np.random.Generator(np.random.PCG64(seed))
    assigned: dict[int, str] = {}
    for _, idx in groups:
        perm = [idx[j] for j in rng.permutation(len(idx))]
        n = len(perm)
        n_val = int(np.floor(n * ratios[1]))
        n_test = int(np.floor(n * ratios[2])) if len(ratios) == 3 else 0
        n_train = n - n_val - n_test
        for j, i in enumerate(perm):
            assigned[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    entries = [replace(e, split=assigned[i]) for i, e in enumerate(manifest.entries)]
    return replace(manifest, entries=entries, split_ratios=ratios, seed=seed)


def rebase(manifest: DatasetManifest, new_root) -> DatasetManifest:
    """Same entries, refs rewritten relative to ``new_root`` so the manifest
    can be saved there."""
    new_root = Path(new_root)
    entries = [replace(e, ref=os.path.relpath(manifest.resolve(e.ref).resolve(), new_root.resolve())) for e in manifest.entries]
    return replace(manifest, entries=entries, root=new_root)


def relabel(manifest: DatasetManifest, labels: Sequence[int], classes: Sequence[str], name: str | None = None,
            note: str | None = None) -> DatasetManifest:
    """Derived manifest with replaced labels (e.g. cluster pseudo-labels)."""
    if len(labels) != len(manifest.entries):
        raise DataError(f"relabel: {len(labels)} labels for {len(manifest.entries)} entries")
    entries = [replace(e, label=int(lab)) for e, lab in zip(manifest.entries, labels)]
    notes = list(manifest.notes) + ([note] if note else [])
    return replace(manifest, name=name or manifest.name, classes=list(classes), entries=entries, notes=notes)


# -- synthetic domains ------------------------------------------------------------


@dataclass
class SyntheticDomainConfig:
    """Parametric "scan" images: an elliptical field with class-dependent
    bright blobs (class c carries c blobs). ``shift`` in [0, 1] moves the
    rendering style away from the target domain: intensity offset, reduced
    contrast and an oriented stripe texture. ``shift=0`` is the target."""

    n_classes: int = 2
    samples_per_class: int = 100
    image_size: int = 16
    channels: int = 1
    shift: float = 0.0
    noise: float = 0.09
    blob_amplitude: float = 0.4
    blob_sigma: float = 1.5
    style_offset: float = 0.3
    style_contrast: float = 0.3
    style_texture: float = 0.1
    seed: int = 0
    class_names: list[str] | None = None

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("synthetic n_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("synthetic samples_per_class must be >= 1")
        if self.image_size < 8:
            raise ConfigError("synthetic image_size must be >= 8")
        if self.channels not in (1, 3):
            raise ConfigError("synthetic channels must be 1 or 3")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError(f"shift must be in [0, 1], got {self.shift}")
        if self.noise < 0 or self.blob_sigma <= 0:
            raise ConfigError("noise must be >= 0 and blob_sigma > 0")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ConfigError("class_names length must equal n_classes")

    def names(self) -> list[str]:
        return list(self.class_names) if self.class_names else [f"class{c}" for c in range(self.n_classes)]


def render_domain(cfg: SyntheticDomainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Images (N, C, S, S) in [0, 1] quantised to 8 bits, and labels."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = cx = (s - 1) / 2.0
    ry, rx = 0.42 * s, 0.36 * s
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    ys, xs = np.nonzero(((yy - cy) / (0.75 * ry)) ** 2 + ((xx - cx) / (0.75 * rx)) ** 2 <= 1.0)

    labels = np.repeat(np.arange(cfg.n_classes), cfg.samples_per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.empty((len(labels), cfg.channels, s, s), np.float32)
    shift = cfg.shift
    for n, label in enumerate(labels):
        field_ = np.where(inside, 0.35, 0.08) + rng.normal(0.0, 0.02)
        for _ in range(label):
            j = rng.integers(len(ys))
            by, bx = ys[j] + rng.uniform(-0.5, 0.5), xs[j] + rng.uniform(-0.5, 0.5)
            amp = cfg.blob_amplitude * rng.uniform(0.8, 1.2)
            field_ = field_ + amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * cfg.blob_sigma ** 2))
        # Style drift away from the target rendering; vanishes at shift == 0.
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(1.9 * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        styled = ((1.0 - cfg.style_contrast * shift) * field_ + cfg.style_offset * shift
                  + cfg.style_texture * shift * stripes)
        styled = styled + rng.normal(0.0, cfg.noise, size=(s, s))
        img = np.clip(styled, 0.0, 1.0)
        images[n] = np.broadcast_to(img, (cfg.channels, s, s))
    images = np.rint(images * 255.0) / 255.0
    return images.astype(np.float32), labels.astype(np.int64)


def write_domain(cfg: SyntheticDomainConfig, out_dir, name: str, ratios: Sequence[float] = (),
                 split_seed: int | None = None) -> DatasetManifest:
    """Render a domain to PNG files plus a manifest; split it when ratios are given."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images, labels = render_domain(cfg)
    entries = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        ref = f"images/{i:06d}.png"
        save_png(img, out_dir / ref)
        entries.append(Entry(ref, int(lab)))
    manifest = DatasetManifest(
        name, cfg.names(), entries, notes=[f"synthetic shift={cfg.shift} noise={cfg.noise} seed={cfg.seed}"],
        root=out_dir,
    )
    if ratios:
        manifest = split_manifest(manifest, ratios, cfg.seed if split_seed is None else split_seed)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


DEFAULT_SHIFTS = {"source": 1.0, "transition": 0.5, "target": 0.0}


def gen_synthetic_domains(
    config: SyntheticDomainConfig,
    out_dir=None,
    shifts: dict[str, float] | None = None,
    samples_per_class: dict[str, int] | None = None,
    ratios: dict[str, Sequence[float]] | None = None,
) -> dict[str, DatasetManifest] | dict[str, tuple[np.ndarray, np.ndarray]]:
    """Source / transition / target domains sharing one class structure.

    Each domain gets its own sub-seed. With ``out_dir`` the domains are
    written as PNG + manifest and manifests are returned; otherwise the raw
    (images, labels) arrays are returned.
    """
    shifts = dict(DEFAULT_SHIFTS if shifts is None else shifts)
    samples_per_class = samples_per_class or {}
    ratios = ratios or {}
    seeds = np.random.SeedSequence(config.seed).generate_state(len(shifts))
    out = {}
    for (name, shift), sub in zip(shifts.items(), seeds):
        cfg = replace(config, shift=float(shift), seed=int(sub),
                      samples_per_class=samples_per_class.get(name, config.samples_per_class))
        if out_dir is None:
            out[name] = render_domain(cfg)
        else:
            out[name] = write_domain(cfg, Path(out_dir) / name, name, ratios.get(name, ()), split_seed=config.seed)
    return out
