"""Datasets: image-folder ingestion, a synthetic SAR-like generator, and the
derived small-sample / few-shot / noisy-label / perturbed datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment
from .errors import ConfigurationError, IngestionError, InputError


@dataclass
class Sample:
    image: np.ndarray  # 2-D float64 in [0, 1]
    label: int
    sample_id: str


@dataclass
class Dataset:
    items: list[Sample]
    class_names: list[str]

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.items], dtype=np.int64)

    def images(self) -> np.ndarray:
        """Stack all images into an (n, H, W) array; sizes must agree."""
        return np.stack([s.image for s in self.items])

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[i] for i in indices], list(self.class_names))

    def validate(self) -> None:
        if not self.items:
            raise InputError("dataset is empty")
        ids = [s.sample_id for s in self.items]
        if len(set(ids)) != len(ids):
            raise InputError("sample_ids are not unique")
        shapes = {s.image.shape for s in self.items}
        if len(shapes) != 1:
            raise InputError(f"images have inconsistent sizes: {sorted(shapes)}")
        for s in self.items:
            if not 0 <= s.label < self.num_classes:
                raise InputError(f"label {s.label} out of range for {self.num_classes} classes")


def _class_indices(ds: Dataset) -> list[list[int]]:
    per_class = [[] for _ in range(ds.num_classes)]
    for i, s in enumerate(ds.items):
        per_class[s.label].append(i)
    return per_class


# ---------------------------------------------------------------------------
# folder ingestion

_MODE_MAXVAL = {"L": 255.0, "I;16": 65535.0, "I;16B": 65535.0}


def _center_fit(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop larger images / zero-pad smaller ones to size x size."""
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = out.take(range(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad, mode="constant")
    return out


def load_image_folder(path, size: int | None = None) -> Dataset:
    """Load a `root/<class_name>/<image>` folder of grayscale PNGs.

    Pixel values are scaled to [0, 1] by the bit-depth maximum; classes are
    ordered lexicographically by subdirectory name. Images are center-cropped
    or zero-padded to ``size`` (default: the largest dimension encountered).
    8- and 16-bit grayscale files are accepted but must not be mixed.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class subdirectories under {root}")

    mode_seen = None
    raw: list[tuple[np.ndarray, int, str]] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise IngestionError(f"class directory is empty: {cdir}")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.load()
                    mode = im.mode
                    arr = np.asarray(im, dtype=np.float64)
            except (OSError, SyntaxError) as exc:
                raise IngestionError(f"unreadable image {f}: {exc}") from exc
            if mode not in _MODE_MAXVAL:
                raise IngestionError(f"unsupported mode {mode!r} (need 8/16-bit grayscale): {f}")
            if mode_seen is None:
                mode_seen = mode
            elif _MODE_MAXVAL[mode] != _MODE_MAXVAL[mode_seen]:
                raise IngestionError(f"inconsistent bit depth ({mode!r} vs {mode_seen!r}): {f}")
            raw.append((arr / _MODE_MAXVAL[mode], label, f"{cdir.name}/{f.name}"))

    if size is None:
        size = max(max(a.shape) for a, _, _ in raw)
    items = [Sample(_center_fit(a, size), lab, sid) for a, lab, sid in raw]
    ds = Dataset(items, [d.name for d in class_dirs])
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# synthetic SAR-like imagery

def _shape_mask(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test for a canonical silhouette on coordinates in [-1, 1]."""
    r = np.hypot(u, v)
    if name == "rectangle":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.45)
    if name == "ellipse":
        return (u / 0.85) ** 2 + (v / 0.5) ** 2 <= 1.0
    if name == "cross":
        return ((np.abs(u) <= 0.22) & (np.abs(v) <= 0.85)) | ((np.abs(v) <= 0.22) & (np.abs(u) <= 0.85))
    if name == "ring":
        return (r >= 0.45) & (r <= 0.8)
    if name == "triangle":
        return (v >= -0.55) & (v <= 0.8 - 1.7 * np.abs(u))
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 0.8
    if name == "tee":
        return ((np.abs(v + 0.62) <= 0.2) & (np.abs(u) <= 0.8)) | ((np.abs(u) <= 0.2) & (v >= -0.62) & (v <= 0.82))
    if name == "ell":
        return ((np.abs(u + 0.55) <= 0.22) & (np.abs(v) <= 0.8)) | ((np.abs(v - 0.58) <= 0.22) & (u >= -0.55) & (u <= 0.8))
    if name == "aitch":
        bars = (np.abs(np.abs(u) - 0.55) <= 0.18) & (np.abs(v) <= 0.8)
        return bars | ((np.abs(v) <= 0.18) & (np.abs(u) <= 0.55))
    if name == "twin_bars":
        return (np.abs(np.abs(u) - 0.45) <= 0.15) & (np.abs(v) <= 0.8)
    if name == "u_shape":
        bars = (np.abs(np.abs(u) - 0.55) <= 0.18) & (np.abs(v) <= 0.75)
        return bars | ((np.abs(v - 0.6) <= 0.18) & (np.abs(u) <= 0.55))
    if name == "triad":
        mask = np.zeros_like(u, dtype=bool)
        for ang in (90.0, 210.0, 330.0):
            cx = 0.55 * math.cos(math.radians(ang))
            cy = 0.55 * math.sin(math.radians(ang))
            mask |= np.hypot(u - cx, v - cy) <= 0.28
        return mask
    raise ConfigurationError(f"unknown shape family {name!r}")


SHAPE_FAMILIES = ("rectangle", "ellipse", "cross", "ring", "triangle", "diamond",
                  "tee", "ell", "aitch", "twin_bars", "u_shape", "triad")


@dataclass
class SynthConfig:
    """Synthetic dataset: one silhouette family per class, random pose angle,
    multiplicative speckle. Intensity jitter scales with speckle_level so a
    zero level yields fully deterministic per-class images."""

    num_classes: int = 10
    samples_per_class: int = 50
    image_size: int = 64
    speckle_level: float = 0.5
    pose_angle_range: float = 45.0
    seed: int = 10

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > len(SHAPE_FAMILIES):
            raise ConfigurationError(
                f"num_classes must be <= {len(SHAPE_FAMILIES)} (shape catalog), got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8")
        if self.speckle_level < 0 or self.pose_angle_range < 0:
            raise ConfigurationError("speckle_level and pose_angle_range must be >= 0")


def _render_silhouette(family: str, size: int, angle_deg: float) -> np.ndarray:
    coords = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    x, y = np.meshgrid(coords, coords, indexing="xy")
    t = math.radians(angle_deg)
    u = math.cos(t) * x + math.sin(t) * y
    v = -math.sin(t) * x + math.cos(t) * y
    return _shape_mask(family, u, v).astype(np.float64)


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate the deterministic synthetic dataset described by ``cfg``."""
    cfg.validate()
    items = []
    background = 0.06
    for c in range(cfg.num_classes):
        family = SHAPE_FAMILIES[c]
        for j in range(cfg.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, c, j)))
            angle = rng.uniform(-cfg.pose_angle_range, cfg.pose_angle_range)
            mask = _render_silhouette(family, cfg.image_size, angle)
            # jitter the target reflectivity along with speckle strength
            intensity = 0.75 + 0.3 * cfg.speckle_level * rng.uniform(-1.0, 1.0)
            img = background + (intensity - background) * mask
            if cfg.speckle_level > 0:
                img = img * (1.0 + cfg.speckle_level * rng.standard_normal(img.shape))
            img = np.clip(img, 0.0, 1.0)
            items.append(Sample(img, c, f"synth-{c:02d}-{j:04d}"))
    return Dataset(items, list(SHAPE_FAMILIES[:cfg.num_classes]))


# ---------------------------------------------------------------------------
# derived datasets

def proportional_split(ds: Dataset, denominator: int, seed: int) -> tuple[Dataset, Dataset]:
    """Per class, keep floor(n_c / denominator) samples (at least 1), drawn
    uniformly without replacement; returns (small, rest)."""
    if denominator < 1:
        raise ConfigurationError(f"denominator must be >= 1, got {denominator}")
    per_class = _class_indices(ds)
    rng = np.random.default_rng(seed)
    selected: list[int] = []
    for label, indices in enumerate(per_class):
        if not indices:
            raise InputError(f"class {label} has no samples")
        k = max(1, len(indices) // denominator)
        selected.extend(rng.choice(indices, size=k, replace=False).tolist())
    chosen = set(selected)
    small = ds.subset(sorted(chosen))
    rest = ds.subset([i for i in range(len(ds)) if i not in chosen])
    return small, rest


def few_shot_split(ds: Dataset, shots: int, seed: int) -> tuple[Dataset, Dataset]:
    """Keep exactly ``shots`` samples per class; returns (small, rest)."""
    if shots < 1:
        raise ConfigurationError(f"shots must be >= 1, got {shots}")
    per_class = _class_indices(ds)
    smallest = min((len(ix) for ix in per_class), default=0)
    if shots > smallest:
        raise InputError(f"shots={shots} exceeds the smallest class size {smallest}")
    rng = np.random.default_rng(seed)
    selected: list[int] = []
    for indices in per_class:
        selected.extend(rng.choice(indices, size=shots, replace=False).tolist())
    chosen = set(selected)
    small = ds.subset(sorted(chosen))
    rest = ds.subset([i for i in range(len(ds)) if i not in chosen])
    return small, rest


def inject_label_noise(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Relabel round(ratio * n_c) samples per class to a uniformly random
    different class. Images are untouched."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"noise ratio must be in [0, 1), got {ratio}")
    if ds.num_classes < 2:
        raise InputError("label noise needs at least 2 classes")
    rng = np.random.default_rng(seed)
    new_labels = {i: s.label for i, s in enumerate(ds.items)}
    for label, indices in enumerate(_class_indices(ds)):
        m = int(math.floor(ratio * len(indices) + 0.5))
        if m == 0:
            continue
        picked = rng.choice(indices, size=m, replace=False)
        for i in picked:
            other = int(rng.integers(0, ds.num_classes - 1))
            if other >= label:
                other += 1
            new_labels[int(i)] = other
    items = [Sample(s.image, new_labels[i], s.sample_id) for i, s in enumerate(ds.items)]
    return Dataset(items, list(ds.class_names))


def perturb_dataset(ds: Dataset, kind: str, strength: float, seed: int = 0) -> Dataset:
    """Apply fixed-strength Gaussian noise or blur to every image."""
    if kind == "noise":
        if not 0.0 < strength <= 1.0:
            raise InputError(f"noise strength must be in (0, 1], got {strength}")
        items = []
        for i, s in enumerate(ds.items):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
            items.append(Sample(augment.gaussian_noise(s.image, strength, rng), s.label, s.sample_id))
    elif kind == "blur":
        if strength <= 0:
            raise InputError(f"blur strength must be > 0, got {strength}")
        items = [Sample(augment.blur(s.image, strength), s.label, s.sample_id) for s in ds.items]
    else:
        raise ConfigurationError(f"unknown perturbation kind {kind!r} (expected 'noise' or 'blur')")
    return Dataset(items, list(ds.class_names))


# ---------------------------------------------------------------------------
# declarative split description

@dataclass
class Perturbation:
    kind: str
    strength: float


@dataclass
class SplitSpec:
    """Declarative description of a derived dataset."""

    kind: str = "proportional"  # or "few_shot"
    ratio_denominator: int = 32
    shots: int = 1
    label_noise_ratio: float = 0.0
    perturbation: Perturbation | None = None
    seed: int = 10

    def validate(self) -> None:
        if self.kind not in ("proportional", "few_shot"):
            raise ConfigurationError(f"unknown split kind {self.kind!r}")
        if self.kind == "proportional" and self.ratio_denominator < 1:
            raise ConfigurationError("ratio_denominator must be >= 1")
        if self.kind == "few_shot" and self.shots < 1:
            raise ConfigurationError("shots must be >= 1")
        if not 0.0 <= self.label_noise_ratio < 1.0:
            raise ConfigurationError("label_noise_ratio must be in [0, 1)")
        if self.perturbation is not None and self.perturbation.kind not in ("noise", "blur"):
            raise ConfigurationError(f"unknown perturbation kind {self.perturbation.kind!r}")

    def apply(self, ds: Dataset) -> tuple[Dataset, Dataset, list[str]]:
        """Split ``ds`` and inject label noise into the small part.

        Returns (small, rest, relabeled sample_ids). Perturbation is not
        applied here; evaluation decides which subsets it degrades.
        """
        self.validate()
        if self.kind == "proportional":
            small, rest = proportional_split(ds, self.ratio_denominator, self.seed)
        else:
            small, rest = few_shot_split(ds, self.shots, self.seed)
        relabeled: list[str] = []
        if self.label_noise_ratio > 0:
            noisy = inject_label_noise(small, self.label_noise_ratio, self.seed)
            relabeled = [a.sample_id for a, b in zip(noisy.items, small.items) if a.label != b.label]
            small = noisy
        return small, rest, relabeled


def write_split_manifest(path, small: Dataset, rest: Dataset, relabeled: list[str] | None = None) -> None:
    """Emit an auditable CSV (sample_id, class, subset, relabeled)."""
    flagged = set(relabeled or [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class", "subset", "relabeled"])
        for subset, ds in (("small", small), ("rest", rest)):
            for s in ds.items:
                writer.writerow([s.sample_id, ds.class_names[s.label], subset, int(s.sample_id in flagged)])
