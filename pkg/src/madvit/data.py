"""Synthetic two-region glyph dataset, balancing, and augmentation.

Each class is a distinct ordered pair of glyph shapes placed at two of the
four quadrant anchors. Consecutive classes deliberately share position
signatures (same anchors, swapped or substituted glyphs), glyph colors, global
brightness and positions vary per sample, and a distractor glyph lands at an
unused quadrant, so nearest-centroid matching on raw pixels degrades while the
shape/location structure stays learnable. Anchors are paired only vertically
or diagonally so a horizontal flip never turns one class's layout into
another's.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .imageio import read_ppm, write_ppm

GLYPH_NAMES = ("plus", "ring", "cross", "bars", "diamond")
# quadrant indices: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right
ANCHOR_PAIRS = ((0, 3), (1, 2), (0, 2), (1, 3))
MAX_CLASSES = 20


@dataclass(frozen=True)
class ClassDef:
    name: str
    anchors: tuple[int, int]
    glyphs: tuple[int, int]


@dataclass
class Dataset:
    images: np.ndarray            # (n, s, s, 3) float64 in [0, 1]
    labels: np.ndarray            # (n,) int64
    class_names: list[str]
    split: str
    sample_seeds: np.ndarray      # (n,) uint64, per-sample generator seeds

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.images[i], int(self.labels[i])) for i in range(len(self))]

    def validate(self) -> "Dataset":
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DataError(f"images must be (n, s, s, 3), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values escape [0, 1]")
        n_classes = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise DataError(f"labels escape [0, {n_classes})")
        return self


def class_definitions(num_classes: int) -> list[ClassDef]:
    """Deterministic class table shared by every split and seed."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ConfigurationError(f"num_classes must lie in [2, {MAX_CLASSES}], got {num_classes}")
    n_glyphs = len(GLYPH_NAMES)
    pairs = [(a, b) for a in range(n_glyphs) for b in range(a + 1, n_glyphs)]
    defs: list[ClassDef] = []
    for j, (a, b) in enumerate(pairs):
        anchors = ANCHOR_PAIRS[(j // 2) % len(ANCHOR_PAIRS)]
        defs.append(ClassDef(name=f"class_{len(defs):02d}", anchors=anchors, glyphs=(a, b)))
        defs.append(ClassDef(name=f"class_{len(defs):02d}", anchors=anchors, glyphs=(b, a)))
    return defs[:num_classes]


def _glyph_mask(glyph: int, size: int) -> np.ndarray:
    half = size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    t = max(1, size // 6)
    name = GLYPH_NAMES[glyph]
    if name == "plus":
        return (np.abs(yy) <= t) | (np.abs(xx) <= t)
    if name == "ring":
        r2 = yy ** 2 + xx ** 2
        outer = (half + 0.5) ** 2
        inner = (half - t - 0.5) ** 2
        return (r2 <= outer) & (r2 >= inner)
    if name == "cross":
        return (np.abs(yy - xx) <= t) | (np.abs(yy + xx) <= t)
    if name == "bars":
        return np.abs(yy) % (2 * (t + 1)) <= t
    if name == "diamond":
        return np.abs(yy) + np.abs(xx) <= half
    raise ConfigurationError(f"unknown glyph index {glyph}")


def _anchor_centers(size: int) -> list[tuple[int, int]]:
    lo, hi = size // 4, (3 * size) // 4
    return [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]


def _paint(image: np.ndarray, mask: np.ndarray, row: int, col: int, color: np.ndarray) -> None:
    size = image.shape[0]
    g = mask.shape[0]
    half = g // 2
    r0, c0 = row - half, col - half
    rs, cs = max(0, r0), max(0, c0)
    re, ce = min(size, r0 + g), min(size, c0 + g)
    if re <= rs or ce <= cs:
        return
    sub = mask[rs - r0:re - r0, cs - c0:ce - c0]
    image[rs:re, cs:ce][sub] = color


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode("utf-8"))


def _render_sample(rng, class_def: ClassDef, size: int) -> np.ndarray:
    # The class signal is the glyph pair's relative arrangement, so the whole
    # scene translates per sample (absolute position is pure nuisance, which
    # is what defeats raw-pixel matching) while per-glyph jitter stays tiny.
    # A same-styled distractor at an unused quadrant and a global brightness
    # scale add nuisance axes a feature learner shrugs off; one distractor can
    # never complete a second valid anchor pair, so no ambiguity arises.
    image = rng.uniform(0.0, 0.2, (size, size, 3))
    centers = _anchor_centers(size)
    glyph_size = max(7, (2 * size // 5) | 1)
    jitter = max(1, size // 24)
    scene = max(2, size // 9)
    sr, sc = rng.integers(-scene, scene + 1, 2)
    placements = [(q, g) for q, g in zip(class_def.anchors, class_def.glyphs)]
    unused = [q for q in range(4) if q not in class_def.anchors]
    placements.append((unused[int(rng.integers(len(unused)))],
                       int(rng.integers(len(GLYPH_NAMES)))))
    for quadrant, glyph in placements:
        r, c = centers[quadrant]
        dr, dc = rng.integers(-jitter, jitter + 1, 2)
        color = rng.uniform(0.55, 1.0, 3)
        _paint(image, _glyph_mask(glyph, glyph_size),
               int(r + sr + dr), int(c + sc + dc), color)
    brightness = rng.uniform(0.6, 1.0)
    return np.clip(image * brightness, 0.0, 1.0)


def generate_synthetic_dataset(num_classes: int = 7, per_class: int = 100, size: int = 48,
                               seed: int = 0, split: str = "train") -> Dataset:
    """Deterministic dataset: same arguments, bitwise-identical pixels.

    Per-sample generators are derived from (seed, split, class, index), so the
    train and test splits of one seed never share samples while the class
    table stays identical across splits.
    """
    if per_class < 1:
        raise ConfigurationError(f"per_class must be >= 1, got {per_class}")
    if size < 8:
        raise ConfigurationError(f"image size must be >= 8, got {size}")
    defs = class_definitions(num_classes)
    count = num_classes * per_class
    images = np.empty((count, size, size, 3))
    labels = np.empty(count, dtype=np.int64)
    sample_seeds = np.empty(count, dtype=np.uint64)
    split_code = _split_code(split)
    i = 0
    for label, class_def in enumerate(defs):
        for index in range(per_class):
            ss = np.random.SeedSequence([seed, split_code, label, index])
            sample_seeds[i] = ss.generate_state(1, dtype=np.uint64)[0]
            images[i] = _render_sample(np.random.default_rng(ss), class_def, size)
            labels[i] = label
            i += 1
    return Dataset(images=images, labels=labels, class_names=[d.name for d in defs],
                   split=split, sample_seeds=sample_seeds).validate()


def upsample_balance(dataset: Dataset, rng) -> Dataset:
    """Duplicate minority-class samples (with replacement) up to the max count."""
    counts = np.bincount(dataset.labels, minlength=len(dataset.class_names))
    if counts.size and counts.min() == 0:
        empty = int(np.argmin(counts))
        raise DataError(f"class {dataset.class_names[empty]} has no samples to upsample")
    target = int(counts.max()) if counts.size else 0
    if (counts == target).all():
        return dataset
    extra = []
    for label in range(len(counts)):
        need = target - int(counts[label])
        if need <= 0:
            continue
        pool = np.flatnonzero(dataset.labels == label)
        extra.append(pool[rng.integers(0, len(pool), need)])
    picks = np.concatenate(extra)
    return Dataset(
        images=np.concatenate([dataset.images, dataset.images[picks]]),
        labels=np.concatenate([dataset.labels, dataset.labels[picks]]),
        class_names=dataset.class_names,
        split=dataset.split,
        sample_seeds=np.concatenate([dataset.sample_seeds, dataset.sample_seeds[picks]]),
    )


# -- augmentation -----------------------------------------------------------


def _bilinear_gather(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    top = image[r0, c0] * (1 - fc) + image[r0, c1] * fc
    bottom = image[r1, c0] * (1 - fc) + image[r1, c1] * fc
    return top * (1 - fr) + bottom * fr


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center with bilinear sampling; edges replicate."""
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    out_r, out_c = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = out_r - cy, out_c - cx
    src_r = np.cos(theta) * dy + np.sin(theta) * dx + cy
    src_c = -np.sin(theta) * dy + np.cos(theta) * dx + cx
    return _bilinear_gather(image, src_r, src_c)


def resize_image(image: np.ndarray, out_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = (np.arange(out_size) + 0.5) * h / out_size - 0.5
    cols = (np.arange(out_size) + 0.5) * w / out_size - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear_gather(image, grid_r, grid_c)


CROP_FRACTION = 0.875
ROTATE_DEGREES = 15.0
ERASE_FRACTION = (0.02, 0.20)
ERASE_ASPECT = (0.5, 2.0)


def sample_erase_box(rng, size: int) -> tuple[int, int, int, int]:
    """(row, col, height, width) whose realized area fraction stays in bounds."""
    lo, hi = ERASE_FRACTION
    while True:
        frac = rng.uniform(lo, hi)
        aspect = rng.uniform(*ERASE_ASPECT)
        eh = int(np.clip(np.rint(np.sqrt(frac * size * size * aspect)), 1, size))
        ew = int(np.clip(np.rint(np.sqrt(frac * size * size / aspect)), 1, size))
        if lo <= (eh * ew) / (size * size) <= hi:
            break
    r = int(rng.integers(0, size - eh + 1))
    c = int(rng.integers(0, size - ew + 1))
    return r, c, eh, ew


def augment(image: np.ndarray, rng) -> np.ndarray:
    """Training-time augmentation; the evaluation split is never augmented.

    Order: rotate within +/-15 degrees, crop to 87.5% and resize back,
    horizontal flip half the time, erase one noise-filled rectangle covering
    2-20% of the area. Pixels stay inside [0, 1].
    """
    size = image.shape[0]
    out = rotate_image(image, rng.uniform(-ROTATE_DEGREES, ROTATE_DEGREES))
    crop = max(1, int(round(CROP_FRACTION * size)))
    r = int(rng.integers(0, size - crop + 1))
    c = int(rng.integers(0, size - crop + 1))
    out = resize_image(out[r:r + crop, c:c + crop], size)
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    er, ec, eh, ew = sample_erase_box(rng, size)
    out[er:er + eh, ec:ec + ew] = rng.uniform(0.0, 1.0, (eh, ew, 3))
    return np.clip(out, 0.0, 1.0)


# -- reference baseline ------------------------------------------------------


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of nearest class-centroid matching on raw pixels.

    The classifier the dataset is designed to defeat; used as a floor check
    that the task is not linearly trivial.
    """
    n_classes = len(train.class_names)
    flat_train = train.images.reshape(len(train), -1)
    flat_test = test.images.reshape(len(test), -1)
    centroids = np.stack([flat_train[train.labels == c].mean(axis=0) for c in range(n_classes)])
    d2 = ((flat_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == test.labels).mean())


# -- on-disk form ------------------------------------------------------------


def save_dataset(dataset: Dataset, out_dir) -> list[tuple[str, int, int]]:
    """Write one directory per class of P6 images; returns manifest rows."""
    out_dir = Path(out_dir)
    rows = []
    index_within = {}
    for i in range(len(dataset)):
        label = int(dataset.labels[i])
        name = dataset.class_names[label]
        idx = index_within.get(label, 0)
        index_within[label] = idx + 1
        rel = Path(dataset.split) / name / f"{idx:05d}.ppm"
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(path, dataset.images[i])
        rows.append((str(rel), label, int(dataset.sample_seeds[i])))
    return rows


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label", "seed"])
        writer.writerows(rows)


def load_dataset(root, split: str) -> Dataset:
    """Read back a directory tree written by save_dataset."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DataError(f"no {split!r} directory under {root}")
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {split_dir}")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.ppm"))
        if not files:
            raise DataError(f"class directory {class_dir} holds no images")
        for file in files:
            images.append(read_ppm(file))
            labels.append(label)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=[p.name for p in class_dirs],
        split=split,
        sample_seeds=np.zeros(len(images), dtype=np.uint64),
    ).validate()
