"""Synthetic long-tail 2D segmentation data, raster I/O, and patient-wise splits.

Labels use class 0 for background; foreground classes 1..C follow a Zipf
pixel-share law with configurable exponent. Datasets are stored as an
``index.tsv`` plus one binary raster per image/label (see `save_dataset`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass
class Sample2D:
    """One grayscale slice with an optional label map."""

    image: np.ndarray                 # H x W float in [0, 1]
    label: Optional[np.ndarray]       # H x W int class indices, or None
    patient_id: str
    slice_index: int

    def copy(self) -> "Sample2D":
        return Sample2D(
            image=self.image.copy(),
            label=None if self.label is None else self.label.copy(),
            patient_id=self.patient_id,
            slice_index=self.slice_index,
        )


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    val: list
    test: list
    label_ratio: float


@dataclass
class ZipfSpec:
    """Parameters of the synthetic generator.

    `num_classes` counts foreground classes; the label maps additionally
    contain background class 0, so label values lie in {0..num_classes}.
    """

    num_classes: int
    exponent: float
    image_size: tuple = (64, 64)
    num_patients: int = 10
    slices_per_patient: int = 5
    shape_family: str = "disks"       # disks | rings | blobs
    seed: int = 0
    foreground_budget: float = 0.30   # target total foreground pixel share
    # appearance model: class intensity levels, per-patient/per-class shifts,
    # and pixel noise; larger shifts/noise make the task harder to solve from
    # intensity alone and reward shape cues
    level_range: tuple = (0.45, 0.9)
    level_jitter: float = 0.04
    patient_offset: float = 0.12
    noise_sigma: float = 0.08
    background_level: float = 0.15

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 foreground classes, got {self.num_classes}")
        if self.exponent < 0:
            raise ValueError("exponent must be >= 0")
        h, w = self.image_size
        if h <= 0 or w <= 0 or self.num_patients <= 0 or self.slices_per_patient <= 0:
            raise ValueError("sizes and counts must be positive")
        if self.shape_family not in ("disks", "rings", "blobs", "mixed"):
            raise ValueError(f"unknown shape family {self.shape_family!r}")


def zipf_shares(num_classes: int, exponent: float) -> np.ndarray:
    """Normalized expected foreground pixel share per class 1..C."""
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** (-float(exponent))
    return w / w.sum()


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]. Constant inputs map to zeros with a warning."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        warnings.warn("constant image: normalize_intensity returns all zeros")
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def _paint_disk(label, cy, cx, r, cls):
    h, w = label.shape
    yy, xx = np.ogrid[:h, :w]
    label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls


def _paint_ring(label, cy, cx, r_outer, cls):
    h, w = label.shape
    yy, xx = np.ogrid[:h, :w]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    r_in = r_outer / 2.0
    label[(d2 <= r_outer * r_outer) & (d2 >= r_in * r_in)] = cls


def _paint_blob(label, cy, cx, area, cls, rng):
    # ellipse with random aspect and orientation, matched to the target area
    h, w = label.shape
    aspect = rng.uniform(0.6, 1.6)
    a = np.sqrt(area / np.pi * aspect)
    b = np.sqrt(area / np.pi / aspect)
    phi = rng.uniform(0, np.pi)
    yy, xx = np.ogrid[:h, :w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    q = (u / a) ** 2 + (v / b) ** 2
    # grow the blob over background pixels in order of elliptical distance so
    # the painted count matches the target area despite pixelation/overlap
    q = np.where(label == 0, q, np.inf)
    k = int(round(area))
    thresh = np.partition(q.ravel(), k - 1)[k - 1]
    label[q <= thresh] = cls


def _class_families(spec: ZipfSpec) -> list:
    """Shape family per foreground class. In the `mixed` family each class
    gets its own morphology, so shape (not intensity) identifies the class."""
    if spec.shape_family == "mixed":
        cycle = ("disks", "rings", "blobs")
        return [cycle[c % 3] for c in range(spec.num_classes)]
    return [spec.shape_family] * spec.num_classes


def _circumradius(family: str, area: float) -> float:
    if family == "rings":
        return np.sqrt(area / (0.75 * np.pi))
    return np.sqrt(area / np.pi) * (1.3 if family == "blobs" else 1.0)


def _place_shapes(spec: ZipfSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    shares = zipf_shares(spec.num_classes, spec.exponent)
    areas = shares * spec.foreground_budget * h * w
    families = _class_families(spec)
    # effective circumscribing radius per class, used for non-overlap rejection
    radii = np.array([_circumradius(f, a) for f, a in zip(families, areas)])
    label = np.zeros((h, w), dtype=np.uint8)
    placed = []  # (cy, cx, r)
    for cls in range(1, spec.num_classes + 1):
        r = radii[cls - 1]
        margin = min(r, min(h, w) / 2 - 1)
        for _ in range(200):
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 1) ** 2 for py, px, pr in placed):
                break
        placed.append((cy, cx, r))
        family = families[cls - 1]
        if family == "disks":
            _paint_disk(label, cy, cx, np.sqrt(areas[cls - 1] / np.pi), cls)
        elif family == "rings":
            _paint_ring(label, cy, cx, radii[cls - 1], cls)
        else:
            _paint_blob(label, cy, cx, areas[cls - 1], cls, rng)
    return label


def generate_synthetic(spec: ZipfSpec) -> list:
    """Generate a labeled synthetic dataset following the Zipf share law.

    Per-patient intensity offsets make appearance vary across patients, so a
    model trained on few patients must generalize.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base_levels = np.linspace(*spec.level_range, spec.num_classes)
    samples = []
    for p in range(spec.num_patients):
        pid = f"pat{p:03d}"
        offset = rng.uniform(-spec.patient_offset, spec.patient_offset)
        level_jitter = rng.normal(0.0, spec.level_jitter, size=spec.num_classes)
        for s in range(spec.slices_per_patient):
            label = _place_shapes(spec, rng)
            img = np.full(spec.image_size, spec.background_level, dtype=np.float64)
            for cls in range(1, spec.num_classes + 1):
                img[label == cls] = base_levels[cls - 1] + level_jitter[cls - 1] + offset
            img += rng.normal(0.0, spec.noise_sigma, size=spec.image_size)
            img = gaussian_filter(img, sigma=0.7)
            img = normalize_intensity(img)
            samples.append(Sample2D(image=img, label=label, patient_id=pid, slice_index=s))
    return samples


def class_frequency(samples: Sequence[Sample2D]) -> dict:
    """Pixel count per class over a fully labeled sample sequence."""
    counts: dict = {}
    for s in samples:
        if s.label is None:
            raise ValueError(f"unlabeled sample {s.patient_id}/{s.slice_index} in class_frequency")
        vals, cnts = np.unique(s.label, return_counts=True)
        for v, c in zip(vals, cnts):
            counts[int(v)] = counts.get(int(v), 0) + int(c)
    return counts


def split_by_patient(samples: Sequence[Sample2D], label_ratio: float,
                     val_frac: float, test_frac: float, seed: int) -> DatasetSplit:
    """Patient-disjoint train/val/test split; label ratio counts patients."""
    if not (0 < label_ratio <= 1):
        raise ValueError("label_ratio must be in (0, 1]")
    if val_frac + test_frac >= 1:
        raise ValueError("val_frac + test_frac must be < 1")
    patients = sorted({s.patient_id for s in samples})
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(patients))
    n = len(order)
    n_test = int(round(test_frac * n))
    n_val = int(round(val_frac * n))
    test_p = set(order[:n_test])
    val_p = set(order[n_test:n_test + n_val])
    train_p = order[n_test + n_val:]
    n_lab = int(round(label_ratio * len(train_p)))
    if n_lab == 0:
        raise ValueError(
            f"label_ratio {label_ratio} rounds to zero labeled patients out of "
            f"{len(train_p)} train patients; raise the ratio")
    lab_p = set(train_p[:n_lab])
    unlab_p = set(train_p[n_lab:])
    labeled = [s for s in samples if s.patient_id in lab_p]
    unlabeled = []
    for s in samples:
        if s.patient_id in unlab_p:
            u = s.copy()
            u.label = None
            unlabeled.append(u)
    val = [s for s in samples if s.patient_id in val_p]
    test = [s for s in samples if s.patient_id in test_p]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, val=val, test=test,
                        label_ratio=label_ratio)


# ---------------------------------------------------------------------------
# Raster I/O: 4-line text header (magic, width, height, maxval) + little-endian
# row-major binary payload. Images are 16-bit (`R16`), labels 8-bit (`R8`).

def _write_raster(path: Path, arr: np.ndarray, magic: str) -> None:
    h, w = arr.shape
    dtype = "<u2" if magic == "R16" else "u1"
    maxval = 65535 if magic == "R16" else 255
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w}\n{h}\n{maxval}\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr.astype(dtype)).tobytes())


def _read_raster(path: Path) -> tuple:
    with open(path, "rb") as f:
        header = [f.readline().strip().decode("ascii") for _ in range(4)]
        magic, w, h, _maxval = header[0], int(header[1]), int(header[2]), int(header[3])
        if magic not in ("R16", "R8"):
            raise ValueError(f"unknown magic header {magic!r} in {path}")
        dtype = np.dtype("<u2") if magic == "R16" else np.dtype("u1")
        payload = f.read(h * w * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return magic, arr


def save_dataset(samples: Sequence[Sample2D], root_path) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        stem = f"{s.patient_id}_{s.slice_index:04d}"
        img_file = f"{stem}.r16"
        q = np.clip(np.round(s.image * 65535.0), 0, 65535)
        _write_raster(root / img_file, q, "R16")
        if s.label is not None:
            lab_file = f"{stem}_lab.r8"
            _write_raster(root / lab_file, s.label, "R8")
        else:
            lab_file = "-"
        rows.append((s.patient_id, s.slice_index, img_file, lab_file))
    with open(root / "index.tsv", "w") as f:
        f.write("patient_id\tslice_index\timage_file\tlabel_file\n")
        for pid, si, imgf, labf in rows:
            f.write(f"{pid}\t{si}\t{imgf}\t{labf}\n")


def load_dataset(root_path) -> list:
    root = Path(root_path)
    index = root / "index.tsv"
    if not index.exists():
        raise FileNotFoundError(f"missing index file {index}")
    samples = []
    with open(index) as f:
        header = f.readline()
        if not header.startswith("patient_id"):
            raise ValueError(f"bad index header in {index}")
        for line in f:
            if not line.strip():
                continue
            pid, si, imgf, labf = line.rstrip("\n").split("\t")
            img_path = root / imgf
            if not img_path.exists():
                raise FileNotFoundError(f"missing image file {img_path}")
            magic, raw = _read_raster(img_path)
            if magic != "R16":
                raise ValueError(f"image raster {img_path} has magic {magic}, expected R16")
            image = raw.astype(np.float64) / 65535.0
            label = None
            if labf != "-":
                lab_path = root / labf
                if not lab_path.exists():
                    raise FileNotFoundError(f"missing label file {lab_path}")
                magic, label = _read_raster(lab_path)
                if magic != "R8":
                    raise ValueError(f"label raster {lab_path} has magic {magic}, expected R8")
                label = label.astype(np.int64)
                if label.shape != image.shape:
                    raise ValueError(
                        f"shape mismatch {image.shape} vs {label.shape} for {pid}/{si}")
            samples.append(Sample2D(image=image, label=label,
                                    patient_id=pid, slice_index=int(si)))
    return samples
