"""Dataset ingestion, cropping, augmentation, class balancing and fold splitting.

Annotation CSV schema (header required)::

    image,cx,cy,class[,true_cx,true_cy]

``image`` is a path relative to the image root, ``cx``/``cy`` are integer
pixel coordinates of the cell centre and ``class`` is one of
``granulocyte``, ``mitosis``, ``tumor``.  Images are 8-bit RGB PNGs scaled
to ``[0, 1]`` on load.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ContractError, ParseError
from .losses import CLASS_NAMES, NUM_CLASSES
from .stn import CropGeometry, bilinear_sample, check_offsets, crop, offset_range, random_offset_crop

REQUIRED_COLUMNS = ("image", "cx", "cy", "class")
TRUTH_COLUMNS = ("true_cx", "true_cy")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


@dataclass(eq=False)
class Sample:
    """One labelled cell.

    ``context`` is an 8-bit ``[3, H, W]`` region around the cell with the cell
    at pixel ``center``.  The training patch :attr:`image` is the ``patch_size``
    crop whose origin is shifted by ``(dx, dy)`` from the centred crop, so the
    cell sits at ``patch_size // 2 - (dx, dy)`` inside it.
    """

    context: np.ndarray = field(repr=False)
    center: Tuple[int, int]
    label: int
    dx: int = 0
    dy: int = 0
    patch_size: int = 128
    source_id: str = ""
    truth: Optional[dict] = None

    @property
    def image(self) -> np.ndarray:
        """Patch as float64 in ``[0, 1]``, shape ``[3, patch_size, patch_size]``."""
        half = self.patch_size // 2
        cx, cy = self.center
        return crop(self.context, cx - half + self.dx, cy - half + self.dy, self.patch_size) / 255.0

    @property
    def centered(self) -> bool:
        return self.dx == 0 and self.dy == 0


@dataclass(frozen=True)
class AnnotationRecord:
    image: Path
    cx: int
    cy: int
    label: int
    line: int
    true_center: Optional[Tuple[float, float]] = None


@dataclass
class FoldPlan:
    k: int
    folds: List[np.ndarray]
    seed: int

    def train_indices(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))

    def test_indices(self, i: int) -> np.ndarray:
        return np.sort(self.folds[i])


# -- ingestion -------------------------------------------------------------------


def class_index(name: str) -> int:
    try:
        return CLASS_NAMES.index(name.strip().lower())
    except ValueError:
        raise ContractError(f"unknown class {name!r}; expected one of {', '.join(CLASS_NAMES)}") from None


def load_annotations(csv_path, image_root=None) -> List[AnnotationRecord]:
    csv_path = Path(csv_path)
    root = Path(image_root) if image_root is not None else csv_path.parent
    if not csv_path.is_file():
        raise ParseError(f"annotation file {csv_path} not found")
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty annotation file, header expected", line=1)
        header = [h.strip() for h in header]
        if tuple(header[:4]) != REQUIRED_COLUMNS:
            raise ParseError(f"header must start with {','.join(REQUIRED_COLUMNS)}, got {','.join(header)}", line=1)
        has_truth = tuple(header[4:6]) == TRUTH_COLUMNS
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
            name, cx, cy, cls = (cell.strip() for cell in row[:4])
            try:
                cx_i, cy_i = int(cx), int(cy)
            except ValueError:
                raise ParseError(f"coordinates must be integers, got ({cx!r}, {cy!r})", line=line) from None
            try:
                label = class_index(cls)
            except ContractError:
                raise ParseError(f"unknown class {cls!r}", line=line) from None
            truth = None
            if has_truth:
                try:
                    truth = (float(row[4]), float(row[5]))
                except ValueError:
                    raise ParseError(f"true centre must be numeric, got {row[4:6]!r}", line=line) from None
            records.append(AnnotationRecord(root / name, cx_i, cy_i, label, line, truth))
    return records


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB image as ``[3, H, W]`` floats in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    arr = to_uint8(image).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path, format="PNG")


def crop_centered(image: np.ndarray, center: Tuple[int, int], size: int, name: str = "") -> np.ndarray:
    """Axis-aligned ``size`` crop with the cell at pixel ``(size // 2, size // 2)``."""
    cx, cy = int(center[0]), int(center[1])
    half = size // 2
    try:
        return crop(image, cx - half, cy - half, size).copy()
    except ContractError as exc:
        label = f" for {name}" if name else ""
        raise ContractError(f"centred crop{label} at ({cx}, {cy}) out of bounds: {exc}") from None


def sample_from_image(
    image: np.ndarray,
    center: Tuple[int, int],
    label: int,
    geom: CropGeometry,
    source_id: str = "",
    truth: Optional[dict] = None,
) -> Sample:
    """Centred sample keeping the surrounding context needed for offset crops.

    The centred ``d_i`` crop must fit inside ``image``.  Near the border the
    stored context is truncated and later offset draws are narrowed to match.
    """
    cx, cy = int(center[0]), int(center[1])
    crop_centered(image, (cx, cy), geom.d_i, name=source_id)
    _, h, w = image.shape
    reach = geom.context_size // 2
    x0, y0 = max(0, cx - reach), max(0, cy - reach)
    x1, y1 = min(w, cx - reach + geom.context_size), min(h, cy - reach + geom.context_size)
    context = to_uint8(image[:, y0:y1, x0:x1])
    return Sample(context, (cx - x0, cy - y0), label, 0, 0, geom.d_i, source_id, truth)


def samples_from_annotations(records: Sequence[AnnotationRecord], geom: CropGeometry) -> List[Sample]:
    cache: Dict[Path, np.ndarray] = {}
    out = []
    for rec in records:
        if rec.image not in cache:
            if not rec.image.is_file():
                raise ParseError(f"image {rec.image} not found", line=rec.line)
            cache[rec.image] = load_image(rec.image)
        truth = None if rec.true_center is None else {"center": rec.true_center}
        name = f"{rec.image.name}:{rec.line}"
        out.append(sample_from_image(cache[rec.image], (rec.cx, rec.cy), rec.label, geom, name, truth))
    return out


def with_offset(
    sample: Sample,
    geom: CropGeometry,
    rng: Optional[np.random.Generator] = None,
    offset: Optional[Tuple[int, int]] = None,
) -> Sample:
    """Same cell with a random (or given) crop-origin shift."""
    _, dx, dy = random_offset_crop(sample.context, sample.center, geom, rng=rng, offset=offset)
    return replace(sample, dx=dx, dy=dy)


# -- augmentation ------------------------------------------------------------------


def rotate_image(image: np.ndarray, angle: float, pivot: Tuple[float, float]) -> np.ndarray:
    """Rotate ``[C, H, W]`` by ``angle`` about pixel ``pivot``; bilinear, zero fill."""
    _, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    px, py = pivot
    sx = px + c * (xs - px) - s * (ys - py)
    sy = py + s * (xs - px) + c * (ys - py)
    grid = np.stack([(2 * sx + 1) / w - 1, (2 * sy + 1) / h - 1], axis=-1)
    return bilinear_sample(image, grid).values


def augment_rotate(sample: Sample, geom: CropGeometry, rng: Optional[np.random.Generator] = None, angle=None) -> Sample:
    """Copy of ``sample`` rotated by a uniform angle in ``[0, 2*pi)``.

    The context is rotated about the cell, which is equivalent to rotating
    the patch about its centre and moving the cell with it: the offset is
    rotated by the same angle, rounded to whole pixels and clamped to the
    containment bound.
    """
    if angle is None:
        if rng is None:
            raise ContractError("either rng or angle is required")
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
    if angle == 0.0:
        return replace(sample, context=sample.context.copy())
    context = to_uint8(rotate_image(sample.context / 255.0, angle, sample.center))
    c, s = np.cos(angle), np.sin(angle)
    # Content is carried by R(-angle); the cell sat at -offset from the patch centre.
    dx = c * sample.dx + s * sample.dy
    dy = -s * sample.dx + c * sample.dy
    bound = geom.max_offset
    dx = int(np.clip(np.rint(dx), -bound, bound))
    dy = int(np.clip(np.rint(dy), -bound, bound))
    truth = dict(sample.truth or {})
    truth["rotation"] = truth.get("rotation", 0.0) + angle
    out = replace(sample, context=context, dx=0, dy=0, truth=truth)
    # Re-clamp against the context border in case the context is truncated.
    xlo, xhi = offset_range(out.center[0], context.shape[2], geom)
    ylo, yhi = offset_range(out.center[1], context.shape[1], geom)
    return replace(out, dx=int(np.clip(dx, xlo, xhi)), dy=int(np.clip(dy, ylo, yhi)))


def augment_dataset(samples: Sequence[Sample], geom: CropGeometry, rng: np.random.Generator) -> List[Sample]:
    """Each sample followed by one arbitrarily rotated copy of itself."""
    out = []
    for s in samples:
        out.append(s)
        out.append(augment_rotate(s, geom, rng))
    return out


# -- balancing and folds ----------------------------------------------------------------


def class_counts(samples: Sequence[Sample]) -> np.ndarray:
    return np.bincount([s.label for s in samples], minlength=NUM_CLASSES)


def balance_classes(samples: Sequence[Sample], rng: np.random.Generator, num_classes: int = NUM_CLASSES) -> List[Sample]:
    """Randomly drop samples of the larger classes down to the minority count."""
    labels = np.array([s.label for s in samples], dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if counts.min() == 0:
        missing = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else str(i) for i in np.flatnonzero(counts == 0)]
        raise ContractError(f"cannot balance: no samples for class(es) {', '.join(missing)}")
    target = counts.min()
    keep = np.zeros(len(labels), dtype=bool)
    for cls in range(num_classes):
        idx = np.flatnonzero(labels == cls)
        keep[rng.choice(idx, size=target, replace=False)] = True
    return [s for s, k in zip(samples, keep) if k]


def kfold_split(n_samples: int, k: int = 5, seed: int = 0) -> FoldPlan:
    if k < 2:
        raise ContractError(f"need at least 2 folds, got {k}")
    if k > n_samples:
        raise ContractError(f"cannot split {n_samples} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return FoldPlan(k=k, folds=[np.asarray(f) for f in np.array_split(perm, k)], seed=seed)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def offsets_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([[s.dx, s.dy] for s in samples], dtype=np.float64)


def validate_offsets(samples: Sequence[Sample], geom: CropGeometry) -> None:
    for s in samples:
        check_offsets(s.dx, s.dy, geom)
