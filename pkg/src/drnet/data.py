"""Dataset ingestion, zero padding / cropping, and train/val splitting.

Expected directory layout (both supported datasets use the same schema):

    <root>/images/*.{png,tif,jpg,...}   grayscale or RGB scans
    <root>/GT/*.png                     binary vessel annotations
    <root>/mask/*.png                   optional field-of-view masks

Files are matched by basename after stripping the extension, and samples
are always returned sorted by filename so "first N" semantics are
deterministic.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, ShapeError

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
LAYOUTS = ("iostar", "rcslo")


@dataclass
class ImageSample:
    """One scan with its annotation and padding metadata.

    ``image`` is float32 (H, W) in [0, 1]; ``gt_mask`` is uint8 {0, 1}.
    ``pad_top``/``pad_left`` locate the original ``original_h`` x
    ``original_w`` window inside the (possibly padded) arrays.  Samples are
    treated as immutable once constructed.
    """

    id: str
    image: np.ndarray
    gt_mask: np.ndarray
    fov_mask: Optional[np.ndarray] = None
    original_h: int = 0
    original_w: int = 0
    pad_top: int = 0
    pad_left: int = 0

    def __post_init__(self):
        if self.original_h == 0:
            self.original_h = self.image.shape[0]
        if self.original_w == 0:
            self.original_w = self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetSplit:
    """Disjoint train / val / test partition of a sample list."""

    train: list[ImageSample]
    val: list[ImageSample]
    test: list[ImageSample]
    seed: int


def read_grayscale(path: Path) -> np.ndarray:
    """Load an image as float32 (H, W) in [0, 1]; RGB collapses by channel mean."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    dtype = arr.dtype
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2)
    elif arr.ndim != 2:
        raise DataError(f"{path}: unsupported image dimensionality {arr.ndim}")
    # Scale by the storage format's value range.
    if dtype == np.bool_:
        return arr.astype(np.float32)
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        scale = float(info.max) if info.max > 0 else 255.0
        return (arr.astype(np.float32) / scale).clip(0.0, 1.0)
    if np.issubdtype(dtype, np.floating):
        out = arr.astype(np.float32)
        if out.size and (out.min() < 0.0 or out.max() > 1.0):
            raise DataError(f"{path}: float image values outside [0, 1]")
        return out
    raise DataError(f"{path}: unsupported pixel dtype {dtype}")


def read_binary_mask(path: Path, threshold: int = 128) -> np.ndarray:
    """Load an annotation as uint8 {0, 1}, thresholding at ``threshold``/255."""
    levels = read_grayscale(path)
    return (levels >= threshold / 255.0).astype(np.uint8)


def _index_by_stem(directory: Path) -> dict[str, Path]:
    files: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            files[p.stem] = p
    return files


def load_dataset(
    root, layout: str = "iostar", gt_threshold: int = 128
) -> list[ImageSample]:
    """Load every image/annotation pair under ``root``, sorted by filename."""
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown dataset layout {layout!r}; expected one of {LAYOUTS}")
    root = Path(root)
    images_dir = root / "images"
    gt_dir = root / "GT"
    mask_dir = root / "mask"
    if not images_dir.is_dir():
        raise DataError(f"missing images directory: {images_dir}")
    if not gt_dir.is_dir():
        raise DataError(f"missing ground-truth directory: {gt_dir}")

    image_files = _index_by_stem(images_dir)
    if not image_files:
        raise DataError(f"no images found in {images_dir}")
    gt_files = _index_by_stem(gt_dir)
    fov_files = _index_by_stem(mask_dir) if mask_dir.is_dir() else {}

    samples = []
    for stem in sorted(image_files):
        img_path = image_files[stem]
        if stem not in gt_files:
            raise DataError(f"no ground truth for image {img_path.name}")
        image = read_grayscale(img_path)
        gt = read_binary_mask(gt_files[stem], threshold=gt_threshold)
        if gt.shape != image.shape:
            raise DataError(
                f"{img_path.name}: ground truth shape {gt.shape} differs from "
                f"image shape {image.shape}"
            )
        fov = None
        if stem in fov_files:
            fov = read_binary_mask(fov_files[stem])
            if fov.shape != image.shape:
                raise DataError(
                    f"{img_path.name}: fov mask shape {fov.shape} differs from "
                    f"image shape {image.shape}"
                )
        samples.append(ImageSample(id=stem, image=image, gt_mask=gt, fov_mask=fov))
    return samples


def pad_to(sample: ImageSample, size: int) -> ImageSample:
    """Zero-pad a sample to ``size`` x ``size``.

    Padding is symmetric, with the extra pixel going to the bottom/right on
    odd remainders.  Offsets compose if the sample was already padded.
    """
    h, w = sample.image.shape
    if h > size or w > size:
        raise ShapeError(f"sample {sample.id} is {h}x{w}, larger than target {size}")
    if h == size and w == size:
        return sample
    top = (size - h) // 2
    left = (size - w) // 2
    pad_spec = ((top, size - h - top), (left, size - w - left))

    def _pad(arr: np.ndarray) -> np.ndarray:
        return np.pad(arr, pad_spec, mode="constant", constant_values=0)

    return replace(
        sample,
        image=_pad(sample.image),
        gt_mask=_pad(sample.gt_mask),
        fov_mask=_pad(sample.fov_mask) if sample.fov_mask is not None else None,
        pad_top=sample.pad_top + top,
        pad_left=sample.pad_left + left,
    )


def crop_back(arr: np.ndarray, sample: ImageSample) -> np.ndarray:
    """Cut the original-size window back out of a padded-size array."""
    if arr.shape[-2:] != sample.image.shape:
        raise ShapeError(
            f"array shape {arr.shape[-2:]} does not match sample dims {sample.image.shape}"
        )
    rows = slice(sample.pad_top, sample.pad_top + sample.original_h)
    cols = slice(sample.pad_left, sample.pad_left + sample.original_w)
    return np.ascontiguousarray(arr[..., rows, cols])


def split_train_val(
    train_pool: Sequence[ImageSample], fraction: float, seed: int
) -> DatasetSplit:
    """Hold out round(fraction * n) samples (at least 1) as the validation set.

    Selection is a seeded shuffle; the same seed always yields the same
    split.  Relative filename order is preserved inside each side.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(train_pool)
    if n == 0:
        raise ConfigError("cannot split an empty training pool")
    val_count = max(1, round(fraction * n))
    if val_count >= n:
        raise ConfigError(
            f"validation fraction {fraction} would consume the whole pool of {n}"
        )
    indices = list(range(n))
    random.Random(seed).shuffle(indices)
    val_idx = set(indices[:val_count])
    train = [train_pool[i] for i in range(n) if i not in val_idx]
    val = [train_pool[i] for i in range(n) if i in val_idx]
    return DatasetSplit(train=train, val=val, test=[], seed=seed)


def protocol_split(
    samples: Sequence[ImageSample],
    layout: str,
    train_count: int = 20,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Apply the per-dataset protocol.

    iostar: the first ``train_count`` samples (filename order) form the
    training pool, split into train/val; the remainder is the test set.
    rcslo: a test-only patch dataset, everything lands in ``test``.
    """
    if layout == "rcslo":
        return DatasetSplit(train=[], val=[], test=list(samples), seed=seed)
    if layout != "iostar":
        raise ConfigError(f"unknown dataset layout {layout!r}; expected one of {LAYOUTS}")
    if len(samples) <= train_count:
        raise ConfigError(
            f"need more than {train_count} samples to split, got {len(samples)}"
        )
    pool = list(samples[:train_count])
    split = split_train_val(pool, val_fraction, seed)
    return DatasetSplit(
        train=split.train, val=split.val, test=list(samples[train_count:]), seed=seed
    )
