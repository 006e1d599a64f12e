"""Synthetic ROI generation, image/mask file I/O, preprocessing and augmentation."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import exposure

from .errors import (
    BadParam,
    DegenerateRange,
    EmptyDataset,
    EmptyImage,
    MissingPair,
    NonBinaryMask,
    NotTrainSplit,
    ShapeMismatch,
    UnreadableFile,
)

SIZE = 40
STD_FLOOR = 1e-3
AUG_TAGS = ("orig", "flipH", "flipV", "flipHV")
IMAGE_SUFFIXES = (".pgm", ".png")


@dataclass
class SegmentationSample:
    image: np.ndarray  # (40, 40) enhanced intensities in [0, 1]
    mask: np.ndarray  # (40, 40) labels in {0, 1}
    id: str
    augmentation_tag: str = "orig"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.image.shape != (SIZE, SIZE) or self.mask.shape != (SIZE, SIZE):
            raise ShapeMismatch(f"sample {self.id}: expected {SIZE}x{SIZE}, got {self.image.shape}/{self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise NonBinaryMask(f"sample {self.id}: mask values outside {{0, 1}}")
        if self.augmentation_tag not in AUG_TAGS:
            raise BadParam(f"unknown augmentation tag {self.augmentation_tag!r}")


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Dataset:
    samples: list
    split: str = "train"
    normalization_stats: Optional[NormalizationStats] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])

    def ids(self) -> list:
        return [s.id for s in self.samples]


# ---------------------------------------------------------------------------
# synthetic generator


def _blob_mask(rng: np.random.Generator, max_offset: float = 8.0) -> np.ndarray:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    center = (SIZE - 1) / 2.0
    while True:
        r = rng.uniform(0.0, 6.0)
        phi = rng.uniform(0.0, 2 * np.pi)
        cy, cx = center + r * np.sin(phi), center + r * np.cos(phi)
        mask = np.zeros((SIZE, SIZE), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            ey, ex = cy + rng.uniform(-3, 3), cx + rng.uniform(-3, 3)
            a, b = rng.uniform(4.0, 10.0), rng.uniform(3.0, 8.0)
            th = rng.uniform(0.0, np.pi)
            u = (xx - ex) * np.cos(th) + (yy - ey) * np.sin(th)
            v = -(xx - ex) * np.sin(th) + (yy - ey) * np.cos(th)
            mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if not mask.any():
            continue
        my, mx = ndimage.center_of_mass(mask)
        if np.hypot(my - center, mx - center) <= max_offset:
            return mask.astype(np.int64)


def synth_generate(count: int, seed: int, contrast: float = 0.25, noise_sigma: float = 0.15, split: str = "train") -> Dataset:
    """Generate ``count`` blob ROIs whose mask centroids lie within 8 px of the centre.

    Background is a smooth random field in roughly [0.2, 0.5]; foreground is raised by
    ``contrast``; Gaussian noise of std ``noise_sigma`` is added and the result clipped.
    """
    if count < 1:
        raise BadParam(f"count must be >= 1, got {count}")
    if not 0.0 < contrast <= 1.0:
        raise BadParam(f"contrast must lie in (0, 1], got {contrast}")
    if noise_sigma < 0:
        raise BadParam(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    samples = []
    for n in range(count):
        mask = _blob_mask(rng)
        coarse = rng.uniform(0.2, 0.5, size=(5, 5))
        background = ndimage.zoom(coarse, SIZE / 5, order=1, mode="nearest")
        image = background + contrast * mask + rng.normal(0.0, noise_sigma, size=(SIZE, SIZE))
        samples.append(SegmentationSample(np.clip(image, 0.0, 1.0), mask, f"{n:05d}"))
    meta = {"generator": "synth", "count": count, "seed": seed, "contrast": contrast, "noise_sigma": noise_sigma}
    return Dataset(samples, split=split, meta=meta)


def standard_benchmark(seed: int = 1, n_train: int = 400, n_test: int = 100, contrast: float = 0.25, noise_sigma: float = 0.15):
    """Train/test pair drawn from one generator stream: the first ``n_train`` samples train."""
    full = synth_generate(n_train + n_test, seed, contrast, noise_sigma)
    train = Dataset(full.samples[:n_train], "train", meta=dict(full.meta, split="train"))
    test = Dataset(full.samples[n_train:], "test", meta=dict(full.meta, split="test"))
    return train, test


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: np.ndarray, size: int = SIZE) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    # pixel-centre alignment
    ys = (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = (np.arange(size) + 0.5) * (w / size) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def resize_nearest(mask: np.ndarray, size: int = SIZE) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    xs = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return mask[np.ix_(ys, xs)]


def enhance(raw_image) -> np.ndarray:
    """Resize to 40x40, clip to the 1st/99th percentiles, rescale to [0, 1], equalize."""
    raw = np.asarray(raw_image, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise EmptyImage(f"expected a non-empty 2-d image, got shape {raw.shape}")
    img = resize_bilinear(raw)
    lo, hi = np.percentile(img, [1, 99])
    if hi <= lo:
        raise DegenerateRange(f"1st and 99th percentiles coincide ({lo})")
    img = (np.clip(img, lo, hi) - lo) / (hi - lo)
    return exposure.equalize_hist(img, nbins=256)


def compute_stats(images: np.ndarray) -> NormalizationStats:
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise EmptyDataset("cannot compute normalization statistics of an empty set")
    return NormalizationStats(images.mean(axis=0), images.std(axis=0))


def fit_normalization(train: Dataset) -> Dataset:
    """Attach per-pixel mean/std maps computed from a train split."""
    if train.split != "train":
        raise NotTrainSplit("normalization statistics must come from the train split")
    return replace(train, normalization_stats=compute_stats(train.images()))


def normalize(images, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) - stats.mean) / np.maximum(stats.std, STD_FLOOR)


def preprocess(raw_image, stats: NormalizationStats) -> np.ndarray:
    """Full pipeline for one raw ROI; returns the network input of shape (1, 1, 40, 40)."""
    return normalize(enhance(raw_image), stats)[None, None]


# ---------------------------------------------------------------------------
# augmentation and prior


_FLIPS = {
    "orig": lambda a: a,
    "flipH": lambda a: a[:, ::-1],
    "flipV": lambda a: a[::-1, :],
    "flipHV": lambda a: a[::-1, ::-1],
}


def flip(a: np.ndarray, tag: str) -> np.ndarray:
    return np.ascontiguousarray(_FLIPS[tag](a))


def augment(train: Dataset) -> Dataset:
    if train.split != "train":
        raise NotTrainSplit("augmentation applies to the train split only")
    out = []
    for s in train.samples:
        for tag in AUG_TAGS:
            out.append(SegmentationSample(flip(s.image, tag), flip(s.mask, tag), s.id, tag))
    return Dataset(out, "train", None, dict(train.meta, augmented=True))


def estimate_prior(train: Dataset) -> np.ndarray:
    """Per-pixel foreground frequency of the training masks."""
    if len(train) == 0:
        raise EmptyDataset("prior estimation needs at least one training sample")
    return train.masks().mean(axis=0, dtype=np.float64)


# ---------------------------------------------------------------------------
# file I/O

_PAIR_RE = re.compile(r"^(img|msk)_(.+)\.(pgm|png)$", re.IGNORECASE)


def _read_gray(path: Path) -> tuple:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
            mode = im.mode
    except Exception as exc:  # Pillow raises a zoo of types on bad files
        raise UnreadableFile(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise UnreadableFile(f"{path}: expected a single-channel grayscale image")
    maxval = 255 if mode in ("L", "P", "1") else 65535
    return arr.astype(np.float64), maxval


def _binarize(mask: np.ndarray, path: Path) -> np.ndarray:
    values = np.unique(mask)
    nonzero = values[values > 0]
    if len(nonzero) > 1 or (len(nonzero) == 1 and nonzero[0] not in (1, 255, 65535)):
        raise NonBinaryMask(f"{path}: mask values {values.tolist()} are not two-valued")
    return (mask > 0).astype(np.int64)


def load_masks_dir(path, split: str = "train", enhance_images: bool = True) -> Dataset:
    """Load ``img_<id>.{pgm,png}`` / ``msk_<id>.{pgm,png}`` pairs sorted by id.

    Images are run through :func:`enhance` unless ``enhance_images`` is false, in which
    case they are only rescaled by their file maxval (and must already be 40x40).
    """
    root = Path(path)
    if not root.is_dir():
        raise UnreadableFile(f"{root} is not a directory")
    found: dict = {"img": {}, "msk": {}}
    for p in root.iterdir():
        m = _PAIR_RE.match(p.name)
        if m:
            found[m.group(1).lower()][m.group(2)] = p
    for kind, other in (("img", "msk"), ("msk", "img")):
        for sid in sorted(found[kind]):
            if sid not in found[other]:
                raise MissingPair(f"id {sid!r}: {kind}_{sid} has no matching {other}_{sid}")
    samples = []
    for sid in sorted(found["img"]):
        raw, maxval = _read_gray(found["img"][sid])
        mask_raw, _ = _read_gray(found["msk"][sid])
        mask = _binarize(mask_raw, found["msk"][sid])
        if mask.shape != (SIZE, SIZE):
            mask = resize_nearest(mask)
        image = enhance(raw) if enhance_images else raw / maxval
        samples.append(SegmentationSample(image, mask, sid))
    meta = {}
    manifest = root / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        split = meta.get("split", split)
    return Dataset(samples, split=split, meta=meta)


def _write_pgm(path: Path, arr: np.ndarray, maxval: int) -> None:
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def write_dataset(ds: Dataset, out) -> Path:
    """Write 16-bit PGM images, 8-bit PGM masks (0/255) and ``manifest.json``."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        sid = s.id if s.augmentation_tag == "orig" else f"{s.id}_{s.augmentation_tag}"
        _write_pgm(root / f"img_{sid}.pgm", np.round(s.image * 65535), 65535)
        _write_pgm(root / f"msk_{sid}.pgm", s.mask * 255, 255)
    manifest = dict(ds.meta, split=ds.split, ids=ds.ids())
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root
