"""Corpus ingestion, augmentation, batching and a synthetic blob corpus.

Corpus layout::

    <root>/Normal/*.png|*.pgm
    <root>/Tuberculosis/*.png|*.pgm

Every tensor leaving :func:`make_batches` has shape ``(B, 1, 224, 224)`` with
values in [0, 1].  Training batches may be augmented with a random
224 x 224 crop (reflection padding when the source is smaller) and a random
horizontal flip; other splits are centre-cropped deterministically.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .tensor import pad

log = logging.getLogger(__name__)

CLASS_LABELS = {"Normal": 0, "Tuberculosis": 1}
LABEL_NAMES = {v: k for k, v in CLASS_LABELS.items()}
SPLITS = ("train", "val", "test")
INPUT_SIZE = 224
IMAGE_SUFFIXES = (".png", ".pgm")


class CorpusError(ValueError):
    """The corpus directory is missing, malformed or degenerate."""


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def read_image(path) -> Tuple[np.ndarray, int]:
    """Decode a grayscale image, returning ``(pixels, bit_depth)``.

    8-bit and 16-bit grayscale are kept as-is; colour images are converted
    to 8-bit gray by averaging their RGB channels.
    """
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I;16N"):
            return np.asarray(im, dtype=np.uint16).copy(), 16
        if mode == "I":
            arr = np.asarray(im)
            return arr.astype(np.uint16), 16
        if mode == "L":
            return np.asarray(im, dtype=np.uint8).copy(), 8
        if mode == "1":
            return np.asarray(im.convert("L"), dtype=np.uint8).copy(), 8
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        return np.round(rgb.mean(axis=2)).astype(np.uint8), 8


def normalize(image, bit_depth: int) -> np.ndarray:
    """Scale integer pixels to [0, 1] by the largest representable value."""
    if bit_depth not in (8, 16):
        raise ValueError(f"unsupported bit depth {bit_depth}; expected 8 or 16")
    top = float(2 ** bit_depth - 1)
    img = np.asarray(image, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > top):
        raise ValueError(f"pixel values outside the {bit_depth}-bit range")
    return (img / top).astype(np.float32)


def load_image(path) -> np.ndarray:
    pixels, depth = read_image(path)
    return normalize(pixels, depth)


def reflect_pad_to(image: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Reflect-pad a 2-D image symmetrically until both sides reach ``size``.

    Padding larger than the image is applied as repeated reflections.
    """
    img = np.asarray(image)
    h, w = img.shape
    if (h < size and h < 2) or (w < size and w < 2):
        raise ValueError(f"cannot reflect-pad a {h}x{w} image; each padded side needs at least 2 pixels")
    x = img[None, None]
    while x.shape[2] < size or x.shape[3] < size:
        h, w = x.shape[2:]
        need_h, need_w = max(0, size - h), max(0, size - w)
        ph = min(need_h, h - 1)
        pw = min(need_w, w - 1)
        top, left = ph // 2, pw // 2
        x = pad(x, (top, ph - top, left, pw - left), mode="reflect")
    return x[0, 0]


def random_crop_224(image: np.ndarray, rng: np.random.Generator, size: int = INPUT_SIZE) -> np.ndarray:
    """Random ``size`` x ``size`` crop, reflect-padding short sides first."""
    img = reflect_pad_to(image, size)
    h, w = img.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size]


def center_crop_224(image: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Deterministic evaluation geometry: symmetric reflect padding, centre crop."""
    img = reflect_pad_to(image, size)
    h, w = img.shape
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def random_hflip(image: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Reverse the columns with probability ``p`` (one draw from ``rng``)."""
    if rng.random() < p:
        return image[:, ::-1]
    return image


# --------------------------------------------------------------------------
# dataset index
# --------------------------------------------------------------------------

@dataclass
class Sample:
    """A labelled grayscale image; pixels are loaded lazily from ``source``."""

    label: int
    source: str
    pixels: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self.pixels is None:
            self.pixels = load_image(self.source)
        return self.pixels

    @property
    def class_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass
class DatasetIndex:
    samples: List[Sample]
    splits: List[str]
    seed: int = 0
    skipped: int = 0

    def indices(self, split: str) -> List[int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> List[Sample]:
        return [self.samples[i] for i in self.indices(split)]

    def class_counts(self, split: Optional[str] = None) -> Dict[str, int]:
        samples = self.samples if split is None else self.subset(split)
        counts = {name: 0 for name in CLASS_LABELS}
        for s in samples:
            counts[s.class_name] += 1
        return counts

    def labels(self, split: str) -> np.ndarray:
        return np.array([s.label for s in self.subset(split)], dtype=np.int64)

    def write_manifest(self, path) -> None:
        """Write the split assignment as CSV ``path,label,split``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label", "split"])
            for s, split in zip(self.samples, self.splits):
                writer.writerow([s.source, s.label, split])


def stratified_split(labels: Sequence[int], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> List[str]:
    """Assign each position to train/val/test, preserving class proportions.

    Per class of ``n`` samples, ``round(n * val)`` go to val and
    ``round(n * test)`` to test, the rest to train; which ones is decided by
    a permutation seeded by ``(seed, label)``.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    labels = list(labels)
    out = [""] * len(labels)
    for label in sorted(set(labels)):
        members = [i for i, l in enumerate(labels) if l == label]
        n = len(members)
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        n_val = min(n_val, n)
        n_test = min(n_test, n - n_val)
        perm = np.random.default_rng([seed, label]).permutation(n)
        for rank, j in enumerate(perm):
            if rank < n - n_val - n_test:
                out[members[j]] = "train"
            elif rank < n - n_test:
                out[members[j]] = "val"
            else:
                out[members[j]] = "test"
    return out


def load_corpus(root, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetIndex:
    """Index a class-per-directory corpus and split it deterministically.

    Undecodable files are skipped with a warning and counted in
    ``DatasetIndex.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {str(root)!r} is not a directory")
    missing = [name for name in CLASS_LABELS if not (root / name).is_dir()]
    if missing:
        raise CorpusError(f"missing class directory {str(root / missing[0])!r}")
    samples: List[Sample] = []
    skipped = 0
    for name in CLASS_LABELS:
        d = root / name
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
        kept = 0
        for p in files:
            try:
                read_image(p)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                log.warning("skipping undecodable image %s: %s", p, exc)
                skipped += 1
                continue
            samples.append(Sample(CLASS_LABELS[name], str(p)))
            kept += 1
        if kept == 0:
            raise CorpusError(f"class directory {str(d)!r} has no decodable images")
    splits = stratified_split([s.label for s in samples], ratios, seed)
    index = DatasetIndex(samples, splits, seed=seed, skipped=skipped)
    log.info("corpus %s: %s (skipped %d)", root, index.class_counts(), skipped)
    return index


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def _rng(seed: int, epoch: int, split: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, SPLITS.index(split), *extra])


def prepare(image: np.ndarray, augment: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Model-ready 224 x 224 view of one normalised image."""
    if augment:
        return random_hflip(random_crop_224(image, rng), rng)
    return center_crop_224(image)


def make_batches(index: DatasetIndex, split: str, batch_size: int, augment: bool = False,
                 seed: int = 0, epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images (B, 1, 224, 224), one-hot labels (B, 2))`` batches.

    The train split is reshuffled each epoch from ``(seed, epoch)``; other
    splits keep index order.  Augmentation draws come from a generator
    derived from ``(seed, epoch, split, position)``, so the stream is
    reproducible regardless of how it is consumed.  The last partial batch
    is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be at least 1, got {batch_size}")
    idx = index.indices(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    if split == "train":
        order = _rng(seed, epoch, split).permutation(len(idx))
        idx = [idx[i] for i in order]
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        x = np.empty((len(chunk), 1, INPUT_SIZE, INPUT_SIZE), dtype=np.float32)
        y = np.zeros((len(chunk), len(CLASS_LABELS)), dtype=np.float32)
        for k, i in enumerate(chunk):
            s = index.samples[i]
            rng = _rng(seed, epoch, split, start + k) if augment else None
            x[k, 0] = prepare(s.image, augment, rng)
            y[k, s.label] = 1.0
        yield x, y


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

def blob_image(label: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Textured noise, plus one bright Gaussian blob when ``label == 1``.

    A random global brightness offset keeps the mean intensity from being a
    reliable cue on its own.
    """
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0, mode="reflect")
    texture /= texture.std() + 1e-12
    img = 0.45 + rng.uniform(-0.05, 0.05) + 0.06 * texture + 0.02 * rng.standard_normal((size, size))
    if label == 1:
        sigma = rng.uniform(5.0, 8.0)
        cy, cx = rng.uniform(8, size - 8, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        img += rng.uniform(0.4, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_blob_dataset(n_per_class: int, size: int = 64, seed: int = 0,
                       ratios=(0.8, 0.1, 0.1)) -> DatasetIndex:
    """Balanced in-memory corpus of blob (Tuberculosis) and noise (Normal) images."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    samples = []
    for label in (0, 1):
        for i in range(n_per_class):
            img = blob_image(label, np.random.default_rng([seed, label, i]), size)
            samples.append(Sample(label, f"synth/{LABEL_NAMES[label]}/{i:05d}", img))
    splits = stratified_split([s.label for s in samples], ratios, seed)
    return DatasetIndex(samples, splits, seed=seed)


def write_blob_corpus(root, n_per_class: int, size: int = 64, seed: int = 0) -> Path:
    """Write a synthetic corpus to disk as 8-bit PNGs in the corpus layout."""
    root = Path(root)
    for label in (0, 1):
        d = root / LABEL_NAMES[label]
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = blob_image(label, np.random.default_rng([seed, label, i]), size)
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(
                d / f"{i:05d}.png", optimize=False)
    return root
