"""Desk-scale digit dataset and the class-per-subdirectory corpus layout.

The dataset is scikit-learn's 8x8 handwritten digits, bilinearly upsampled
into a centered box (a margin of 1/8 of the side), drawn at moderate
contrast over a flat grey background and requantized to 8 bits.  On disk a dataset (or any evaluation
corpus) is a directory with one subdirectory per class label holding plain
PGM/PPM files::

    root/
      train/0/00012.pgm ...
      test/7/01433.pgm ...
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

from .image import load_image, save_image

__all__ = ["LabeledImages", "digit_images", "write_dataset", "read_corpus"]

IMAGE_SUFFIXES = (".pgm", ".ppm")


@dataclass
class LabeledImages:
    images: np.ndarray   # (n, h, w, c) uint8
    labels: np.ndarray   # (n,) int
    ids: list

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = list(idx)
        return LabeledImages(self.images[idx], self.labels[idx], [self.ids[i] for i in idx])


def digit_images(size=64, margin=None, amplitude=120, background=(60, 160), seed=0):
    """All 1797 digits as ``(n, size, size, 1)`` uint8 plus labels.

    Each digit is drawn with a stroke amplitude of ``amplitude`` grey levels
    (jittered by a factor in [0.7, 1]) over a flat background level drawn
    uniformly from ``background``.
    """
    margin = size // 8 if margin is None else margin
    box = size - 2 * margin
    if box < 8:
        raise ValueError(f"size {size} with margin {margin} leaves no room for the digit")
    digits = load_digits()
    rng = np.random.default_rng(seed)
    out = np.empty((len(digits.images), size, size, 1), dtype=np.uint8)
    for i, img in enumerate(digits.images):
        canvas = np.zeros((size, size))
        canvas[margin:margin + box, margin:margin + box] = zoom(
            img.astype(np.float64) / 16.0, box / 8.0, order=1, grid_mode=True, mode="nearest")
        gain = amplitude * rng.uniform(0.7, 1.0)
        level = rng.uniform(*background)
        out[i, :, :, 0] = np.clip(np.rint(level + gain * canvas), 0, 255)
    return out, digits.target.astype(np.int64)


def write_dataset(root, size=64, margin=None, test_fraction=0.3, seed=0):
    """Write the train/test split as PGM files.  Returns the counts per split."""
    images, labels = digit_images(size, margin, seed=seed)
    idx = np.arange(len(labels))
    train_idx, test_idx = train_test_split(idx, test_size=test_fraction, random_state=seed, stratify=labels)
    root = Path(root)
    counts = {}
    for split, members in (("train", train_idx), ("test", test_idx)):
        for i in sorted(members.tolist()):
            d = root / split / str(labels[i])
            d.mkdir(parents=True, exist_ok=True)
            save_image(images[i], d / f"{i:05d}.pgm")
        counts[split] = len(members)
    return counts


def read_corpus(root):
    """Load a class-per-subdirectory corpus, sorted by (label, file name).

    Image ids are ``"<label>/<file stem>"``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    images, labels, ids = [], [], []
    for sub in sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: (len(p.name), p.name)):
        try:
            label = int(sub.name)
        except ValueError:
            raise ValueError(f"class directory name must be an integer label, got {sub.name!r}") from None
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                images.append(load_image(f))
                labels.append(label)
                ids.append(f"{sub.name}/{f.stem}")
    if not images:
        raise ValueError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"corpus images differ in size: {sorted(shapes)}")
    return LabeledImages(np.stack(images), np.array(labels, dtype=np.int64), ids)
