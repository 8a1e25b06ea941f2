"""Reversible image transformation: disguise an image as a same-size target.

Blocks of both images are ranked by standard deviation and cut into ``C``
equal rank slices (classes).  Inside a class the j-th original block (raster
order) moves to the j-th target position of that class, gets mean-shifted
towards the target block's mean (without leaving [0, 255]) and rotated to
the quarter turn closest to the target block.  Class tables, shifts and
rotations are serialized and hidden with :mod:`ritrae.rdh`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .bitstream import BitReader, BitWriter, ParseError, decode_ints, encode_ints
from .image import assemble, blocks_of, check_image, partition, rotate_block
from .rdh import DEFAULT_PASSES, CapacityError, RDHError, rdh_capacity, rdh_embed, rdh_extract

__all__ = [
    "AuxPayload",
    "AuxCapacityError",
    "IntegrityError",
    "class_index_table",
    "pair_blocks",
    "mapping_from_tables",
    "feasible_mean_shift",
    "best_rotation",
    "serialize_aux",
    "deserialize_aux",
    "transform",
    "transform_details",
    "restore",
    "ReversibleImageTransform",
]

FORMAT_TAG = 1
SHIFT_BITS = 9
ROT_BITS = 2
MAX_CLASSES = 64


class AuxCapacityError(CapacityError):
    def __init__(self, required, available):
        super().__init__(required, available)
        self.args = (f"aux payload exceeds RDH capacity: {required} bits needed, {available} available",)


class IntegrityError(ValueError):
    """Embedded transformation record is missing, corrupt or inconsistent."""


def _label_width(n_classes):
    return (n_classes - 1).bit_length()


def class_index_table(var_key, n_classes):
    """Class label per block: rank by (sd, raster index), then cut into equal rank slices."""
    var_key = np.asarray(var_key)
    n = var_key.size
    order = np.argsort(var_key, kind="stable")
    bounds = (np.arange(n_classes + 1) * n) // n_classes
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.searchsorted(bounds, np.arange(n), side="right") - 1
    return labels


def mapping_from_tables(cit_orig, cit_target):
    """Bijection ``source block -> destination block`` implied by two class tables."""
    cit_orig = np.asarray(cit_orig)
    cit_target = np.asarray(cit_target)
    if cit_orig.shape != cit_target.shape:
        raise IntegrityError("class tables differ in length")
    size = max(int(cit_orig.max(initial=0)), int(cit_target.max(initial=0))) + 1
    if not np.array_equal(np.bincount(cit_orig, minlength=size), np.bincount(cit_target, minlength=size)):
        raise IntegrityError("class size mismatch between original and target tables")
    mapping = np.empty(cit_orig.size, dtype=np.int64)
    mapping[np.argsort(cit_orig, kind="stable")] = np.argsort(cit_target, kind="stable")
    return mapping


def pair_blocks(orig, target, n_classes):
    """Pair blocks of two :class:`~ritrae.image.BlockGrid` objects.

    Returns ``(cit_orig, cit_target, mapping)``, each of shape
    ``(channels, n_blocks)``; ``mapping[ch, src]`` is the destination block.
    """
    if orig.n_blocks != target.n_blocks or orig.sums.shape != target.sums.shape:
        raise ValueError(f"block count mismatch: {orig.sums.shape} vs {target.sums.shape}")
    if n_classes < 1:
        raise ValueError("class count must be >= 1")
    ko, kt = orig.var_key, target.var_key
    cit_o = np.stack([class_index_table(row, n_classes) for row in ko])
    cit_t = np.stack([class_index_table(row, n_classes) for row in kt])
    mapping = np.stack([mapping_from_tables(a, b) for a, b in zip(cit_o, cit_t)])
    return cit_o, cit_t, mapping


def feasible_mean_shift(block, ideal):
    """Integer shift closest to ``ideal`` that keeps every sample of ``block`` in [0, 255]."""
    block = np.asarray(block)
    return int(np.clip(int(ideal), -int(block.min()), 255 - int(block.max())))


def best_rotation(shifted, target):
    """Quarter turns (0..3, clockwise) minimizing RMSE to ``target``; ties go to the smaller turn."""
    shifted = np.asarray(shifted, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    sse = [int(((rotate_block(shifted, d) - target) ** 2).sum()) for d in range(4)]
    return int(np.argmin(sse))


@dataclass
class AuxPayload:
    """Everything needed to undo a transformation.

    Tables are indexed by raster block position; ``shifts`` and ``rotations``
    are indexed by *destination* position (the block as it sits in the
    camouflage image).  All arrays have shape ``(channels, n_blocks)``.
    """

    block_size: int
    n_classes: int
    cit_orig: np.ndarray
    cit_target: np.ndarray
    shifts: np.ndarray
    rotations: np.ndarray

    @property
    def channels(self):
        return self.cit_orig.shape[0]

    @property
    def n_blocks(self):
        return self.cit_orig.shape[1]

    def __eq__(self, other):
        if not isinstance(other, AuxPayload):
            return NotImplemented
        return (self.block_size == other.block_size and self.n_classes == other.n_classes
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("cit_orig", "cit_target", "shifts", "rotations")))


def serialize_aux(aux):
    """Wire format (all fields MSB first)::

        format tag 8 | block size 8 | class count - 1 6 | channels 2 | block count 24
        per channel:
            original class table   flag + raw/run-length, ceil(log2 C) bits per label
            target class table     same
            mean shifts            9-bit sign-magnitude, destination order
            rotations              2 bits, destination order
    """
    if not 1 <= aux.n_classes <= MAX_CLASSES:
        raise ValueError(f"class count must be in 1..{MAX_CLASSES}")
    w = BitWriter()
    w.write_uint(FORMAT_TAG, 8)
    w.write_uint(aux.block_size, 8)
    w.write_uint(aux.n_classes - 1, 6)
    w.write_uint(aux.channels, 2)
    w.write_uint(aux.n_blocks, 24)
    width = _label_width(aux.n_classes)
    for ch in range(aux.channels):
        encode_ints(w, aux.cit_orig[ch], width)
        encode_ints(w, aux.cit_target[ch], width)
        for d in aux.shifts[ch].tolist():
            w.write_signed(d, SHIFT_BITS)
        for r in aux.rotations[ch].tolist():
            w.write_uint(r, ROT_BITS)
    return w.getvalue()


def deserialize_aux(stream):
    r = BitReader(stream)
    tag = r.read_uint(8, "format tag")
    if tag != FORMAT_TAG:
        raise ParseError(f"unknown aux format tag {tag}", 0)
    block_size = r.read_uint(8, "block size")
    n_classes = r.read_uint(6, "class count") + 1
    channels = r.read_uint(2, "channel count")
    n_blocks = r.read_uint(24, "block count")
    if block_size < 2 or channels not in (1, 3):
        raise ParseError(f"invalid header: block size {block_size}, {channels} channels", 8)
    width = _label_width(n_classes)
    tables = {"cit_orig": [], "cit_target": [], "shifts": [], "rotations": []}
    for _ in range(channels):
        for key in ("cit_orig", "cit_target"):
            start = r.pos
            labels = decode_ints(r, n_blocks, width, what="class table")
            if labels.size and labels.max() >= n_classes:
                raise ParseError("class label out of range", start)
            tables[key].append(labels)
        tables["shifts"].append(np.array([r.read_signed(SHIFT_BITS, "mean shift") for _ in range(n_blocks)]))
        tables["rotations"].append(np.array([r.read_uint(ROT_BITS, "rotation") for _ in range(n_blocks)]))
    if r.remaining:
        raise ParseError(f"{r.remaining} trailing bits", r.pos)
    arrays = {k: np.stack(v).astype(np.int64).reshape(channels, n_blocks) for k, v in tables.items()}
    return AuxPayload(block_size=block_size, n_classes=n_classes, **arrays)


def _check_pair(orig, target, block_size, n_classes):
    orig = check_image(orig, "original")
    target = check_image(target, "target")
    if orig.shape != target.shape:
        raise ValueError(f"original {orig.shape} and target {target.shape} differ in size")
    if not 1 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"class count must be in 1..{MAX_CLASSES}, got {n_classes}")
    if block_size > 255:
        raise ValueError("block size must be < 256")
    return orig, target


def transform_details(orig, target, block_size=4, n_classes=16):
    """Block-transformed image (before embedding) and its :class:`AuxPayload`."""
    orig, target = _check_pair(orig, target, block_size, n_classes)
    go, gt = partition(orig, block_size), partition(target, block_size)
    cit_o, cit_t, mapping = pair_blocks(go, gt, n_classes)

    src = blocks_of(orig, block_size).astype(np.int64)
    tgt = blocks_of(target, block_size).astype(np.int64)
    ideal = gt.rounded_mean[np.arange(mapping.shape[0])[:, None], mapping] - go.rounded_mean
    lo = -src.min(axis=(2, 3))
    hi = 255 - src.max(axis=(2, 3))
    delta = np.clip(ideal, lo, hi)

    channels, n = mapping.shape
    placed = np.empty_like(src)
    shifts = np.empty((channels, n), dtype=np.int64)
    for ch in range(channels):
        placed[ch, mapping[ch]] = src[ch] + delta[ch][:, None, None]
        shifts[ch, mapping[ch]] = delta[ch]
    candidates = np.stack([rotate_block(placed, d) for d in range(4)])
    sse = ((candidates - tgt[None]) ** 2).sum(axis=(3, 4))
    rotations = np.argmin(sse, axis=0)
    out = np.take_along_axis(candidates, rotations[None, :, :, None, None], axis=0)[0]

    h, w = orig.shape[:2]
    transformed = assemble(out.astype(np.uint8), h, w)
    aux = AuxPayload(block_size, n_classes, cit_o, cit_t, shifts, rotations.astype(np.int64))
    return transformed, aux


def transform(orig, target, block_size=4, n_classes=16, n_passes=DEFAULT_PASSES):
    """Camouflage image that looks like ``target`` and restores to ``orig``."""
    transformed, aux = transform_details(orig, target, block_size, n_classes)
    payload = serialize_aux(aux)
    try:
        return rdh_embed(transformed, payload, n_passes=n_passes)
    except CapacityError as exc:
        raise AuxCapacityError(exc.required, exc.available) from None


def _invert(transformed, aux):
    h, w = transformed.shape[:2]
    b = aux.block_size
    if h % b or w % b or (h // b) * (w // b) != aux.n_blocks or transformed.shape[2] != aux.channels:
        raise IntegrityError("embedded record does not match the image geometry")
    placed = blocks_of(transformed, b).astype(np.int64)
    src = np.empty_like(placed)
    for ch in range(aux.channels):
        mapping = mapping_from_tables(aux.cit_orig[ch], aux.cit_target[ch])
        unrotated = np.stack([rotate_block(blk, -r) for blk, r in zip(placed[ch], aux.rotations[ch])])
        unshifted = unrotated - aux.shifts[ch][:, None, None]
        src[ch] = unshifted[mapping]
    if src.min() < 0 or src.max() > 255:
        raise IntegrityError("restored samples out of range")
    return assemble(src.astype(np.uint8), h, w)


def restore(camouflage):
    """Recover the original image from a camouflage image."""
    camouflage = check_image(camouflage, "camouflage")
    try:
        payload, transformed = rdh_extract(camouflage)
        aux = deserialize_aux(payload)
    except (RDHError, ParseError) as exc:
        raise IntegrityError(f"missing or corrupt transformation record: {exc}") from exc
    return _invert(transformed, aux)


def aux_bits(orig, target, block_size=4, n_classes=16):
    return len(serialize_aux(transform_details(orig, target, block_size, n_classes)[1]))


class ReversibleImageTransform(TransformerMixin, BaseEstimator):
    """Estimator front end for :func:`transform` / :func:`restore`.

    Stateless: ``fit`` only validates parameters.  ``transform`` takes the
    originals as ``X`` and the images to imitate as ``target``; both may be a
    single image or a stack of images of shape ``(n, h, w[, c])``.

    Parameters
    ----------
    block_size : int, default=4
        Side of the square blocks.
    n_classes : int, default=16
        Number of standard-deviation classes used for pairing (1..64).
    n_passes : int, default=15
        Histogram-shifting pass limit per channel.
    """

    def __init__(self, block_size=4, n_classes=16, n_passes=DEFAULT_PASSES):
        self.block_size = block_size
        self.n_classes = n_classes
        self.n_passes = n_passes

    def fit(self, X=None, y=None):
        if self.block_size < 2:
            raise ValueError("block_size must be >= 2")
        if not 1 <= self.n_classes <= MAX_CLASSES:
            raise ValueError(f"n_classes must be in 1..{MAX_CLASSES}")
        self.fitted_ = True
        return self

    def _params(self):
        return dict(block_size=self.block_size, n_classes=self.n_classes)

    @staticmethod
    def _stack(X):
        X = np.asarray(X)
        if X.ndim == 2 or (X.ndim == 3 and X.shape[2] in (1, 3)):
            return X[None], True
        return X, False

    def transform(self, X, target):
        self.fit()
        X, single = self._stack(X)
        T, _ = self._stack(target)
        if len(X) != len(T):
            raise ValueError("X and target hold different numbers of images")
        out = [transform(x, t, n_passes=self.n_passes, **self._params()) for x, t in zip(X, T)]
        return out[0] if single else np.stack(out)

    def inverse_transform(self, X):
        X, single = self._stack(X)
        out = [restore(x) for x in X]
        return out[0] if single else np.stack(out)

    def capacity(self, X):
        X, single = self._stack(X)
        caps = np.array([rdh_capacity(x, self.n_passes) for x in X])
        return int(caps[0]) if single else caps
