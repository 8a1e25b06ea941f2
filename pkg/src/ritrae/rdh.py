"""Reversible data hiding by multi-pass prediction-error histogram shifting.

Layout
------
Pixels at (even row, even column) are *references* and are never modified.
Every other pixel is a *carrier*; its prediction is the floor of the mean of
its reference neighbours (left/right, up/down or the four diagonals,
depending on its lattice position).  Because references never change, a
carrier's prediction error moves exactly with its value, so every pass is a
plain peak/zero histogram shift of the per-channel error list.

Within a pass the peak-bin carriers receive a constant-weight codeword
(exactly ``n // 2`` ones for ``n`` peak carriers).  The resulting histogram is
therefore independent of the payload, which makes the multi-pass plan, and
hence :func:`rdh_capacity`, a pure function of the cover image.

Overflow is prevented without a location map: each channel has a band
``[lo, hi]`` of prediction values, and only carriers whose prediction lies in
the band take part.  The band is chosen so that ``prediction + zero`` stays
inside 0..255 for every planned pass, hence no shifted value can overflow.
The decoder recomputes the same set from the (unchanged) references.

Bit layout
----------
Bootstrap header, written into the lowest bits of the last pixels in raster
order (``bootstrap_bits(c)`` samples)::

    magic        16   0xA5C3
    pass count    6   T
    per channel   8+8 band lo, hi
    last pass    22   channel(2) peak(10) zero(10), error values offset by 512

Embedded stream, split across passes 1..T in order (pass k >= 2 first
carries the 22-bit record of pass k - 1)::

    original low bits of the bootstrap samples
    payload length                                32, big endian
    payload bits, then zero padding
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bitstream import BitReader, BitStream, BitWriter, ParseError
from .image import check_image

__all__ = [
    "RDHError",
    "CapacityError",
    "NoEmbeddedDataError",
    "PassRecord",
    "EmbedRecord",
    "rdh_capacity",
    "rdh_embed",
    "rdh_extract",
    "plan_embedding",
    "bootstrap_bits",
    "prediction_errors",
    "constant_weight_encode",
    "constant_weight_decode",
]

MAGIC = 0xA5C3
MAGIC_BITS = 16
COUNT_BITS = 6
BAND_BITS = 8
PASS_BITS = 22
ERR_OFFSET = 512
LENGTH_BITS = 32
DEFAULT_PASSES = 15
MAX_PASSES = 20
WEIGHT_NUM, WEIGHT_DEN = 1, 2

_HIST_OFFSET = 300
_HIST_SIZE = 2 * _HIST_OFFSET + 1


class RDHError(ValueError):
    pass


class CapacityError(RDHError):
    def __init__(self, required, available):
        super().__init__(f"capacity exceeded: payload needs {required} bits, {available} available")
        self.required = required
        self.available = available


class NoEmbeddedDataError(RDHError):
    pass


@dataclass(frozen=True)
class PassRecord:
    channel: int
    peak: int
    zero: int
    bits: int
    carriers: int = 0

    @property
    def direction(self):
        return 1 if self.zero > self.peak else -1


@dataclass
class EmbedRecord:
    """Full multi-pass plan for one cover image."""

    passes: list = field(default_factory=list)
    bootstrap_pixel_count: int = 0
    bands: tuple = ()
    fixed_bits: int = 0

    @property
    def capacity(self):
        return max(0, self.net_bits(len(self.passes)))

    def net_bits(self, n_passes):
        """Payload bits available when the first ``n_passes`` passes are used."""
        if n_passes == 0:
            return -self.fixed_bits
        gross = sum(p.bits for p in self.passes[:n_passes]) - PASS_BITS * (n_passes - 1)
        return gross - self.fixed_bits


def bootstrap_bits(channels):
    return MAGIC_BITS + COUNT_BITS + 2 * BAND_BITS * channels + PASS_BITS


# -- constant-weight (enumerative) coding -----------------------------------


def codeword_weight(n):
    """Number of ones in the codeword written over ``n`` peak carriers."""
    return n * WEIGHT_NUM // WEIGHT_DEN


def constant_weight_capacity(n):
    """Bits a length-``n`` codeword of weight ``codeword_weight(n)`` can carry."""
    return math.comb(n, codeword_weight(n)).bit_length() - 1


def constant_weight_encode(value, n, weight):
    """Map ``0 <= value < comb(n, weight)`` to a length-``n`` 0/1 array with ``weight`` ones.

    Lexicographic ranking: a 0 in the current position is tried first.
    """
    total = math.comb(n, weight)
    if not 0 <= value < total:
        raise ValueError(f"value out of range for C({n},{weight})")
    out = np.zeros(n, dtype=np.uint8)
    k = weight
    # c = C(r - 1, k): codewords starting with 0 among the r remaining positions
    c = math.comb(n - 1, k) if n else 0
    for i in range(n):
        r = n - i
        if k == 0:
            break
        if k == r:
            out[i:] = 1
            break
        if value < c:
            c = c * (r - 1 - k) // (r - 1)
        else:
            out[i] = 1
            value -= c
            c = c * k // (r - 1)
            k -= 1
    return out


def constant_weight_decode(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.size
    k = int(bits.sum())
    value = 0
    c = math.comb(n - 1, k) if n else 0
    for i in range(n):
        r = n - i
        if k == 0 or k == r:
            break
        if bits[i]:
            value += c
            c = c * k // (r - 1)
            k -= 1
        else:
            c = c * (r - 1 - k) // (r - 1)
    return value


# -- geometry -----------------------------------------------------------------


@dataclass
class _Layout:
    shape: tuple
    reserved: np.ndarray      # bool (h, w)
    carriers: np.ndarray      # flat raster indices of carrier pixels
    ref_sum_idx: list         # per carrier-neighbour offset, flat indices (-1 if absent)
    ref_count: np.ndarray
    boot_samples: np.ndarray  # flat sample indices holding the header


def _layout(shape):
    h, w, c = shape
    nb = bootstrap_bits(c)
    n_res = -(-nb // c)
    reserved = np.zeros(h * w, dtype=bool)
    if n_res:
        reserved[max(0, h * w - n_res):] = True
    reserved = reserved.reshape(h, w)
    ii, jj = np.indices((h, w))
    is_ref = (ii % 2 == 0) & (jj % 2 == 0) & ~reserved
    cand = ~((ii % 2 == 0) & (jj % 2 == 0)) & ~reserved

    neigh = []
    count = np.zeros((h, w), dtype=np.int64)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            ni, nj = ii + di, jj + dj
            ok = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
            ok &= is_ref[np.clip(ni, 0, h - 1), np.clip(nj, 0, w - 1)]
            idx = np.where(ok, np.clip(ni, 0, h - 1) * w + np.clip(nj, 0, w - 1), -1)
            neigh.append(idx)
            count += ok
    cand &= count > 0
    carriers = np.flatnonzero(cand.ravel())
    ref_idx = [n.ravel()[carriers] for n in neigh]
    ref_idx = [r for r in ref_idx if (r >= 0).any()]
    boot = (np.flatnonzero(reserved.ravel())[:, None] * c + np.arange(c)).ravel()[:nb]
    if boot.size < nb:
        boot = np.zeros(0, dtype=np.int64)
    return _Layout(shape, reserved, carriers, ref_idx, count.ravel()[carriers], boot)


def _predictions(plane, layout):
    flat = plane.ravel().astype(np.int64)
    total = np.zeros(layout.carriers.size, dtype=np.int64)
    for idx in layout.ref_sum_idx:
        total += np.where(idx >= 0, flat[np.maximum(idx, 0)], 0)
    return total // np.maximum(layout.ref_count, 1)


def prediction_errors(img):
    """Per-channel carrier prediction errors of the raw image."""
    img = check_image(img)
    layout = _layout(img.shape)
    return [img[:, :, ch].ravel()[layout.carriers].astype(np.int64) - _predictions(img[:, :, ch], layout)
            for ch in range(img.shape[2])]


# -- planning -----------------------------------------------------------------


def _plan_channel(errors, n_passes, channel, sides=(1, -1)):
    hist = np.bincount(errors + _HIST_OFFSET, minlength=_HIST_SIZE).astype(np.int64)
    passes = []
    for _ in range(n_passes):
        p = int(np.argmax(hist))
        n = int(hist[p])
        bits = constant_weight_capacity(n)
        if bits <= PASS_BITS:
            break
        z = None
        for d in range(1, _HIST_SIZE):
            for s in sides:
                if 0 <= p + s * d < _HIST_SIZE and hist[p + s * d] == 0:
                    z = p + s * d
                    break
            if z is not None:
                break
        if z is None:
            break
        new = hist.copy()
        w = codeword_weight(n)
        if z > p:
            new[p + 2:z + 1] = hist[p + 1:z]
            new[p + 1] = w
        else:
            new[z:p - 1] = hist[z + 1:p]
            new[p - 1] = w
        new[p] = n - w
        hist = new
        passes.append(PassRecord(channel, p - _HIST_OFFSET, z - _HIST_OFFSET, bits, n))
    return passes


def _interleave(per_channel):
    out = []
    depth = max((len(p) for p in per_channel), default=0)
    for k in range(depth):
        for passes in per_channel:
            if k < len(passes):
                out.append(passes[k])
    return out


def _band(passes):
    """Prediction band ``[lo, hi]`` inside which no planned shift can leave 0..255."""
    up = max((p.zero for p in passes if p.direction > 0), default=0)
    down = min((p.zero for p in passes if p.direction < 0), default=0)
    return max(0, -down), min(255, 255 - up)


class _Planner:
    def __init__(self, img, n_passes):
        if not 1 <= n_passes <= MAX_PASSES:
            raise ValueError(f"pass count must be in 1..{MAX_PASSES}")
        self.img = img
        self.layout = _layout(img.shape)
        self.channels = img.shape[2]
        self.values = [img[:, :, ch].ravel()[self.layout.carriers].astype(np.int64)
                       for ch in range(self.channels)]
        self.preds = [_predictions(img[:, :, ch], self.layout) for ch in range(self.channels)]
        self.n_passes = n_passes

    def plan_channel(self, ch):
        """Best of three direction policies: either way, upward only, downward only."""
        errs = self.values[ch] - self.preds[ch]
        best = None
        for sides in ((1, -1), (1,), (-1,)):
            # shrink the band until the passes planned inside it respect it
            lo, hi = 0, 255
            while True:
                inside = (self.preds[ch] >= lo) & (self.preds[ch] <= hi)
                passes = _plan_channel(errs[inside], self.n_passes, ch, sides)
                need_lo, need_hi = _band(passes)
                if need_lo <= lo and need_hi >= hi:
                    break
                lo, hi = max(lo, need_lo), min(hi, need_hi)
            gain = sum(p.bits for p in passes) - PASS_BITS * len(passes)
            if best is None or gain > best[0]:
                best = (gain, passes, lo, hi)
        return best[1:]

    def plan(self):
        per_channel, bands = [], []
        for ch in range(self.channels):
            passes, lo, hi = self.plan_channel(ch)
            per_channel.append(passes)
            bands.append((lo, hi))
        nb = self.layout.boot_samples.size
        return EmbedRecord(
            passes=_interleave(per_channel),
            bootstrap_pixel_count=int(self.layout.reserved.sum()),
            bands=tuple(bands),
            fixed_bits=(nb + LENGTH_BITS) if nb else 10 ** 9,
        )

    def inside(self, ch, band):
        return (self.preds[ch] >= band[0]) & (self.preds[ch] <= band[1])


def plan_embedding(img, n_passes=DEFAULT_PASSES):
    return _Planner(check_image(img), n_passes).plan()


def rdh_capacity(img, n_passes=DEFAULT_PASSES):
    """Largest payload (bits) :func:`rdh_embed` accepts for this cover.

    A cover too small or too noisy to hold even the framing fields also
    reports 0; it refuses every payload, the empty one included.
    """
    return plan_embedding(img, n_passes).capacity


# -- embedding ------------------------------------------------------------------


def _write_pass(w, p):
    w.write_uint(p.channel, 2)
    w.write_uint(p.peak + ERR_OFFSET, 10)
    w.write_uint(p.zero + ERR_OFFSET, 10)


def _read_pass(r):
    ch = r.read_uint(2, "pass channel")
    peak = r.read_uint(10, "pass peak") - ERR_OFFSET
    zero = r.read_uint(10, "pass zero") - ERR_OFFSET
    return ch, peak, zero


def _embed_pass(errors, p, chunk):
    """Shift ``errors`` in place and hide ``chunk`` (exactly ``p.bits`` bits)."""
    peak_idx = np.flatnonzero(errors == p.peak)
    n = peak_idx.size
    code = constant_weight_encode(BitStream(chunk).to_int(), n, codeword_weight(n))
    d = p.direction
    lo, hi = sorted((p.peak, p.zero))
    shifted = (errors > lo) & (errors < hi)
    errors[shifted] += d
    errors[peak_idx[code == 1]] += d


def _extract_pass(errors, peak, zero):
    d = 1 if zero > peak else -1
    peak_idx = np.flatnonzero((errors == peak) | (errors == peak + d))
    code = (errors[peak_idx] == peak + d).astype(np.uint8)
    n = peak_idx.size
    if int(code.sum()) != codeword_weight(n):
        raise RDHError("codeword weight mismatch: image was modified after embedding")
    bits = constant_weight_capacity(n)
    value = constant_weight_decode(code)
    if value >> bits:
        raise RDHError("codeword out of range: image was modified after embedding")
    lo, hi = sorted((peak + d, zero))
    moved = (errors >= lo) & (errors <= hi)
    errors[moved] -= d
    return BitStream.from_int(value, bits), bits


def rdh_embed(img, payload, n_passes=DEFAULT_PASSES):
    """Hide ``payload`` (a :class:`BitStream` or 0/1 array) in ``img``; returns the stego image."""
    img = check_image(img)
    if not isinstance(payload, BitStream):
        payload = BitStream(payload)
    planner = _Planner(img, n_passes)
    record = planner.plan()
    layout = planner.layout
    if len(payload) > record.capacity:
        raise CapacityError(len(payload), record.capacity)
    n_used = next((t for t in range(len(record.passes) + 1) if record.net_bits(t) >= len(payload)), None)
    if n_used is None:
        # framing alone does not fit; only reachable for an empty payload on a tiny cover
        raise CapacityError(len(payload) + record.fixed_bits, record.net_bits(len(record.passes)) + record.fixed_bits)

    flat = img.ravel()
    boot = layout.boot_samples
    w = BitWriter()
    w.write_bits(flat[boot] & 1)
    w.write_uint(len(payload), LENGTH_BITS)
    w.write_bits(payload)
    stream = w.getvalue().bits
    room = sum(p.bits for p in record.passes[:n_used]) - PASS_BITS * max(0, n_used - 1)
    stream = np.concatenate([stream, np.zeros(room - stream.size, dtype=np.uint8)])

    inside = [planner.inside(ch, record.bands[ch]) for ch in range(planner.channels)]
    errors = [(planner.values[ch] - planner.preds[ch])[inside[ch]] for ch in range(planner.channels)]
    pos = 0
    for k, p in enumerate(record.passes[:n_used]):
        if k == 0:
            chunk = stream[:p.bits]
            pos = p.bits
        else:
            pw = BitWriter()
            _write_pass(pw, record.passes[k - 1])
            take = p.bits - PASS_BITS
            chunk = np.concatenate([pw.getvalue().bits, stream[pos:pos + take]])
            pos += take
        _embed_pass(errors[p.channel], p, chunk)

    out = img.copy()
    for ch in range(planner.channels):
        values = planner.values[ch].copy()
        values[inside[ch]] = errors[ch] + planner.preds[ch][inside[ch]]
        plane = out[:, :, ch].ravel()
        plane[layout.carriers] = values.astype(np.uint8)
        out[:, :, ch] = plane.reshape(img.shape[:2])

    hw = BitWriter()
    hw.write_uint(MAGIC, MAGIC_BITS)
    hw.write_uint(n_used, COUNT_BITS)
    for lo, hi in record.bands:
        hw.write_uint(lo, BAND_BITS)
        hw.write_uint(hi, BAND_BITS)
    if n_used:
        _write_pass(hw, record.passes[n_used - 1])
    else:
        hw.write_uint(0, PASS_BITS)
    header = hw.getvalue().bits
    oflat = out.ravel()
    oflat[boot] = (oflat[boot] & 0xFE) | header
    return oflat.reshape(img.shape)


def rdh_extract(img):
    """Recover ``(payload, cover)`` from an image produced by :func:`rdh_embed`."""
    img = check_image(img)
    layout = _layout(img.shape)
    channels = img.shape[2]
    boot = layout.boot_samples
    if boot.size == 0:
        raise NoEmbeddedDataError("image too small to hold an embedding header")
    flat = img.ravel()
    r = BitReader(flat[boot] & 1)
    if r.read_uint(MAGIC_BITS, "magic") != MAGIC:
        raise NoEmbeddedDataError("no embedded data: magic tag mismatch")
    n_used = r.read_uint(COUNT_BITS, "pass count")
    bands = [(r.read_uint(BAND_BITS, "band lo"), r.read_uint(BAND_BITS, "band hi")) for _ in range(channels)]

    preds = [_predictions(img[:, :, ch], layout) for ch in range(channels)]
    values = [img[:, :, ch].ravel()[layout.carriers].astype(np.int64) for ch in range(channels)]
    inside = [(preds[ch] >= lo) & (preds[ch] <= hi) for ch, (lo, hi) in enumerate(bands)]
    errors = [(values[ch] - preds[ch])[inside[ch]] for ch in range(channels)]
    chunks = []
    if n_used:
        ch, peak, zero = _read_pass(r)
        for k in range(n_used - 1, -1, -1):
            if ch >= channels:
                raise RDHError(f"pass {k} names channel {ch} of a {channels}-channel image")
            bits, nbits = _extract_pass(errors[ch], peak, zero)
            if k == 0:
                chunks.append(bits.bits)
            else:
                if nbits < PASS_BITS:
                    raise RDHError(f"pass {k} too small to carry its predecessor record")
                ch, peak, zero = _read_pass(BitReader(bits))
                chunks.append(bits.bits[PASS_BITS:])
    stream = BitReader(np.concatenate(chunks[::-1]) if chunks else np.zeros(0, np.uint8))

    try:
        boot_lsb = stream.read_bits(boot.size, "bootstrap bits").bits
        n_payload = stream.read_uint(LENGTH_BITS, "payload length")
        payload = stream.read_bits(n_payload, "payload")
    except ParseError as exc:
        raise RDHError(f"corrupt embedded stream: {exc}") from exc

    out = img.copy()
    for ch in range(channels):
        restored = values[ch].copy()
        restored[inside[ch]] = errors[ch] + preds[ch][inside[ch]]
        if restored.min(initial=0) < 0 or restored.max(initial=0) > 255:
            raise RDHError("restored values out of range: image was modified after embedding")
        plane = out[:, :, ch].ravel()
        plane[layout.carriers] = restored.astype(np.uint8)
        out[:, :, ch] = plane.reshape(img.shape[:2])
    oflat = out.ravel()
    oflat[boot] = (oflat[boot] & 0xFE) | boot_lsb
    return payload, oflat.reshape(img.shape)
