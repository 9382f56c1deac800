"""Lossless container for quantized symbol maps (".dcr" files).

Layout, all integers little-endian:

    magic "DCR1" | version u16 | width u32 | height u32 | channels u8 |
    center_count u8 | centers f32*L | frequencies u32*L | payload_len u32 |
    payload

Frequencies are add-one-smoothed symbol counts; the payload is a range
coder stream (64-bit state, byte-wise renormalization, carries resolved by
delaying output until the top byte settles) encoding the (h/8)*(w/8)*C
symbols in row-major order with channel innermost. The wide state keeps
truncation waste below the 64-bit flush cost even on the largest maps. The
coder's frequency table is derived deterministically from the header
counts, so decode needs nothing beyond the file itself.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DCR1"
VERSION = 1
FILE_EXTENSION = ".dcr"

_STATE_BYTES = 8
_BOT = 1 << 48
_MASK = (1 << 64) - 1
_FREQ_CAP = 1 << 16


class CodecError(Exception):
    """Base class for bitstream failures."""


class BadMagicError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class TruncatedStreamError(CodecError):
    pass


class CorruptStreamError(CodecError):
    pass


def symbol_frequencies(symbols, num_centers: int) -> np.ndarray:
    """Occurrence counts with add-one smoothing, so every symbol stays codable."""
    if num_centers < 1:
        raise ValueError("need at least one center")
    syms = np.asarray(symbols).reshape(-1)
    counts = np.bincount(syms, minlength=num_centers) if syms.size else np.zeros(num_centers, int)
    return (counts + 1).astype(np.uint32)


def _coder_freqs(frequencies) -> list[int]:
    """Scale header counts until they fit the coder's 16-bit total, keeping >= 1."""
    freqs = [int(f) for f in frequencies]
    if any(f < 1 for f in freqs):
        raise CorruptStreamError("frequency table contains a zero count")
    while sum(freqs) > _FREQ_CAP:
        freqs = [(f + 1) // 2 for f in freqs]
    return freqs


class _RangeEncoder:
    """Carry-counting low/range coder; output bytes are final once written.

    A byte whose value could still be bumped by a later carry (0xFF, or the
    most recent byte) stays pending in cache/cache_size until the carry is
    resolved, so renormalization never wastes code space.
    """

    def __init__(self):
        self.low = 0  # holds one transient carry bit beyond 64
        self.range = _MASK
        self.cache = 0
        self.cache_size = 1  # the initial pending byte is the 0x00 lead-in
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < (0xFF << 56) or self.low > _MASK:
            carry = self.low >> 64
            self.out.append((self.cache + carry) & 0xFF)
            if self.cache_size > 1:
                self.out.extend((((0xFF + carry) & 0xFF),) * (self.cache_size - 1))
            self.cache = (self.low >> 56) & 0xFF
            self.cache_size = 0
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += cum * r
        self.range = freq * r
        while self.range < _BOT:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        # range >= _BOT > 2**40 here, so a multiple of 2**40 lies strictly
        # inside [low, low+range); three bytes pin it and the decoder
        # zero-fills the rest.
        self.low = -(-self.low // (1 << 40)) * (1 << 40)
        for _ in range(3):
            self._shift_low()
        self.out.append(self.cache)
        self.out.extend(b"\xff" * (self.cache_size - 1))
        return bytes(self.out)


class _RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        if self._byte() != 0:
            raise CorruptStreamError("range-coded payload lead-in byte is not zero")
        self.range = _MASK
        self.code = 0
        for _ in range(_STATE_BYTES):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        # Reads past the payload end return 0: the encoder's final flush only
        # pins the top bytes. Actual truncation is caught by the container's
        # length check before decoding starts.
        if self.pos >= len(self.data):
            return 0
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cumfreq: list[int], total: int) -> int:
        r = self.range // total
        v = min(self.code // r, total - 1)
        # binary search for the symbol whose cumulative span contains v
        lo, hi = 0, len(cumfreq) - 2
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if cumfreq[mid] <= v:
                lo = mid
            else:
                hi = mid - 1
        sym = lo
        self.code -= cumfreq[sym] * r
        self.range = (cumfreq[sym + 1] - cumfreq[sym]) * r
        while self.range < _BOT:
            self.code = ((self.code << 8) | self._byte()) & _MASK
            self.range <<= 8
        return sym


def _encode_payload(symbols: list[int], freqs: list[int]) -> bytes:
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    total = cum[-1]
    enc = _RangeEncoder()
    encode = enc.encode
    for s in symbols:
        encode(cum[s], freqs[s], total)
    return enc.finish()


def _decode_payload(data: bytes, freqs: list[int], n: int) -> np.ndarray:
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    total = cum[-1]
    dec = _RangeDecoder(data)
    decode = dec.decode
    return np.fromiter((decode(cum, total) for _ in range(n)), dtype=np.int64, count=n)


def serialize(symbols: np.ndarray, centers, image_size: tuple[int, int]) -> bytes:
    """Pack a symbol map of shape (C, h/8, w/8) for an image of (width, height)."""
    width, height = image_size
    if width % 8 or height % 8:
        raise ValueError("image dimensions must be divisible by 8")
    symbols = np.asarray(symbols)
    centers = np.asarray(centers, dtype=np.float32).reshape(-1)
    num_centers = centers.size
    if not 1 <= num_centers <= 255:
        raise ValueError(f"center count {num_centers} outside u8 range")
    c, h8, w8 = symbols.shape if symbols.ndim == 3 else (0, 0, 0)
    if symbols.ndim != 3 or (h8, w8) != (height // 8, width // 8):
        raise ValueError(
            f"symbol map shape {symbols.shape} inconsistent with image {width}x{height}")
    if not 0 <= c <= 255:
        raise ValueError(f"channel count {c} outside u8 range")
    if symbols.size and (symbols.min() < 0 or symbols.max() >= num_centers):
        raise ValueError(f"symbol out of range [0, {num_centers})")
    freqs = symbol_frequencies(symbols, num_centers)
    flat = symbols.transpose(1, 2, 0).reshape(-1).tolist()  # row-major, channel innermost
    payload = _encode_payload(flat, _coder_freqs(freqs)) if flat else b""
    header = struct.pack("<4sHIIBB", MAGIC, VERSION, width, height, c, num_centers)
    return (header + centers.astype("<f4").tobytes() + freqs.astype("<u4").tobytes()
            + struct.pack("<I", len(payload)) + payload)


def header_size(num_centers: int) -> int:
    """Fixed fields plus the two per-center tables; excludes the payload."""
    return 20 + 8 * num_centers


def deserialize(data: bytes):
    """Inverse of serialize: (symbols (C, h/8, w/8), centers, (width, height))."""
    if len(data) < 16:
        raise TruncatedStreamError("stream shorter than the fixed header")
    magic, version, width, height, channels, num_centers = struct.unpack_from("<4sHIIBB", data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unknown version {version}")
    if num_centers < 1:
        raise CorruptStreamError("center count must be >= 1")
    if width % 8 or height % 8:
        raise CorruptStreamError("image dimensions must be divisible by 8")
    off = 16
    if len(data) < header_size(num_centers) :
        raise TruncatedStreamError("stream ends inside the center/frequency tables")
    centers = np.frombuffer(data, dtype="<f4", count=num_centers, offset=off).copy()
    off += 4 * num_centers
    freqs = np.frombuffer(data, dtype="<u4", count=num_centers, offset=off).copy()
    off += 4 * num_centers
    (payload_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) - off < payload_len:
        raise TruncatedStreamError("truncated payload")
    n = (width // 8) * (height // 8) * channels
    if n == 0:
        return np.zeros((channels, height // 8, width // 8), dtype=np.int64), centers, (width, height)
    if channels < 1:
        raise CorruptStreamError("channel count must be >= 1 when symbols are present")
    payload = data[off:off + payload_len]
    flat = _decode_payload(payload, _coder_freqs(freqs), n)
    if flat.size and flat.max() >= num_centers:
        raise CorruptStreamError("decoded symbol outside the center table")
    symbols = flat.reshape(height // 8, width // 8, channels).transpose(2, 0, 1)
    return np.ascontiguousarray(symbols), centers, (width, height)


def measured_bpp(stream, width: int, height: int) -> float:
    """Whole-file bits divided by pixel count; header cost included."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    nbytes = len(stream) if not isinstance(stream, int) else stream
    return 8.0 * nbytes / (width * height)
