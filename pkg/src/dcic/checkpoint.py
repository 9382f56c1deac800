"""Binary model checkpoints (".dcic" files).

Layout, little-endian throughout:

    magic "DCIC" | version u16 | kind u8 | seed u64 |
    hyper_len u32 | hyper key=value text (utf-8) |
    array_count u32 | arrays | opt_flag u8 | [array_count u32 | arrays]

Each array: name_len u16 | name utf-8 | ndim u8 | dims u32*ndim | f32 data.
Forward passes reproduce bit-identically after a save/load round trip
because parameters are stored as raw float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DCIC"
VERSION = 1
FILE_EXTENSION = ".dcic"

KINDS = {"compressor": 1, "classifier": 2, "segmenter": 3}
_KIND_NAMES = {v: k for k, v in KINDS.items()}


class CheckpointError(Exception):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class BadCheckpointMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class KindMismatchError(CheckpointError):
    pass


class ArrayShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    hyper: dict[str, str]
    arrays: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        out += arr.astype("<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_arrays(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
    return arrays


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    if ckpt.kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
    hyper = "\n".join(f"{k}={v}" for k, v in ckpt.hyper.items()).encode()
    blob = bytearray()
    blob += struct.pack("<4sHBQ", MAGIC, VERSION, KINDS[ckpt.kind], ckpt.seed & (2 ** 64 - 1))
    blob += struct.pack("<I", len(hyper)) + hyper
    blob += _pack_arrays(ckpt.arrays)
    if ckpt.optimizer is None:
        blob += struct.pack("<B", 0)
    else:
        blob += struct.pack("<B", 1) + _pack_arrays(ckpt.optimizer)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path: str, expect_kind: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic, version, kind_id, seed = r.unpack("<4sHBQ")
    if magic != MAGIC:
        raise BadCheckpointMagicError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    kind = _KIND_NAMES.get(kind_id)
    if kind is None:
        raise CheckpointError(f"unknown checkpoint kind id {kind_id}")
    if expect_kind is not None and kind != expect_kind:
        raise KindMismatchError(f"kind mismatch: file holds a {kind}, expected {expect_kind}")
    (hyper_len,) = r.unpack("<I")
    hyper_text = r.take(hyper_len).decode()
    hyper = dict(line.split("=", 1) for line in hyper_text.splitlines() if line)
    arrays = _read_arrays(r)
    (opt_flag,) = r.unpack("<B")
    optimizer = _read_arrays(r) if opt_flag else None
    return Checkpoint(kind, hyper, arrays, optimizer, seed)


def load_arrays_into(params: dict[str, "np.ndarray | object"], arrays: dict[str, np.ndarray],
                     what: str = "model") -> None:
    """Copy checkpoint arrays into live parameter/buffer dicts, shape-checked."""
    for name, target in params.items():
        if name not in arrays:
            raise ArrayShapeMismatchError(f"{what} is missing array {name!r}")
        src = arrays[name]
        dst = target.data if hasattr(target, "data") and not isinstance(target, np.ndarray) else target
        if tuple(dst.shape) != tuple(src.shape):
            raise ArrayShapeMismatchError(
                f"{what} array {name!r} has shape {src.shape}, expected {tuple(dst.shape)}")
        dst[...] = src


# ---------------------------------------------------------------------------
# model-level save/load


def save_compressor(path: str, model, seed: int = 0, optimizer=None) -> None:
    from .compression import CompressionModel  # local import keeps module load light

    assert isinstance(model, CompressionModel)
    arrays = {k: p.data for k, p in model.named_parameters().items()}
    opt = optimizer.state_arrays() if optimizer is not None else None
    save_checkpoint(path, Checkpoint("compressor", model.hyper(), arrays, opt, seed))


def load_compressor(path: str):
    from .compression import CompressionModel

    ckpt = load_checkpoint(path, expect_kind="compressor")
    model = CompressionModel(
        np.random.default_rng(0),
        channels=int(ckpt.hyper["channels"]),
        num_centers=int(ckpt.hyper["num_centers"]),
        beta=float(ckpt.hyper["beta"]),
        target_entropy=float(ckpt.hyper["target_entropy"]),
        sigma=float(ckpt.hyper["sigma"]),
    )
    load_arrays_into(model.named_parameters(), ckpt.arrays, "compressor")
    return model


def save_network(path: str, net, kind: str, input_mean: np.ndarray | None = None,
                 seed: int = 0, optimizer=None, extra_hyper: dict | None = None) -> None:
    hyper = {"variant": net.spec.name, "num_classes": str(net.spec.num_classes),
             "input_channels": str(net.spec.input_channels)}
    hyper.update(extra_hyper or {})
    arrays = {k: p.data for k, p in net.named_parameters().items()}
    arrays.update(net.named_buffers())
    if input_mean is not None:
        arrays["input_mean"] = np.asarray(input_mean, dtype=np.float32)
    opt = optimizer.state_arrays() if optimizer is not None else None
    save_checkpoint(path, Checkpoint(kind, hyper, arrays, opt, seed))


def load_network(path: str, expect_kind: str | None = None):
    from . import nets

    ckpt = load_checkpoint(path)
    if ckpt.kind not in ("classifier", "segmenter"):
        raise KindMismatchError(f"kind mismatch: file holds a {ckpt.kind}, expected a network")
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise KindMismatchError(f"kind mismatch: file holds a {ckpt.kind}, expected {expect_kind}")
    variant = ckpt.hyper["variant"]
    num_classes = int(ckpt.hyper["num_classes"])
    input_channels = int(ckpt.hyper["input_channels"])
    rng = np.random.default_rng(0)
    if variant.endswith("-d"):
        net = nets.build_segmenter(variant, num_classes, input_channels, rng)
    else:
        net = nets.build_classifier(variant, num_classes, input_channels, rng)
    load_arrays_into(net.named_parameters(), ckpt.arrays, variant)
    load_arrays_into(net.named_buffers(), ckpt.arrays, variant)
    mean = ckpt.arrays.get("input_mean")
    return net, mean, ckpt
