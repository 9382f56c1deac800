"""Synthetic desk-scale datasets and portable-pixmap I/O.

Each synthetic image holds one large procedural shape on a smooth gradient
background. The 10-way class label encodes (shape family, color scheme); the
segmentation mask marks the shape's support with its 1-based shape id, so
the same generator serves both the 10-class classification task and a
6-class (background + 5 shapes) segmentation task. Generation is a pure
function of (seed, index).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

NUM_SHAPES = 5
NUM_SCHEMES = 2
NUM_CLASSES = NUM_SHAPES * NUM_SCHEMES
NUM_SEG_CLASSES = NUM_SHAPES + 1  # background = 0

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross")


def _shape_mask(rng: np.random.Generator, shape_id: int, size: int) -> np.ndarray:
    r = rng.uniform(0.22, 0.33) * size
    margin = r + 2
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if shape_id == 0:  # disk
        return dx * dx + dy * dy <= r * r
    if shape_id == 1:  # square
        a = r * 0.9
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    if shape_id == 2:  # triangle, apex up
        h = r * 1.2
        inside = dy >= -h
        inside &= dy <= h
        # sides from apex (0,-h) to base corners (+-1.1r, +h)
        slope = 2 * h / (1.1 * r)
        inside &= slope * dx <= dy + h
        inside &= -slope * dx <= dy + h
        return inside
    if shape_id == 3:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape_id == 4:  # cross
        arm = r * 0.38
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape id {shape_id}")


def synth_image(seed: int, index: int, size: int = 64,
                num_classes: int = NUM_CLASSES) -> tuple[np.ndarray, int, np.ndarray]:
    """One (image (3, H, W) float32 in 0..255, label, mask (H, W) uint8) sample."""
    if size % 8:
        raise ValueError("image size must be a multiple of 8")
    if not 2 <= num_classes <= NUM_CLASSES:
        raise ValueError(f"num_classes must be in [2, {NUM_CLASSES}]")
    rng = np.random.default_rng([seed, index])
    label = int(rng.integers(num_classes))
    shape_id = label % NUM_SHAPES
    scheme = label // NUM_SHAPES

    base = rng.uniform(80, 170)
    gx, gy = rng.uniform(-40, 40, size=2)
    yy, xx = np.mgrid[0:size, 0:size] / size
    background = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    img = np.repeat(background[None], 3, axis=0)
    img = img + rng.normal(0, 5, size=(3, size, size))

    mask = _shape_mask(rng, shape_id, size)
    if scheme == 0:  # warm
        color = np.array([rng.uniform(170, 220), rng.uniform(55, 95), rng.uniform(40, 80)])
    else:  # cool
        color = np.array([rng.uniform(40, 80), rng.uniform(65, 105), rng.uniform(170, 220)])
    # nuisance texture: low-amplitude sinusoid, not class-informative
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.15, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(freq * ((xx * np.cos(theta) + yy * np.sin(theta)) * size) + phase)
    tex = 1.0 + 0.12 * wave
    fg = color[:, None, None] * tex[None]
    img = np.where(mask[None], fg, img)

    seg = np.zeros((size, size), dtype=np.uint8)
    seg[mask] = shape_id + 1
    return np.clip(img, 0, 255).astype(np.float32), label, seg


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, 3, H, W) uint8
    labels: np.ndarray  # (n,) int64
    masks: np.ndarray  # (n, H, W) uint8
    seed: int
    size: int

    def __len__(self) -> int:
        return len(self.labels)

    def image_f32(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float32)


def generate_synthetic(seed: int, n: int, size: int = 64,
                       num_classes: int = NUM_CLASSES) -> SyntheticDataset:
    """Materialize n samples; sample i is identical across runs and machines."""
    if n < 0:
        raise ValueError("n must be non-negative")
    images = np.zeros((n, 3, size, size), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    masks = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        img, label, mask = synth_image(seed, i, size, num_classes)
        images[i] = np.round(img).astype(np.uint8)
        labels[i] = label
        masks[i] = mask
    return SyntheticDataset(images, labels, masks, seed, size)


# ---------------------------------------------------------------------------
# PPM / PGM files and the manifest format


def write_ppm(path: str, img: np.ndarray) -> None:
    """8-bit binary P6; accepts (3, H, W) or (H, W, 3) in 0..255."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {img.shape}")
    h, w, _ = img.shape
    data = np.clip(np.round(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def write_pgm(path: str, img: np.ndarray) -> None:
    """8-bit binary P5, used for label masks."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.astype(np.uint8).tobytes())


def _read_netpbm(path: str) -> tuple[bytes, int, int, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm supported, got maxval {maxval}")
    return magic, w, h, data[pos:]


def read_ppm(path: str) -> np.ndarray:
    """P6 file -> (3, H, W) float32 in 0..255."""
    magic, w, h, raw = _read_netpbm(path)
    if magic != b"P6":
        raise ValueError(f"not a binary PPM: magic {magic!r}")
    if len(raw) < 3 * w * h:
        raise ValueError("truncated PPM payload")
    arr = np.frombuffer(raw[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float32)


def read_pgm(path: str) -> np.ndarray:
    magic, w, h, raw = _read_netpbm(path)
    if magic != b"P5":
        raise ValueError(f"not a binary PGM: magic {magic!r}")
    if len(raw) < w * h:
        raise ValueError("truncated PGM payload")
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w).copy()


MANIFEST_NAME = "manifest.tsv"


def write_dataset(ds: SyntheticDataset, out_dir: str, with_masks: bool = True) -> str:
    """Dump a dataset as PPM images plus a filename<TAB>label[<TAB>mask] manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(len(ds)):
        name = f"img{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), ds.images[i])
        if with_masks:
            mask_name = f"img{i:05d}_mask.pgm"
            write_pgm(os.path.join(out_dir, mask_name), ds.masks[i])
            lines.append(f"{name}\t{ds.labels[i]}\t{mask_name}")
        else:
            lines.append(f"{name}\t{ds.labels[i]}")
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_dataset(folder: str) -> SyntheticDataset:
    """Read a manifest folder back into arrays; masks are optional."""
    manifest = os.path.join(folder, MANIFEST_NAME)
    images, labels, masks = [], [], []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ValueError(f"bad manifest line: {line!r}")
            img = read_ppm(os.path.join(folder, parts[0]))
            images.append(np.round(img).astype(np.uint8))
            labels.append(int(parts[1]))
            if len(parts) > 2:
                masks.append(read_pgm(os.path.join(folder, parts[2])))
    n = len(images)
    size = images[0].shape[1] if n else 0
    mask_arr = (np.stack(masks) if masks else np.zeros((n, size, size), dtype=np.uint8))
    return SyntheticDataset(np.stack(images) if n else np.zeros((0, 3, 0, 0), np.uint8),
                            np.asarray(labels, dtype=np.int64), mask_arr, seed=-1, size=size)
