"""Compression autoencoder with scalar quantization and an entropy-hinge rate loss.

The encoder maps an (N, 3, h, w) image to an (N, C, h/8, w/8) representation;
each entry is quantized independently against a small set of trainable
centers. The quantizer is hard in the forward pass and differentiates like
its softmax-based relaxation in the backward pass, so the whole
encode/quantize/decode chain trains end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, collect_params
from .tensor import Tensor, parameter, record, accumulate

PIXEL_SCALE = 255.0


def to_signal(pixels: np.ndarray) -> np.ndarray:
    """Map 0..255 pixel values to the centered [-0.5, 0.5] training domain."""
    return (np.asarray(pixels, dtype=np.float32) / PIXEL_SCALE) - 0.5


def to_pixels(signal: np.ndarray) -> np.ndarray:
    """Inverse of to_signal, clipped to the displayable range."""
    return np.clip((np.asarray(signal) + 0.5) * PIXEL_SCALE, 0.0, PIXEL_SCALE)


# ---------------------------------------------------------------------------
# quantization


def canonical_centers(centers) -> np.ndarray:
    """Sorted centers with near-duplicates (within 1e-6) merged."""
    c = np.sort(np.asarray(centers, dtype=np.float32).reshape(-1))
    if c.size == 0:
        raise ValueError("need at least one quantization center")
    keep = [c[0]]
    for v in c[1:]:
        if v - keep[-1] > 1e-6:
            keep.append(v)
    return np.asarray(keep, dtype=np.float32)


def quantize_hard(z, centers) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-center assignment; ties go to the lower center index.

    Returns (symbols, values) as plain arrays; this is the non-differentiable
    inference/codec path.
    """
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    cd = centers.data if isinstance(centers, Tensor) else np.asarray(centers)
    cd = cd.reshape(-1)
    if cd.size == 0:
        raise ValueError("need at least one quantization center")
    d = zd[..., None] - cd
    symbols = np.argmin(d * d, axis=-1)
    return symbols, cd[symbols]


def soft_assign(z: Tensor, centers: Tensor, sigma: float) -> Tensor:
    """Per-entry softmax over -sigma*(z - c_j)^2; shape (*z.shape, L)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cd = centers.data.reshape(-1)
    d = z.data[..., None] - cd
    logits = -sigma * (d * d)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        gl = p * (g - (g * p).sum(axis=-1, keepdims=True))
        if z.requires_grad:
            accumulate(z, (gl * (-2.0 * sigma) * d).sum(axis=-1))
        if centers.requires_grad:
            gc = (gl * (2.0 * sigma) * d).reshape(-1, cd.size).sum(axis=0)
            accumulate(centers, gc.reshape(centers.data.shape))

    return record(out, (z, centers), bwd)


def quantize_soft(z: Tensor, centers: Tensor, sigma: float) -> tuple[Tensor, Tensor]:
    """Differentiable relaxation: assignment probs and their expected center."""
    probs = soft_assign(z, centers, sigma)
    value = T.tsum(T.mul(probs, centers), axis=-1)
    return probs, value


def quantize_ste(z: Tensor, centers: Tensor, sigma: float) -> Tensor:
    """Hard nearest-center values forward; soft-quantization Jacobian backward."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    _, values = quantize_hard(z.data, centers.data)
    out = Tensor(values)

    cd = centers.data.reshape(-1)
    d = z.data[..., None] - cd
    logits = -sigma * (d * d)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=-1, keepdims=True)
    m1 = p @ cd
    m2 = p @ (cd * cd)

    def bwd(g):
        if z.requires_grad:
            accumulate(z, g * (2.0 * sigma) * (m2 - m1 * m1))
        if centers.requires_grad:
            term = p * (1.0 + (2.0 * sigma) * d * (cd - m1[..., None]))
            gc = (g[..., None] * term).reshape(-1, cd.size).sum(axis=0)
            accumulate(centers, gc.reshape(centers.data.shape))

    return record(out, (z, centers), bwd)


def entropy_estimate(probs: Tensor) -> Tensor:
    """Entropy in bits/symbol of the batch-averaged assignment probabilities.

    p_j is the mean over every entry of the soft assignment to center j;
    0*log(0) counts as 0.
    """
    if probs.size == 0:
        raise ValueError("entropy_estimate needs at least one symbol position")
    L = probs.shape[-1]
    m = probs.size // L
    pbar = probs.data.reshape(-1, L).mean(axis=0)
    pos = pbar > 0
    h = -(pbar[pos] * np.log2(pbar[pos])).sum()
    out = Tensor(np.asarray(h, dtype=probs.data.dtype))

    def bwd(g):
        dh = np.zeros_like(pbar)
        dh[pos] = -(np.log2(pbar[pos]) + 1.0 / np.log(2.0))
        accumulate(probs, np.broadcast_to(g * dh / m, probs.data.shape))

    return record(out, (probs,), bwd)


def rate_distortion_loss(x: Tensor, xhat: Tensor, entropy: Tensor, beta: float,
                         target_entropy: float) -> Tensor:
    """MSE(x, xhat) + beta * max(entropy - target, 0)."""
    hinge = T.relu(T.sub(entropy, float(target_entropy)))
    return T.add(T.mse_loss(x, xhat), T.mul(hinge, float(beta)))


def nominal_bpp(target_entropy: float, channels: int) -> float:
    """Bits/pixel implied by the entropy target: (w/8)(h/8)C symbols per wh pixels."""
    if target_entropy < 0:
        raise ValueError("target entropy must be non-negative")
    if channels < 1:
        raise ValueError("need at least one channel")
    return target_entropy * channels / 64.0


@dataclass(frozen=True)
class OperatingPoint:
    """A trained rate point: channel count, entropy target, and rate weight."""

    channels: int
    target_entropy: float
    beta: float

    @property
    def nominal_bpp(self) -> float:
        return nominal_bpp(self.target_entropy, self.channels)


# ---------------------------------------------------------------------------
# the autoencoder

ENCODER_WIDTHS = (64, 128)
RESIDUAL_WIDTH = 128
NUM_RESIDUAL_UNITS = 3
DECODER_WIDTHS = (64, 32)


def encoder_layout(channels: int):
    """(name, cin, cout, kernel, stride, relu) for each encoder conv."""
    rows = [("encoder.conv1", 3, ENCODER_WIDTHS[0], 5, 2, True),
            ("encoder.conv2", ENCODER_WIDTHS[0], ENCODER_WIDTHS[1], 5, 2, True)]
    for i in range(NUM_RESIDUAL_UNITS):
        rows.append((f"encoder.res{i + 1}.conv1", RESIDUAL_WIDTH, RESIDUAL_WIDTH, 3, 1, True))
        rows.append((f"encoder.res{i + 1}.conv2", RESIDUAL_WIDTH, RESIDUAL_WIDTH, 3, 1, False))
    rows.append(("encoder.conv3", ENCODER_WIDTHS[1], channels, 5, 2, False))
    return rows


def decoder_layout(channels: int):
    """(name, cin, cout, kernel, upsample, relu) for each decoder conv."""
    rows = [("decoder.conv1", channels, RESIDUAL_WIDTH, 5, 1, True)]
    for i in range(NUM_RESIDUAL_UNITS):
        rows.append((f"decoder.res{i + 1}.conv1", RESIDUAL_WIDTH, RESIDUAL_WIDTH, 3, 1, True))
        rows.append((f"decoder.res{i + 1}.conv2", RESIDUAL_WIDTH, RESIDUAL_WIDTH, 3, 1, False))
    rows.append(("decoder.up1", RESIDUAL_WIDTH, DECODER_WIDTHS[0], 5, 2, True))
    rows.append(("decoder.up2", DECODER_WIDTHS[0], DECODER_WIDTHS[1], 5, 2, True))
    rows.append(("decoder.up3", DECODER_WIDTHS[1], 3, 5, 2, False))
    return rows


class _ResUnit:
    """x + conv(relu(conv(x))), both convs 3x3 at constant width."""

    def __init__(self, rng, width: int):
        self.conv1 = Conv2d(rng, width, width, 3)
        self.conv2 = Conv2d(rng, width, width, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return T.residual_add(x, self.conv2(T.relu(self.conv1(x))))

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")


class CompressionModel:
    """Encoder, trainable quantizer centers, decoder, and the rate hyperparams."""

    def __init__(self, rng: np.random.Generator, channels: int, num_centers: int = 6,
                 beta: float = 150.0, target_entropy: float = 1.265, sigma: float = 1.0):
        if channels < 1:
            raise ValueError("need at least one representation channel")
        self.channels = channels
        self.beta = beta
        self.target_entropy = target_entropy
        self.sigma = sigma
        self.enc_conv1 = Conv2d(rng, 3, ENCODER_WIDTHS[0], 5, stride=2)
        self.enc_conv2 = Conv2d(rng, ENCODER_WIDTHS[0], ENCODER_WIDTHS[1], 5, stride=2)
        self.enc_res = [_ResUnit(rng, RESIDUAL_WIDTH) for _ in range(NUM_RESIDUAL_UNITS)]
        self.enc_conv3 = Conv2d(rng, ENCODER_WIDTHS[1], channels, 5, stride=2)
        self.dec_conv1 = Conv2d(rng, channels, RESIDUAL_WIDTH, 5)
        self.dec_res = [_ResUnit(rng, RESIDUAL_WIDTH) for _ in range(NUM_RESIDUAL_UNITS)]
        self.dec_up1 = Conv2d(rng, RESIDUAL_WIDTH, DECODER_WIDTHS[0], 5)
        self.dec_up2 = Conv2d(rng, DECODER_WIDTHS[0], DECODER_WIDTHS[1], 5)
        self.dec_up3 = Conv2d(rng, DECODER_WIDTHS[1], 3, 5)
        self.centers = parameter(np.linspace(-2.0, 2.0, num_centers, dtype=np.float32))

    @property
    def num_centers(self) -> int:
        return self.centers.size

    def encode(self, image: Tensor) -> Tensor:
        """Image (N, 3, h, w) in the centered domain -> representation (N, C, h/8, w/8)."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise T.ShapeError(f"encode expects (N, 3, h, w), got {image.shape}")
        if image.shape[2] % 8 or image.shape[3] % 8:
            raise T.ShapeError("dimensions must be divisible by 8")
        x = T.relu(self.enc_conv1(image))
        x = T.relu(self.enc_conv2(x))
        for unit in self.enc_res:
            x = unit(x)
        return self.enc_conv3(x)

    def decode(self, rep: Tensor) -> Tensor:
        """Quantized representation -> reconstruction (N, 3, 8*h8, 8*w8), linear output."""
        if rep.ndim != 4 or rep.shape[1] != self.channels:
            raise T.ShapeError(
                f"decode expects (N, {self.channels}, h/8, w/8), got {rep.shape}")
        x = T.relu(self.dec_conv1(rep))
        for unit in self.dec_res:
            x = unit(x)
        x = T.relu(self.dec_up1(T.nearest_upsample(x, 2)))
        x = T.relu(self.dec_up2(T.nearest_upsample(x, 2)))
        return self.dec_up3(T.nearest_upsample(x, 2))

    def quantize(self, rep: Tensor) -> Tensor:
        return quantize_ste(rep, self.centers, self.sigma)

    def compress(self, image: Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Hard path for the codec: (symbols, center values) of the representation."""
        return quantize_hard(self.encode(image).data, self.centers.data)

    def named_parameters(self) -> dict[str, Tensor]:
        layers = [("encoder.conv1", self.enc_conv1), ("encoder.conv2", self.enc_conv2)]
        layers += [(f"encoder.res{i + 1}", u) for i, u in enumerate(self.enc_res)]
        layers += [("encoder.conv3", self.enc_conv3), ("decoder.conv1", self.dec_conv1)]
        layers += [(f"decoder.res{i + 1}", u) for i, u in enumerate(self.dec_res)]
        layers += [("decoder.up1", self.dec_up1), ("decoder.up2", self.dec_up2),
                   ("decoder.up3", self.dec_up3)]
        params = collect_params(layers)
        params["centers"] = self.centers
        return params

    def hyper(self) -> dict[str, str]:
        return {"channels": str(self.channels), "num_centers": str(self.num_centers),
                "beta": repr(float(self.beta)),
                "target_entropy": repr(float(self.target_entropy)),
                "sigma": repr(float(self.sigma))}
