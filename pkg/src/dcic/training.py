"""The four training procedures and their shared plumbing.

All loops draw data, init, and augmentation randomness from named
substreams of one seed, log tab-separated traces, and abort on non-finite
losses. The compression model stays frozen during classifier/segmenter
training: inputs are precomputed outside any tape, so no gradient can reach
it by construction.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import analysis, bitstream, data
from . import tensor as T
from .compression import (CompressionModel, entropy_estimate, quantize_hard, quantize_ste,
                          rate_distortion_loss, soft_assign, to_pixels, to_signal)
from .config import substream
from .nets import BuiltNetwork, build_classifier, build_segmenter
from .optim import Adam, SgdMomentum
from .tensor import Tape, Tensor, backward

PAPER_MILESTONE_EPOCHS = (8, 16, 24)
PAPER_TOTAL_EPOCHS = 28


class TrainingDivergedError(RuntimeError):
    pass


def _check_finite(loss: Tensor, step) -> float:
    v = loss.item()
    if not np.isfinite(v):
        raise TrainingDivergedError(f"non-finite loss {v} at step {step}")
    return v


def write_trace(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in rows:
            fh.write("\t".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in keys) + "\n")


def compression_checksum(model: CompressionModel) -> int:
    """CRC over all parameter bytes; used to assert the frozen-model contract."""
    crc = 0
    for name in sorted(model.named_parameters()):
        crc = zlib.crc32(model.named_parameters()[name].data.tobytes(), crc)
    return crc


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(image: np.ndarray, crop: int | None, mirror: bool, mean: np.ndarray | None,
               mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Mirror/crop augmentation plus per-channel mean subtraction.

    Train mode flips and crops at random; eval mode center-crops and never
    flips, so it is deterministic. Works on any (C, H, W) array, images and
    representations alike.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {img.shape}")
    _, h, w = img.shape
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode preprocessing needs a generator")
        if mirror and rng.integers(2):
            img = img[:, :, ::-1]
        if crop is not None:
            if h < crop or w < crop:
                raise ValueError(f"image {h}x{w} smaller than crop {crop}")
            top = int(rng.integers(h - crop + 1))
            left = int(rng.integers(w - crop + 1))
            img = img[:, top:top + crop, left:left + crop]
    elif mode == "eval":
        if crop is not None:
            if h < crop or w < crop:
                raise ValueError(f"image {h}x{w} smaller than crop {crop}")
            top = (h - crop) // 2
            left = (w - crop) // 2
            img = img[:, top:top + crop, left:left + crop]
    else:
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    img = np.ascontiguousarray(img)
    if mean is not None:
        img = img - np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    return img


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    idx = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield idx[start:start + batch_size]


# ---------------------------------------------------------------------------
# compressor


@dataclass
class CompressorTrainConfig:
    channels: int = 8
    num_centers: int = 6
    beta: float = 600.0
    target_entropy: float = 0.8
    sigma: float = 1.0
    lr: float = 1e-3
    batch_size: int = 30
    iterations: int = 20000
    image_size: int = 64
    train_images: int = 512
    probe_images: int = 6
    probe_size: int = 256  # bpp probes are larger so header cost amortizes
    seed: int = 0
    log_interval: int = 50


def measure_bpp(model: CompressionModel, images: np.ndarray) -> float:
    """Mean real-file bpp of the hard-quantized representations."""
    total = 0.0
    for img in images:
        x = Tensor(to_signal(img)[None])
        symbols, _ = model.compress(x)
        stream = bitstream.serialize(symbols[0], model.centers.data,
                                     (img.shape[2], img.shape[1]))
        total += bitstream.measured_bpp(stream, img.shape[2], img.shape[1])
    return total / len(images)


def compression_step_losses(model: CompressionModel, x: Tensor):
    """Forward pass shared by compressor and joint training.

    Returns (rd_loss, mse, entropy, quantized_rep, reconstruction).
    """
    z = model.encode(x)
    rep = quantize_ste(z, model.centers, model.sigma)
    xhat = model.decode(rep)
    probs = soft_assign(z, model.centers, model.sigma)
    ent = entropy_estimate(probs)
    mse = T.mse_loss(x, xhat)
    hinge = T.relu(T.sub(ent, model.target_entropy))
    loss = T.add(mse, T.mul(hinge, model.beta))
    return loss, mse, ent, rep, xhat


def train_compressor(cfg: CompressorTrainConfig, quiet: bool = True):
    """Rate-distortion training with Adam; returns (model, trace rows)."""
    ds = data.generate_synthetic(cfg.seed, cfg.train_images, cfg.image_size)
    probe = data.generate_synthetic(cfg.seed + 1, cfg.probe_images, cfg.probe_size)
    model = CompressionModel(substream(cfg.seed, "init"), cfg.channels, cfg.num_centers,
                             cfg.beta, cfg.target_entropy, cfg.sigma)
    opt = Adam(model.named_parameters(), cfg.lr)
    aug = substream(cfg.seed, "augment")
    trace = []
    for it in range(cfg.iterations):
        idx = aug.choice(len(ds), size=cfg.batch_size, replace=False)
        x = Tensor(to_signal(ds.images[idx]))
        with Tape() as tape:
            loss, mse, ent, _, _ = compression_step_losses(model, x)
        val = _check_finite(loss, it)
        backward(loss, tape)
        opt.step()
        opt.zero_grad()
        if it % cfg.log_interval == 0 or it == cfg.iterations - 1:
            bpp = measure_bpp(model, probe.images.astype(np.float32))
            row = {"iteration": it, "mse": mse.item(), "entropy": ent.item(),
                   "loss": val, "bpp": bpp}
            trace.append(row)
            if not quiet:
                print(f"[compressor] it={it} mse={row['mse']:.5f} "
                      f"H={row['entropy']:.3f} bpp={bpp:.4f}", flush=True)
    return model, trace


# ---------------------------------------------------------------------------
# frozen-compressor input pipelines


def encode_dataset(model: CompressionModel, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Hard-quantized center-valued representations, computed without a tape."""
    out = []
    for start in range(0, len(images), batch):
        x = Tensor(to_signal(images[start:start + batch].astype(np.float32)))
        _, values = model.compress(x)
        out.append(values)
    return np.concatenate(out, axis=0)


def decode_dataset(model: CompressionModel, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Reconstructed pixels (clipped 0..255) of the hard-quantized representations."""
    out = []
    for start in range(0, len(images), batch):
        x = Tensor(to_signal(images[start:start + batch].astype(np.float32)))
        _, values = model.compress(x)
        out.append(to_pixels(model.decode(Tensor(values)).data))
    return np.concatenate(out, axis=0)


def classifier_inputs(source: str, model: CompressionModel | None,
                      images: np.ndarray) -> np.ndarray:
    if source == "representation":
        return encode_dataset(model, images)
    if source == "decoded_rgb":
        return decode_dataset(model, images)
    if source == "original_rgb":
        return images.astype(np.float32)
    raise ValueError(f"unknown source {source!r}")


def _family_for_source(source: str) -> str:
    return "compressed" if source == "representation" else "rgb"


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierTrainConfig:
    variant: str = "cResNet-39"
    source: str = "representation"  # representation | decoded_rgb | original_rgb
    num_classes: int = data.NUM_CLASSES
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    image_size: int = 64
    crop: int | None = None
    mirror: bool = True
    train_images: int = 768
    eval_images: int = 256
    seed: int = 0


def milestone_epochs(total_epochs: int) -> tuple[int, ...]:
    """The published 8/16/24-of-28 decay points scaled to the configured budget."""
    return tuple(max(1, round(m * total_epochs / PAPER_TOTAL_EPOCHS))
                 for m in PAPER_MILESTONE_EPOCHS)


def _lr_at_epoch(base: float, epoch: int, milestones) -> float:
    return base * 0.1 ** sum(epoch >= m for m in milestones)


def _augment_batch(inputs: np.ndarray, rng: np.random.Generator, mirror: bool) -> np.ndarray:
    if not mirror:
        return inputs
    flip = rng.integers(2, size=len(inputs)).astype(bool)
    out = inputs.copy()
    out[flip] = out[flip][:, :, :, ::-1]
    return out


def batched_logits(net: BuiltNetwork, inputs: np.ndarray, batch: int = 32) -> np.ndarray:
    out = []
    for start in range(0, len(inputs), batch):
        out.append(net.forward(Tensor(inputs[start:start + batch])).data)
    return np.concatenate(out, axis=0)


def train_classifier(cfg: ClassifierTrainConfig, compressor: CompressionModel | None,
                     quiet: bool = True):
    """Fixed-compressor classification training; returns (net, input_mean, trace)."""
    family = _family_for_source(cfg.source)
    if cfg.source != "original_rgb" and compressor is None:
        raise ValueError(f"source {cfg.source!r} needs a compression model")
    if family == "compressed" and not cfg.variant.startswith("c"):
        raise ValueError(f"{cfg.variant} is an RGB network; it cannot consume representations")
    if family == "rgb" and cfg.variant.startswith("c"):
        raise ValueError(f"{cfg.variant} consumes representations, not RGB input")

    ds = data.generate_synthetic(cfg.seed, cfg.train_images + cfg.eval_images, cfg.image_size)
    inputs = classifier_inputs(cfg.source, compressor, ds.images)
    mean = inputs[:cfg.train_images].mean(axis=(0, 2, 3)).astype(np.float32)
    scale = 255.0 if family == "rgb" else 1.0
    inputs = (inputs - mean.reshape(1, -1, 1, 1)) / scale
    train_x, eval_x = inputs[:cfg.train_images], inputs[cfg.train_images:]
    train_y, eval_y = ds.labels[:cfg.train_images], ds.labels[cfg.train_images:]

    channels = inputs.shape[1]
    net = build_classifier(cfg.variant, cfg.num_classes, channels, substream(cfg.seed, "init"))
    opt = SgdMomentum(net.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    aug = substream(cfg.seed, "augment")
    milestones = milestone_epochs(cfg.epochs)
    trace = []
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at_epoch(cfg.lr, epoch, milestones)
        losses = []
        for idx in _batches(len(train_x), cfg.batch_size, aug):
            xb = _augment_batch(train_x[idx], aug, cfg.mirror)
            with Tape() as tape:
                logits = net.forward(Tensor(xb), train=True)
                loss = T.softmax_cross_entropy(logits, train_y[idx])
            losses.append(_check_finite(loss, epoch))
            backward(loss, tape)
            opt.step()
            opt.zero_grad()
        logits = batched_logits(net, eval_x)
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": float(np.mean(losses)),
               "top1": analysis.topk_accuracy(logits, eval_y, 1),
               "top5": analysis.topk_accuracy(logits, eval_y, 5)}
        trace.append(row)
        if not quiet:
            print(f"[classifier {cfg.variant}/{cfg.source}] epoch={epoch} "
                  f"loss={row['train_loss']:.4f} top1={row['top1']:.3f}", flush=True)
    return net, mean, trace


# ---------------------------------------------------------------------------
# segmenter


@dataclass
class SegmenterTrainConfig:
    variant: str = "cResNet-39-d"
    source: str = "representation"
    num_classes: int = data.NUM_SEG_CLASSES
    iterations: int = 300
    batch_size: int = 10
    lr: float = 1e-3
    head_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    image_size: int = 64
    mirror: bool = True
    train_images: int = 600
    eval_images: int = 128
    seed: int = 0
    log_interval: int = 50
    ignore_label: int = 255


def poly_lr(base: float, iteration: int, max_iterations: int, power: float = 0.9) -> float:
    return base * (1.0 - iteration / max_iterations) ** power


def segmentation_loss(net: BuiltNetwork, xb: np.ndarray, masks: np.ndarray,
                      num_classes: int, ignore_label: int, train: bool) -> Tensor:
    logits = net.forward(Tensor(xb), train=train)  # (N, K, H, W)
    n, k, h, w = logits.shape
    flat = T.reshape(T.transpose(logits, (0, 2, 3, 1)), (n * h * w, k))
    return T.softmax_cross_entropy(flat, masks.reshape(-1), ignore_label=ignore_label)


def evaluate_segmenter(net: BuiltNetwork, inputs: np.ndarray, masks: np.ndarray,
                       num_classes: int, ignore_label: int, batch: int = 16):
    """Aggregate mIoU over a held-out split."""
    preds = []
    for start in range(0, len(inputs), batch):
        logits = net.forward(Tensor(inputs[start:start + batch])).data
        preds.append(logits.argmax(axis=1))
    return analysis.miou(np.concatenate(preds), masks, num_classes, ignore_label)


def train_segmenter(cfg: SegmenterTrainConfig, compressor: CompressionModel | None,
                    pretrained: dict[str, np.ndarray] | None, quiet: bool = True):
    """Poly-schedule finetuning of a dilated variant; returns (net, mean, trace)."""
    family = _family_for_source(cfg.source)
    if cfg.source != "original_rgb" and compressor is None:
        raise ValueError(f"source {cfg.source!r} needs a compression model")
    base_variant = cfg.variant[:-2] if cfg.variant.endswith("-d") else cfg.variant
    if family == "compressed" and not base_variant.startswith("c"):
        raise ValueError(f"{cfg.variant} is an RGB network; it cannot consume representations")

    ds = data.generate_synthetic(cfg.seed, cfg.train_images + cfg.eval_images, cfg.image_size)
    inputs = classifier_inputs(cfg.source, compressor, ds.images)
    mean = inputs[:cfg.train_images].mean(axis=(0, 2, 3)).astype(np.float32)
    scale = 255.0 if family == "rgb" else 1.0
    inputs = (inputs - mean.reshape(1, -1, 1, 1)) / scale
    train_x, eval_x = inputs[:cfg.train_images], inputs[cfg.train_images:]
    train_m, eval_m = ds.masks[:cfg.train_images], ds.masks[cfg.train_images:]

    channels = inputs.shape[1]
    net = build_segmenter(cfg.variant, cfg.num_classes, channels, substream(cfg.seed, "init"))
    if pretrained is not None:
        backbone_params = {k: v for k, v in net.named_parameters().items()
                           if not k.startswith("head.")}
        backbone_bufs = {k: v for k, v in net.named_buffers().items()
                         if not k.startswith("head.")}
        from .checkpoint import load_arrays_into
        load_arrays_into(backbone_params, pretrained, "pretrained backbone")
        load_arrays_into(backbone_bufs, pretrained, "pretrained backbone")

    mults = {name: cfg.head_lr_multiplier for name in net.head_param_names()}
    opt = SgdMomentum(net.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay,
                      lr_multipliers=mults)
    aug = substream(cfg.seed, "augment")
    trace = []
    for it in range(cfg.iterations):
        opt.lr = poly_lr(cfg.lr, it, cfg.iterations, cfg.poly_power)
        idx = aug.choice(len(train_x), size=cfg.batch_size, replace=False)
        xb, mb = train_x[idx], train_m[idx]
        if cfg.mirror:
            flip = aug.integers(2, size=len(idx)).astype(bool)
            xb = xb.copy()
            mb = mb.copy()
            xb[flip] = xb[flip][:, :, :, ::-1]
            mb[flip] = mb[flip][:, :, ::-1]
        with Tape() as tape:
            loss = segmentation_loss(net, xb, mb, cfg.num_classes, cfg.ignore_label, train=True)
        val = _check_finite(loss, it)
        backward(loss, tape)
        opt.step()
        opt.zero_grad()
        if it % cfg.log_interval == 0 or it == cfg.iterations - 1:
            miou, _ = evaluate_segmenter(net, eval_x, eval_m, cfg.num_classes, cfg.ignore_label)
            trace.append({"iteration": it, "lr": opt.lr, "loss": val, "miou": miou})
            if not quiet:
                print(f"[segmenter {cfg.variant}] it={it} loss={val:.4f} miou={miou:.3f}",
                      flush=True)
    return net, mean, trace


# ---------------------------------------------------------------------------
# joint compression + classification


@dataclass
class JointTrainConfig:
    gamma: float = 0.001
    epochs: int = 9
    batch_size: int = 10
    lr: float = 0.0025
    momentum: float = 0.9
    lr_decay_epochs: int = 3
    image_size: int = 64
    train_images: int = 300
    eval_images: int = 128
    probe_images: int = 4
    probe_size: int = 192
    seed: int = 0
    mirror: bool = True


@dataclass
class JointResult:
    trace: list[dict] = field(default_factory=list)
    probe_before: dict = field(default_factory=dict)
    probe_after: dict = field(default_factory=dict)


def probe_quality(model: CompressionModel, images: np.ndarray) -> dict:
    """PSNR/SSIM/MS-SSIM of hard-quantized reconstructions on a probe set."""
    scores = {"psnr": [], "ssim": [], "ms_ssim": [], "bpp": []}
    for img in images:
        x = Tensor(to_signal(img)[None])
        symbols, values = model.compress(x)
        recon = to_pixels(model.decode(Tensor(values)).data[0])
        scores["psnr"].append(analysis.psnr(img, recon))
        scores["ssim"].append(analysis.ssim(img, recon))
        scores["ms_ssim"].append(analysis.ms_ssim(img, recon))
        stream = bitstream.serialize(symbols[0], model.centers.data,
                                     (img.shape[2], img.shape[1]))
        scores["bpp"].append(bitstream.measured_bpp(stream, img.shape[2], img.shape[1]))
    return {k: float(np.mean(v)) for k, v in scores.items()}


def train_joint(cfg: JointTrainConfig, model: CompressionModel, net: BuiltNetwork,
                input_mean: np.ndarray, mode: str = "joint", quiet: bool = True):
    """Joint finetune (gamma-weighted rate-distortion plus cross-entropy) or the
    compression-only control under the same schedule.

    Returns a JointResult; model and net are updated in place.
    """
    if cfg.gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {cfg.gamma}")
    if mode not in ("joint", "compression_only"):
        raise ValueError(f"mode must be joint or compression_only, got {mode!r}")
    ds = data.generate_synthetic(cfg.seed, cfg.train_images + cfg.eval_images, cfg.image_size)
    probe = data.generate_synthetic(cfg.seed + 1, cfg.probe_images, cfg.probe_size)
    train_imgs = ds.images[:cfg.train_images]
    train_y = ds.labels[:cfg.train_images]
    eval_imgs = ds.images[cfg.train_images:]
    eval_y = ds.labels[cfg.train_images:]
    mean_t = Tensor(np.asarray(input_mean, dtype=np.float32).reshape(1, -1, 1, 1))

    params = dict(model.named_parameters())
    if mode == "joint":
        params.update(net.named_parameters())
    opt = SgdMomentum(params, cfg.lr, cfg.momentum)
    aug = substream(cfg.seed, "augment")

    def eval_accuracy() -> float:
        reps = encode_dataset(model, eval_imgs)
        logits = batched_logits(net, reps - np.asarray(input_mean).reshape(1, -1, 1, 1))
        return analysis.topk_accuracy(logits, eval_y, 1)

    result = JointResult()
    result.probe_before = probe_quality(model, probe.images.astype(np.float32))
    result.probe_before["accuracy"] = eval_accuracy()
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * 0.1 ** (epoch // cfg.lr_decay_epochs)
        for idx in _batches(len(train_imgs), cfg.batch_size, aug):
            imgs = train_imgs[idx].astype(np.float32)
            if cfg.mirror:
                flip = aug.integers(2, size=len(idx)).astype(bool)
                imgs[flip] = imgs[flip][:, :, :, ::-1]
            x = Tensor(to_signal(imgs))
            with Tape() as tape:
                comp_loss, mse, ent, rep, _ = compression_step_losses(model, x)
                if mode == "joint":
                    logits = net.forward(T.sub(rep, mean_t), train=True)
                    ce = T.softmax_cross_entropy(logits, train_y[idx])
                    total = T.add(T.mul(comp_loss, cfg.gamma), ce)
                else:
                    total = comp_loss
            _check_finite(total, step)
            backward(total, tape)
            opt.step()
            opt.zero_grad()
            if mode != "joint":
                logits = net.forward(T.sub(Tensor(rep.data), mean_t)).data
                ce_val = float(T.softmax_cross_entropy(Tensor(logits), train_y[idx]).item())
            else:
                ce_val = ce.item()
            step += 1
        acc = eval_accuracy()
        row = {"epoch": epoch, "lr": opt.lr, "mse": mse.item(), "entropy": ent.item(),
               "ce": ce_val, "comp_loss": comp_loss.item(),
               "loss": total.item(), "accuracy": acc}
        result.trace.append(row)
        if not quiet:
            print(f"[joint/{mode}] epoch={epoch} ce={ce_val:.4f} acc={acc:.3f} "
                  f"H={row['entropy']:.3f}", flush=True)
    result.probe_after = probe_quality(model, probe.images.astype(np.float32))
    result.probe_after["accuracy"] = result.trace[-1]["accuracy"]
    return result
