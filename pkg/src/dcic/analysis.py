"""Analytic FLOP/parameter cost model and the evaluation metrics.

Cost convention (printed in every report): one multiply-accumulate counts as
1 FLOP; batch norm as 2 ops per element, biases/activations/additions/pool
comparisons as 1. The counts depend only on the architecture and input
dims, never on parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import compression as C
from . import nets
from .nets import LayerRow, NetworkSpec

FLOP_CONVENTION = "1 MAC = 1 FLOP; BN 2 ops/elem; bias/act/add/pool-cmp 1 op/elem"

# Published full-scale costs used for the decode-then-classify comparison;
# the desk decoder built here is lighter and is reported as-built alongside.
REFERENCE_ENCODER_FLOPS = 3.56e9
REFERENCE_DECODER_FLOPS = 2.85e9

RGB_COUNTERPART = {"cResNet-39": "ResNet-50", "cResNet-51": "ResNet-50",
                   "cResNet-72": "ResNet-71"}


@dataclass
class CostReport:
    title: str
    input_dims: str
    rows: list[LayerRow]
    convention: str = FLOP_CONVENTION

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def to_tsv(self) -> str:
        lines = [f"# {self.title} @ {self.input_dims} ({self.convention})",
                 "layer\toutput\tkernel\tstride\tdilation\tparams\tflops"]
        for r in self.rows:
            c, h, w = r.out_shape
            lines.append(f"{r.name}\t{c}x{h}x{w}\t{r.kernel}\t{r.stride}\t"
                         f"{r.dilation}\t{r.params}\t{r.flops}")
        lines.append(f"total\t\t\t\t\t{self.total_params}\t{self.total_flops}")
        return "\n".join(lines) + "\n"

    def to_keyvalues(self) -> str:
        return (f"title={self.title}\ninput={self.input_dims}\n"
                f"convention={self.convention}\n"
                f"total_flops={self.total_flops}\ntotal_params={self.total_params}\n")


def _autoencoder_rows(layout, hw, kind: str) -> list[LayerRow]:
    rows = []
    h, w = hw
    if kind == "encoder":
        for name, cin, cout, k, stride, act in layout:
            oh, ow = (h - 1) // stride + 1, (w - 1) // stride + 1
            flops = oh * ow * (k * k * cin + 1 + (1 if act else 0)) * cout
            if name.endswith(".conv2"):  # closes a residual unit
                flops += oh * ow * cout
            rows.append(LayerRow(name, "conv", (cout, oh, ow), k, stride, 1,
                                 k * k * cin * cout + cout, flops))
            h, w = oh, ow
    else:
        for name, cin, cout, k, up, act in layout:
            if up > 1:
                h, w = h * up, w * up
                rows.append(LayerRow(f"{name}.upsample", "upsample", (cin, h, w),
                                     0, 1, 1, 0, cin * h * w))
            flops = h * w * (k * k * cin + 1 + (1 if act else 0)) * cout
            if name.endswith(".conv2"):
                flops += h * w * cout
            rows.append(LayerRow(name, "conv", (cout, h, w), k, 1, 1,
                                 k * k * cin * cout + cout, flops))
    return rows


def compression_cost_report(channels: int, input_hw: tuple[int, int] = (224, 224),
                            component: str = "both") -> CostReport:
    """Cost of the autoencoder at the given image size; encoder, decoder or both."""
    h, w = input_hw
    if h % 8 or w % 8:
        raise ValueError("dimensions must be divisible by 8")
    rows = []
    if component in ("encoder", "both"):
        rows += _autoencoder_rows(C.encoder_layout(channels), (h, w), "encoder")
    if component in ("decoder", "both"):
        rows += _autoencoder_rows(C.decoder_layout(channels), (h // 8, w // 8), "decoder")
    if not rows:
        raise ValueError(f"unknown component {component!r}")
    return CostReport(f"compression {component} (C={channels})", f"{w}x{h}x3", rows)


def count_flops(obj, input_hw: tuple[int, int] | None = None) -> CostReport:
    """Cost report for a NetworkSpec, a built network, or a compression model."""
    if isinstance(obj, NetworkSpec):
        hw = input_hw or obj.native_input_hw
        rows = nets.iter_layer_rows(obj, hw)
        dims = f"{hw[1]}x{hw[0]}x{obj.input_channels}"
        return CostReport(obj.name, dims, rows)
    if isinstance(obj, nets.BuiltNetwork):
        return count_flops(obj.spec, input_hw)
    if isinstance(obj, C.CompressionModel):
        return compression_cost_report(obj.channels, input_hw or (224, 224))
    raise TypeError(f"cannot count FLOPs for {type(obj).__name__}")


def cost_comparison(variant: str, channels: int, input_hw: tuple[int, int] = (224, 224),
                    num_classes: int = 1000,
                    decoder_flops: float | None = None) -> dict:
    """Direct inference cost vs decode-then-classify cost for one operating point.

    The decode path uses the published full-scale decoder cost unless an
    explicit figure (e.g. the as-built desk decoder) is passed in.
    """
    if variant not in RGB_COUNTERPART:
        raise ValueError(f"{variant!r} has no RGB counterpart; choose from {sorted(RGB_COUNTERPART)}")
    rep_hw = (input_hw[0] // 8, input_hw[1] // 8)
    direct = count_flops(nets.classifier_spec(variant, num_classes, channels), rep_hw)
    rgb_name = RGB_COUNTERPART[variant]
    rgb = count_flops(nets.classifier_spec(rgb_name, num_classes), input_hw)
    as_built = compression_cost_report(channels, input_hw, "decoder").total_flops
    dec = decoder_flops if decoder_flops is not None else REFERENCE_DECODER_FLOPS
    decode_path = dec + rgb.total_flops
    return {
        "direct_variant": variant,
        "direct_flops": float(direct.total_flops),
        "rgb_variant": rgb_name,
        "rgb_flops": float(rgb.total_flops),
        "decoder_flops": float(dec),
        "decoder_flops_as_built": float(as_built),
        "decode_path_flops": float(decode_path),
        "ratio": decode_path / direct.total_flops,
    }


def comparison_table(comp: dict) -> str:
    lines = ["pipeline\tflops",
             f"direct {comp['direct_variant']}\t{comp['direct_flops']:.3e}",
             f"decode + {comp['rgb_variant']}\t{comp['decode_path_flops']:.3e}",
             f"ratio\t{comp['ratio']:.3f}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# image quality metrics

PSNR_CAP_DB = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_DYNAMIC_RANGE = 255.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MetricResult:
    name: str
    value: float
    units: str = ""
    breakdown: dict = field(default_factory=dict)


def psnr(x, xhat) -> float:
    """10*log10(255^2 / MSE) on the 0..255 pixel scale, capped at 99 dB."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"psnr shapes differ: {x.shape} vs {xhat.shape}")
    mse = ((x - xhat) ** 2).mean()
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(_DYNAMIC_RANGE ** 2 / mse), PSNR_CAP_DB)


def _to_luma(img: np.ndarray) -> np.ndarray:
    """Accept (H, W), (3, H, W) or (H, W, 3); RGB converts via ITU-R 601 weights."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"expected grayscale or RGB image, got shape {img.shape}")


def _gauss_filter(img: np.ndarray) -> np.ndarray:
    half = _SSIM_WINDOW // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    tmp = sliding_window_view(img, _SSIM_WINDOW, axis=0) @ g
    return sliding_window_view(tmp, _SSIM_WINDOW, axis=1) @ g


def _ssim_parts(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-position luminance and contrast-structure maps over valid windows."""
    c1 = (_SSIM_K1 * _DYNAMIC_RANGE) ** 2
    c2 = (_SSIM_K2 * _DYNAMIC_RANGE) ** 2
    mx = _gauss_filter(x)
    my = _gauss_filter(y)
    sxx = _gauss_filter(x * x) - mx * mx
    syy = _gauss_filter(y * y) - my * my
    sxy = _gauss_filter(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim(x, xhat) -> float:
    """Mean structural similarity: 11x11 Gaussian window, sigma 1.5, L=255."""
    xl, yl = _to_luma(x), _to_luma(xhat)
    if xl.shape != yl.shape:
        raise ValueError(f"ssim shapes differ: {xl.shape} vs {yl.shape}")
    if min(xl.shape) < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} ssim window")
    lum, cs = _ssim_parts(xl, yl)
    return float((lum * cs).mean())


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    v = img[:h, :w]
    return (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2]) / 4.0


def ms_ssim(x, xhat, weights=MSSSIM_WEIGHTS) -> float:
    """Multi-scale SSIM over dyadic scales; needs >= 176x176 for the 5 scales.

    Contrast-structure terms are taken at every scale, luminance only at the
    coarsest; negative terms clip to 0 before the weighted product.
    """
    xl, yl = _to_luma(x), _to_luma(xhat)
    if xl.shape != yl.shape:
        raise ValueError(f"ms_ssim shapes differ: {xl.shape} vs {yl.shape}")
    scales = len(weights)
    if min(xl.shape) < _SSIM_WINDOW * 2 ** (scales - 1):
        raise ValueError(
            f"image too small for {scales}-scale ms_ssim (needs >= {_SSIM_WINDOW * 2 ** (scales - 1)} px)")
    value = 1.0
    for s, w in enumerate(weights):
        lum, cs = _ssim_parts(xl, yl)
        if s == scales - 1:
            term = (lum * cs).mean()
        else:
            term = cs.mean()
            xl, yl = _halve(xl), _halve(yl)
        value *= max(float(term), 0.0) ** w
    return float(value)


# ---------------------------------------------------------------------------
# inference metrics


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Fraction of rows whose label is among the k largest logits.

    Equal logits rank by lower class index (stable sort on the negation).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds {logits.shape[1]} classes")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((order == labels[:, None]).any(axis=1).mean())


def miou(pred, true, num_classes: int, ignore_label: int | None = None):
    """Mean intersection-over-union plus the per-class breakdown.

    Classes absent from both maps are excluded from the mean (NaN in the
    breakdown); positions whose true label equals ignore_label are dropped.
    """
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth must have the same shape")
    if ignore_label is not None:
        keep = true != ignore_label
        pred, true = pred[keep], true[keep]
    conf = np.bincount(true * num_classes + pred,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    return float(np.nanmean(per_class)) if present.any() else 0.0, per_class


def write_series(path, xs, ys, header: str = "x\ty") -> None:
    """Emit an (x, y) series as tab-separated text for plotting."""
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x!r}\t{y!r}\n")
