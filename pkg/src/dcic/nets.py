"""ResNet-style classifiers, their compressed-input variants, and dilated
segmentation versions with a pyramid-pooled head.

The RGB family keeps the usual root block (7x7/2 conv, 3x3/2 max pool) and
four bottleneck stages. The compressed family drops the root and the first
stage entirely and consumes the (C, h/8, w/8) representation directly, with
the first remaining stage at stride 1. Variant names encode the block
counts; the "-d" variants trade the last two strides for dilations 2 and 4
so the output stride stays at 8 (RGB) or 1 (compressed), and replace the
classifier by four parallel dilated 3x3 convs (rates 6/12/18/24) whose
per-class outputs are summed and bilinearly upsampled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, Linear, collect_buffers, collect_params
from .tensor import Tensor

BOTTLENECK_EXPANSION = 4
ASPP_RATES = (6, 12, 18, 24)
OUTPUT_UPSAMPLE = 8

# blocks per stage; RGB variants list conv2_x..conv5_x, compressed conv3_x..conv5_x
CLASSIFIER_BLOCKS = {
    "ResNet-50": (3, 4, 6, 3),
    "ResNet-71": (3, 4, 13, 3),
    "cResNet-39": (4, 6, 3),
    "cResNet-51": (4, 10, 3),
    "cResNet-72": (4, 17, 3),
}

_STAGE_NAMES = ("conv2", "conv3", "conv4", "conv5")
_STAGE_WIDTHS = {"conv2": 64, "conv3": 128, "conv4": 256, "conv5": 512}


@dataclass(frozen=True)
class StageSpec:
    name: str
    width: int
    blocks: int
    stride: int
    dilation: int


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description from which the runnable network, the layer
    summary, and the cost model are all derived."""

    name: str
    family: str  # 'rgb' | 'compressed'
    has_root: bool
    stages: tuple[StageSpec, ...]
    head: str  # 'classifier' | 'aspp'
    num_classes: int
    input_channels: int

    @property
    def native_input_hw(self) -> tuple[int, int]:
        return (224, 224) if self.family == "rgb" else (28, 28)


def classifier_spec(variant: str, num_classes: int = 1000,
                    input_channels: int | None = None) -> NetworkSpec:
    if variant not in CLASSIFIER_BLOCKS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(CLASSIFIER_BLOCKS)}")
    counts = CLASSIFIER_BLOCKS[variant]
    rgb = not variant.startswith("c")
    names = _STAGE_NAMES if rgb else _STAGE_NAMES[1:]
    stages = []
    for i, (name, blocks) in enumerate(zip(names, counts)):
        if rgb:
            stride = 1 if name == "conv2" else 2
        else:
            stride = 1 if name == "conv3" else 2  # input is already at 28x28
        stages.append(StageSpec(name, _STAGE_WIDTHS[name], blocks, stride, 1))
    if input_channels is None:
        if not rgb:
            raise ValueError("compressed variants need input_channels (the representation C)")
        input_channels = 3
    return NetworkSpec(variant, "rgb" if rgb else "compressed", rgb, tuple(stages),
                       "classifier", num_classes, input_channels)


def segmenter_spec(variant: str, num_classes: int = 21,
                   input_channels: int | None = None) -> NetworkSpec:
    if not variant.endswith("-d"):
        raise ValueError(f"segmentation variants end in '-d', got {variant!r}")
    base = classifier_spec(variant[:-2], num_classes, input_channels)
    stages = []
    for st in base.stages:
        if st.name == "conv4":
            st = replace(st, stride=1, dilation=2)
        elif st.name == "conv5":
            st = replace(st, stride=1, dilation=4)
        stages.append(st)
    return replace(base, name=variant, stages=tuple(stages), head="aspp")


# ---------------------------------------------------------------------------
# construction


class Bottleneck:
    """1x1 reduce / 3x3 / 1x1 expand with a shortcut; stride sits on the
    first 1x1, dilation on the 3x3. Projection shortcut only when the block
    changes channels or stride."""

    def __init__(self, rng, cin: int, width: int, stride: int, dilation: int):
        cout = width * BOTTLENECK_EXPANSION
        self.conv1 = Conv2d(rng, cin, width, 1, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(rng, width, width, 3, dilation=dilation, bias=False)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(rng, width, cout, 1, bias=False)
        self.bn3 = BatchNorm2d(cout)
        if cin != cout or stride != 1:
            self.proj = Conv2d(rng, cin, cout, 1, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), train))
        h = T.relu(self.bn2(self.conv2(h), train))
        h = self.bn3(self.conv3(h), train)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x), train)
        return T.relu(T.residual_add(h, shortcut))

    def named_layers(self, prefix: str):
        yield f"{prefix}.conv1", self.conv1
        yield f"{prefix}.bn1", self.bn1
        yield f"{prefix}.conv2", self.conv2
        yield f"{prefix}.bn2", self.bn2
        yield f"{prefix}.conv3", self.conv3
        yield f"{prefix}.bn3", self.bn3
        if self.proj is not None:
            yield f"{prefix}.proj", self.proj
            yield f"{prefix}.proj_bn", self.proj_bn


class BuiltNetwork:
    """Runnable network plus the spec and parameter registry it came from."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        if spec.has_root:
            self.root_conv = Conv2d(rng, spec.input_channels, 64, 7, stride=2, bias=False)
            self.root_bn = BatchNorm2d(64)
        else:
            self.root_conv = None
            self.root_bn = None
        cin = 64 if spec.has_root else spec.input_channels
        self.stages: list[list[Bottleneck]] = []
        for st in spec.stages:
            blocks = []
            for b in range(st.blocks):
                stride = st.stride if b == 0 else 1
                blocks.append(Bottleneck(rng, cin, st.width, stride, st.dilation))
                cin = st.width * BOTTLENECK_EXPANSION
            self.stages.append(blocks)
        self.feature_channels = cin
        if spec.head == "classifier":
            self.fc = Linear(rng, cin, spec.num_classes)
            self.aspp = None
        else:
            self.fc = None
            self.aspp = [Conv2d(rng, cin, spec.num_classes, 3, dilation=r, bias=True)
                         for r in ASPP_RATES]

    def backbone(self, x: Tensor, train: bool) -> Tensor:
        if self.root_conv is not None:
            x = T.relu(self.root_bn(self.root_conv(x), train))
            x = T.max_pool(x, kernel=3, stride=2)
        for blocks in self.stages:
            for block in blocks:
                x = block(x, train)
        return x

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise T.ShapeError(
                f"{self.spec.name} expects (N, {self.spec.input_channels}, h, w), got {x.shape}")
        feat = self.backbone(x, train)
        if self.fc is not None:
            return self.fc(T.global_avg_pool(feat))
        out = self.aspp[0](feat)
        for branch in self.aspp[1:]:
            out = T.residual_add(out, branch(feat))
        h, w = out.shape[2], out.shape[3]
        return T.bilinear_upsample(out, (h * OUTPUT_UPSAMPLE, w * OUTPUT_UPSAMPLE))

    def named_layers(self):
        if self.root_conv is not None:
            yield "root.conv", self.root_conv
            yield "root.bn", self.root_bn
        for st, blocks in zip(self.spec.stages, self.stages):
            for b, block in enumerate(blocks):
                yield from block.named_layers(f"{st.name}.block{b + 1}")
        if self.fc is not None:
            yield "head.fc", self.fc
        if self.aspp is not None:
            for rate, conv in zip(ASPP_RATES, self.aspp):
                yield f"head.aspp{rate}", conv

    def named_parameters(self) -> dict[str, Tensor]:
        return collect_params(self.named_layers())

    def named_buffers(self) -> dict[str, np.ndarray]:
        return collect_buffers(self.named_layers())

    def head_param_names(self) -> set[str]:
        return {name for name in self.named_parameters() if name.startswith("head.")}


def build_classifier(variant: str, num_classes: int = 1000,
                     input_channels: int | None = None,
                     rng: np.random.Generator | None = None) -> BuiltNetwork:
    spec = classifier_spec(variant, num_classes, input_channels)
    return BuiltNetwork(spec, rng if rng is not None else np.random.default_rng(0))


def build_segmenter(variant: str, num_classes: int = 21,
                    input_channels: int | None = None,
                    rng: np.random.Generator | None = None) -> BuiltNetwork:
    spec = segmenter_spec(variant, num_classes, input_channels)
    return BuiltNetwork(spec, rng if rng is not None else np.random.default_rng(0))


def forward_classify(net: BuiltNetwork, x: Tensor, train: bool = False) -> Tensor:
    if net.spec.head != "classifier":
        raise ValueError(f"{net.spec.name} is not a classifier")
    return net.forward(x, train)


def forward_segment(net: BuiltNetwork, x: Tensor, train: bool = False) -> Tensor:
    if net.spec.head != "aspp":
        raise ValueError(f"{net.spec.name} is not a segmenter")
    return net.forward(x, train)


# ---------------------------------------------------------------------------
# analytic layer walk (shared by the summary and the cost model)


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    out_shape: tuple[int, int, int]  # (channels, h, w)
    kernel: int
    stride: int
    dilation: int
    params: int
    flops: int


def _conv_row(name, cin, cout, k, stride, dilation, hw, bias, extra_per_elem=0):
    oh = (hw[0] - 1) // stride + 1  # 'same' padding keeps ceil(h/s)
    ow = (hw[1] - 1) // stride + 1
    flops = oh * ow * k * k * cin * cout
    params = k * k * cin * cout
    if bias:
        params += cout
        flops += oh * ow * cout
    flops += extra_per_elem * oh * ow * cout
    return LayerRow(name, "conv", (cout, oh, ow), k, stride, dilation, params, flops), (oh, ow)


def iter_layer_rows(spec: NetworkSpec, input_hw: tuple[int, int] | None = None):
    """One row per conv/pool/fc layer with analytic output shape, params, FLOPs.

    Convention: a multiply-accumulate is 1 FLOP; batch norm counts 2 ops per
    element and activations/additions 1, folded into their conv's row.
    """
    hw = input_hw or spec.native_input_hw
    rows: list[LayerRow] = []
    cin = spec.input_channels
    if spec.has_root:
        # conv + bn(2) + relu(1) per output element
        row, hw = _conv_row("root.conv", cin, 64, 7, 2, 1, hw, bias=False, extra_per_elem=3)
        rows.append(LayerRow(row.name, row.kind, row.out_shape, row.kernel, row.stride,
                             row.dilation, row.params + 2 * 64, row.flops))
        oh, ow = (hw[0] - 1) // 2 + 1, (hw[1] - 1) // 2 + 1
        rows.append(LayerRow("root.pool", "maxpool", (64, oh, ow), 3, 2, 1, 0,
                             8 * oh * ow * 64))
        hw = (oh, ow)
        cin = 64
    for st in spec.stages:
        for b in range(st.blocks):
            stride = st.stride if b == 0 else 1
            width = st.width
            cout = width * BOTTLENECK_EXPANSION
            prefix = f"{st.name}.block{b + 1}"
            row, mid_hw = _conv_row(f"{prefix}.conv1", cin, width, 1, stride, 1, hw,
                                    bias=False, extra_per_elem=3)
            rows.append(LayerRow(row.name, row.kind, row.out_shape, 1, stride, 1,
                                 row.params + 2 * width, row.flops))
            row, _ = _conv_row(f"{prefix}.conv2", width, width, 3, 1, st.dilation, mid_hw,
                               bias=False, extra_per_elem=3)
            rows.append(LayerRow(row.name, row.kind, row.out_shape, 3, 1, st.dilation,
                                 row.params + 2 * width, row.flops))
            # conv3 carries bn(2) plus the residual add and final relu (2 more)
            row, _ = _conv_row(f"{prefix}.conv3", width, cout, 1, 1, 1, mid_hw,
                               bias=False, extra_per_elem=4)
            rows.append(LayerRow(row.name, row.kind, row.out_shape, 1, 1, 1,
                                 row.params + 2 * cout, row.flops))
            if cin != cout or stride != 1:
                row, _ = _conv_row(f"{prefix}.proj", cin, cout, 1, stride, 1, hw,
                                   bias=False, extra_per_elem=2)
                rows.append(LayerRow(row.name, row.kind, row.out_shape, 1, stride, 1,
                                     row.params + 2 * cout, row.flops))
            cin = cout
            hw = mid_hw
    if spec.head == "classifier":
        rows.append(LayerRow("head.pool", "avgpool", (cin, 1, 1), 0, 1, 1, 0,
                             cin * hw[0] * hw[1]))
        rows.append(LayerRow("head.fc", "fc", (spec.num_classes, 1, 1), 0, 1, 1,
                             cin * spec.num_classes + spec.num_classes,
                             cin * spec.num_classes + spec.num_classes))
    else:
        for rate in ASPP_RATES:
            row, _ = _conv_row(f"head.aspp{rate}", cin, spec.num_classes, 3, 1, rate, hw,
                               bias=True, extra_per_elem=1)  # +1 for the branch sum
            rows.append(row)
        uh, uw = hw[0] * OUTPUT_UPSAMPLE, hw[1] * OUTPUT_UPSAMPLE
        rows.append(LayerRow("head.upsample", "bilinear", (spec.num_classes, uh, uw),
                             0, 1, 1, 0, 3 * spec.num_classes * uh * uw))
    return rows


def spec_summary(spec: NetworkSpec, input_hw: tuple[int, int] | None = None) -> str:
    """Tab-separated layer table: name, output shape, kernel, stride, dilation, params."""
    lines = ["layer\toutput\tkernel\tstride\tdilation\tparams"]
    for r in iter_layer_rows(spec, input_hw):
        c, h, w = r.out_shape
        lines.append(f"{r.name}\t{c}x{h}x{w}\t{r.kernel}\t{r.stride}\t{r.dilation}\t{r.params}")
    return "\n".join(lines) + "\n"
