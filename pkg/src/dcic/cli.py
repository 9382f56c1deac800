"""Command-line surface tying the modules into reproducible experiments.

Every experiment takes --config <file> plus --set key=value overrides and
derives all randomness from the single configured seed. Worker threads are
capped by DCIC_THREADS (default 1) for run-to-run determinism; this must
happen before numpy loads, hence the env setup at the very top.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("DCIC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import statistics
import sys
import time

import numpy as np

from . import analysis, bitstream, checkpoint, data, nets, training
from .compression import CompressionModel, to_pixels, to_signal
from .config import (apply_overrides, get_bool, get_float, get_int, get_str, load_config,
                     substream)
from .tensor import Tensor

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); exit code 1 is ours
        raise _UsageError(message)


def _load_cfg(args) -> dict[str, str]:
    cfg = load_config(args.config) if args.config else {}
    return apply_overrides(cfg, args.set or [])


def _parse_input_dims(text: str) -> tuple[int, int, int]:
    try:
        w, h, c = (int(p) for p in text.lower().split("x"))
        return w, h, c
    except ValueError as exc:
        raise _UsageError(f"--input must look like 224x224x3, got {text!r}") from exc


def _compressor_cfg(cfg: dict) -> training.CompressorTrainConfig:
    return training.CompressorTrainConfig(
        channels=get_int(cfg, "model.channels", 8),
        num_centers=get_int(cfg, "model.centers", 6),
        beta=get_float(cfg, "model.beta", 600.0),
        target_entropy=get_float(cfg, "model.target_entropy", 0.8),
        sigma=get_float(cfg, "model.sigma", 1.0),
        lr=get_float(cfg, "train.lr", 1e-3),
        batch_size=get_int(cfg, "train.batch_size", 8),
        iterations=get_int(cfg, "train.iterations", 600),
        image_size=get_int(cfg, "data.image_size", 64),
        train_images=get_int(cfg, "data.train_images", 512),
        probe_images=get_int(cfg, "data.probe_images", 6),
        probe_size=get_int(cfg, "data.probe_size", 256),
        seed=get_int(cfg, "seed", 0),
        log_interval=get_int(cfg, "train.log_interval", 50),
    )


def _classifier_cfg(cfg: dict) -> training.ClassifierTrainConfig:
    crop = get_int(cfg, "train.crop", 0)
    return training.ClassifierTrainConfig(
        variant=get_str(cfg, "train.variant", "cResNet-39"),
        source=get_str(cfg, "train.source", "representation"),
        num_classes=get_int(cfg, "data.num_classes", data.NUM_CLASSES),
        epochs=get_int(cfg, "train.epochs", 6),
        batch_size=get_int(cfg, "train.batch_size", 16),
        lr=get_float(cfg, "train.lr", 0.025),
        momentum=get_float(cfg, "train.momentum", 0.9),
        weight_decay=get_float(cfg, "train.weight_decay", 1e-4),
        image_size=get_int(cfg, "data.image_size", 64),
        crop=crop or None,
        mirror=get_bool(cfg, "train.mirror", True),
        train_images=get_int(cfg, "data.train_images", 768),
        eval_images=get_int(cfg, "data.eval_images", 256),
        seed=get_int(cfg, "seed", 0),
    )


def _segmenter_cfg(cfg: dict) -> training.SegmenterTrainConfig:
    return training.SegmenterTrainConfig(
        variant=get_str(cfg, "train.variant", "cResNet-39-d"),
        source=get_str(cfg, "train.source", "representation"),
        num_classes=get_int(cfg, "data.num_seg_classes", data.NUM_SEG_CLASSES),
        iterations=get_int(cfg, "train.iterations", 200),
        batch_size=get_int(cfg, "train.batch_size", 6),
        lr=get_float(cfg, "train.lr", 1e-3),
        head_lr_multiplier=get_float(cfg, "train.head_lr_multiplier", 10.0),
        momentum=get_float(cfg, "train.momentum", 0.9),
        weight_decay=get_float(cfg, "train.weight_decay", 5e-4),
        poly_power=get_float(cfg, "train.poly_power", 0.9),
        image_size=get_int(cfg, "data.image_size", 64),
        mirror=get_bool(cfg, "train.mirror", True),
        train_images=get_int(cfg, "data.train_images", 600),
        eval_images=get_int(cfg, "data.eval_images", 128),
        seed=get_int(cfg, "seed", 0),
        log_interval=get_int(cfg, "train.log_interval", 50),
    )


def _joint_cfg(cfg: dict) -> training.JointTrainConfig:
    return training.JointTrainConfig(
        gamma=get_float(cfg, "train.gamma", 0.001),
        epochs=get_int(cfg, "train.epochs", 9),
        batch_size=get_int(cfg, "train.batch_size", 10),
        lr=get_float(cfg, "train.lr", 0.0025),
        momentum=get_float(cfg, "train.momentum", 0.9),
        lr_decay_epochs=get_int(cfg, "train.lr_decay_epochs", 3),
        image_size=get_int(cfg, "data.image_size", 64),
        train_images=get_int(cfg, "data.train_images", 240),
        eval_images=get_int(cfg, "data.eval_images", 128),
        probe_images=get_int(cfg, "data.probe_images", 4),
        probe_size=get_int(cfg, "data.probe_size", 192),
        seed=get_int(cfg, "seed", 0),
        mirror=get_bool(cfg, "train.mirror", True),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_compressor(args) -> int:
    cfg = _compressor_cfg(_load_cfg(args))
    model, trace = training.train_compressor(cfg, quiet=args.quiet)
    checkpoint.save_compressor(args.out, model, seed=cfg.seed)
    if args.trace:
        training.write_trace(args.trace, trace)
    last = trace[-1]
    print(f"final mse={last['mse']!r} entropy={last['entropy']!r} bpp={last['bpp']!r}")
    print(f"saved {args.out}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _classifier_cfg(_load_cfg(args))
    compressor = checkpoint.load_compressor(args.compressor) if args.compressor else None
    net, mean, trace = training.train_classifier(cfg, compressor, quiet=args.quiet)
    checkpoint.save_network(args.out, net, "classifier", input_mean=mean, seed=cfg.seed,
                            extra_hyper={"source": cfg.source})
    if args.trace:
        training.write_trace(args.trace, trace)
    print(f"final top1={trace[-1]['top1']!r} top5={trace[-1]['top5']!r}")
    print(f"saved {args.out}")
    return 0


def cmd_train_segmenter(args) -> int:
    cfg = _segmenter_cfg(_load_cfg(args))
    compressor = checkpoint.load_compressor(args.compressor) if args.compressor else None
    pretrained = None
    if args.pretrained:
        pretrained = checkpoint.load_checkpoint(args.pretrained, expect_kind="classifier").arrays
    net, mean, trace = training.train_segmenter(cfg, compressor, pretrained, quiet=args.quiet)
    checkpoint.save_network(args.out, net, "segmenter", input_mean=mean, seed=cfg.seed,
                            extra_hyper={"source": cfg.source})
    if args.trace:
        training.write_trace(args.trace, trace)
    print(f"final miou={trace[-1]['miou']!r}")
    print(f"saved {args.out}")
    return 0


def cmd_train_joint(args) -> int:
    cfg = _joint_cfg(_load_cfg(args))
    model = checkpoint.load_compressor(args.compressor)
    net, mean, _ = checkpoint.load_network(args.classifier, expect_kind="classifier")
    if mean is None:
        raise ValueError("classifier checkpoint lacks the stored input mean")
    result = training.train_joint(cfg, model, net, mean, mode=args.mode, quiet=args.quiet)
    checkpoint.save_compressor(args.out_compressor, model, seed=cfg.seed)
    checkpoint.save_network(args.out_classifier, net, "classifier", input_mean=mean,
                            seed=cfg.seed)
    if args.trace:
        training.write_trace(args.trace, result.trace)
    before, after = result.probe_before, result.probe_after
    for name in ("psnr", "ssim", "ms_ssim", "accuracy"):
        print(f"{name}: before={before[name]!r} after={after[name]!r}")
    return 0


def cmd_encode(args) -> int:
    model = checkpoint.load_compressor(args.model)
    img = data.read_ppm(args.infile)
    x = Tensor(to_signal(img)[None])
    symbols, _ = model.compress(x)
    stream = bitstream.serialize(symbols[0], model.centers.data,
                                 (img.shape[2], img.shape[1]))
    with open(args.out, "wb") as fh:
        fh.write(stream)
    print(f"{args.out}: {len(stream)} bytes, "
          f"{bitstream.measured_bpp(stream, img.shape[2], img.shape[1]):.4f} bpp")
    return 0


def cmd_decode(args) -> int:
    model = checkpoint.load_compressor(args.model)
    with open(args.infile, "rb") as fh:
        stream = fh.read()
    symbols, centers, (w, h) = bitstream.deserialize(stream)
    values = centers[symbols].astype(np.float32)
    recon = model.decode(Tensor(values[None])).data[0]
    data.write_ppm(args.out, to_pixels(recon))
    print(f"{args.out}: {w}x{h}")
    return 0


def cmd_eval_class(args) -> int:
    cfg = _load_cfg(args)
    net, mean, ckpt = checkpoint.load_network(args.model, expect_kind="classifier")
    compressor = checkpoint.load_compressor(args.compressor) if args.compressor else None
    source = get_str(cfg, "train.source", ckpt.hyper.get("source", "representation"))
    n = get_int(cfg, "data.eval_images", 256)
    size = get_int(cfg, "data.image_size", 64)
    seed = get_int(cfg, "seed", 0)
    offset = get_int(cfg, "data.eval_offset", get_int(cfg, "data.train_images", 768))
    ds = data.generate_synthetic(seed, offset + n, size)
    inputs = training.classifier_inputs(source, compressor, ds.images[offset:])
    scale = 255.0 if source != "representation" else 1.0
    inputs = (inputs - np.asarray(mean).reshape(1, -1, 1, 1)) / scale
    logits = training.batched_logits(net, inputs)
    labels = ds.labels[offset:]
    print(f"top1={analysis.topk_accuracy(logits, labels, 1)!r}")
    print(f"top5={analysis.topk_accuracy(logits, labels, 5)!r}")
    return 0


def cmd_eval_seg(args) -> int:
    cfg = _load_cfg(args)
    net, mean, ckpt = checkpoint.load_network(args.model, expect_kind="segmenter")
    compressor = checkpoint.load_compressor(args.compressor) if args.compressor else None
    source = get_str(cfg, "train.source", ckpt.hyper.get("source", "representation"))
    n = get_int(cfg, "data.eval_images", 128)
    size = get_int(cfg, "data.image_size", 64)
    seed = get_int(cfg, "seed", 0)
    offset = get_int(cfg, "data.eval_offset", get_int(cfg, "data.train_images", 600))
    ds = data.generate_synthetic(seed, offset + n, size)
    inputs = training.classifier_inputs(source, compressor, ds.images[offset:])
    scale = 255.0 if source != "representation" else 1.0
    inputs = (inputs - np.asarray(mean).reshape(1, -1, 1, 1)) / scale
    miou, per_class = training.evaluate_segmenter(net, inputs, ds.masks[offset:],
                                                  net.spec.num_classes, 255)
    print(f"miou={miou!r}")
    print("per_class=" + ",".join(repr(float(v)) for v in per_class))
    return 0


def cmd_flops(args) -> int:
    if bool(args.variant) == bool(args.model):
        raise _UsageError("flops needs exactly one of --variant or --model")
    if args.variant:
        w, h, c = _parse_input_dims(args.input) if args.input else (None, None, None)
        if args.variant.endswith("-d"):
            spec = nets.segmenter_spec(args.variant, args.classes or 21, c)
        else:
            spec = nets.classifier_spec(args.variant, args.classes or 1000, c)
        report = analysis.count_flops(spec, (h, w) if args.input else None)
    else:
        model = checkpoint.load_compressor(args.model)
        w, h, _ = _parse_input_dims(args.input) if args.input else (224, 224, 0)
        report = analysis.compression_cost_report(model.channels, (h, w),
                                                  args.component or "both")
    if args.full:
        print(report.to_tsv(), end="")
    print(f"total_flops={report.total_flops}")
    print(f"total_params={report.total_params}")
    return 0


def cmd_metrics(args) -> int:
    ref = data.read_ppm(args.ref)
    test = data.read_ppm(args.test)
    print(f"psnr={analysis.psnr(ref, test)!r}")
    print(f"ssim={analysis.ssim(ref, test)!r}")
    try:
        print(f"ms_ssim={analysis.ms_ssim(ref, test)!r}")
    except ValueError as exc:
        print(f"ms_ssim=unavailable ({exc})")
    return 0


def cmd_bench(args) -> int:
    if args.reps < 3:
        raise _UsageError("--reps must be at least 3 (the first run is a warm-up)")
    w, h, c = _parse_input_dims(args.input)
    if args.variant not in analysis.RGB_COUNTERPART:
        raise _UsageError(f"--variant must be one of {sorted(analysis.RGB_COUNTERPART)}")
    rng = np.random.default_rng(0)
    direct_net = nets.build_classifier(args.variant, 1000, c, rng)
    rgb_name = analysis.RGB_COUNTERPART[args.variant]
    rgb_net = nets.build_classifier(rgb_name, 1000, 3, rng)
    model = CompressionModel(rng, c)
    rep = Tensor(rng.normal(size=(1, c, h // 8, w // 8)).astype(np.float32))
    comp = analysis.cost_comparison(args.variant, c, (h, w))

    def run(fn, label: str, flops: float):
        times = []
        for i in range(args.reps):
            t0 = time.perf_counter()
            fn()
            if i > 0:  # first repetition is warm-up
                times.append(time.perf_counter() - t0)
        mean = statistics.mean(times)
        med = statistics.median(times)
        sd = statistics.stdev(times) if len(times) > 1 else 0.0
        print(f"{label}\tmean={mean:.4f}s\tmedian={med:.4f}s\tstddev={sd:.4f}s\t"
              f"flops={flops:.3e}\tsamples={len(times)}")

    run(lambda: direct_net.forward(rep), f"direct {args.variant}", comp["direct_flops"])

    def decode_path():
        img = model.decode(rep)
        rgb_net.forward(img)

    run(decode_path, f"decode + {rgb_name}",
        comp["decoder_flops_as_built"] + comp["rgb_flops"])
    print(f"flop ratio (decode path / direct, published decoder): {comp['ratio']:.3f}")
    return 0


def cmd_gen_data(args) -> int:
    ds = data.generate_synthetic(args.seed, args.n, args.size)
    manifest = data.write_dataset(ds, args.out, with_masks=not args.no_masks)
    print(f"wrote {args.n} images to {args.out} (manifest {manifest})")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="dcic", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train-compressor", help="train the compression autoencoder")
    _add_common(p)
    p.add_argument("--out", default="compressor.dcic")
    p.add_argument("--trace")
    p.set_defaults(fn=cmd_train_compressor)

    p = sub.add_parser("train-classifier", help="train a classifier on a frozen compressor")
    _add_common(p)
    p.add_argument("--compressor", help="compressor checkpoint (.dcic)")
    p.add_argument("--out", default="classifier.dcic")
    p.add_argument("--trace")
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("train-segmenter", help="finetune a dilated variant for segmentation")
    _add_common(p)
    p.add_argument("--compressor")
    p.add_argument("--pretrained", help="classifier checkpoint to initialize the backbone")
    p.add_argument("--out", default="segmenter.dcic")
    p.add_argument("--trace")
    p.set_defaults(fn=cmd_train_segmenter)

    p = sub.add_parser("train-joint", help="joint compression+classification finetune")
    _add_common(p)
    p.add_argument("--compressor", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--mode", choices=("joint", "compression_only"), default="joint")
    p.add_argument("--out-compressor", default="compressor_joint.dcic")
    p.add_argument("--out-classifier", default="classifier_joint.dcic")
    p.add_argument("--trace")
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("encode", help="compress a PPM image to a .dcr stream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a PPM image from a .dcr stream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval-class", help="classification accuracy on held-out data")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--compressor")
    p.set_defaults(fn=cmd_eval_class)

    p = sub.add_parser("eval-seg", help="segmentation mIoU on held-out data")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--compressor")
    p.set_defaults(fn=cmd_eval_seg)

    p = sub.add_parser("flops", help="analytic cost report")
    p.add_argument("--variant", help="network variant name")
    p.add_argument("--model", help="compressor checkpoint for autoencoder costs")
    p.add_argument("--input", help="input dims as WxHxC")
    p.add_argument("--classes", type=int)
    p.add_argument("--component", choices=("encoder", "decoder", "both"))
    p.add_argument("--full", action="store_true", help="print the per-layer table")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("metrics", help="PSNR/SSIM/MS-SSIM between two PPM images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("bench", help="wall-clock of direct vs decode+RGB inference")
    p.add_argument("--variant", default="cResNet-51")
    p.add_argument("--input", default="224x224x8", help="image dims and C as WxHxC")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as PPM + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--no-masks", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage()
            return USAGE_ERROR
        return args.fn(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
