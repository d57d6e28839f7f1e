"""Command-line surface for the whole pipeline.

Subcommands: gen-data, preprocess, gan-train, augment, pretrain, train,
eval, quantize, prune, infer.  Every invocation is a pure function of
(config, seed, input files): repeating one produces byte-identical
outputs.  Exit codes: 0 success, 1 usage or configuration error, 2 data
or file-format error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys

import numpy as np

from . import backbone as bb
from . import dataio
from . import deploy as dp
from . import gan as gn
from . import heads as hd
from . import imaging as im
from . import pretrain as pt
from . import synthdata
from . import tensor as T
from . import training as tr
from .config import RunConfig, load_config
from .errors import (ContractError, DataError, DimensionError,
                     DivergenceError, FormatError)

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weedhybrid",
        description="Hybrid CNN-ViT-GNN weed detection pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--preset", choices=("desk", "paper"),
                        help="override the backbone preset")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: argparse.ArgumentParser(
                                    parents=[common], **kw))

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--imbalance", action="store_true",
                   help="use the historical 48/23/21/8 percent class split "
                        "over 600 samples")
    p.add_argument("--size", type=int, default=32, help="square image size")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="run the imaging pipeline over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("gan-train", help="train the conditional GAN")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output checkpoint (.hwdm)")
    p.set_defaults(func=cmd_gan_train)

    p = sub.add_parser("augment", help="rebalance classes with GAN samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gan", required=True, help="trained GAN checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pretrain", help="contrastive pretraining of CNN and ViT")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output checkpoint (.hwdm)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the full multi-task model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="pretrained checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory for CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="int8-quantize a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prune-fraction", type=float, default=0.0,
                   help="magnitude-prune before quantizing")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("prune", help="magnitude-prune a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("infer", help="classify a single image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    from dataclasses import replace
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.preset is not None:
        cfg = replace(cfg, preset=args.preset)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = _run_config(args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    counts = "imbalance" if args.imbalance else args.per_class
    manifest = synthdata.generate_dataset(args.out, counts,
                                          size=(args.size, args.size),
                                          seed=cfg.seed)
    samples = dataio.read_manifest(manifest)
    print(f"wrote {len(samples)} samples under {args.out}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def _load_images(manifest_path: str) -> tuple:
    """Manifest -> (samples, list of ImageU8) without preprocessing."""
    samples = dataio.read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = [im.read_image(os.path.join(base, s.image)) for s in samples]
    return samples, images


def cmd_preprocess(args, cfg: RunConfig) -> int:
    pre_cfg = cfg.preprocess_config()
    samples, images = _load_images(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    records = []
    wrote_masks = False
    for s, img in zip(samples, images):
        processed = im.preprocess_image(img, pre_cfg)
        rel = os.path.join("images", os.path.basename(s.image))
        im.write_image(os.path.join(args.out, rel), processed)
        mask_rel = None
        if s.mask is not None:
            mask_img = im.read_image(os.path.join(base, s.mask))
            arr = mask_img.as_array()[:, :, 0]
            resized = dataio._resize_mask_nearest(arr, pre_cfg.target_size)
            mask_rel = os.path.join("masks", os.path.basename(s.mask))
            if not wrote_masks:
                os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
                wrote_masks = True
            im.write_image(os.path.join(args.out, mask_rel),
                           im.ImageU8.from_array(resized))
        records.append(dataio.Sample(image=rel, label=s.label, mask=mask_rel,
                                     growth=s.growth, synthetic=s.synthetic))
    manifest = os.path.join(args.out, "manifest.tsv")
    dataio.write_manifest(manifest, records)
    print(f"preprocessed {len(records)} images into {args.out}")
    return EXIT_OK


def cmd_gan_train(args, cfg: RunConfig) -> int:
    gan_cfg = cfg.gan_config()
    samples, images = _load_images(args.manifest)
    if not samples:
        raise DataError(f"{args.manifest}: no samples to train on")
    arrays = []
    for img in images:
        if (img.height, img.width) != gan_cfg.image_size:
            img = im.resize_bilinear(img, gan_cfg.image_size)
        arrays.append(gn.to_unit_range(img))
    stack = np.stack(arrays)
    labels = np.asarray([s.label for s in samples])
    params, history = gn.train_gan(stack, labels, gan_cfg, seed=cfg.seed)
    dp.write_checkpoint(args.out, dp.gan_entries(params), flags=dp.FLAG_GAN)
    d0, g0 = history[0]
    d1, g1 = history[-1]
    print(f"trained {gan_cfg.epochs} epochs on {len(samples)} samples")
    print(f"d_loss {d0:.4f} -> {d1:.4f}, g_loss {g0:.4f} -> {g1:.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    params = dp.load_gan(args.gan)
    samples, images = _load_images(args.manifest)
    if not samples:
        raise DataError(f"{args.manifest}: nothing to rebalance")
    counts = [0] * len(synthdata.CLASS_NAMES)
    for s in samples:
        counts[s.label] += 1
    target = max(counts)
    out_size = (images[0].height, images[0].width)
    balanced = gn.rebalance(list(zip(images, [s.label for s in samples])),
                            target, params, seed=cfg.seed, out_size=out_size)

    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    records = []
    synth_index = 0
    for position, (img, label, synthetic) in enumerate(balanced):
        if not synthetic:
            s = samples[position]  # originals stay first and in order
            for rel in (s.image, s.mask):
                if rel is None:
                    continue
                dst = os.path.join(args.out, rel)
                os.makedirs(os.path.dirname(dst), exist_ok=True)
                shutil.copyfile(os.path.join(base, rel), dst)
            records.append(s)
        else:
            name = synthdata.CLASS_NAMES[label]
            rel = os.path.join("synthetic", f"{name}_{synth_index:04d}.ppm")
            synth_index += 1
            os.makedirs(os.path.join(args.out, "synthetic"), exist_ok=True)
            im.write_image(os.path.join(args.out, rel), img)
            records.append(dataio.Sample(image=rel, label=label,
                                         synthetic=True))
    manifest = os.path.join(args.out, "manifest.tsv")
    dataio.write_manifest(manifest, records)
    made = len(balanced) - len(samples)
    print(f"balanced {len(samples)} samples to {len(balanced)} "
          f"({made} synthetic) at {target} per class")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    pre_cfg = cfg.preprocess_config()
    samples, images = _load_images(args.manifest)
    staged = [im.preprocess_image(img, pre_cfg) for img in images]
    params, history = pt.pretrain(staged, cfg.contrastive_config(),
                                  backbone_cfg=cfg.backbone_config(),
                                  seed=cfg.seed)
    dp.save_model(args.out, params, flags=dp.FLAG_PRETRAIN)
    print(f"pretrained {cfg.ssl_epochs} epochs on {len(staged)} images")
    print(f"nt-xent {history[0]:.4f} -> {history[-1]:.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data, _ = dataio.load_dataset(args.manifest, cfg.preprocess_config())
    train_cfg = cfg.train_config()
    params = None
    if args.init:
        params, init_heads, _ = dp.load_model(args.init)
        if init_heads is not None:
            raise ContractError(f"{args.init} is a full model, not a "
                                f"pretraining checkpoint")
        if params.config != train_cfg.resolved_backbone():
            raise ContractError("pretrained checkpoint architecture does not "
                                "match the configured preset")
    plan = tr.stratified_folds(data.labels, k=cfg.folds_k, seed=cfg.seed)
    train_idx, val_idx = plan.split(0)
    result = tr.train(data, train_cfg, train_idx=train_idx, val_idx=val_idx,
                      params=params)
    report = tr.evaluate(result.params, result.heads, data, indices=val_idx)
    os.makedirs(args.out, exist_ok=True)
    dp.save_model(os.path.join(args.out, "model.hwdm"), result.params,
                  result.heads)
    paths = tr.emit_plot_data(result.history, report, args.out)
    print(f"trained {train_cfg.epochs} epochs on {train_idx.size} samples "
          f"(validating on {val_idx.size})")
    print(f"best epoch {result.best_epoch}: val loss {result.best_val_loss:.4f}")
    print(f"val accuracy {report.accuracy:.4f}, mean IoU {report.mean_iou:.4f}")
    for path in paths.values():
        print(f"wrote {path}")
    print(f"checkpoint: {os.path.join(args.out, 'model.hwdm')}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    params, heads, flags = dp.load_model(args.model)
    if heads is None:
        raise ContractError(f"{args.model} has no heads; train it first")
    pre_cfg = im.PreprocessConfig(
        target_size=tuple(params.config.image_size),
        median_window=cfg.preprocess_median_window,
        clahe_tile=cfg.preprocess_clahe_tile,
        clahe_clip=cfg.preprocess_clahe_clip,
        gamma=cfg.preprocess_gamma, beta=cfg.preprocess_beta,
        normalize=cfg.preprocess_normalize)
    data, _ = dataio.load_dataset(args.manifest, pre_cfg)
    report = tr.evaluate(params, heads, data)
    paths = tr.emit_plot_data([], report, args.out)
    print(f"evaluated {len(data)} samples")
    print(f"accuracy {report.accuracy:.4f}, mean IoU {report.mean_iou:.4f}")
    print(f"macro F1 {report.macro[2]:.4f}, weighted F1 {report.weighted[2]:.4f}")
    for path in paths.values():
        print(f"wrote {path}")
    return EXIT_OK


def cmd_quantize(args, cfg: RunConfig) -> int:
    entries, flags = dp.read_checkpoint(args.model)
    if args.prune_fraction:
        weights = [(n, v) for n, v in entries.items()
                   if not n.startswith("meta.")]
        dp.prune_magnitude(weights, args.prune_fraction)
    q = dp.quantize_entries(entries)
    dp.write_checkpoint(args.out, q, flags=flags | dp.FLAG_QUANTIZED)
    n = sum(1 for k in q if not k.startswith("meta."))
    print(f"quantized {n} tensors -> {args.out}")
    return EXIT_OK


def cmd_prune(args, cfg: RunConfig) -> int:
    entries, flags = dp.read_checkpoint(args.model)
    weights = [(n, v) for n, v in entries.items() if not n.startswith("meta.")]
    masks = dp.prune_magnitude(weights, args.fraction)
    zeroed = sum(int((~m).sum()) for m in masks.values())
    total = sum(m.size for m in masks.values())
    dp.write_checkpoint(args.out, entries, flags=flags)
    print(f"pruned {zeroed}/{total} weights "
          f"({100.0 * zeroed / total:.1f}%) -> {args.out}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    entries, flags = dp.read_checkpoint(args.model)
    if "meta.backbone" not in entries:
        raise FormatError(f"{args.model} has no meta.backbone entry")
    bcfg = dp.decode_backbone_config(
        entries["meta.backbone"] if not isinstance(
            entries["meta.backbone"], dp.QuantizedTensor)
        else dp.dequantize(entries["meta.backbone"]))
    pre_cfg = im.PreprocessConfig(
        target_size=tuple(bcfg.image_size),
        median_window=cfg.preprocess_median_window,
        clahe_tile=cfg.preprocess_clahe_tile,
        clahe_clip=cfg.preprocess_clahe_clip,
        gamma=cfg.preprocess_gamma, beta=cfg.preprocess_beta,
        normalize=cfg.preprocess_normalize)
    img = im.read_image(args.image)
    if img.channels != 3:
        raise DataError(f"{args.image}: expected a color image")
    x = im.preprocess(img, pre_cfg).data.astype(np.float32)

    if flags & dp.FLAG_QUANTIZED:
        pred = dp.quantized_forward((entries, flags), x)
    else:
        params, heads, _ = dp.load_model(args.model)
        if heads is None:
            raise ContractError(f"{args.model} has no heads; train it first")
        pred = hd.predict(bb.backbone_forward(T.const(x), params), heads)

    names = synthdata.CLASS_NAMES
    print(f"class: {names[pred.label]}")
    order = np.argsort(pred.class_probs.data)[::-1]
    for k in order:
        print(f"p({names[k]}) = {float(pred.class_probs.data[k]):.4f}")
    print(f"growth: {pred.growth:.4f}")
    mask = np.argmax(pred.seg_mask.data, axis=0)
    fractions = [(names[k], float((mask == k).mean()))
                 for k in range(len(names))]
    summary = ", ".join(f"{name} {100.0 * frac:.1f}%"
                        for name, frac in fractions if frac > 0)
    print(f"mask: {summary}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
