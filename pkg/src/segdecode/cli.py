"""Command-line entry point: ``segdecode <command> ...``.

Exit status is 0 on success, 1 when a command fails at run time and 2 for
usage errors. Every file the commands write is replaced atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import arch
from .arch import VariantKind, count_params, receptive_field, storage_cost
from .data import (
    generate_synthetic,
    load_image_ppm,
    load_manifest,
    load_split,
    parse_config,
    prepare_images,
    save_label_pgm,
)
from .modelio import atomic_write_bytes, load_checkpoint, save_model
from .tensor import no_grad
from .train import (
    build_from_config,
    checkpoint_state,
    evaluate,
    resume_state,
    train_loop,
)

log = logging.getLogger("segdecode")

REPORT_COLUMNS = ("variant", "params", "storage_multiplier", "G", "C", "mIoU", "BF", "balancing_mode")


def _fmt(v):
    return f"{v:.6f}"


def _model_extra(cfg):
    return {"prep/lcn": np.array([int(cfg.lcn)], dtype=np.int64)}


def _load_for_inference(path):
    spec, extra = load_checkpoint(path)
    lcn = bool(extra["prep/lcn"][0]) if "prep/lcn" in extra else True
    return spec, lcn


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    spec = parse_config(args.spec).synth
    m = generate_synthetic(spec, args.out)
    counts = {s: len(m.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {sum(counts.values())} samples to {os.path.join(args.out, 'manifest.txt')} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def _train_one(cfg, manifest, history=None, resume=None, callback=None):
    train_set = load_split(manifest, "train", cfg.depth, cfg.lcn, cfg.dtype)
    val_set = load_split(manifest, "val", cfg.depth, cfg.lcn, cfg.dtype)
    if cfg.ignore_label is None:
        cfg.ignore_label = manifest.ignore_label
    resume_info = None
    if resume is not None:
        spec, extra = load_checkpoint(resume)
        resume_info = resume_state(extra)
    else:
        spec = build_from_config(cfg, manifest.num_classes)
    return train_loop(spec, train_set, val_set, cfg, history_path=history, resume=resume_info, callback=callback), \
        len(train_set)


def cmd_train(args):
    run = parse_config(args.config)
    cfg = run.train
    manifest = load_manifest(args.data)
    result, n_train = _train_one(cfg, manifest, args.history, args.resume)
    save_model(result.best_model, args.out, _model_extra(cfg))
    if args.checkpoint:
        extra = {**_model_extra(cfg), **checkpoint_state(result, result.iterations, n_train, cfg.batch_size)}
        save_model(result.final_model, args.checkpoint, extra)
    best = next((e for e in result.history if e.iteration == result.best_iteration), None)
    msg = f"trained {cfg.variant} for {result.iterations} iterations"
    if best is not None:
        msg += f"; best validation G {best.G:.4f} at iteration {best.iteration}"
    print(msg)
    return 0


def eval_report_text(rep, variant, split):
    lines = ["metric\tvalue"] + [f"{name}\t{_fmt(v)}" for name, v in rep.rows()]
    block = {
        "variant": variant,
        "split": split,
        "G": rep.G,
        "C": rep.C,
        "mIoU": rep.mIoU,
        "BF": rep.BF,
        "per_class_accuracy": [None if np.isnan(v) else v for v in rep.per_class_accuracy],
        "per_class_iou": [None if np.isnan(v) else v for v in rep.per_class_iou],
        "bf_images_scored": rep.images_scored_for_bf,
        "bf_images_skipped": rep.images_skipped_for_bf,
    }
    lines += ["", "# machine-readable", json.dumps(block, sort_keys=True)]
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    spec, lcn = _load_for_inference(args.model)
    manifest = load_manifest(args.data)
    if manifest.num_classes != spec.num_classes:
        raise ValueError(f"model predicts {spec.num_classes} classes, manifest has {manifest.num_classes}")
    data = load_split(manifest, args.split, spec.depth, lcn, spec.dtype)
    rep = evaluate(spec, data, manifest.ignore_label)
    text = eval_report_text(rep, spec.kind.value, args.split)
    atomic_write_bytes(args.report, text.encode())
    sys.stdout.write(text.split("\n\n")[0] + "\n")
    if rep.images_skipped_for_bf:
        print(f"note: {rep.images_skipped_for_bf} image(s) without ground-truth boundaries left out of BF")
    return 0


def cmd_predict(args):
    spec, lcn = _load_for_inference(args.model)
    img = load_image_ppm(args.image)
    h, w = img.shape[:2]
    if h % 2 ** spec.depth or w % 2 ** spec.depth:
        raise ValueError(f"image size {h}x{w} must be divisible by 2^{spec.depth}")
    x = prepare_images(img[None], lcn, spec.dtype)
    with no_grad():
        out = arch.forward(spec, x, mode="eval")
    labels = out.logits.data[0].argmax(axis=0).astype(np.uint8)
    save_label_pgm(args.out, labels)
    if args.prob_out:
        os.makedirs(args.prob_out, exist_ok=True)
        probs = out.probabilities.data[0]
        for c in range(spec.num_classes):
            save_label_pgm(os.path.join(args.prob_out, f"class_{c:02d}.pgm"),
                           np.clip(np.rint(probs[c] * 255), 0, 255).astype(np.uint8))
    print(f"wrote {args.out} ({h}x{w}, {spec.num_classes} classes)")
    return 0


def cmd_analyze(args):
    spec = arch.build_variant(args.variant, args.classes, depth=args.depth, channels=args.channels,
                              kernel=args.kernel)
    st = storage_cost(spec, args.height, args.width)
    rows = [
        ("variant", spec.kind.value),
        ("params", count_params(spec)),
        ("storage_multiplier", st.multiplier_label),
        ("storage_bytes_indices", st.bytes_indices),
        ("storage_bytes_encoder_maps", st.bytes_encoder_maps),
        ("first_map", f"{st.map_height}x{st.map_width}"),
        ("receptive_field", receptive_field(args.depth, args.kernel)),
    ]
    for k, v in rows:
        print(f"{k}\t{v}")
    return 0


def compare_report_text(rows):
    lines = ["\t".join(REPORT_COLUMNS)]
    for r in rows:
        lines.append("\t".join([r["variant"], str(r["params"]), r["storage_multiplier"], _fmt(r["G"]), _fmt(r["C"]),
                                _fmt(r["mIoU"]), _fmt(r["BF"]), r["balancing_mode"]]))
    return "\n".join(lines) + "\n"


def compare_variants(run, manifest, variants=None, modes=("median_frequency", "natural_frequency")):
    """Train every requested variant under one protocol; returns report rows."""

    variants = [VariantKind.parse(v) for v in (variants or run.variants or list(VariantKind))]
    test = None
    rows = []
    for mode in modes:
        for kind in variants:
            cfg = dataclasses.replace(run.train, variant=kind.value, balancing=mode)
            if test is None:
                test = load_split(manifest, "test", cfg.depth, cfg.lcn, cfg.dtype)
            log.info("training %s with %s balancing", kind.value, mode)
            result, _ = _train_one(cfg, manifest)
            rep = evaluate(result.best_model, test, manifest.ignore_label)
            spec = result.best_model
            rows.append(dict(
                variant=kind.value,
                params=count_params(spec),
                storage_multiplier=storage_cost(spec, *test.images.shape[2:]).multiplier_label,
                G=rep.G, C=rep.C, mIoU=rep.mIoU, BF=rep.BF,
                balancing_mode=mode,
            ))
    return rows


def cmd_compare(args):
    run = parse_config(args.config)
    manifest = load_manifest(args.data)
    modes = tuple(args.balancing) if args.balancing else ("median_frequency", "natural_frequency")
    rows = compare_variants(run, manifest, args.variant, modes)
    text = compare_report_text(rows)
    atomic_write_bytes(args.report, text.encode())
    sys.stdout.write(text)
    return 0


# -- argument parsing ------------------------------------------------------------


def _variant_name(text):
    try:
        return VariantKind.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = argparse.ArgumentParser(prog="segdecode", description="Encoder-decoder segmentation engine.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", help="write a synthetic shape dataset")
    g.add_argument("--spec", required=True, help="key = value file with dataset settings")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--out", required=True, help="where to write the best-validation model")
    t.add_argument("--history", help="tab-separated validation log")
    t.add_argument("--checkpoint", help="also write the final state with optimizer buffers")
    t.add_argument("--resume", help="continue from a --checkpoint file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model on one split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="label one PPM image")
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True, help="output PGM of class ids")
    pr.add_argument("--prob-out", help="directory for one probability PGM per class")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("analyze", help="parameter, storage and receptive-field accounting")
    a.add_argument("--variant", required=True, type=_variant_name)
    a.add_argument("--classes", required=True, type=int)
    a.add_argument("--height", type=int, default=360)
    a.add_argument("--width", type=int, default=480)
    a.add_argument("--depth", type=int, default=4)
    a.add_argument("--channels", type=int, default=64)
    a.add_argument("--kernel", type=int, default=7)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare-variants", help="train all variants and write a comparison table")
    c.add_argument("--config", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--report", required=True)
    c.add_argument("--variant", action="append", type=_variant_name, help="restrict to this variant (repeatable)")
    c.add_argument("--balancing", action="append", choices=("median_frequency", "natural_frequency"),
                   help="restrict to this balancing mode (repeatable)")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"segdecode {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
