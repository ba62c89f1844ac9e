"""Command-line surface: synth, train, complete, eval, gradcheck.

Exit codes: 0 success, 2 validation/format error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .errors import NumericError, ValidationError
from .io import (
    load_image_png,
    load_mask_png,
    ratio_to_falsecolor,
    save_flow_raw,
    save_image_png,
    save_mask_png,
)
from .masks import binarize, random_irregular_mask, random_rect_mask
from .metrics import eval_set
from .pipeline import complete as run_complete
from .synth import apply_occlusion, generate_face, left_eye_hole_mask, make_dataset
from .trainer import TrainConfig, mix_seed, nets_from_checkpoint, parse_config, train_full

log = logging.getLogger("mirrorfill")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--debug", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mirrorfill")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic sample triplets")
    _add_common(p)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--illum-delta", type=float, default=0.3)
    p.add_argument("--shear", type=float, default=0.05)
    p.add_argument("--mask", choices=("rect", "irregular", "eye"), default="rect")

    p = sub.add_parser("train", help="run the three-stage training schedule")
    _add_common(p)

    p = sub.add_parser("complete", help="fill one occluded image")
    _add_common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--preserve-known", dest="preserve_known", action="store_true", default=True)
    p.add_argument("--no-preserve-known", dest="preserve_known", action="store_false")

    p = sub.add_parser("eval", help="metrics over a held-out seed range")
    _add_common(p)
    p.add_argument("--seeds", default="200000:200100", help="start:end seed range")
    p.add_argument("--mask-kind", choices=("rect", "irregular", "eye"), default="eye")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    _add_common(p)
    return ap


def cmd_synth(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        sample = generate_face(seed, args.size, illum_delta=args.illum_delta,
                               shear=args.shear)
        if args.mask == "eye":
            mask = left_eye_hole_mask(sample)
        elif args.mask == "irregular":
            mask = random_irregular_mask(seed, args.size, args.size, stroke_count=2)
        else:
            mask = random_rect_mask(seed, args.size, args.size, 0.05, 0.25)
        stem = args.out / f"sample_{seed:06d}"
        save_image_png(f"{stem}_image.png", sample.image)
        save_mask_png(f"{stem}_mask.png", mask)
        save_image_png(f"{stem}_occluded.png", apply_occlusion(sample, mask))
        with open(f"{stem}_landmarks.txt", "w") as f:
            for j, (x, y) in enumerate(sample.landmarks.pts.tolist()):
                f.write(f"{j} {x:.3f} {y:.3f}\n")
        if args.debug:
            save_flow_raw(f"{stem}_mirrorflow.sflw", sample.mirror_flow)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config) if args.config else TrainConfig(seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    state = train_full(cfg, out_dir=args.out)
    final = args.out / "final.symc"
    print(f"final checkpoint: {final}")
    return 0


def cmd_complete(args) -> int:
    if args.checkpoint is None:
        raise ValidationError("complete requires --checkpoint")
    nets, input_size = nets_from_checkpoint(args.checkpoint)
    i_o = load_image_png(args.image)
    m = load_mask_png(args.mask)
    if i_o.shape[1:] != (input_size, input_size) or m.shape != (input_size, input_size):
        raise ValidationError(
            f"image/mask must be {input_size}x{input_size} to match the checkpoint, "
            f"got image {tuple(i_o.shape[1:])} and mask {tuple(m.shape)}")
    out = run_complete(nets, i_o, m, preserve_known=args.preserve_known)
    args.out.mkdir(parents=True, exist_ok=True)
    save_image_png(args.out / "completed.png", out.output)
    if args.debug:
        save_image_png(args.out / "stage1.png", out.i_hat1)
        save_image_png(args.out / "recnet_raw.png", out.i_hat)
        if out.flow is not None:
            save_flow_raw(args.out / "flow.sflw", out.flow)
            save_image_png(args.out / "warped.png", out.i_w.clamp(0, 1))
            save_image_png(args.out / "ratio_falsecolor.png", ratio_to_falsecolor(out.ratio))
            save_mask_png(args.out / "mask_s1.png", binarize(out.masks.s1, 0.5))
            save_mask_png(args.out / "mask_s2.png", binarize(out.s2, 0.5))
            save_mask_png(args.out / "mask_warp.png", binarize(out.masks.m_warp, 0.5))
    print(f"completed image: {args.out / 'completed.png'}")
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise ValidationError("eval requires --checkpoint")
    try:
        start, end = (int(v) for v in args.seeds.split(":"))
    except ValueError as e:
        raise ValidationError(f"--seeds must be start:end, got {args.seeds!r}") from e
    if end <= start:
        raise ValidationError("empty seed range")
    nets, input_size = nets_from_checkpoint(args.checkpoint)
    samples = make_dataset(start, end - start, input_size)

    def mask_fn(sample, i):
        if args.mask_kind == "eye":
            return left_eye_hole_mask(sample)
        if args.mask_kind == "irregular":
            return random_irregular_mask(mix_seed(sample.seed, 0xE7), input_size,
                                         input_size, stroke_count=2)
        return random_rect_mask(mix_seed(sample.seed, 0xE7), input_size,
                                input_size, 0.05, 0.25)

    def completer(occluded, mask, sample):
        return run_complete(nets, occluded, mask).output

    report = eval_set(completer, samples, mask_fn)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(report.to_json())
    s = report.summary()
    print(f"images: {s['count']}  PSNR {s['mean_psnr']:.2f} dB  SSIM {s['mean_ssim']:.4f}  "
          f"hole PSNR {s['mean_psnr_hole']:.2f} dB  hole SSIM {s['mean_ssim_hole']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .acceptance import gradient_suite

    failures = 0
    for name, err, tol in gradient_suite(seeds=range(2)):
        ok = err < tol
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: rel err {err:.3e} (tol {tol:g})")
    if failures:
        raise NumericError(f"{failures} gradient checks failed")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth, "train": cmd_train, "complete": cmd_complete,
        "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
