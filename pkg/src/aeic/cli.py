"""Command-line entry point: ``python3 -m aeic <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import bench_latency, load_corpus, macs_per_pixel, rd_curve, variance_report
from .bitstream import Bitstream, decode_image, encode_image
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PatchDataset, make_textures
from .distillation import DistillConfig, distill_train
from .imageio import ppm_read, ppm_write
from .model import build_model
from .training import TrainConfig, train_loop
from .transforms import dump_config, load_config, toy_config


def _config(spec: str | None, ratio: int, checkpoint: str | None = None):
    if spec is None and checkpoint and Path(checkpoint + ".cfg").exists():
        spec = checkpoint + ".cfg"
    spec = spec or "ME"
    if spec in ("ME", "SE"):
        return toy_config(spec, ratio)
    return load_config(spec)


def _model(args):
    cfg = _config(args.config, args.ratio, args.checkpoint)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    model = build_model(cfg)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    return model


def _save(model, path: str) -> None:
    save_checkpoint(model, path)
    Path(path + ".cfg").write_text(dump_config(model.config))


def _dataset(args):
    if args.data:
        return PatchDataset(np.stack(load_corpus(args.data)))
    return PatchDataset.procedural(args.pool, args.pool_size, args.data_seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lambda_S1=args.lambda_s1, lambda_S2=args.lambda_, stage1_iters=args.iters,
                       stage2_iters=args.stage2_iters, gamma1=args.gamma1, gamma2=args.gamma2,
                       lr=((0, args.lr),), batch_size=args.batch_size, seed=args.seed or 0)


def cmd_train(args) -> int:
    cfg = _config(args.config, args.ratio).with_(seed=args.seed or 0)
    model = build_model(cfg)
    tcfg = _train_config(args)
    _, log = train_loop(model, _dataset(args), tcfg)
    _save(model, args.out)
    if args.log:
        log.to_csv(args.log)
    last = log.rows[-1]
    print(f"trained {tcfg.total_iters} steps; final bpp {last.bpp:.5f} distortion {last.distortion:.5f}")
    return 0


def cmd_distill(args) -> int:
    teacher_cfg = _config(args.teacher_config, args.ratio, args.teacher)
    teacher = load_checkpoint(build_model(teacher_cfg), args.teacher)
    student_cfg = _config(args.config or "SE", args.ratio).with_(seed=args.seed or 0)
    dcfg = DistillConfig(_train_config(args), use_enc=not args.no_enc, use_dec=not args.no_dec)
    student, _, log = distill_train(teacher, student_cfg, _dataset(args), dcfg)
    _save(student, args.out)
    if args.log:
        log.to_csv(args.log)
    print(f"distilled {dcfg.train.total_iters} steps into {args.out}")
    return 0


def cmd_encode(args) -> int:
    model = _model(args)
    bs = encode_image(ppm_read(args.input), model, args.lambda_id)
    data = bs.to_bytes()
    Path(args.out).write_bytes(data)
    print(f"{len(data)} bytes, {bs.bpp():.5f} bpp")
    return 0


def cmd_decode(args) -> int:
    model = _model(args)
    ppm_write(args.out, decode_image(Bitstream.from_bytes(Path(args.input).read_bytes()), model))
    return 0


def _model_specs(specs, ratio, with_id: bool):
    """Parse ``[id:]lambda:config:checkpoint`` entries."""
    out = []
    for spec in specs:
        parts = spec.split(":")
        need = 4 if with_id else 3
        if len(parts) != need:
            raise SystemExit(f"bad --model {spec!r}; expected {'id:' if with_id else ''}lambda:config:checkpoint")
        if with_id:
            model_id, parts = parts[0], parts[1:]
        lam, cfg, ckpt = float(parts[0]), parts[1], parts[2]
        model = load_checkpoint(build_model(_config(cfg or None, ratio, ckpt)), ckpt)
        out.append((model_id, lam, model) if with_id else (lam, model))
    return out


def cmd_rd_curve(args) -> int:
    points = rd_curve(_model_specs(args.model, args.ratio, True), args.images, args.out)
    for p in points:
        print(f"{p.model_id} lambda={p.lam:g} bpp={p.bpp:.5f} psnr={p.psnr:.3f}")
    return 0


def cmd_variance_report(args) -> int:
    rows = variance_report(_model_specs(args.model, args.ratio, False), args.images, args.out)
    for lam, var, bpp in rows:
        print(f"lambda={lam:g} mean_var={var:.6g} bpp={bpp:.5f}")
    return 0


def cmd_macs(args) -> int:
    cfg = _config(args.config, args.ratio)
    table = macs_per_pixel(build_model(cfg), args.height, args.width)
    for k, v in table.items():
        print(f"{k},{v:.3f}")
    return 0


def cmd_bench(args) -> int:
    print(json.dumps(bench_latency(_model(args), args.height, args.width, args.reps)))
    return 0


def cmd_gen_dataset(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(make_textures(args.count, args.size, args.seed or 0)):
        ppm_write(out / f"tex_{i:04d}.ppm", img)
    print(f"wrote {args.count} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aeic", description="Toy asymmetric learned image codec.")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, checkpoint=True):
        sp.add_argument("--config", help="ME, SE or a key=value config file")
        sp.add_argument("--ratio", type=int, default=32, help="spatial ratio for the ME/SE presets")
        sp.add_argument("--seed", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", help="parameter file; its .cfg sidecar supplies the config")

    def train_flags(sp):
        sp.add_argument("--lambda", dest="lambda_", type=float, default=16.0, help="stage-2 lambda")
        sp.add_argument("--lambda-s1", type=float, default=1.0)
        sp.add_argument("--iters", type=int, default=3000, help="stage-1 iterations")
        sp.add_argument("--stage2-iters", type=int, default=1000)
        sp.add_argument("--lr", type=float, default=0.05)
        sp.add_argument("--batch-size", type=int, default=8)
        sp.add_argument("--gamma1", type=float, default=32.0)
        sp.add_argument("--gamma2", type=float, default=2.0)
        sp.add_argument("--data", help="directory of .ppm training images (default: procedural textures)")
        sp.add_argument("--pool", type=int, default=256, help="procedural image count")
        sp.add_argument("--pool-size", type=int, default=96)
        sp.add_argument("--data-seed", type=int, default=1)
        sp.add_argument("--out", required=True)
        sp.add_argument("--log", help="write the training log CSV here")

    sp = sub.add_parser("train", help="two-stage rate-distortion training")
    model_flags(sp, checkpoint=False)
    train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="train a shallow student with teacher feature distillation")
    model_flags(sp, checkpoint=False)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--teacher-config")
    sp.add_argument("--no-enc", action="store_true", help="disable encoder-side distillation")
    sp.add_argument("--no-dec", action="store_true", help="disable decoder-side distillation")
    train_flags(sp)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("encode", help="compress a P6 .ppm image")
    model_flags(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda-id", type=int, default=0)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="decompress to a P6 .ppm image")
    model_flags(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("rd-curve", help="bpp / PSNR points as CSV and SVG")
    sp.add_argument("--model", action="append", required=True, help="id:lambda:config:checkpoint (repeatable)")
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.add_argument("--ratio", type=int, default=32)
    sp.set_defaults(func=cmd_rd_curve)

    sp = sub.add_parser("variance-report", help="mean latent variance against bpp")
    sp.add_argument("--model", action="append", required=True, help="lambda:config:checkpoint (repeatable)")
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ratio", type=int, default=32)
    sp.set_defaults(func=cmd_variance_report)

    sp = sub.add_parser("macs", help="analytic MACs per pixel by component")
    sp.add_argument("--config")
    sp.add_argument("--ratio", type=int, default=32)
    sp.add_argument("--height", type=int, default=256)
    sp.add_argument("--width", type=int, default=256)
    sp.set_defaults(func=cmd_macs)

    sp = sub.add_parser("bench", help="median encode/decode latency as JSON")
    model_flags(sp)
    sp.add_argument("--height", type=int, default=256)
    sp.add_argument("--width", type=int, default=256)
    sp.add_argument("--reps", type=int, default=20)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gen-dataset", help="write procedural textures as .ppm files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_dataset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"aeic {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
