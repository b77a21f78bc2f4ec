"""Command-line entry points: train-gasp, sample, hide, reveal, bench, metrics."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import payload as framing
from .fnns import DEFAULT_SEED_POOL, DecoderSpec, HideConfig, ber, hide, reveal
from .fungen import GaspConfig, TrainingAborted, generate_weights, sample_latent, train_gasp
from .imageio import ImageFormatError, read_image, read_pixels, write_pixels
from .inr import dequantize, eval_function, make_grid, quantize
from .metrics import quality
from .ndtensor import Rng

log = logging.getLogger("inrsteg")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def parse_size(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"malformed size {text!r}, expected HxW", EXIT_USAGE) from None
    if h < 1 or w < 1:
        raise CliError(f"size must be positive, got {text!r}", EXIT_USAGE)
    return h, w


def read_seed_pool(path) -> tuple:
    seeds = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            seeds.append(int(line, 0))
    if len(seeds) != 10:
        raise CliError(f"seed pool file must list 10 seeds, found {len(seeds)}", EXIT_USAGE)
    return tuple(seeds)


def load_dataset(directory) -> np.ndarray:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"{d} is not a directory", EXIT_USAGE)
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CliError(f"no PNG/PGM/PPM images in {d}", EXIT_USAGE)
    images = []
    for p in files:
        try:
            images.append(read_image(p))
        except (ImageFormatError, OSError) as exc:
            raise CliError(f"cannot read {p}: {exc}") from exc
        if images[-1].shape != images[0].shape:
            raise CliError(f"{p.name} is {images[-1].shape}, expected {images[0].shape}")
    return np.stack(images)


def _load_ckpt(path) -> ckpt_io.Checkpoint:
    try:
        return ckpt_io.load(path)
    except (ckpt_io.CheckpointError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def render_cover(ck: ckpt_io.Checkpoint, seed: int, height: int, width: int) -> np.ndarray:
    z = sample_latent(seed, ck.hyper["w1"].shape[0])
    return eval_function(generate_weights(ck.hyper, z, ck.arch), make_grid(height, width))


# -- commands ----------------------------------------------------------------

def cmd_train_gasp(args) -> int:
    images = load_dataset(args.data)
    cfg = GaspConfig(r1=args.l, batch=args.batch, steps=args.steps, points=args.points)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")

    def snapshot(state):
        ckpt_io.save(out, ckpt_io.from_state(state, args.seed))

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "d_loss", "g_loss", "r1"])

        def on_step(row):
            writer.writerow([row["step"], repr(row["d_loss"]), repr(row["g_loss"]), repr(row["r1"])])
            if row["step"] % 100 == 0:
                log.info("step %d d_loss %.4f g_loss %.4f r1 %.4g",
                         row["step"], row["d_loss"], row["g_loss"], row["r1"])

        try:
            state, _ = train_gasp(images, cfg, args.seed, on_step=on_step,
                                  checkpoint_every=args.checkpoint_every,
                                  on_checkpoint=snapshot)
        except TrainingAborted as exc:
            raise CliError(f"training aborted at step {exc.step}: {exc}") from exc
    snapshot(state)
    print(f"wrote {out} (crc32 {ckpt_io.crc_of(out):08x}) and {log_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    h, w = parse_size(args.size)
    ck = _load_ckpt(args.ckpt)
    write_pixels(args.out, quantize(render_cover(ck, args.seed, h, w)))
    return EXIT_OK


def _json_float(v: float):
    return v if math.isfinite(v) else None


def cmd_hide(args) -> int:
    if not 1 <= args.bpp <= 4:
        raise CliError("--bpp must be between 1 and 4", EXIT_USAGE)
    t0 = time.perf_counter()
    if args.cover:
        try:
            cover = read_image(args.cover)
        except (ImageFormatError, OSError) as exc:
            raise CliError(f"cannot read cover {args.cover}: {exc}") from exc
        t_gen = 0.0
    else:
        if not args.ckpt:
            raise CliError("give --cover or --ckpt to sample a cover", EXIT_USAGE)
        h, w = parse_size(args.size)
        cover = dequantize(quantize(render_cover(_load_ckpt(args.ckpt), args.cover_seed, h, w)))
        t_gen = time.perf_counter() - t0
    h, w, _ = cover.shape

    if args.payload:
        data = Path(args.payload).read_bytes()
    else:
        n = framing.max_payload_bytes(h, w, args.bpp)
        data = framing.raw_bytes(Rng(args.message_seed).bits(8 * n))
    try:
        bits = framing.encode(data, h, w, args.bpp, pad_seed=args.pad_seed)
    except framing.CapacityError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc

    pool = read_seed_pool(args.seed_pool) if args.seed_pool else DEFAULT_SEED_POOL
    cfg = HideConfig(epsilon=args.epsilon, rounds=args.rounds, seed_pool=pool,
                     single=not args.double)
    res = hide(cover, bits, cfg)
    out = Path(args.out)
    write_pixels(out, res.pixels)
    spec_path = Path(args.spec_out) if args.spec_out else out.with_suffix(".spec")
    spec_path.write_text(res.spec.to_text())
    report = {
        "ber": res.ber,
        "psnr": _json_float(res.psnr),
        "ssim": _json_float(res.ssim),
        "seed_used": res.seed_used,
        "rounds": res.rounds,
        "early_stopped": res.early_stopped,
        "below_floor": res.below_floor,
        "t_gen_s": t_gen,
        "t_hide_s": res.hide_seconds,
    }
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_reveal(args) -> int:
    try:
        spec = DecoderSpec.from_text(Path(args.decoder_spec).read_text())
    except (ValueError, TypeError, OSError) as exc:
        raise CliError(f"bad decoder spec {args.decoder_spec}: {exc}", EXIT_USAGE) from exc
    image = dequantize(read_pixels(args.stego))
    if image.shape != (spec.height, spec.width, spec.in_channels):
        raise CliError(f"stego image is {image.shape}, decoder spec expects "
                       f"{(spec.height, spec.width, spec.in_channels)}", EXIT_USAGE)
    bits = reveal(spec, image)
    try:
        data = framing.decode(bits)
    except framing.ChecksumError as exc:
        Path(args.out).write_bytes(framing.raw_bytes(bits))
        print(f"checksum failure: {exc}; raw bits written to {args.out}", file=sys.stderr)
        return EXIT_FAIL
    Path(args.out).write_bytes(data)
    return EXIT_OK


BENCH_FIELDS = ["trial", "bpp", "ber", "psnr", "ssim", "gen_time_s", "hide_time_s",
                "seed_used", "failure"]


def cmd_bench(args) -> int:
    ck = _load_ckpt(args.ckpt)
    h, w = parse_size(args.size)
    try:
        bpps = [int(v) for v in args.bpps.split(",")]
    except ValueError:
        raise CliError(f"malformed --bpps {args.bpps!r}", EXIT_USAGE) from None
    rows = []
    for bpp in bpps:
        for trial in range(args.trials):
            row = {"trial": trial, "bpp": bpp}
            try:
                t0 = time.perf_counter()
                cover = dequantize(quantize(render_cover(ck, args.seed + trial, h, w)))
                row["gen_time_s"] = time.perf_counter() - t0
                msg = Rng(args.seed * 7919 + 31 * trial + bpp).bits(h * w * bpp)
                res = hide(cover, msg.reshape(h, w, bpp),
                           HideConfig(rounds=args.rounds, single=not args.double))
                row.update(ber=res.ber, psnr=res.psnr, ssim=res.ssim,
                           hide_time_s=res.hide_seconds, seed_used=res.seed_used, failure="")
            except Exception as exc:  # recorded per trial, the bench keeps going
                log.exception("trial %d at %d bpp failed", trial, bpp)
                row["failure"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            log.info("bpp %d trial %d: %s", bpp, trial, row)
    for bpp in bpps:
        done = [r for r in rows if r["bpp"] == bpp and not r["failure"]]
        summary = {"trial": "mean", "bpp": bpp, "seed_used": "",
                   "failure": f"{args.trials - len(done)} failed" if len(done) < args.trials else ""}
        for key in ("ber", "psnr", "ssim", "gen_time_s", "hide_time_s"):
            vals = [r[key] for r in done]
            summary[key] = float(np.mean(vals)) if vals else float("nan")
        rows.append(summary)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, restval="")
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = read_image(args.a), read_image(args.b)
    try:
        q = quality(a, b)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    print(json.dumps({"mse": q.mse, "psnr": _json_float(q.psnr), "ssim": q.ssim}))
    return EXIT_OK


def cmd_check_ber(args) -> int:
    """Compare two bit files (packed bytes) and print the bit error rate."""
    a = np.unpackbits(np.frombuffer(Path(args.a).read_bytes(), dtype=np.uint8))
    b = np.unpackbits(np.frombuffer(Path(args.b).read_bytes(), dtype=np.uint8))
    n = min(a.size, b.size)
    print(f"{ber(a[:n], b[:n]):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inrsteg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-gasp", help="train the hypernetwork on a folder of images")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--l", type=float, default=10.0, help="R1 coefficient")
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--points", type=int, default=None, help="coordinate subset per step")
    t.add_argument("--log", default=None, help="CSV log path (default: OUT with .csv)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train_gasp)

    s = sub.add_parser("sample", help="render a cover image from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--size", default="64x64")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    h = sub.add_parser("hide", help="embed a payload into a cover")
    src = h.add_mutually_exclusive_group()
    src.add_argument("--cover")
    src.add_argument("--ckpt", help="sample the cover from this checkpoint instead")
    h.add_argument("--cover-seed", type=int, default=0)
    h.add_argument("--size", default="64x64")
    pay = h.add_mutually_exclusive_group(required=True)
    pay.add_argument("--payload")
    pay.add_argument("--random-bits", action="store_true",
                     help="fill the capacity with a seeded random payload")
    h.add_argument("--message-seed", type=int, default=0)
    h.add_argument("--pad-seed", type=int, default=0)
    h.add_argument("--bpp", type=int, default=1)
    h.add_argument("--seed-pool", default=None, help="file listing ten decoder seeds")
    h.add_argument("--epsilon", type=float, default=0.3)
    h.add_argument("--rounds", type=int, default=100)
    h.add_argument("--double", action="store_true", help="float64 convolutions while optimizing")
    h.add_argument("--out", required=True)
    h.add_argument("--spec-out", default=None, help="decoder spec path (default: OUT with .spec)")
    h.add_argument("--report", default=None)
    h.set_defaults(func=cmd_hide)

    r = sub.add_parser("reveal", help="extract a payload with a decoder spec")
    r.add_argument("--stego", required=True)
    r.add_argument("--decoder-spec", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reveal)

    b = sub.add_parser("bench", help="sample covers and time hiding at several rates")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--bpps", default="1,2,3,4")
    b.add_argument("--size", default="64x64")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--rounds", type=int, default=100)
    b.add_argument("--double", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("metrics", help="MSE/PSNR/SSIM between two images")
    m.add_argument("a")
    m.add_argument("b")
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("ber", help="bit error rate between two byte files")
    c.add_argument("a")
    c.add_argument("b")
    c.set_defaults(func=cmd_check_ber)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
