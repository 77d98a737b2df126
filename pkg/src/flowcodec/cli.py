"""Command-line surface.

Subcommands: train, finetune, encode, decode, truncate, rd-sweep,
reencode-loop, inspect.  Every command validates file magics before
doing work and never mutates its input files.  CSV output always starts
with a header row and uses dot decimals regardless of locale.

Exit codes: 0 success, 2 usage, 3 malformed file, 4 model mismatch,
5 numeric failure.  The NFC_SEED environment variable overrides config
seeds.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .codec import (
    P_THRESH_DEFAULT,
    decode_image,
    encode_image,
    inspect_bitstream,
    truncate_bitstream,
)
from .entropy import QuantSpec
from .errors import FormatError, ModelMismatchError, NumericError
from .flow import FlowConfig, FlowModel
from .imageio import read_image, write_ppm
from .training import TrainConfig, bpp, finetune_deltas, psnr, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_MODEL = 4
EXIT_NUMERIC = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_model(path: str) -> FlowModel:
    if not os.path.exists(path):
        raise CliError(f"model file not found: {path}", EXIT_USAGE)
    return FlowModel.load(path)


def _load_deltas(arg: str, model: FlowModel) -> QuantSpec:
    """Step argument: a step file path or an inline scalar for all levels."""
    if os.path.exists(arg):
        spec = QuantSpec.from_lines(Path(arg).read_text().splitlines())
        if len(spec.delta0) != model.base_channels:
            raise CliError(
                f"step file lists {len(spec.delta0)} base channels, model has "
                f"{model.base_channels}",
                EXIT_MODEL,
            )
        return spec
    try:
        value = float(arg)
    except ValueError:
        raise CliError(f"steps argument {arg!r} is neither a file nor a number",
                       EXIT_USAGE) from None
    if value <= 0:
        raise CliError("step must be positive", EXIT_USAGE)
    return QuantSpec.uniform(value, model.base_channels)


def _parse_levels(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CliError(f"invalid level {text!r}", EXIT_USAGE) from None
    if value not in (1.0, 2.0, 2.5, 3.0):
        raise CliError("levels must be 1, 2, 2.5 or 3", EXIT_USAGE)
    return value


def _corpus_images(directory: str) -> list[np.ndarray]:
    exts = (".ppm", ".png")
    paths = sorted(
        p for p in Path(directory).iterdir() if p.suffix.lower() in exts
    ) if os.path.isdir(directory) else []
    if not paths:
        raise CliError(f"no corpus images (.ppm/.png) found in {directory!r}", EXIT_USAGE)
    return [read_image(p) for p in paths]


def _seed_override(seed: int) -> int:
    env = os.environ.get("NFC_SEED")
    return int(env) if env else seed


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        cfg.steps = args.steps
    if args.lambda_rd is not None:
        cfg.lambda_rd = args.lambda_rd
    if args.seed is not None:
        cfg.seed = args.seed
    if args.patch is not None:
        cfg.patch = args.patch
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    cfg.seed = _seed_override(cfg.seed)
    cfg.validate()
    corpus = _corpus_images(args.corpus)
    model = FlowModel(FlowConfig(
        in_channels=corpus[0].shape[0], steps=args.flow_steps, blocks=args.blocks,
        hidden=args.hidden, seed=cfg.seed,
    ))
    history = train(model, corpus, cfg, metrics_path=args.metrics)
    model.save(args.out)
    print(f"trained {cfg.steps} steps; final loss {history[-1]['loss']:.2f}; "
          f"model id {model.model_id.hex()}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    model = _load_model(args.model)
    images = _corpus_images(args.corpus)
    spec = finetune_deltas(model, images, args.lambda_rd, steps=args.steps,
                           seed=_seed_override(args.seed))
    Path(args.out).write_text("\n".join(spec.to_lines()) + "\n")
    print(f"wrote {args.out} (delta2={spec.delta2:.6g}, delta1={spec.delta1:.6g})")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    image = read_image(args.input)
    spec = _load_deltas(args.deltas, model)
    levels = _parse_levels(args.levels)
    blob = encode_image(model, image, spec, levels=levels, p_thresh=args.p_thresh)
    Path(args.out).write_bytes(blob)
    rate = bpp(len(blob), image.shape[1], image.shape[2])
    print(f"wrote {args.out}: {len(blob)} bytes, {rate:.4f} bpp")
    if args.verify:
        out = decode_image(model, blob)
        print(f"verify psnr: {psnr(image, out):.2f} dB")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    blob = Path(args.bitstream).read_bytes()
    levels = _parse_levels(args.levels) if args.levels else None
    out = decode_image(model, blob, levels=levels)
    write_ppm(args.out, out)
    print(f"wrote {args.out} ({out.shape[2]}x{out.shape[1]})")
    return EXIT_OK


def cmd_truncate(args) -> int:
    blob = Path(args.bitstream).read_bytes()
    target = _parse_levels(args.levels)
    Path(args.out).write_bytes(truncate_bitstream(blob, target))
    print(f"wrote {args.out} (levels={target})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    info = inspect_bitstream(Path(args.bitstream).read_bytes())
    for key in ("model_id", "original_size", "padded_size", "channels",
                "levels", "partial_fraction", "p_thresh", "delta2", "delta1"):
        print(f"{key}: {info[key]}")
    print(f"delta0: {', '.join(f'{v:.6g}' for v in info['delta0'])}")
    for name, size in info["section_bytes"].items():
        print(f"section {name}: {size} bytes")
    print(f"total: {info['total_bytes']} bytes")
    return EXIT_OK


def cmd_reencode_loop(args) -> int:
    model = _load_model(args.model)
    image = read_image(args.input)
    spec = _load_deltas(args.deltas, model)
    keep_dir = Path(args.keep_dir) if args.keep_dir else None
    if keep_dir:
        keep_dir.mkdir(parents=True, exist_ok=True)

    h, w = image.shape[1], image.shape[2]
    rows = []
    blob = encode_image(model, image, spec)
    reference = None
    current = image
    for iteration in range(args.iters + 1):
        if iteration > 0:
            current = decode_image(model, blob)
            blob = encode_image(model, current, spec)
            if keep_dir:
                path = keep_dir / f"iter{iteration:03d}.nfb"
                path.write_bytes(blob)
                blob_back = path.read_bytes()
                try:
                    inspect_bitstream(blob_back)
                except FormatError as exc:
                    raise CliError(
                        f"intermediate bitstream corrupt at iteration {iteration}: {exc}",
                        EXIT_FORMAT,
                    ) from exc
                blob = blob_back
            if reference is None:
                reference = blob
            elif blob != reference:
                raise CliError(
                    f"re-encoded bitstream diverged at iteration {iteration}",
                    EXIT_NUMERIC,
                )
        rows.append((iteration, bpp(len(blob), h, w),
                     psnr(image, decode_image(model, blob))))

    with open(args.csv, "w") as fh:
        fh.write("iteration,bpp,psnr\n")
        for it, rate, quality in rows:
            fh.write(f"{it},{rate!r},{quality!r}\n")
    print(f"wrote {args.csv}: {len(rows)} rows, bpp {rows[0][1]:.4f}, "
          f"psnr spread {max(r[2] for r in rows) - min(r[2] for r in rows):.2e} dB")
    return EXIT_OK


def cmd_rd_sweep(args) -> int:
    model = _load_model(args.model)
    corpus = _corpus_images(args.corpus)
    lambdas = []
    for token in args.lambdas.split(","):
        token = token.strip()
        if token:
            lambdas.append(float(token))
    if not lambdas:
        raise CliError("no lambda values given", EXIT_USAGE)
    seed = _seed_override(args.seed)

    rows = []
    for lam in lambdas:
        spec = finetune_deltas(model, corpus[: args.calibration_images], lam,
                               steps=args.steps, seed=seed)
        rates, qualities = [], []
        for img in corpus:
            blob = encode_image(model, img, spec)
            rates.append(bpp(len(blob), img.shape[1], img.shape[2]))
            qualities.append(psnr(img, decode_image(model, blob)))
        rows.append((lam, float(np.mean(rates)), float(np.mean(qualities)), spec))
        print(f"lambda={lam:g}: bpp={rows[-1][1]:.4f} psnr={rows[-1][2]:.2f}")

    with open(args.csv, "w") as fh:
        fh.write("lambda,bpp,psnr,delta2,delta1,delta0\n")
        for lam, rate, quality, spec in rows:
            d0 = ";".join(repr(float(v)) for v in spec.delta0)
            fh.write(f"{lam!r},{rate!r},{quality!r},{spec.delta2!r},{spec.delta1!r},{d0}\n")
    print(f"wrote {args.csv}")
    return EXIT_OK


# -- argument plumbing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcodec",
        description="Lossy image codec with a bijective multi-level transform",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--metrics", help="CSV path for per-step metrics")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lambda_rd", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--flow-steps", type=int, default=2, help="couplings per level")
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--hidden", type=int, default=16)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="tune quantization steps for one lambda")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lambda", dest="lambda_rd", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("encode", help="compress an image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--deltas", required=True, help="step file or inline scalar")
    p.add_argument("--levels", default="3")
    p.add_argument("--out", required=True)
    p.add_argument("--p-thresh", type=float, default=P_THRESH_DEFAULT)
    p.add_argument("--verify", action="store_true")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream to PPM")
    p.add_argument("--model", required=True)
    p.add_argument("--bitstream", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("truncate", help="drop trailing quality levels")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--levels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_truncate)

    p = sub.add_parser("inspect", help="print bitstream header fields")
    p.add_argument("--bitstream", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("reencode-loop", help="iterate decode/encode and log quality")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--deltas", required=True)
    p.add_argument("--iters", type=int, default=17)
    p.add_argument("--csv", required=True)
    p.add_argument("--keep-dir", help="write intermediate bitstreams here")
    p.set_defaults(fn=cmd_reencode_loop)

    p = sub.add_parser("rd-sweep", help="tune steps per lambda and measure RD points")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated values")
    p.add_argument("--csv", required=True)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibration-images", type=int, default=3)
    p.set_defaults(fn=cmd_rd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ModelMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
