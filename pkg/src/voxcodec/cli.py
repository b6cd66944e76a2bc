"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .codec import Bitstream, BitstreamError, bitstream_stats, decode_voxels, encode_pointcloud
from .codec import extract_scaled
from .evaluation import eval_run
from .pointcloud_io import PlyParseError, read_ply, save_ply
from .preprocess import ScaleConfig
from .trainer import (
    TrainConfig,
    gen_synthetic_cloud,
    gen_synthetic_dataset,
    load_dataset,
    save_dataset,
    train,
)
from .transforms import ModelParameters

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _scale(text):
    try:
        return ScaleConfig.parse(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"invalid scale {text!r}: {exc}") from None


def _cube_size(text):
    w = int(text)
    if w < 8 or w & (w - 1):
        raise argparse.ArgumentTypeError(f"cube size must be a power of two >= 8, got {w}")
    return w


def _threads(text):
    n = int(text)
    return n if n > 0 else (os.cpu_count() or 1)


def build_parser():
    p = _Parser(prog="voxcodec", description="Learned voxel point-cloud geometry codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="compress an ASCII PLY point cloud")
    e.add_argument("--input", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--scale", type=_scale, default=ScaleConfig())
    e.add_argument("--cube-size", type=_cube_size, default=64)
    e.add_argument("--precision", type=int, default=10)
    e.add_argument("--rho-metric", choices=["d1", "d2"])
    e.add_argument("--entropy-mode", choices=["hyperprior", "factorized"], default="hyperprior")
    e.add_argument("--threads", type=_threads, default=0)
    e.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("decode", help="reconstruct a PLY from a bitstream")
    d.add_argument("--input", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--threads", type=_threads, default=0)
    d.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="rate-distortion training from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init")
    t.add_argument("--curve", help="loss-curve CSV path")
    t.add_argument("--seed", type=int)

    v = sub.add_parser("eval", help="RD table over a corpus of PLY files")
    v.add_argument("--model", action="append", required=True, dest="models")
    v.add_argument("--corpus", required=True, help="directory of .ply files")
    v.add_argument("--out", required=True)
    v.add_argument("--scales", default="1")
    v.add_argument("--cube-size", type=_cube_size, default=16)
    v.add_argument("--precision", type=int, default=10)
    v.add_argument("--threads", type=_threads, default=0)
    v.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-data", help="write a synthetic training corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--cube-size", type=_cube_size, default=16)
    g.add_argument("--clouds", type=int, default=0, help="also write this many PLY clouds")
    g.add_argument("--cloud-extent", type=int, default=128)

    i = sub.add_parser("info", help="dump bitstream header and bit accounting")
    i.add_argument("--input", required=True)
    return p


# --------------------------------------------------------------------------


def _load_model(path):
    try:
        return ModelParameters.load(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise BitstreamError(f"{path}: {exc}") from None


def cmd_encode(args, out):
    cloud = read_ply(args.input, args.precision)
    model = _load_model(args.model)
    try:
        model.config.check_cube_size(args.cube_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bs = encode_pointcloud(cloud, model, args.scale, args.cube_size, args.entropy_mode,
                           rho_metric=args.rho_metric, threads=args.threads)
    data = bs.to_bytes()
    Path(args.output).write_bytes(data)
    s = bitstream_stats(bs, len(cloud))
    print(f"points {len(cloud)}  cubes {s['cube_count']}", file=out)
    print(f"bpp {s['bpp']:.6f}  meta_bits {s['meta_bits']}  payload_bits {s['payload_bits']}",
          file=out)


def cmd_decode(args, out):
    model = _load_model(args.model)
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    vox = decode_voxels(bs, model, args.threads)
    pts = extract_scaled(vox, bs.header.scale)
    save_ply(args.output, pts)
    print(f"points {len(pts)}  (decoded voxels {len(vox)})", file=out)


def read_config(path):
    text = Path(path).read_text()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            raise UsageError("TOML configs need Python 3.11+; use JSON") from None
        return tomllib.loads(text)
    return json.loads(text)


def cmd_train(args, out):
    raw = read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    data_cfg = raw.pop("data", {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig(**raw)
    if "path" in data_cfg:
        dataset = load_dataset(data_cfg["path"])
    else:
        dataset = gen_synthetic_dataset(data_cfg.get("seed", cfg.seed), data_cfg.get("count", 200),
                                        cfg.cube_size)
    init = _load_model(args.init) if args.init else None
    model, hist = train(cfg, dataset, init=init, curve_path=args.curve)
    model.save(args.out)
    if hist:
        print(f"steps {len(hist)}  J {hist[0]['J']:.4f} -> {hist[-1]['J']:.4f}", file=out)
    else:
        print("steps 0  (initial parameters written unchanged)", file=out)


def cmd_eval(args, out):
    models = {Path(m).stem: _load_model(m) for m in args.models}
    corpus = {p.stem: read_ply(p, args.precision) for p in sorted(Path(args.corpus).glob("*.ply"))}
    if not corpus:
        raise BitstreamError(f"no .ply files in {args.corpus}")
    scales = [ScaleConfig.parse(s) for s in args.scales.split(",")]
    rows = eval_run(models, corpus, scales, args.cube_size, out_csv=args.out,
                    threads=args.threads)
    print(f"rows {len(rows)} -> {args.out}", file=out)


def cmd_gen_data(args, out):
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    samples = gen_synthetic_dataset(args.seed, args.count, args.cube_size)
    save_dataset(d / "cubes.npz", samples)
    for j in range(args.clouds):
        cloud = gen_synthetic_cloud(args.seed * 1000 + j, args.cloud_extent)
        save_ply(d / f"cloud_{j:03d}.ply", cloud)
    print(f"cubes {len(samples)}  clouds {args.clouds} -> {d}", file=out)


def format_info(bs):
    h = bs.header
    acc = bs.accounting()
    lines = [
        f"version        {h.version}",
        f"precision      {h.precision}",
        f"scale          {h.scale}",
        f"cube_size      {h.cube_size}",
        f"net            base={list(h.net.base_channels)} C_y={h.net.latent_channels} "
        f"C_z={h.net.hyper_channels} vrn={h.net.vrn_per_stage} stages={h.net.stages}",
        f"entropy_mode   {'hyperprior' if h.entropy_mode == 0 else 'factorized'}",
        f"grid_levels    {h.grid_levels}",
        f"cube_count     {h.cube_count}",
        f"header_bits    {acc['header_bits']}",
        f"octree_bits    {acc['octree_bits']}",
        f"k_bits         {acc['k_bits']}",
        f"meta_bits      {acc['meta_bits']}",
        f"payload_bits   {acc['payload_bits']}",
        f"total_bits     {acc['total_bits']}",
        "cube position  k  bits",
    ]
    for pos, pl, bits in zip(bs.positions.indices, bs.payloads, acc["cube_bits"]):
        lines.append(f"{tuple(int(v) for v in pos)}  {pl.k_occupied}  {bits}")
    return "\n".join(lines) + "\n"


def cmd_info(args, out):
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    out.write(format_info(bs))


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "train": cmd_train, "eval": cmd_eval,
            "gen-data": cmd_gen_data, "info": cmd_info}


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "seed", None) is not None:
        np.random.seed(args.seed)
    try:
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PlyParseError, BitstreamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, AssertionError) as exc:
        print(f"internal check failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
