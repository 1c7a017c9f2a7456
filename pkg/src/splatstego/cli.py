"""Command-line surface: train-pair, embed, extract, render, attack-eval.

Every command is deterministic under a fixed config: all randomness funnels
through the seeds in the configuration, and each run echoes its effective
settings as config.lock.toml so any artifact can be reproduced exactly.

Exit codes: 0 ok, 2 config error, 3 data error, 4 key error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import attacks as attacks_mod
from .attacks import AttackSpec, apply_attack, evaluate, hidden_cloud
from .bitcodec import MODE_QUANTIZED, embed_cloud, fit_quant_params
from .config import RunConfig, load_config
from .errors import (
    ChecksumError,
    ConfigError,
    EmptyViewsError,
    KeyVersionError,
    SplatStegoError,
)
from .gaussians import DualCloud, CloudGeometry
from .images import write_png
from .opacity_mapping import StegoKey, load_key, save_key, train_mapping
from .ply_io import load_dual, load_ply, save_dual, save_ply
from .rasterizer import load_cameras, render
from .training import train_pair
from .viewsets import load_view_dir, view_png_name


def _write_loss_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss_scene", "loss_message", "loss_cons", "loss_total"])
        for i, e in enumerate(history):
            w.writerow([i, repr(e.scene), repr(e.message), repr(e.cons), repr(e.total)])


def cmd_train_pair(args, cfg: RunConfig) -> int:
    geometry_path = cfg["io"]["geometry_ply"]
    if not geometry_path:
        raise ConfigError("io.geometry_ply must point at the carrier asset")
    geometry = load_ply(geometry_path)
    scene_views = load_view_dir(args.scene_dir)
    message_views = load_view_dir(args.message_dir)
    dual, history = train_pair(scene_views, message_views, geometry,
                               cfg.train_config(threads=args.threads))
    os.makedirs(args.out_dir, exist_ok=True)
    save_dual(dual, os.path.join(args.out_dir, "dual.bin"))
    _write_loss_csv(history, os.path.join(args.out_dir, "loss.csv"))
    cfg.write_lock(os.path.join(args.out_dir, "config.lock.toml"))
    print(f"wrote {os.path.join(args.out_dir, 'dual.bin')} "
          f"(final total loss {history[-1].total:.6f})")
    return 0


def run_embed(dual: DualCloud, cfg: RunConfig, threads: int = 1):
    """Embed hidden SH into the carrier and train the opacity mapping key.

    The mapping trains against the attribute values the stego asset will
    actually carry (post-quantization float32), so recovery from the shipped
    file reproduces the training inputs exactly.
    """
    plan = cfg.bit_plan()
    qp = cfg.quant_params()
    if plan.mode == MODE_QUANTIZED and cfg["quant"]["auto_fit"]:
        qp = fit_quant_params(dual.scene_sh, dual.message_sh,
                              gamma_bits=qp.gamma_bits, min_half_range=-qp.c_min)
    stego = embed_cloud(dual.scene_cloud(), dual.message_sh, plan, qp)
    mapping_dual = DualCloud(
        geometry=CloudGeometry.of(stego),
        scene_opacity_logits=stego.opacity_logits,
        scene_sh=stego.sh,
        message_opacity_logits=dual.message_opacity_logits,
        message_sh=dual.message_sh,
    )
    mcfg = cfg.mapping_config()
    grid, mlp, losses = train_mapping(mapping_dual, mcfg, cfg.hash_grid_config())
    key = StegoKey(plan=plan, qp=qp, grid=grid, mlp=mlp,
                   seed=mcfg.seed, epochs=mcfg.epochs)
    return stego, key, losses


def cmd_embed(args, cfg: RunConfig) -> int:
    dual = load_dual(args.dual)
    stego, key, losses = run_embed(dual, cfg, threads=args.threads)
    save_ply(stego, args.out_stego)
    save_key(key, args.out_key)
    cfg.write_lock(os.path.join(os.path.dirname(os.path.abspath(args.out_stego)),
                                "config.lock.toml"))
    print(f"wrote {args.out_stego} and {args.out_key} "
          f"(mapping MSE {losses[-1]:.3e})")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    stego = load_ply(args.stego)
    key = load_key(args.key)
    hidden = hidden_cloud(stego, key)
    save_ply(hidden, args.out_hidden)
    print(f"wrote {args.out_hidden} ({len(hidden)} primitives)")
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    cloud = load_ply(args.ply)
    cameras = load_cameras(args.cameras)
    if not cameras:
        raise EmptyViewsError(f"no cameras in {args.cameras}")
    os.makedirs(args.out_dir, exist_ok=True)
    background = tuple(cfg["io"]["background"])
    for i, cam in enumerate(cameras):
        product = render(cloud, cam, background=background, threads=args.threads)
        write_png(product.image, os.path.join(args.out_dir, view_png_name(i)))
    print(f"rendered {len(cameras)} views into {args.out_dir}")
    return 0


def cmd_attack_eval(args, cfg: RunConfig) -> int:
    stego = load_ply(args.stego)
    key = load_key(args.key)
    scene_views = load_view_dir(args.scene_gt)
    message_views = load_view_dir(args.message_gt)

    a = dict(cfg["attack"])
    if args.attack is not None:
        a["kind"] = args.attack
    if args.ratio is not None:
        a["ratio"] = args.ratio
    if args.sigma is not None:
        a["sigma"] = args.sigma
    if args.attack_seed is not None:
        a["seed"] = args.attack_seed
    spec = AttackSpec(kind=a["kind"], ratio=a["ratio"], sigma=a["sigma"], seed=a["seed"])

    attacked = apply_attack(stego, spec, cameras=[cam for cam, _ in scene_views],
                            threads=args.threads)
    report = evaluate(stego, key, attacked, scene_views, message_views, attack=spec,
                      background=tuple(cfg["io"]["background"]), threads=args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    report.write_json(os.path.join(args.out_dir, "report.json"))
    report.write_csv(os.path.join(args.out_dir, "report.csv"))
    cfg.write_lock(os.path.join(args.out_dir, "config.lock.toml"))
    s_r = report.metrics["psnr"]["s_r"]
    print(f"attack {spec.kind}: S_R(PSNR) = {s_r:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstego",
        description="Steganography toolkit for 3D Gaussian splatting assets",
    )
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (results are thread-count independent)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-pair", help="jointly fit scene+message attribute sets")
    p.add_argument("scene_dir")
    p.add_argument("message_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train_pair)

    p = sub.add_parser("embed", help="embed hidden attributes and emit stego PLY + key")
    p.add_argument("dual")
    p.add_argument("out_stego")
    p.add_argument("out_key")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover the hidden scene with a key")
    p.add_argument("stego")
    p.add_argument("key")
    p.add_argument("out_hidden")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", help="render a PLY for every camera in a JSON file")
    p.add_argument("ply")
    p.add_argument("cameras")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("attack-eval", help="attack a stego asset and score robustness")
    p.add_argument("stego")
    p.add_argument("key")
    p.add_argument("out_dir")
    p.add_argument("--attack", choices=attacks_mod.ATTACK_KINDS, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--attack-seed", type=int, default=None)
    p.add_argument("--scene-gt", required=True)
    p.add_argument("--message-gt", required=True)
    p.set_defaults(func=cmd_attack_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.threads is None:
            args.threads = cfg.threads()
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (KeyVersionError, ChecksumError) as exc:
        print(f"key error: {exc}", file=sys.stderr)
        return 4
    except (SplatStegoError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
