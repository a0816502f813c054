"""Command-line surface: train, sample, panorama, flops, inspect.

Exit status is 0 on success, 1 on runtime errors, 2 on usage errors; runtime
failures additionally emit a single machine-readable JSON record on stderr.
Every run writes a manifest (config hash, seed, code version) next to its
outputs. LEGO_SEED and LEGO_OUT_DIR provide environment defaults for the
corresponding flags.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import torch

from . import __version__, accounting
from .checkpoint import load_checkpoint, read_manifest
from .config import REFERENCE_NAMES, RunConfig, reference_config
from .data import make_dataset
from .errors import ConfigError
from .panorama import ClassMap, panorama_sample, window_plan
from .sampler import EdmSamplerParams, ddpm_sample, edm_heun_sample, skip_schedule
from .stack import LegoStack
from .trainer import train


def _load_config(ref: str) -> RunConfig:
    if os.path.exists(ref):
        return RunConfig.load(ref)
    if ref.lower() in REFERENCE_NAMES:
        return reference_config(ref)
    raise ConfigError(f"config {ref!r} is neither a file nor one of {REFERENCE_NAMES}")


def _default_seed() -> int:
    return int(os.environ.get("LEGO_SEED", "0"))


def _resolve_out_dir(args_out: str | None, cfg: RunConfig, leaf: str) -> str:
    base = args_out or os.environ.get("LEGO_OUT_DIR")
    if base is None:
        base = cfg.out_dir
    return os.path.join(base, leaf) if leaf else base


def _write_manifest(out_dir: str, cfg: RunConfig, seed: int, command: str, extra=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": command,
        "config_hash": cfg.stack.hash(),
        "config_name": cfg.name,
        "seed": seed,
        "version": __version__,
    }
    if extra:
        record.update(extra)
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _to_uint8(img: torch.Tensor):
    import numpy as np

    arr = ((img.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return np.ascontiguousarray(arr.permute(1, 2, 0).numpy())


def _save_images(images: torch.Tensor, labels, out_dir: str, seed: int) -> None:
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    n = images.shape[0]
    for i in range(n):
        cls = int(labels[i]) if labels is not None else "none"
        Image.fromarray(_to_uint8(images[i])).save(
            os.path.join(out_dir, f"sample_seed{seed}_class{cls}_{i:03d}.png")
        )
    cols = max(1, int(math.ceil(math.sqrt(n))))
    rows = int(math.ceil(n / cols))
    C, H, W = images.shape[1:]
    grid = torch.full((C, rows * H, cols * W), -1.0)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[:, r * H : (r + 1) * H, c * W : (c + 1) * W] = images[i]
    Image.fromarray(_to_uint8(grid)).save(os.path.join(out_dir, f"grid_seed{seed}.png"))


def _restore_model(cfg: RunConfig, ckpt_path: str, weights: str, force: bool) -> LegoStack:
    model = LegoStack(cfg.stack)
    ckpt = load_checkpoint(ckpt_path, expect_hash=model.config_hash, force=force)
    prefix = "ema." if weights == "ema" else "model."
    tensors = ckpt.named(prefix)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ConfigError(f"checkpoint has no tensor {prefix}{name}")
            p.copy_(tensors[name])
    model.eval()
    return model


def _skip_from_args(args, cfg: RunConfig):
    if args.skip_mode == "none":
        return None
    return skip_schedule(args.skip_mode, args.t_break, cfg.diffusion.T, cfg.stack)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    cfg.train.seed = seed
    if cfg.dataset is None:
        raise ConfigError("config has no dataset section; training needs one")
    out_dir = _resolve_out_dir(args.out_dir, cfg, "")
    _write_manifest(out_dir, cfg, seed, "train")
    dataset = make_dataset(cfg.dataset)
    kind = cfg.diffusion.kind
    train(
        cfg.stack,
        cfg.train,
        dataset,
        mode=kind,
        schedule=cfg.diffusion.make_schedule() if kind == "ddpm" else None,
        edm=cfg.diffusion.make_edm() if kind == "edm" else None,
        out_dir=out_dir,
        resume=args.resume,
    )
    print(f"training complete; outputs in {out_dir}")
    return 0


def _sample_chunk(model, cfg: RunConfig, class_ids, n, steps, cfg_scale, skip, seed):
    rng = torch.Generator().manual_seed(seed)
    if cfg.diffusion.kind == "ddpm":
        return ddpm_sample(
            model,
            cfg.diffusion.make_schedule(),
            rng,
            class_ids=class_ids,
            batch_size=n,
            n_steps=steps or cfg.sampler.ddpm_steps,
            cfg_scale=cfg_scale,
            skip=skip,
        )
    sp = EdmSamplerParams(
        steps=steps or cfg.sampler.edm_steps,
        s_churn=cfg.sampler.s_churn,
        s_min=cfg.sampler.s_min,
        s_max=cfg.sampler.s_max,
        s_noise=cfg.sampler.s_noise,
    )
    return edm_heun_sample(
        model,
        cfg.diffusion.make_edm(),
        sp,
        rng,
        class_ids=class_ids,
        batch_size=n,
        cfg_scale=cfg_scale,
        skip=skip,
    )


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else _default_seed()
    model = _restore_model(cfg, args.ckpt, args.weights, args.force)
    if args.class_id is not None:
        class_ids = torch.full((args.n,), args.class_id, dtype=torch.long)
    elif cfg.stack.num_classes > 0:
        class_ids = torch.arange(args.n, dtype=torch.long) % cfg.stack.num_classes
    else:
        class_ids = None
    skip = _skip_from_args(args, cfg)
    workers = max(1, args.workers)
    if workers == 1:
        images = _sample_chunk(model, cfg, class_ids, args.n, args.steps, args.cfg_scale, skip, seed)
    else:
        # model state is read-only and shared; worker i owns the stream seed + i
        from concurrent.futures import ThreadPoolExecutor

        bounds = [args.n * w // workers for w in range(workers + 1)]
        jobs = []
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for w in range(workers):
                lo, hi = bounds[w], bounds[w + 1]
                if hi == lo:
                    continue
                ids = class_ids[lo:hi] if class_ids is not None else None
                jobs.append(pool.submit(
                    _sample_chunk, model, cfg, ids, hi - lo, args.steps,
                    args.cfg_scale, skip, seed + w,
                ))
            images = torch.cat([j.result() for j in jobs])
    out_dir = _resolve_out_dir(args.out_dir, cfg, "samples")
    _write_manifest(
        out_dir, cfg, seed, "sample", {"ckpt": args.ckpt, "n": args.n, "workers": workers}
    )
    _save_images(images, class_ids, out_dir, seed)
    print(f"wrote {args.n} samples to {out_dir}")
    return 0


def cmd_panorama(args) -> int:
    cfg = _load_config(args.config)
    if cfg.diffusion.kind != "ddpm":
        raise ConfigError("panorama generation runs over the discrete chain; use a ddpm config")
    seed = args.seed if args.seed is not None else _default_seed()
    model = _restore_model(cfg, args.ckpt, args.weights, args.force)
    H, W, _ = cfg.stack.resolution
    if H != W:
        raise ConfigError("panorama needs a square trained resolution")
    plan = window_plan(args.height, args.width, H, args.stride)
    if args.class_map:
        with open(args.class_map) as f:
            cmap = ClassMap.parse(f.read(), args.height, args.width)
    else:
        cmap = ClassMap.constant(args.height, args.width, args.class_id or 0)
    rng = torch.Generator().manual_seed(seed)
    canvas = panorama_sample(
        model,
        cfg.diffusion.make_schedule(),
        plan,
        cmap,
        rng,
        n_steps=args.steps or cfg.sampler.ddpm_steps,
        cfg_scale=args.cfg_scale,
    )
    out_dir = _resolve_out_dir(args.out_dir, cfg, "panorama")
    _write_manifest(
        out_dir, cfg, seed, "panorama",
        {"width": args.width, "height": args.height, "stride": args.stride},
    )
    _save_images(canvas, None, out_dir, seed)
    print(f"wrote {args.width} x {args.height} panorama to {out_dir}")
    return 0


def cmd_flops(args) -> int:
    cfg = _load_config(args.config)
    H, W, C = cfg.stack.resolution
    specs = cfg.stack.bricks
    params = accounting.param_count_by_brick(
        specs, C, cfg.stack.num_classes, cfg.stack.cond_dim
    )
    flops = accounting.flops_by_brick(specs, (H, W), C, cfg.stack.cond_dim)
    print(f"config {cfg.name} at {H} x {W} x {C}, {cfg.stack.num_classes} classes")
    for key in params:
        f = flops.get(key, 0)
        print(f"  {key:24s} params {params[key]:>14,d}   flops {f:>18,.0f}")
    total_p = sum(params.values())
    total_f = accounting.flops_estimate(
        specs, (H, W), mode="sample", image_channels=C, cond_dim=cfg.stack.cond_dim
    )
    train_f = accounting.flops_estimate(
        specs,
        (H, W),
        mode="train",
        image_channels=C,
        patch_fraction=cfg.stack.patch_fraction,
        cond_dim=cfg.stack.cond_dim,
    )
    print(f"  total params {total_p:,d} ({total_p / 1e6:.1f}M)")
    print(f"  forward flops {total_f:,.0f} ({total_f / 1e9:.2f}G)")
    print(f"  train-mode flops {train_f:,.0f} ({train_f / 1e9:.2f}G)")
    return 0


def cmd_inspect(args) -> int:
    manifest = read_manifest(args.ckpt)
    print(f"checkpoint {args.ckpt}")
    print(f"  version {manifest['version']}  config_hash {manifest['config_hash']}")
    print(f"  step {manifest['step']}  images_seen {manifest['images_seen']}")
    total = 0
    for name in sorted(manifest["tensors"]):
        entry = manifest["tensors"][name]
        shape = "x".join(str(s) for s in entry["shape"]) or "scalar"
        print(f"  {name:60s} {entry['dtype']} {shape}")
        if entry["dtype"] == "f4" and name.startswith("model."):
            n = 1
            for s in entry["shape"]:
                n *= s
            total += n
    print(f"  model parameters: {total:,d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lego", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    def sampling_flags(s):
        s.add_argument("--config", required=True)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--steps", type=int)
        s.add_argument("--cfg-scale", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--out-dir")
        s.add_argument("--weights", choices=["ema", "primary"], default="ema")
        s.add_argument("--force", action="store_true", help="ignore config hash mismatch")

    s = sub.add_parser("sample", help="generate an image grid from a checkpoint")
    sampling_flags(s)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--class-id", type=int)
    s.add_argument("--skip-mode", choices=["pg", "pr", "none"], default="none")
    s.add_argument("--t-break", type=int, default=0)
    s.add_argument("--workers", type=int, default=1,
                   help="independent sampling streams (worker i draws from seed + i)")
    s.set_defaults(fn=cmd_sample)

    pan = sub.add_parser("panorama", help="beyond-training-resolution generation")
    sampling_flags(pan)
    pan.add_argument("--width", type=int, required=True)
    pan.add_argument("--height", type=int, required=True)
    pan.add_argument("--stride", type=int, default=7)
    pan.add_argument("--class-map", help="text file of `x0 y0 x1 y1 class` region lines")
    pan.add_argument("--class-id", type=int)
    pan.set_defaults(fn=cmd_panorama)

    f = sub.add_parser("flops", help="per-brick parameter and FLOPs accounting")
    f.add_argument("--config", required=True)
    f.set_defaults(fn=cmd_flops)

    i = sub.add_parser("inspect", help="dump a checkpoint manifest")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())
