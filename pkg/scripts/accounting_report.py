#!/usr/bin/env python3
"""Print the parameter/FLOPs table for every shipped config, plus the
patch-brick-only and halfway-skip sampling costs against the image-brick-only
baseline."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lego import accounting
from lego.config import REFERENCE_NAMES, reference_config
from lego.sampler import SkipSchedule


def main():
    rows = []
    for name in REFERENCE_NAMES:
        cfg = reference_config(name).stack
        H, W, C = cfg.resolution
        params = accounting.param_count(cfg.bricks, C, cfg.num_classes, cfg.cond_dim)
        full = accounting.flops_estimate(cfg.bricks, (H, W), mode="sample", cond_dim=cfg.cond_dim)
        rows.append((name, params, full))
        print(f"{name:18s} params {params / 1e6:8.2f}M   forward {full / 1e9:9.2f}G")

    print()
    lego_l = reference_config("lego-l").stack
    base = reference_config("dit-l-baseline").stack
    T = 1000
    skip_always = SkipSchedule(mode="pg", t_break=T, T=T, K=lego_l.K)
    skip_half = SkipSchedule(mode="pg", t_break=T // 2, T=T, K=lego_l.K)
    patch_only = accounting.flops_estimate(
        lego_l.bricks, (64, 64), mode="sample", skip=skip_always, cond_dim=lego_l.cond_dim
    )
    halfway = accounting.flops_estimate(
        lego_l.bricks, (64, 64), mode="sample", skip=skip_half, cond_dim=lego_l.cond_dim
    )
    base_cost = accounting.flops_estimate(base.bricks, (64, 64), mode="sample", cond_dim=base.cond_dim)
    print(f"lego-l, image brick skipped (t_break=T):    {patch_only / 1e9:7.2f}G")
    print(f"lego-l, halfway skip (t_break=T/2), mean:   {halfway / 1e9:7.2f}G")
    print(f"dit-l-baseline, full:                       {base_cost / 1e9:7.2f}G")
    print(f"halfway / baseline ratio:                   {halfway / base_cost:7.3f}")


if __name__ == "__main__":
    main()
