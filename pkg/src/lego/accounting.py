"""Analytic parameter and FLOPs accounting for brick stacks.

Parameter counts are exact closed forms of the module construction in
:mod:`lego.bricks` (cross-checked against instantiated modules in tests).

FLOPs are reported as multiply-accumulate counts (one MAC = one FLOP), the
convention vision-transformer cost tables use. Counted per image per forward
pass: weight matmuls, attention score/value matmuls, modulation heads, token
embedding and decoding, and the conditioning embedder. Training mode scales
patch-brick terms by the patch sampling fraction; sample mode with a skip
schedule averages the active-set cost across timesteps.
"""

from __future__ import annotations

from collections.abc import Sequence

from .bricks import BrickSpec

COND_FREQ_DIM = 256


def brick_channels(image_channels: int) -> int:
    """Input channels of a brick: noisy patch + previous prediction + coordinate pair."""
    return image_channels * 2 + 2


def _brick_params(spec: BrickSpec, image_channels: int, cond_dim: int) -> int:
    c_in = brick_channels(image_channels)
    c_out = image_channels
    d, D = spec.d, cond_dim
    field = spec.l * spec.l * c_in
    n = field * d + d          # token embedding
    n += spec.span * d         # positional table
    mlp = d * (spec.mlp_ratio * d) + spec.mlp_ratio * d + (spec.mlp_ratio * d) * d + d
    if spec.span > 1:
        block = (3 * d * d + 3 * d) + (d * d + d) + mlp + (6 * D * d + 6 * d)
    else:
        block = mlp + (3 * D * d + 3 * d)
    n += spec.depth * block
    n += 2 * D * d + 2 * d     # final modulation
    out = spec.l * spec.l * c_out
    n += d * out + out         # decoder
    return n


def _cond_params(cond_dim: int, num_classes: int) -> int:
    D = cond_dim
    n = COND_FREQ_DIM * D + D + D * D + D   # time MLP
    n += (num_classes + 1) * D              # class table incl. null row
    n += D                                  # no-previous flag
    return n


def param_count(
    specs: Sequence[BrickSpec],
    image_channels: int = 3,
    num_classes: int = 0,
    cond_dim: int | None = None,
) -> int:
    """Exact scalar parameter count of a stack built from ``specs``."""
    if cond_dim is None:
        cond_dim = max(s.d for s in specs)
    total = _cond_params(cond_dim, num_classes)
    for spec in specs:
        total += _brick_params(spec, image_channels, cond_dim)
    return total


def param_count_by_brick(
    specs: Sequence[BrickSpec],
    image_channels: int = 3,
    num_classes: int = 0,
    cond_dim: int | None = None,
) -> dict:
    if cond_dim is None:
        cond_dim = max(s.d for s in specs)
    per = {f"brick{k + 1}(r={s.r})": _brick_params(s, image_channels, cond_dim) for k, s in enumerate(specs)}
    per["conditioning"] = _cond_params(cond_dim, num_classes)
    return per


def _brick_flops(spec: BrickSpec, resolution: tuple[int, int], image_channels: int, cond_dim: int) -> int:
    H, W = resolution
    c_in = brick_channels(image_channels)
    c_out = image_channels
    d, D, s = spec.d, cond_dim, spec.span
    patches = (H // spec.r) * (W // spec.r)
    tokens = patches * s
    macs = tokens * (spec.l * spec.l * c_in * d)        # tokenize
    macs += tokens * (d * spec.l * spec.l * c_out)      # decode
    mlp = 2 * spec.mlp_ratio * d * d
    if s > 1:
        per_token = 4 * d * d + mlp                     # qkv + proj + mlp
        per_patch = 6 * D * d + 2 * s * s * d           # modulation + QK^T/AV matmuls
    else:
        per_token = mlp
        per_patch = 3 * D * d
    macs += spec.depth * (tokens * per_token + patches * per_patch)
    macs += patches * 2 * D * d                         # final modulation
    return macs


def _cond_flops(cond_dim: int) -> int:
    return COND_FREQ_DIM * cond_dim + cond_dim * cond_dim


def flops_estimate(
    specs: Sequence[BrickSpec],
    resolution: tuple[int, int],
    mode: str = "sample",
    image_channels: int = 3,
    patch_fraction: float | Sequence[float] = 1.0,
    skip=None,
    cond_dim: int | None = None,
) -> float:
    """Estimated FLOPs (MACs) per image per forward pass through the stack.

    mode 'train' scales each patch-brick's cost by its sampling fraction;
    mode 'sample' with a skip schedule returns the mean cost of the
    schedule's active brick sets over t = 1..T.
    """
    if mode not in ("train", "sample"):
        raise ValueError(f"mode must be 'train' or 'sample', got {mode!r}")
    H, W = resolution
    if cond_dim is None:
        cond_dim = max(s.d for s in specs)
    if isinstance(patch_fraction, (int, float)):
        fractions = [float(patch_fraction)] * len(specs)
    else:
        fractions = [float(f) for f in patch_fraction]
    costs = [float(_brick_flops(s, resolution, image_channels, cond_dim)) for s in specs]
    base = float(_cond_flops(cond_dim))

    if mode == "train":
        total = base
        for spec, cost, frac in zip(specs, costs, fractions):
            is_image = spec.r == H and spec.r == W
            total += cost if is_image else cost * frac
        return total

    if skip is None:
        return base + sum(costs)
    # brick positions in skip sets are 1-based
    active_costs = []
    for t in range(1, skip.T + 1):
        active = skip.active(t)
        active_costs.append(base + sum(costs[k - 1] for k in active))
    return sum(active_costs) / len(active_costs)


def flops_by_brick(
    specs: Sequence[BrickSpec],
    resolution: tuple[int, int],
    image_channels: int = 3,
    cond_dim: int | None = None,
) -> dict:
    if cond_dim is None:
        cond_dim = max(s.d for s in specs)
    per = {
        f"brick{k + 1}(r={s.r})": _brick_flops(s, resolution, image_channels, cond_dim)
        for k, s in enumerate(specs)
    }
    per["conditioning"] = _cond_flops(cond_dim)
    return per
