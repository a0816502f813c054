"""Recursive brick ensembles: configuration, full-image forward pass, training loss.

The stack runs bricks bottom-to-top. Each active brick partitions the noisy
image and the running prediction at its own brick size, refines every patch
independently, and reassembles a full-resolution prediction that the next
brick consumes. Skipped bricks pass the running prediction through unchanged.

During training each brick sees only a sampled subset of its patches; pixels
the previous brick did not produce are filled from the clean image. During
generation no clean image exists, so missing pixels fall back to the current
running estimate (or zeros below the first active brick).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .bricks import IMAGE_BRICK, PATCH_BRICK, BrickSpec, ConditioningEmbedder, LegoBrick, brick_forward
from .errors import ConfigError, NumericError, ShapeError
from .patches import PatchGrid, assemble, coord_grid, fill_missing, partition, sample_patch_indices
from .schedule import (
    EdmParams,
    LossWeights,
    NoiseSchedule,
    loss_weight,
    q_sample,
    x0_from_eps,
)

MODES = ("pg", "pr", "u")


def _weights_to_dict(w: LossWeights) -> dict:
    # custom tables serialize as sorted [t, k, weight] triples
    d = {"mode": w.mode}
    if w.values:
        d["values"] = [[t, k, w.values[(t, k)]] for t, k in sorted(w.values)]
    return d


def _weights_from_dict(d: dict) -> LossWeights:
    extra = set(d) - {"mode", "values"}
    if extra:
        raise ConfigError(f"unknown weights keys: {sorted(extra)}")
    values = {(t, k): wt for t, k, wt in d.get("values", [])}
    return LossWeights(mode=d.get("mode", "unit"), values=values)


@dataclass
class StackConfig:
    """Full architecture description of a brick stack."""

    bricks: list[BrickSpec]
    mode: str
    resolution: tuple[int, int, int]          # (H, W, C)
    num_classes: int = 0
    patch_fraction: float | list[float] = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    cond_dim: int | None = None
    cfg_drop_prob: float = 0.1
    sequential: bool = False

    def __post_init__(self):
        if not self.bricks:
            raise ConfigError("stack needs at least one brick")
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        H, W, C = self.resolution
        if H < 1 or W < 1 or C < 1:
            raise ConfigError(f"bad resolution {self.resolution}")
        sizes = [s.r for s in self.bricks]
        self._check_ordering(sizes)
        fixed = []
        for spec in self.bricks:
            if H % spec.r or W % spec.r:
                raise ConfigError(f"brick size {spec.r} does not divide resolution {H} x {W}")
            kind = IMAGE_BRICK if (spec.r == H and spec.r == W) else PATCH_BRICK
            fixed.append(replace(spec, kind=kind))
        self.bricks = fixed
        if isinstance(self.patch_fraction, (int, float)):
            self.patch_fraction = [float(self.patch_fraction)] * len(self.bricks)
        if len(self.patch_fraction) != len(self.bricks):
            raise ConfigError(
                f"patch_fraction has {len(self.patch_fraction)} entries for {len(self.bricks)} bricks"
            )
        for f in self.patch_fraction:
            if not (0.0 < f <= 1.0):
                raise ConfigError(f"patch fractions must lie in (0, 1], got {f}")
        if self.cond_dim is None:
            self.cond_dim = max(s.d for s in self.bricks)
        if not (0.0 <= self.cfg_drop_prob < 1.0):
            raise ConfigError(f"cfg_drop_prob must lie in [0, 1), got {self.cfg_drop_prob}")
        if self.num_classes < 0:
            raise ConfigError(f"num_classes must be >= 0, got {self.num_classes}")

    def _check_ordering(self, sizes: list[int]) -> None:
        inc = all(a < b for a, b in zip(sizes, sizes[1:]))
        dec = all(a > b for a, b in zip(sizes, sizes[1:]))
        if self.mode == "pg" and not inc:
            raise ConfigError(f"pg requires strictly increasing brick sizes, got {sizes}")
        if self.mode == "pr" and not dec:
            raise ConfigError(f"pr requires strictly decreasing brick sizes, got {sizes}")
        if self.mode == "u":
            if len(sizes) < 3:
                raise ConfigError("u mode needs at least 3 bricks")
            pivot = sizes.index(min(sizes))
            down, up = sizes[: pivot + 1], sizes[pivot:]
            if not (
                all(a > b for a, b in zip(down, down[1:]))
                and all(a < b for a, b in zip(up, up[1:]))
                and pivot not in (0, len(sizes) - 1)
            ):
                raise ConfigError(f"u requires sizes to decrease then increase, got {sizes}")

    @property
    def K(self) -> int:
        return len(self.bricks)

    def reversed(self) -> "StackConfig":
        """The dual ordering: a pg stack reversed is a valid pr stack and vice versa."""
        if self.mode not in ("pg", "pr"):
            raise ConfigError(f"only pg/pr stacks have a reversal dual, got mode={self.mode!r}")
        return replace(
            self,
            bricks=list(reversed(self.bricks)),
            mode="pr" if self.mode == "pg" else "pg",
            patch_fraction=list(reversed(self.patch_fraction)),
        )

    def to_dict(self) -> dict:
        return {
            "bricks": [
                {
                    "r": s.r,
                    "l": s.l,
                    "d": s.d,
                    "depth": s.depth,
                    "heads": s.heads,
                    "mlp_ratio": s.mlp_ratio,
                }
                for s in self.bricks
            ],
            "mode": self.mode,
            "resolution": list(self.resolution),
            "num_classes": self.num_classes,
            "patch_fraction": list(self.patch_fraction),
            "weights": _weights_to_dict(self.weights),
            "cond_dim": self.cond_dim,
            "cfg_drop_prob": self.cfg_drop_prob,
            "sequential": self.sequential,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        known = {
            "bricks",
            "mode",
            "resolution",
            "num_classes",
            "patch_fraction",
            "weights",
            "cond_dim",
            "cfg_drop_prob",
            "sequential",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown stack config keys: {sorted(unknown)}")
        bricks = []
        for bd in d["bricks"]:
            extra = set(bd) - {"r", "l", "d", "depth", "heads", "mlp_ratio"}
            if extra:
                raise ConfigError(f"unknown brick keys: {sorted(extra)}")
            bricks.append(BrickSpec(**bd))
        weights = _weights_from_dict(d.get("weights", {"mode": "unit"}))
        return cls(
            bricks=bricks,
            mode=d["mode"],
            resolution=tuple(d["resolution"]),
            num_classes=d.get("num_classes", 0),
            patch_fraction=d.get("patch_fraction", 1.0),
            weights=weights,
            cond_dim=d.get("cond_dim"),
            cfg_drop_prob=d.get("cfg_drop_prob", 0.1),
            sequential=d.get("sequential", False),
        )

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class ExternalBrick(nn.Module):
    """A black-box x0 predictor slotted into the stack at a fixed brick size.

    The predictor maps (noisy patches, conditioning value) -> x0 patches. A
    frozen element never receives parameter updates.
    """

    def __init__(self, predictor, r: int, frozen: bool = True):
        super().__init__()
        self.r = r
        self.frozen = frozen
        if isinstance(predictor, nn.Module):
            self.predictor_module = predictor
            if frozen:
                self.predictor_module.requires_grad_(False)
            self.predictor = predictor
        else:
            self.predictor_module = None
            self.predictor = predictor

    def forward(self, xt_patch: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        out = self.predictor(xt_patch, t)
        if out.shape != xt_patch.shape:
            raise ShapeError(
                f"external predictor returned {tuple(out.shape)}, expected {tuple(xt_patch.shape)}"
            )
        return out


def wrap_external_brick(predictor, position: int, config: StackConfig, frozen: bool = True) -> ExternalBrick:
    """Wrap a pretrained x0 predictor as the stack element at ``position`` (1-based)."""
    if not (1 <= position <= config.K):
        raise ConfigError(f"position {position} outside stack of {config.K} bricks")
    return ExternalBrick(predictor, r=config.bricks[position - 1].r, frozen=frozen)


class LegoStack(nn.Module):
    """Parameter container for one stack: shared conditioning embedder plus bricks.

    Passing ``seed`` makes the weight initialization deterministic without
    touching the caller's global random state.
    """

    def __init__(self, config: StackConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        if seed is None:
            self._build()
        else:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self._build()

    def _build(self):
        H, W, C = self.config.resolution
        self.embedder = ConditioningEmbedder(self.config.cond_dim, self.config.num_classes)
        in_ch = C * 2 + 2
        self.bricks = nn.ModuleList(
            LegoBrick(spec, in_ch, C, self.config.cond_dim) for spec in self.config.bricks
        )
        self.register_buffer("coords", coord_grid(H, W), persistent=False)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def install_external(self, element: ExternalBrick, position: int) -> None:
        if element.r != self.config.bricks[position - 1].r:
            raise ShapeError(
                f"external brick size {element.r} != configured size {self.config.bricks[position - 1].r}"
            )
        self.bricks[position - 1] = element

    def brick_grid(self, k: int) -> PatchGrid:
        H, W, _ = self.config.resolution
        return PatchGrid(H, W, self.config.bricks[k - 1].r)

    def run_brick(
        self,
        k: int,
        xt: torch.Tensor,
        prev: torch.Tensor | None,
        t_cond: torch.Tensor,
        class_ids: torch.Tensor | None,
        patch_idx: torch.Tensor | None = None,
        raw_x: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Refine brick k's patches (all of them, or the subset ``patch_idx``).

        Returns patch predictions of shape (B, n, C, r, r). ``raw_x`` carries
        the unscaled noisy image for external bricks when the stack input has
        been preconditioned.
        """
        brick = self.bricks[k - 1]
        grid = self.brick_grid(k)
        B = xt.shape[0]
        xt_p = partition(xt, grid.r)
        if patch_idx is not None:
            xt_p = xt_p[:, patch_idx]
        n = xt_p.shape[1]
        flat = xt_p.reshape(B * n, *xt_p.shape[2:])
        if isinstance(brick, ExternalBrick):
            src = xt if raw_x is None else raw_x
            src_p = partition(src, grid.r)
            if patch_idx is not None:
                src_p = src_p[:, patch_idx]
            t_rep = t_cond.repeat_interleave(n, dim=0)
            out = brick(src_p.reshape(B * n, *src_p.shape[2:]), t_rep)
            return out.reshape(B, n, *out.shape[1:])
        coords_p = partition(self.coords.to(xt.dtype), grid.r)
        if patch_idx is not None:
            coords_p = coords_p[patch_idx]
        coords_flat = coords_p.repeat(B, 1, 1, 1)
        if prev is None:
            prev_flat = None
        else:
            prev_p = partition(prev, grid.r)
            if patch_idx is not None:
                prev_p = prev_p[:, patch_idx]
            prev_flat = prev_p.reshape(B * n, *prev_p.shape[2:])
        cond = self.embedder(t_cond, class_ids, no_prev=prev is None)
        cond = cond.repeat_interleave(n, dim=0)
        out = brick_forward(flat, prev_flat, coords_flat, cond, brick)
        return out.reshape(B, n, *out.shape[1:])


def _normalize_active(active, K: int) -> set[int]:
    if active is None:
        return set(range(1, K + 1))
    act = set(int(a) for a in active)
    bad = [a for a in act if not (1 <= a <= K)]
    if bad:
        raise ConfigError(f"active brick positions {bad} outside 1..{K}")
    return act


def _as_t_vec(t, B: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.to(device)
    return torch.full((B,), float(t), device=device)


def stack_forward(
    model: LegoStack,
    xt: torch.Tensor,
    t,
    class_ids: torch.Tensor | None = None,
    active=None,
    schedule: NoiseSchedule | None = None,
) -> torch.Tensor:
    """Full-image x0 prediction: run active bricks bottom-up, pass-through the rest.

    With an empty active set the prediction falls back to inverting the
    forward marginal with a zero noise estimate (requires ``schedule``).
    """
    H, W, C = model.config.resolution
    if xt.shape[-3:] != (C, H, W):
        raise ShapeError(f"input shape {tuple(xt.shape)} != resolution (C={C}, H={H}, W={W})")
    act = _normalize_active(active, model.config.K)
    B = xt.shape[0]
    t_vec = _as_t_vec(t, B, xt.device)
    if not act:
        warnings.warn("empty active brick set: falling back to zero-noise-prediction inversion")
        if schedule is None:
            raise ConfigError("empty active set requires a schedule for the fallback")
        return x0_from_eps(xt, torch.zeros_like(xt), t, schedule)
    z = None
    for k in range(1, model.config.K + 1):
        if k not in act:
            continue
        preds = model.run_brick(k, xt, z, t_vec, class_ids)
        z = assemble(preds, H, W)
    return z


def _edm_coeffs(sigma: torch.Tensor, sigma_data: float):
    denom = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / denom
    c_out = sigma * sigma_data / denom.sqrt()
    c_in = 1.0 / denom.sqrt()
    c_noise = sigma.log() / 4.0
    return c_skip, c_out, c_in, c_noise


def edm_denoise(
    model: LegoStack,
    x: torch.Tensor,
    sigma,
    edm: EdmParams,
    class_ids: torch.Tensor | None = None,
    active=None,
) -> torch.Tensor:
    """Preconditioned denoiser D(x; sigma) evaluated through the stack.

    Each brick's raw output is mapped into data space via c_skip x + c_out F
    before the next brick consumes it; the final brick's mapping is returned.
    """
    H, W, C = model.config.resolution
    if x.shape[-3:] != (C, H, W):
        raise ShapeError(f"input shape {tuple(x.shape)} != resolution (C={C}, H={H}, W={W})")
    act = _normalize_active(active, model.config.K)
    B = x.shape[0]
    sig = sigma if isinstance(sigma, torch.Tensor) else torch.full((B,), float(sigma))
    sig = sig.to(device=x.device, dtype=x.dtype)
    bshape = (B,) + (1,) * (x.ndim - 1)
    c_skip, c_out, c_in, c_noise = (c.reshape(bshape) for c in _edm_coeffs(sig, edm.sigma_data))
    if not act:
        warnings.warn("empty active brick set: falling back to the skip path c_skip * x")
        return c_skip * x
    net_in = c_in * x
    z = None
    for k in range(1, model.config.K + 1):
        if k not in act:
            continue
        preds = model.run_brick(k, net_in, z, c_noise.reshape(B), class_ids, raw_x=x)
        raw = assemble(preds, H, W)
        if isinstance(model.bricks[k - 1], ExternalBrick):
            z = raw  # external predictors already emit data-space estimates
        else:
            z = c_skip * x + c_out * raw
    return z


def _cfg_dropped(class_ids, model: LegoStack, B: int, rng: torch.Generator):
    cfg = model.config
    if class_ids is None or cfg.num_classes == 0 or cfg.cfg_drop_prob == 0.0:
        return class_ids
    drop = torch.rand(B, generator=rng) < cfg.cfg_drop_prob
    null = torch.full_like(class_ids, model.embedder.null_class)
    return torch.where(drop, null, class_ids)


def training_loss(
    model: LegoStack,
    x0: torch.Tensor,
    class_ids: torch.Tensor | None,
    rng: torch.Generator,
    schedule: NoiseSchedule | None = None,
    edm: EdmParams | None = None,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Brick-averaged patch reconstruction loss.

    Draws one timestep (or sigma) per example, corrupts the batch, runs the
    stack bottom-up on per-brick sampled patch subsets (shared across the
    batch, drawn independently per brick), fills pixels missing from the
    previous brick's coverage with clean-image values, and averages
    lambda-weighted squared errors over the sampled patches. Returns the
    mean over bricks together with the raw per-brick losses.
    """
    if (schedule is None) == (edm is None):
        raise ConfigError("pass exactly one of schedule (ddpm) or edm")
    cfg = model.config
    H, W, C = cfg.resolution
    if x0.shape[-3:] != (C, H, W):
        raise ShapeError(f"batch shape {tuple(x0.shape)} != resolution (C={C}, H={H}, W={W})")
    B = x0.shape[0]
    class_ids = _cfg_dropped(class_ids, model, B, rng)

    if schedule is not None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=rng)
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        xt = q_sample(x0, t, eps, schedule)
        net_in, t_cond = xt, t.to(x0.dtype)
        c_skip = c_out = None

        def brick_lambda(k: int) -> torch.Tensor:
            if cfg.weights.mode == "unit":
                return torch.ones(B, dtype=x0.dtype)
            return torch.tensor(
                [loss_weight(cfg.weights, schedule, int(tb), k) for tb in t], dtype=x0.dtype
            )
    else:
        ln_sig = edm.p_mean + edm.p_std * torch.randn(B, generator=rng, dtype=torch.float64)
        sig = ln_sig.exp().to(x0.dtype)
        noise = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        xt = x0 + sig.reshape(B, 1, 1, 1) * noise
        c_skip, c_out, c_in, c_noise = (
            c.reshape(B, 1, 1, 1) for c in _edm_coeffs(sig, edm.sigma_data)
        )
        net_in, t_cond = c_in * xt, c_noise.reshape(B)
        sd = edm.sigma_data
        lam_sigma = ((sig * sig + sd * sd) / (sig * sd) ** 2).reshape(B)

        def brick_lambda(k: int) -> torch.Tensor:
            return lam_sigma

    per_brick: list[torch.Tensor] = []
    prev_full: torch.Tensor | None = None
    for k in range(1, cfg.K + 1):
        grid = model.brick_grid(k)
        idx = sample_patch_indices(grid, cfg.patch_fraction[k - 1], rng)
        preds = model.run_brick(k, net_in, prev_full, t_cond, class_ids, patch_idx=idx, raw_x=xt)
        if edm is not None and not isinstance(model.bricks[k - 1], ExternalBrick):
            xt_p = partition(xt, grid.r)[:, idx]
            preds = c_skip.unsqueeze(1) * xt_p + c_out.unsqueeze(1) * preds
        x0_p = partition(x0, grid.r)[:, idx]
        sq = (preds - x0_p) ** 2
        per_example = sq.reshape(B, -1).mean(dim=1)
        if not torch.isfinite(per_example).all():
            b = int((~torch.isfinite(per_example)).nonzero()[0])
            t_bad = float(t_cond[b])
            raise NumericError("non-finite training loss", t=t_bad, k=k, batch_index=b)
        per_brick.append((brick_lambda(k) * per_example).mean())
        # scatter predictions into full-image coverage; unsampled pixels come from x0
        full = torch.zeros(
            B, grid.num_patches, *preds.shape[2:], dtype=preds.dtype, device=preds.device
        )
        src = preds.detach() if cfg.sequential else preds
        full[:, idx] = src
        mask = torch.zeros(grid.num_patches, dtype=torch.bool)
        mask[idx] = True
        prev_full = fill_missing(assemble(full, H, W), mask, x0, grid)

    per_brick_t = torch.stack(per_brick)
    return per_brick_t.mean(), list(per_brick_t)
