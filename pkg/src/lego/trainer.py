"""Optimization loop: decoupled-weight-decay Adam, EMA shadow, warmup, persistence.

A single generator drives every random draw (batch synthesis, timesteps,
noise, patch subsampling, label dropout); its state travels inside the
checkpoint, so a resumed run replays the interrupted run's trace exactly.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import torch

from . import accounting
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .schedule import EdmParams, NoiseSchedule
from .stack import LegoStack, StackConfig, training_loss


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_images: int = 10_000
    batch_size: int = 64
    total_images: int = 64_000
    ema_decay: float = 0.9999
    weight_decay: float = 0.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    checkpoint_every: int = 1000   # steps; 0 disables periodic checkpoints
    log_every: int = 50            # steps

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.total_images < self.batch_size:
            raise ConfigError(
                f"total_images ({self.total_images}) must cover at least one batch ({self.batch_size})"
            )

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "warmup_images": self.warmup_images,
            "batch_size": self.batch_size,
            "total_images": self.total_images,
            "ema_decay": self.ema_decay,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "betas": list(self.betas),
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_at(images_seen: int, tc: TrainConfig, mode: str) -> float:
    """Constant rate for ddpm; linear warmup over warmup_images for edm."""
    if images_seen < 0:
        raise ConfigError(f"images_seen must be >= 0, got {images_seen}")
    if mode == "ddpm":
        return tc.lr
    if mode == "edm":
        return tc.lr * min(1.0, images_seen / tc.warmup_images)
    raise ConfigError(f"mode must be 'ddpm' or 'edm', got {mode!r}")


def ema_update(shadow: dict[str, torch.Tensor], params, decay: float) -> dict[str, torch.Tensor]:
    """shadow <- decay * shadow + (1 - decay) * params, element-wise by name."""
    params = dict(params)
    if set(shadow) != set(params):
        raise ConfigError(
            f"EMA name sets differ: only-shadow={sorted(set(shadow) - set(params))}, "
            f"only-params={sorted(set(params) - set(shadow))}"
        )
    with torch.no_grad():
        for name, p in params.items():
            shadow[name].mul_(decay).add_(p, alpha=1.0 - decay)
    return shadow


def _trainable_named(model: LegoStack):
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def build_checkpoint(
    model: LegoStack,
    ema: dict[str, torch.Tensor],
    optimizer: torch.optim.AdamW,
    rng: torch.Generator,
    step: int,
    images_seen: int,
) -> Checkpoint:
    tensors: dict[str, torch.Tensor] = {}
    for name, p in model.named_parameters():
        tensors[f"model.{name}"] = p.detach().clone()
    for name, s in ema.items():
        tensors[f"ema.{name}"] = s.clone()
    optim_step = 0
    named = _trainable_named(model)
    for (name, p), group_p in zip(named, optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(group_p, {})
        if state:
            tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].clone()
            tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].clone()
            optim_step = int(state["step"])
    tensors["rng.torch"] = rng.get_state().clone()
    return Checkpoint(
        config_hash=model.config_hash,
        step=step,
        images_seen=images_seen,
        optim_step=optim_step,
        tensors=tensors,
    )


def restore_checkpoint(
    ckpt: Checkpoint,
    model: LegoStack,
    ema: dict[str, torch.Tensor],
    optimizer: torch.optim.AdamW,
    rng: torch.Generator,
) -> tuple[int, int]:
    """Load state back into live objects; returns (step, images_seen)."""
    model_tensors = ckpt.named("model.")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in model_tensors:
                raise ConfigError(f"checkpoint missing model tensor {name!r}")
            p.copy_(model_tensors[name])
    ema_tensors = ckpt.named("ema.")
    for name in ema:
        ema[name].copy_(ema_tensors[name])
    m1 = ckpt.named("opt.")
    if m1:
        for (name, p), group_p in zip(_trainable_named(model), optimizer.param_groups[0]["params"]):
            optimizer.state[group_p] = {
                "step": torch.tensor(float(ckpt.optim_step)),
                "exp_avg": m1[f"{name}.exp_avg"].clone(),
                "exp_avg_sq": m1[f"{name}.exp_avg_sq"].clone(),
            }
    rng.set_state(ckpt.tensors["rng.torch"].clone())
    return ckpt.step, ckpt.images_seen


class MetricsWriter:
    """Line-delimited JSON records with a fixed key set."""

    KEYS = ("step", "images_seen", "loss", "per_brick", "lr", "wall_time", "cum_flops")

    def __init__(self, path: str | os.PathLike | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            self._fh = open(path, "a")
        else:
            self._fh = None

    def write(self, **record):
        assert set(record) == set(self.KEYS), f"metrics keys must be {self.KEYS}"
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train(
    config: StackConfig,
    tc: TrainConfig,
    dataset,
    mode: str = "ddpm",
    schedule: NoiseSchedule | None = None,
    edm: EdmParams | None = None,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    model: LegoStack | None = None,
    external: dict | None = None,
) -> tuple[LegoStack, list[dict]]:
    """Run the optimization loop; returns the trained model and metric records.

    Emits periodic checkpoints (``ckpt_<step>.lego`` plus ``ckpt_final.lego``)
    and a ``metrics.jsonl`` stream under ``out_dir``. ``external`` installs
    wrapped predictors {position: element} before training; frozen elements
    receive no updates. A NaN loss aborts after writing a diagnostic
    checkpoint.
    """
    if mode not in ("ddpm", "edm"):
        raise ConfigError(f"mode must be 'ddpm' or 'edm', got {mode!r}")
    if mode == "ddpm" and schedule is None:
        raise ConfigError("ddpm mode requires a schedule")
    if mode == "edm" and edm is None:
        raise ConfigError("edm mode requires EdmParams")
    if model is None:
        model = LegoStack(config, seed=tc.seed)
    if external:
        for position, element in external.items():
            model.install_external(element, position)
    rng = torch.Generator().manual_seed(tc.seed)
    trainable = [p for _, p in _trainable_named(model)]
    optimizer = torch.optim.AdamW(
        trainable, lr=tc.lr, betas=tc.betas, weight_decay=tc.weight_decay
    )
    ema = {n: p.detach().clone() for n, p in model.named_parameters()}

    step, images_seen = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expect_hash=model.config_hash)
        step, images_seen = restore_checkpoint(ckpt, model, ema, optimizer, rng)

    H, W, _ = config.resolution
    flops_per_image = accounting.flops_estimate(
        config.bricks,
        (H, W),
        mode="train",
        image_channels=config.resolution[2],
        patch_fraction=config.patch_fraction,
        cond_dim=config.cond_dim,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"))
    else:
        metrics = MetricsWriter(None)

    def emit_checkpoint(tag):
        if out_dir is None:
            return
        ckpt = build_checkpoint(model, ema, optimizer, rng, step, images_seen)
        save_checkpoint(os.path.join(out_dir, f"ckpt_{tag}.lego"), ckpt)

    start = time.monotonic()
    kwargs = {"schedule": schedule} if mode == "ddpm" else {"edm": edm}
    try:
        while images_seen < tc.total_images:
            x0, labels = dataset.sample_batch(tc.batch_size, rng)
            lr = lr_at(images_seen, tc, mode)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss, per_brick = training_loss(model, x0, labels, rng, **kwargs)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            ema_update(ema, model.named_parameters(), tc.ema_decay)
            step += 1
            images_seen += tc.batch_size
            if tc.log_every and (step % tc.log_every == 0 or images_seen >= tc.total_images):
                metrics.write(
                    step=step,
                    images_seen=images_seen,
                    loss=float(loss.detach()),
                    per_brick=[float(v.detach()) for v in per_brick],
                    lr=lr,
                    wall_time=time.monotonic() - start,
                    cum_flops=flops_per_image * images_seen,
                )
            if tc.checkpoint_every and step % tc.checkpoint_every == 0:
                emit_checkpoint(step)
    except NumericError:
        emit_checkpoint("abort")
        raise
    finally:
        metrics.close()
    emit_checkpoint("final")
    return model, metrics.records
