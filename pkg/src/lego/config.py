"""Declarative run configuration: stack + training + diffusion + sampler + dataset.

Configs are JSON files whose keys mirror the dataclass fields one-to-one;
parsing rejects unknown keys at every level and parse -> serialize -> parse
is a fixed point. Reference configurations for the three published model
sizes (at both modeled resolutions), an image-brick-only transformer
baseline, and a small desk-scale pair are constructible by name.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .bricks import BrickSpec
from .data import DatasetSpec
from .errors import ConfigError
from .schedule import EdmParams, NoiseSchedule, make_linear_schedule
from .stack import StackConfig
from .trainer import TrainConfig


@dataclass
class DiffusionConfig:
    kind: str = "ddpm"            # "ddpm" | "edm"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.kind not in ("ddpm", "edm"):
            raise ConfigError(f"diffusion kind must be 'ddpm' or 'edm', got {self.kind!r}")

    def make_schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def make_edm(self) -> EdmParams:
        return EdmParams(
            sigma_data=self.sigma_data,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            rho=self.rho,
            p_mean=self.p_mean,
            p_std=self.p_std,
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sigma_data": self.sigma_data,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
            "p_mean": self.p_mean,
            "p_std": self.p_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown diffusion keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SamplerConfig:
    ddpm_steps: int = 250
    edm_steps: int = 75
    s_churn: float = 0.0
    s_min: float = 0.0
    s_max: float = float("inf")
    s_noise: float = 1.0

    def to_dict(self) -> dict:
        return {
            "ddpm_steps": self.ddpm_steps,
            "edm_steps": self.edm_steps,
            "s_churn": self.s_churn,
            "s_min": self.s_min,
            "s_max": self.s_max if self.s_max != float("inf") else None,
            "s_noise": self.s_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("s_max") is None:
            d["s_max"] = float("inf")
        return cls(**d)


@dataclass
class RunConfig:
    """Everything one run needs, round-trippable through JSON."""

    name: str
    stack: StackConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dataset: DatasetSpec | None = None
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stack": self.stack.to_dict(),
            "train": self.train.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "sampler": self.sampler.to_dict(),
            "dataset": self.dataset.to_dict() if self.dataset else None,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"name", "stack", "train", "diffusion", "sampler", "dataset", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(
            name=d["name"],
            stack=StackConfig.from_dict(d["stack"]),
            train=TrainConfig.from_dict(d.get("train", {})),
            diffusion=DiffusionConfig.from_dict(d.get("diffusion", {})),
            sampler=SamplerConfig.from_dict(d.get("sampler", {})),
            dataset=DatasetSpec.from_dict(d["dataset"]) if d.get("dataset") else None,
            out_dir=d.get("out_dir", "runs/default"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.loads(f.read())


def _bricks(rows: list[tuple[int, int, int, int, int]]) -> list[BrickSpec]:
    return [BrickSpec(r=r, l=l, d=d, depth=depth, heads=heads) for r, l, d, depth, heads in rows]


# (r, l, d, depth, heads) ladders for the three published sizes
_SIZES_64 = {
    "s": [(4, 2, 384, 2, 6), (16, 8, 384, 4, 6), (64, 2, 384, 6, 6)],
    "l": [(4, 2, 1024, 4, 16), (16, 8, 1024, 8, 16), (64, 2, 1024, 12, 16)],
    "xl": [(4, 4, 1152, 4, 16), (16, 8, 1152, 12, 16), (64, 2, 1152, 14, 16)],
}
_SIZES_32 = {
    "s": [(4, 2, 384, 2, 6), (8, 4, 384, 4, 6), (32, 2, 384, 6, 6)],
    "l": [(4, 2, 1024, 4, 16), (8, 4, 1024, 8, 16), (32, 2, 1024, 12, 16)],
    "xl": [(4, 4, 1152, 4, 16), (8, 4, 1152, 12, 16), (32, 2, 1152, 14, 16)],
}
_FRACTIONS = {"s": 0.5, "l": 0.75, "xl": 0.75}


def _published(name: str, size: str, res: int, table: dict) -> RunConfig:
    frac = _FRACTIONS[size]
    stack = StackConfig(
        bricks=_bricks(table[size]),
        mode="pg",
        resolution=(res, res, 3),
        num_classes=1000,
        patch_fraction=[frac, frac, 1.0],
    )
    return RunConfig(name=name, stack=stack, out_dir=f"runs/{name}")


def _mini(name: str, mode: str) -> RunConfig:
    rows = [(4, 2, 64, 1, 2), (8, 4, 64, 2, 2), (16, 2, 64, 2, 2)]
    fractions = [0.5, 0.5, 1.0]
    if mode == "pr":
        rows = rows[::-1]
        fractions = fractions[::-1]
    stack = StackConfig(
        bricks=_bricks(rows),
        mode=mode,
        resolution=(16, 16, 3),
        num_classes=2,
        patch_fraction=fractions,
    )
    train = TrainConfig(
        lr=1e-4,
        batch_size=16,
        total_images=80_000,
        ema_decay=0.999,
        seed=0,
        checkpoint_every=0,
        log_every=100,
    )
    dataset = DatasetSpec(kind="synthetic-blobs", resolution=(16, 16, 3), num_classes=2)
    return RunConfig(
        name=name, stack=stack, train=train, dataset=dataset, out_dir=f"runs/{name}"
    )


def reference_config(name: str) -> RunConfig:
    """Shipped configurations, constructible by name."""
    key = name.lower()
    if key in ("lego-s", "lego-l", "lego-xl"):
        return _published(key, key.split("-")[1], 64, _SIZES_64)
    if key in ("lego-s-32", "lego-l-32", "lego-xl-32"):
        return _published(key, key.split("-")[1], 32, _SIZES_32)
    if key == "dit-l-baseline":
        stack = StackConfig(
            bricks=_bricks([(64, 2, 1024, 24, 16)]),
            mode="pg",
            resolution=(64, 64, 3),
            num_classes=1000,
        )
        return RunConfig(name=key, stack=stack, out_dir=f"runs/{key}")
    if key == "lego-s-u":
        # U-shaped stack: sizes fall to the smallest brick and climb back up
        rows = [
            (64, 2, 384, 3, 6), (16, 8, 384, 2, 6), (4, 2, 384, 2, 6),
            (16, 8, 384, 2, 6), (64, 2, 384, 3, 6),
        ]
        stack = StackConfig(
            bricks=_bricks(rows),
            mode="u",
            resolution=(64, 64, 3),
            num_classes=1000,
            patch_fraction=[1.0, 0.5, 0.5, 0.5, 1.0],
        )
        return RunConfig(name=key, stack=stack, out_dir=f"runs/{key}")
    if key == "lego-s-mini-pg":
        return _mini(key, "pg")
    if key == "lego-s-mini-pr":
        return _mini(key, "pr")
    raise ConfigError(f"unknown reference config {name!r}")


REFERENCE_NAMES = (
    "lego-s",
    "lego-l",
    "lego-xl",
    "lego-s-32",
    "lego-l-32",
    "lego-xl-32",
    "lego-s-u",
    "dit-l-baseline",
    "lego-s-mini-pg",
    "lego-s-mini-pr",
)
