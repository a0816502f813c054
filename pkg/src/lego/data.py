"""Dataset ingestion: a seeded synthetic generator and a class-per-directory loader.

Both datasets expose ``sample_batch(n, rng) -> (images, labels)`` with images
shaped (n, C, H, W) in [-1, 1] and integer labels; draws are deterministic
given the generator state, which is what lets the trainer checkpoint and
resume mid-stream.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import torch

from .errors import ConfigError

# class -> blob RGB; wraps around for more classes
DEFAULT_PALETTE = [
    (1.0, -0.6, -0.6),   # red
    (-0.6, -0.6, 1.0),   # blue
    (-0.6, 1.0, -0.6),   # green
    (1.0, 1.0, -0.6),    # yellow
    (1.0, -0.6, 1.0),    # magenta
    (-0.6, 1.0, 1.0),    # cyan
]
BACKGROUND = (-0.85, -0.85, -0.85)


@dataclass
class DatasetSpec:
    kind: str                               # "synthetic-blobs" | "image-dir"
    resolution: tuple[int, int, int]
    num_classes: int
    blob_count: int = 2                     # blobs for class 0; class c adds c more
    palette: list | None = None
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic-blobs", "image-dir"):
            raise ConfigError(f"dataset kind must be synthetic-blobs or image-dir, got {self.kind!r}")
        H, W, C = self.resolution
        if self.kind == "synthetic-blobs":
            if H < 8 or W < 8:
                raise ConfigError(f"blob resolution must be >= 8, got {H} x {W}")
            if self.num_classes < 1:
                raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
            if C != 3:
                raise ConfigError(f"blob generator emits RGB, got C={C}")
        if self.kind == "image-dir" and not self.path:
            raise ConfigError("image-dir dataset needs a path")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "resolution": list(self.resolution),
            "num_classes": self.num_classes,
            "blob_count": self.blob_count,
            "palette": self.palette,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {"kind", "resolution", "num_classes", "blob_count", "palette", "path"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        d = dict(d)
        d["resolution"] = tuple(d["resolution"])
        if d.get("palette") is not None:
            d["palette"] = [tuple(p) for p in d["palette"]]
        return cls(**d)


class BlobDataset:
    """Class-conditioned soft blobs on a fixed dark background.

    Class c draws blob_count + c blobs in the class's palette color with
    small per-image color jitter; pixel values stay in [-1, 1]. The stream
    is infinite and fully determined by the caller's generator.
    """

    def __init__(self, spec: DatasetSpec):
        if spec.kind != "synthetic-blobs":
            raise ConfigError(f"BlobDataset needs a synthetic-blobs spec, got {spec.kind!r}")
        self.spec = spec
        palette = spec.palette or DEFAULT_PALETTE
        self.palette = [
            torch.tensor(palette[c % len(palette)], dtype=torch.float32).reshape(3, 1, 1)
            for c in range(spec.num_classes)
        ]
        H, W, _ = spec.resolution
        ys = torch.arange(H, dtype=torch.float32).reshape(H, 1)
        xs = torch.arange(W, dtype=torch.float32).reshape(1, W)
        self._ys, self._xs = ys, xs

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def render(self, labels: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
        """Vectorized batch render: one blob pass at a time across the batch."""
        H, W, _ = self.spec.resolution
        B = labels.shape[0]
        img = torch.tensor(BACKGROUND, dtype=torch.float32).reshape(1, 3, 1, 1).repeat(B, 1, H, W)
        color = torch.stack([self.palette[int(l)] for l in labels])        # (B, 3, 1, 1)
        jitter = (torch.rand(B, 3, 1, 1, generator=rng) - 0.5) * 0.2
        paint = color + jitter
        counts = self.spec.blob_count + labels.reshape(B, 1, 1, 1)
        max_blobs = int(counts.max())
        for i in range(max_blobs):
            cy = torch.rand(B, 1, 1, 1, generator=rng) * (H - 1)
            cx = torch.rand(B, 1, 1, 1, generator=rng) * (W - 1)
            radius = 1.5 + torch.rand(B, 1, 1, 1, generator=rng) * (min(H, W) / 4.0)
            dist2 = (self._ys - cy) ** 2 + (self._xs - cx) ** 2
            mass = torch.exp(-dist2 / (2.0 * radius**2)) * (i < counts)
            img = img + mass * (paint - img)
        return img.clamp(-1.0, 1.0)

    def sample_one(self, label: int, rng: torch.Generator) -> torch.Tensor:
        return self.render(torch.tensor([label]), rng)[0]

    def sample_batch(self, n: int, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        labels = torch.randint(0, self.spec.num_classes, (n,), generator=rng)
        return self.render(labels, rng), labels

    def class_mean_color(self, label: int, n: int, rng: torch.Generator) -> torch.Tensor:
        """Monte-Carlo mean RGB of one class, used as a probe reference."""
        labels = torch.full((n,), label, dtype=torch.long)
        return self.render(labels, rng).mean(dim=(0, 2, 3))


def make_synthetic_blobs(spec: DatasetSpec) -> BlobDataset:
    return BlobDataset(spec)


def _load_image(path: str, resolution: tuple[int, int, int]) -> torch.Tensor:
    from PIL import Image

    H, W, _ = resolution
    with Image.open(path) as im:
        im = im.convert("RGB")
        side = min(im.size)
        left = (im.width - side) // 2
        top = (im.height - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if (im.height, im.width) != (H, W):
            im = im.resize((W, H), Image.BILINEAR)
        arr = torch.frombuffer(bytearray(im.tobytes()), dtype=torch.uint8)
    arr = arr.reshape(H, W, 3).permute(2, 0, 1).float()
    return arr / 127.5 - 1.0


class ImageDirDataset:
    """One subdirectory per class (sorted order defines the label index)."""

    def __init__(self, spec: DatasetSpec):
        if spec.kind != "image-dir":
            raise ConfigError(f"ImageDirDataset needs an image-dir spec, got {spec.kind!r}")
        self.spec = spec
        root = spec.path
        classes = sorted(
            d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
        )
        if not classes:
            raise ConfigError(f"{root}: no class subdirectories")
        self.images: list[torch.Tensor] = []
        self.labels: list[int] = []
        for idx, cls in enumerate(classes):
            count = 0
            for fname in sorted(os.listdir(os.path.join(root, cls))):
                fpath = os.path.join(root, cls, fname)
                try:
                    img = _load_image(fpath, spec.resolution)
                except Exception as exc:
                    warnings.warn(f"skipping unreadable image {fpath}: {exc}")
                    continue
                self.images.append(img)
                self.labels.append(idx)
                count += 1
            if count == 0:
                raise ConfigError(f"class directory {cls!r} has no readable images")
        self.class_names = classes

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.images)

    def sample_batch(self, n: int, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.randint(0, len(self.images), (n,), generator=rng)
        imgs = torch.stack([self.images[int(i)] for i in idx])
        labels = torch.tensor([self.labels[int(i)] for i in idx])
        return imgs, labels


def ingest_image_dir(path: str, resolution: tuple[int, int, int]) -> ImageDirDataset:
    spec = DatasetSpec(kind="image-dir", resolution=resolution, num_classes=0, path=path)
    return ImageDirDataset(spec)


def make_dataset(spec: DatasetSpec):
    if spec.kind == "synthetic-blobs":
        return BlobDataset(spec)
    return ImageDirDataset(spec)
