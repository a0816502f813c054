"""Non-overlapping patch decomposition, coordinate grids, and patch subsampling.

Images are channel-first tensors ``(..., C, H, W)``. Patch coordinates
``(i, j)`` are 1-based at the API boundary: patch (i, j) covers pixel rows
(i-1)*r+1 .. i*r and columns (j-1)*r+1 .. j*r in 1-based pixel indexing.
Internally everything is stored 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError


def coord_grid(H: int, W: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Normalized pixel coordinates, shape (2, H, W) with components in [-1, 1].

    Channel 0 is the row coordinate 2p/(H-1) - 1, channel 1 the column
    coordinate 2q/(W-1) - 1; a length-1 axis maps to 0.
    """
    if H < 1 or W < 1:
        raise ConfigError(f"H and W must be >= 1, got H={H}, W={W}")
    rows = torch.linspace(-1.0, 1.0, H, dtype=torch.float64) if H > 1 else torch.zeros(1, dtype=torch.float64)
    cols = torch.linspace(-1.0, 1.0, W, dtype=torch.float64) if W > 1 else torch.zeros(1, dtype=torch.float64)
    grid = torch.stack(torch.meshgrid(rows, cols, indexing="ij"))
    return grid.to(dtype)


@dataclass(frozen=True)
class PatchGrid:
    """Partition of an H x W canvas into non-overlapping r x r patches."""

    H: int
    W: int
    r: int

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"brick size must be >= 1, got r={self.r}")
        if self.H % self.r or self.W % self.r:
            raise ShapeError(f"r must divide the canvas: H={self.H}, W={self.W}, r={self.r}")

    @property
    def rows(self) -> int:
        return self.H // self.r

    @property
    def cols(self) -> int:
        return self.W // self.r

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    def indices(self) -> list[tuple[int, int]]:
        """All 1-based (i, j) patch coordinates in row-major order."""
        return [(i, j) for i in range(1, self.rows + 1) for j in range(1, self.cols + 1)]

    def flat_index(self, i: int, j: int) -> int:
        if not (1 <= i <= self.rows and 1 <= j <= self.cols):
            raise IndexError(f"patch ({i}, {j}) outside grid {self.rows} x {self.cols}")
        return (i - 1) * self.cols + (j - 1)


def partition(x: torch.Tensor, r: int) -> torch.Tensor:
    """Split (..., C, H, W) into patches, returning (..., rows*cols, C, r, r).

    Patches appear in row-major (i, j) order; assemble() is the exact inverse.
    """
    if x.ndim < 3:
        raise ShapeError(f"expected (..., C, H, W), got shape {tuple(x.shape)}")
    *lead, C, H, W = x.shape
    grid = PatchGrid(H, W, r)
    gh, gw = grid.rows, grid.cols
    x = x.reshape(*lead, C, gh, r, gw, r)
    # (..., C, gh, r, gw, r) -> (..., gh, gw, C, r, r)
    perm = list(range(len(lead))) + [d + len(lead) for d in (1, 3, 0, 2, 4)]
    x = x.permute(*perm)
    return x.reshape(*lead, gh * gw, C, r, r)


def assemble(patches: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`partition`: (..., rows*cols, C, r, r) -> (..., C, H, W)."""
    if patches.ndim < 4:
        raise ShapeError(f"expected (..., N, C, r, r), got shape {tuple(patches.shape)}")
    *lead, N, C, r, r2 = patches.shape
    if r != r2:
        raise ShapeError(f"patches must be square, got {r} x {r2}")
    grid = PatchGrid(H, W, r)
    if N != grid.num_patches:
        raise ShapeError(f"got {N} patches, grid {grid.rows} x {grid.cols} needs {grid.num_patches}")
    gh, gw = grid.rows, grid.cols
    x = patches.reshape(*lead, gh, gw, C, r, r)
    # (..., gh, gw, C, r, r) -> (..., C, gh, r, gw, r)
    perm = list(range(len(lead))) + [d + len(lead) for d in (2, 0, 3, 1, 4)]
    x = x.permute(*perm)
    return x.reshape(*lead, C, H, W)


def patch_at(x: torch.Tensor, grid: PatchGrid, i: int, j: int) -> torch.Tensor:
    """Slice patch (i, j) (1-based) out of (..., C, H, W)."""
    n = grid.flat_index(i, j)
    r0 = (n // grid.cols) * grid.r
    c0 = (n % grid.cols) * grid.r
    return x[..., r0 : r0 + grid.r, c0 : c0 + grid.r]


def sample_patch_indices(grid: PatchGrid, fraction: float, rng: torch.Generator) -> torch.Tensor:
    """Uniform subset of flat patch indices, without replacement.

    Subset size is max(1, round-half-up(fraction * num_patches)); the draw is
    deterministic given the generator state.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got fraction={fraction}")
    n = grid.num_patches
    count = max(1, int(fraction * n + 0.5))
    if count >= n:
        return torch.arange(n)
    perm = torch.randperm(n, generator=rng)
    return perm[:count].sort().values


def patch_mask_to_pixels(mask: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Expand a flat per-patch boolean mask (num_patches,) to (H, W)."""
    if mask.shape != (grid.num_patches,):
        raise ShapeError(f"mask shape {tuple(mask.shape)} != ({grid.num_patches},)")
    m = mask.reshape(grid.rows, grid.cols)
    return m.repeat_interleave(grid.r, dim=0).repeat_interleave(grid.r, dim=1)


def fill_missing(
    prev_pred: torch.Tensor, mask: torch.Tensor, x0: torch.Tensor, grid: PatchGrid
) -> torch.Tensor:
    """Complete a partial prediction: prev_pred where mask marks produced patches, x0 elsewhere.

    ``mask`` is a flat per-patch boolean vector over ``grid``.
    """
    if prev_pred.shape != x0.shape:
        raise ShapeError(f"prev_pred shape {tuple(prev_pred.shape)} != x0 shape {tuple(x0.shape)}")
    if prev_pred.shape[-2:] != (grid.H, grid.W):
        raise ShapeError(
            f"tensor spatial extent {tuple(prev_pred.shape[-2:])} != grid ({grid.H}, {grid.W})"
        )
    pix = patch_mask_to_pixels(mask.bool(), grid).to(prev_pred.device)
    return torch.where(pix, prev_pred, x0)
