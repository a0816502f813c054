"""Patch-level refinement bricks: tokenizer, transformer trunk, linear decoder.

A brick consumes channel-concatenated patch input [noisy patch, previous
prediction, coordinate pair], splits it into (r/l)^2 local receptive fields,
projects each field to one token, runs DiT-style blocks conditioned through
adaLN-zero, and decodes back to an r x r patch. All modulation gates and the
final decoder are zero-initialized, so a fresh brick outputs exactly zero and
every block is the identity on its token sequence.

Bricks whose attention span is a single token skip the attention branch
entirely: softmax over one key makes it a plain linear map, so only the MLP
branch (and its modulation triple) is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

PATCH_BRICK = "patch-brick"
IMAGE_BRICK = "image-brick"


@dataclass(frozen=True)
class BrickSpec:
    """Architecture of one brick."""

    r: int              # brick size: edge length of consumed/emitted patches
    l: int              # local receptive field edge; attention span = (r/l)^2
    d: int              # token embedding dimension
    depth: int          # number of transformer blocks
    heads: int          # attention heads
    mlp_ratio: int = 4
    kind: str = PATCH_BRICK

    def __post_init__(self):
        if self.r < 1 or self.l < 1:
            raise ConfigError(f"r and l must be >= 1, got r={self.r}, l={self.l}")
        if self.r % self.l:
            raise ConfigError(f"l must divide r, got r={self.r}, l={self.l}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got depth={self.depth}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d must be divisible by heads, got d={self.d}, heads={self.heads}")
        if self.kind not in (PATCH_BRICK, IMAGE_BRICK):
            raise ConfigError(f"kind must be {PATCH_BRICK!r} or {IMAGE_BRICK!r}, got {self.kind!r}")

    @property
    def span(self) -> int:
        """Token count per patch."""
        return (self.r // self.l) ** 2


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ConditioningEmbedder(nn.Module):
    """Shared (time, class) embedder for all bricks in a stack.

    One learned row per class plus a dedicated null row (index num_classes)
    used both for classifier-free training and as the unconditional branch at
    sampling time. A separate learned vector flags "no previous prediction"
    for bricks that receive the empty sentinel.
    """

    def __init__(self, dim: int, num_classes: int, freq_dim: int = 256):
        super().__init__()
        if dim < 1 or num_classes < 0:
            raise ConfigError(f"bad embedder sizes dim={dim}, num_classes={num_classes}")
        self.dim = dim
        self.num_classes = num_classes
        self.freq_dim = freq_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim)
        )
        self.class_table = nn.Embedding(num_classes + 1, dim)
        self.no_prev = nn.Parameter(torch.zeros(dim))

    @property
    def null_class(self) -> int:
        return self.num_classes

    def forward(
        self, t: torch.Tensor, class_ids: torch.Tensor | None, no_prev: bool = False
    ) -> torch.Tensor:
        ref = self.no_prev
        freq = timestep_embedding(t.to(ref.device), self.freq_dim).to(ref.dtype)
        c = self.time_mlp(freq)
        if class_ids is None:
            class_ids = torch.full((t.shape[0],), self.null_class, dtype=torch.long, device=ref.device)
        if (class_ids < 0).any() or (class_ids > self.num_classes).any():
            raise ConfigError(
                f"class ids must lie in [0, {self.num_classes}], got range "
                f"[{class_ids.min().item()}, {class_ids.max().item()}]"
            )
        c = c + self.class_table(class_ids.long())
        if no_prev:
            c = c + self.no_prev
        return c


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def _zero_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class Block(nn.Module):
    """Transformer block with adaLN-zero conditioning.

    With span 1 the attention branch is omitted (see module docstring); the
    modulation head then emits 3 chunks instead of 6.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, cond_dim: int, use_attn: bool):
        super().__init__()
        self.use_attn = use_attn
        if use_attn:
            self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
            self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = dim * mlp_ratio
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim)
        )
        chunks = 6 if use_attn else 3
        self.adaLN = nn.Sequential(nn.SiLU(), _zero_linear(nn.Linear(cond_dim, chunks * dim)))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        mods = self.adaLN(c)
        if self.use_attn:
            s_msa, sc_msa, g_msa, s_mlp, sc_mlp, g_mlp = mods.chunk(6, dim=1)
            x = x + g_msa.unsqueeze(1) * self.attn(_modulate(self.norm1(x), s_msa, sc_msa))
        else:
            s_mlp, sc_mlp, g_mlp = mods.chunk(3, dim=1)
        x = x + g_mlp.unsqueeze(1) * self.mlp(_modulate(self.norm2(x), s_mlp, sc_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_per_token: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN = nn.Sequential(nn.SiLU(), _zero_linear(nn.Linear(cond_dim, 2 * dim)))
        self.decoder = _zero_linear(nn.Linear(dim, out_per_token))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN(c).chunk(2, dim=1)
        return self.decoder(_modulate(self.norm(x), shift, scale))


class LegoBrick(nn.Module):
    """One refinement brick mapping (N, C_in, r, r) patches to (N, C_out, r, r)."""

    def __init__(self, spec: BrickSpec, in_channels: int, out_channels: int, cond_dim: int):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = out_channels
        field = spec.l * spec.l * in_channels
        self.embed = nn.Linear(field, spec.d)
        self.pos = nn.Parameter(torch.zeros(spec.span, spec.d))
        nn.init.normal_(self.pos, std=0.02)
        use_attn = spec.span > 1
        self.blocks = nn.ModuleList(
            Block(spec.d, spec.heads, spec.mlp_ratio, cond_dim, use_attn) for _ in range(spec.depth)
        )
        self.final = FinalLayer(spec.d, spec.l * spec.l * out_channels, cond_dim)

    def tokenize(self, patch: torch.Tensor) -> torch.Tensor:
        """(N, C_in, r, r) -> (N, span, d): flatten each l x l field, project, add positions."""
        r, l = self.spec.r, self.spec.l
        N, C, h, w = patch.shape
        if C != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {C}")
        if (h, w) != (r, r):
            raise ShapeError(f"expected {r} x {r} patches, got {h} x {w}")
        g = r // l
        x = patch.reshape(N, C, g, l, g, l).permute(0, 2, 4, 1, 3, 5).reshape(N, g * g, C * l * l)
        return self.embed(x) + self.pos

    def detokenize(self, tokens: torch.Tensor) -> torch.Tensor:
        """(N, span, l*l*C_out) -> (N, C_out, r, r)."""
        r, l = self.spec.r, self.spec.l
        N = tokens.shape[0]
        g = r // l
        x = tokens.reshape(N, g, g, self.out_channels, l, l).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(N, self.out_channels, r, r)

    def forward(self, patch: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        x = self.tokenize(patch)
        for block in self.blocks:
            x = block(x, cond)
        return self.detokenize(self.final(x, cond))


def brick_forward(
    xt_patch: torch.Tensor,
    prev_patch: torch.Tensor | None,
    coords: torch.Tensor,
    cond: torch.Tensor,
    brick: LegoBrick,
) -> torch.Tensor:
    """Run one brick on a batch of patches.

    ``prev_patch`` None encodes the empty sentinel for the bottom brick: the
    previous-prediction channels are zeros (the matching "no previous" flag is
    the caller's responsibility when building ``cond``).
    """
    if prev_patch is None:
        prev_patch = torch.zeros_like(xt_patch)
    for name, t in (("prev", prev_patch), ("coords", coords)):
        if t.shape[-2:] != xt_patch.shape[-2:]:
            raise ShapeError(
                f"{name} spatial extent {tuple(t.shape[-2:])} != patch {tuple(xt_patch.shape[-2:])}"
            )
    stacked = torch.cat([xt_patch, prev_patch, coords], dim=1)
    return brick(stacked, cond)
