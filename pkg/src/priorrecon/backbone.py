"""Patch embedding and the alternating frame/global attention transformer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig


class ShapeError(ValueError):
    pass


class PatchEmbed(nn.Module):
    """Conv patchifier plus a learned additive 2D position code (row + column tables)."""

    def __init__(self, dim: int, patch_size: int, max_grid: int = 64):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.row_pos = nn.Parameter(torch.randn(max_grid, dim) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(max_grid, dim) * 0.02)

    def grid(self, height: int, width: int) -> tuple[int, int]:
        P = self.patch_size
        if height % P or width % P:
            raise ShapeError(f"image size {height}x{width} is not divisible by patch size {P}")
        hp, wp = height // P, width // P
        if hp > self.row_pos.shape[0] or wp > self.col_pos.shape[0]:
            raise ShapeError(f"token grid {hp}x{wp} exceeds the positional table")
        return hp, wp

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) -> (N, Hp*Wp, D)."""
        hp, wp = self.grid(*images.shape[-2:])
        x = self.proj(images).flatten(2).transpose(1, 2)
        pos = (self.row_pos[:hp, None, :] + self.col_pos[None, :wp, :]).reshape(hp * wp, -1)
        return x + pos


def make_norm(kind: str, dim: int) -> nn.Module:
    return nn.LayerNorm(dim) if kind == "layer" else nn.Identity()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, S, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, S, D))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, norm: str = "layer"):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = make_norm(norm, dim)
        self.attn = Attention(dim, heads)
        self.norm2 = make_norm(norm, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class BackboneOutput:
    cam_tokens: torch.Tensor        # (N, D)
    patch_tokens: torch.Tensor      # (N, L, D), last layer
    levels: list                    # intermediate (N, L, D) maps for the dense heads


class AlternatingBackbone(nn.Module):
    """``depth`` pairs of (frame-wise, global) self-attention blocks.

    View 0 is the reference: its camera slot gets a distinct learned marker,
    every other view shares one marker, so only the reference is singled out.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.token_dim
        self.dim = D
        self.ref_slot = nn.Parameter(torch.randn(2, D) * 0.02)    # cam slot: [reference, other]
        self.intr_slot = nn.Parameter(torch.randn(D) * 0.02)
        self.frame_blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio, cfg.norm) for _ in range(cfg.depth))
        self.global_blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio, cfg.norm) for _ in range(cfg.depth))
        self.out_norm = make_norm(cfg.norm, D)
        self.level_ids = _level_ids(cfg.depth)

    def forward(self, seq: torch.Tensor) -> BackboneOutput:
        """``seq``: (N, 2 + L, D) prompted token sequences, one row per view."""
        if seq.ndim != 3 or seq.shape[-1] != self.dim:
            raise ShapeError(f"expected (N, S, {self.dim}) tokens, got {tuple(seq.shape)}")
        N, S, D = seq.shape
        marker = torch.cat([self.ref_slot[:1], self.ref_slot[1:].expand(N - 1, D)], 0)
        x = torch.cat([seq[:, :1] + marker[:, None], seq[:, 1:2] + self.intr_slot, seq[:, 2:]], 1)
        levels = []
        for i, (fb, gb) in enumerate(zip(self.frame_blocks, self.global_blocks)):
            x = fb(x)
            x = gb(x.reshape(1, N * S, D)).reshape(N, S, D)
            if i in self.level_ids:
                levels.append(x[:, 2:])
        x = self.out_norm(x)
        return BackboneOutput(x[:, 0], x[:, 2:], levels)


def _level_ids(depth: int, n_levels: int = 4) -> list:
    """Block indices whose outputs feed the dense heads (repeats allowed for shallow nets)."""
    return sorted({round((depth - 1) * k / (n_levels - 1)) for k in range(n_levels)})


def expand_levels(levels: list, n_levels: int = 4) -> list:
    if len(levels) >= n_levels:
        return levels[-n_levels:]
    idx = [round((len(levels) - 1) * k / (n_levels - 1)) for k in range(n_levels)]
    return [levels[i] for i in idx]
