"""
Masked-autoencoder branch operating on grid tokens of the U-Net feature map.

The encoder sees only the visible grid cells. Each decoder block cross-attends
from all N grid tokens to the latent of one encoder block (a reversed uniform
mapping), then self-attends and applies an MLP. The token matrix is reshaped
back onto the grid and upsampled with transposed convolutions to the
feature-map resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class MAEConfig:
    d1: int = 384
    enc_blocks: int = 12
    enc_heads: int = 6
    d2: int = 512
    dec_blocks: int = 8
    dec_heads: int = 16
    mlp_ratio: float = 4.0
    use_timestep: bool = False
    block_map: Optional[tuple[int, ...]] = None

    def validate(self) -> None:
        if self.d1 % self.enc_heads:
            raise ConfigError(f"mae.d1={self.d1} must be divisible by mae.enc_heads={self.enc_heads}")
        if self.d2 % self.dec_heads:
            raise ConfigError(f"mae.d2={self.d2} must be divisible by mae.dec_heads={self.dec_heads}")
        if not 1 <= self.dec_blocks <= self.enc_blocks:
            raise ConfigError(
                f"mae.dec_blocks={self.dec_blocks} must lie in [1, enc_blocks={self.enc_blocks}]"
            )
        if self.block_map is not None:
            if len(self.block_map) != self.dec_blocks:
                raise ConfigError("mae.block_map must list one encoder block per decoder block")
            if any(not 1 <= e <= self.enc_blocks for e in self.block_map):
                raise ConfigError(f"mae.block_map entries must lie in [1, {self.enc_blocks}]")

    def mapping(self) -> list[int]:
        if self.block_map is not None:
            return list(self.block_map)
        return block_mapping(self.dec_blocks, self.enc_blocks)


def block_mapping(dec_blocks: int, enc_blocks: int) -> list[int]:
    """1-indexed encoder block attended by each decoder block (deepest first)."""
    if dec_blocks > enc_blocks:
        raise ConfigError(f"dec_blocks={dec_blocks} exceeds enc_blocks={enc_blocks}")
    return [enc_blocks - (j * enc_blocks) // dec_blocks for j in range(dec_blocks)]


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2D sine-cosine position embeddings, row-major, shape ``(gh*gw, dim)``.

    Half the channels encode the row index and half the column index.
    """
    if dim % 4:
        raise ConfigError(f"position embedding dim must be divisible by 4, got {dim}")

    def encode_1d(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb = np.concatenate(
        [encode_1d(dim // 2, rows.reshape(-1)), encode_1d(dim // 2, cols.reshape(-1))], axis=1
    )
    return emb.astype(np.float32)


def patchify(f: torch.Tensor, cell: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, C*cell*cell)`` with row-major grid order."""
    B, C, H, W = f.shape
    if H % cell or W % cell:
        raise ConfigError(f"feature map {H}x{W} not divisible by grid cell {cell}")
    x = f.reshape(B, C, H // cell, cell, W // cell, cell)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, (H // cell) * (W // cell), C * cell * cell)


class Attention(nn.Module):
    """Multi-head attention; ``context`` switches it to cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, N, D = x.shape
        ctx = x if context is None else context
        h = self.heads
        q = self.q(x).reshape(B, N, h, D // h).transpose(1, 2)
        k, v = self.kv(ctx).reshape(B, ctx.shape[1], 2, h, D // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class ViTBlock(nn.Module):
    """Pre-norm transformer block: self-attention then MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossViTBlock(nn.Module):
    """Decoder block: cross-attention to an encoder latent, self-attention, MLP."""

    def __init__(self, dim: int, heads: int, ctx_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ctx_norm = nn.LayerNorm(ctx_dim)
        self.ctx_proj = nn.Linear(ctx_dim, dim)
        self.norm_x = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.block = ViTBlock(dim, heads, mlp_ratio)

    def forward(self, x, latent):
        ctx = self.ctx_proj(self.ctx_norm(latent))
        x = x + self.cross(self.norm_x(x), context=ctx)
        return self.block(x)


class GridTokenizer(nn.Module):
    """Linear projection of flattened grid cells plus fixed position embeddings."""

    def __init__(self, channels: int, cell: int, dim: int, grid_shape: tuple[int, int]):
        super().__init__()
        self.cell = cell
        self.proj = nn.Linear(channels * cell * cell, dim)
        nn.init.zeros_(self.proj.bias)
        self.register_buffer("pos", torch.from_numpy(sincos_pos_embed_2d(dim, *grid_shape)), persistent=False)

    def forward(self, f: torch.Tensor, index: Optional[torch.Tensor] = None) -> torch.Tensor:
        cells = patchify(f, self.cell)
        if index is None:
            return self.proj(cells) + self.pos
        # gather before projecting so masked cells never enter the computation
        gathered = torch.gather(cells, 1, index[..., None].expand(-1, -1, cells.shape[-1]))
        return self.proj(gathered) + self.pos[index]


class Upsampler(nn.Module):
    """Reshape ``(B, N, d2)`` onto the grid and upsample by ``cell`` with stride-2 deconvs."""

    def __init__(self, d2: int, out_channels: int, cell: int, grid_shape: tuple[int, int]):
        super().__init__()
        steps = int(round(math.log2(cell)))
        if cell < 2 or 2**steps != cell:
            raise ConfigError(f"feature grid cell r/4={cell} must be a power of two >= 2")
        self.grid_shape = grid_shape
        layers: list[nn.Module] = []
        ch = d2
        for i in range(steps):
            nxt = out_channels if i == steps - 1 else max(ch // 2, out_channels)
            deconv = nn.ConvTranspose2d(ch, nxt, kernel_size=2, stride=2)
            nn.init.zeros_(deconv.bias)
            layers.append(deconv)
            if i < steps - 1:
                layers.append(nn.GELU())
            ch = nxt
        self.net = nn.Sequential(*layers)

    def to_grid(self, z: torch.Tensor) -> torch.Tensor:
        B, N, D = z.shape
        gh, gw = self.grid_shape
        if N != gh * gw:
            raise ConfigError(f"token count {N} does not match grid {gh}x{gw}")
        return z.transpose(1, 2).reshape(B, D, gh, gw)

    def forward(self, z):
        return self.net(self.to_grid(z))


class MAEBranch(nn.Module):
    """Visible-only encoder, cross-attending decoder, and upsampler.

    ``forward(f, visible_idx)`` maps a ``(B, C, H/4, W/4)`` feature map to a
    tensor of the same shape that is added to ``f`` by the U-Net.
    """

    def __init__(self, cfg: MAEConfig, channels: int, feature_hw: tuple[int, int], cell: int,
                 time_dim: Optional[int] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        fh, fw = feature_hw
        if fh % cell or fw % cell:
            raise ConfigError(f"feature map {fh}x{fw} not divisible by grid cell {cell}")
        grid = (fh // cell, fw // cell)
        self.grid_shape = grid
        self.n_tokens = grid[0] * grid[1]
        self.mapping = cfg.mapping()
        self.enc_tokens = GridTokenizer(channels, cell, cfg.d1, grid)
        self.dec_tokens = GridTokenizer(channels, cell, cfg.d2, grid)
        self.encoder = nn.ModuleList(ViTBlock(cfg.d1, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_blocks))
        self.decoder = nn.ModuleList(
            CrossViTBlock(cfg.d2, cfg.dec_heads, cfg.d1, cfg.mlp_ratio) for _ in range(cfg.dec_blocks)
        )
        self.dec_norm = nn.LayerNorm(cfg.d2)
        self.time_proj = nn.Linear(time_dim, cfg.d2) if (cfg.use_timestep and time_dim) else None
        self.upsample = Upsampler(cfg.d2, channels, cell, grid)

    def tokenize(self, f, which: str = "encoder", index=None):
        tok = self.enc_tokens if which == "encoder" else self.dec_tokens
        return tok(f, index)

    def encode_visible(self, f: torch.Tensor, visible_idx: torch.Tensor) -> list[torch.Tensor]:
        if visible_idx.shape[-1] == 0:
            raise ConfigError("no visible grid tokens to condition on")
        x = self.enc_tokens(f, visible_idx)
        latents = []
        for blk in self.encoder:
            x = blk(x)
            latents.append(x)
        return latents

    def decode(self, f: torch.Tensor, latents: Sequence[torch.Tensor], t_emb: Optional[torch.Tensor] = None):
        if len(latents) != self.cfg.enc_blocks:
            raise ConfigError(f"expected {self.cfg.enc_blocks} encoder latents, got {len(latents)}")
        z = self.dec_tokens(f)
        if self.time_proj is not None and t_emb is not None:
            z = z + self.time_proj(t_emb)[:, None, :]
        for blk, e in zip(self.decoder, self.mapping):
            z = blk(z, latents[e - 1])
        return self.dec_norm(z)

    def forward(self, f, visible_idx, t_emb=None):
        if visible_idx.shape[-1] == 0:
            return torch.zeros_like(f)
        latents = self.encode_visible(f, visible_idx)
        return self.upsample(self.decode(f, latents, t_emb))
