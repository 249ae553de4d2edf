"""
Diffusion U-Net that predicts the clean image from a partially noised one.

Two downsampling levels bring the input to ``H/4 x W/4``; there the MAE branch
output is added to the encoder feature map before the bottleneck and decoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .mae import MAEBranch, MAEConfig
from .patching import PatchPlan, visible_grid_table


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2)
    res_blocks_per_level: int = 2
    attention_resolutions: Optional[tuple[int, ...]] = None
    attention_heads: int = 4
    time_embed_dim: Optional[int] = None
    use_global_attention: bool = False
    use_mae: bool = True

    def validate(self) -> None:
        if len(self.channel_mults) != 2:
            raise ConfigError(
                f"unet.channel_mults must have exactly 2 levels (fusion at H/4), got {self.channel_mults}"
            )
        if self.base_channels < 1 or self.res_blocks_per_level < 1 or self.in_channels < 1:
            raise ConfigError("unet.base_channels, res_blocks_per_level and in_channels must be positive")

    @property
    def fusion_channels(self) -> int:
        return self.base_channels * self.channel_mults[-1]

    @property
    def temb_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    def attention_sides(self, H: int) -> tuple[int, ...]:
        """Spatial sides that get global self-attention (empty when disabled)."""
        if not self.use_global_attention:
            return ()
        if self.attention_resolutions is not None:
            return tuple(self.attention_resolutions)
        return (H // 2, H // 4)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t w_i), cos(t w_i)]`` of shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.float()


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.base_dim))


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = _zero(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    """Global self-attention over all spatial positions."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        if ch % heads:
            heads = 1
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = _zero(nn.Conv1d(ch, ch, 1))

    def forward(self, x, temb=None):
        B, C, H, W = x.shape
        qkv = self.qkv(self.norm(x).reshape(B, C, H * W))
        q, k, v = qkv.reshape(B, 3, self.heads, C // self.heads, H * W).unbind(1)
        scale = (C // self.heads) ** -0.25
        w = torch.einsum("bhcq,bhck->bhqk", q * scale, k * scale).softmax(dim=-1)
        out = torch.einsum("bhqk,bhck->bhcq", w, v).reshape(B, C, H * W)
        return x + self.proj(out).reshape(B, C, H, W)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, temb=None):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb=None):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Stage(nn.Module):
    """A residual block optionally followed by global attention."""

    def __init__(self, in_ch, out_ch, temb_dim, attn: bool, heads: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.attn = SelfAttention2d(out_ch, heads) if attn else None

    def forward(self, x, temb):
        x = self.res(x, temb)
        return self.attn(x) if self.attn is not None else x


class MAEDiffUNet(nn.Module):
    """U-Net denoiser ``p_theta(x_tilde, x_hat, t)`` for a fixed patch plan.

    ``forward(x_tilde, t, patch_idx)`` takes the partially noised image batch
    ``(B, C, H, W)``, 1-indexed timesteps ``(B,)`` and the index of the noised
    patch per sample ``(B,)``; it returns the predicted clean image.
    """

    def __init__(self, cfg: UNetConfig, mae_cfg: Optional[MAEConfig], plan: PatchPlan):
        super().__init__()
        cfg.validate()
        if plan.r is None or plan.r % 4:
            raise ConfigError(f"grid size r={plan.r} must be a multiple of 4 for the H/4 feature map")
        if plan.H % 4 or plan.W % 4:
            raise ConfigError(f"input size {plan.H}x{plan.W} must be divisible by 4")
        self.cfg = cfg
        self.plan = plan
        H = plan.H
        ch0 = cfg.base_channels
        temb = cfg.temb_dim
        att = set(cfg.attention_sides(H))
        heads = cfg.attention_heads

        self.time_embed = TimeEmbedding(ch0, temb)
        self.conv_in = nn.Conv2d(cfg.in_channels, ch0, 3, padding=1)

        self.down = nn.ModuleList()
        skips = []  # (channels, spatial side) of every stored skip
        ch, side = ch0, H
        for mult in cfg.channel_mults:
            out = ch0 * mult
            for _ in range(cfg.res_blocks_per_level):
                self.down.append(Stage(ch, out, temb, side in att, heads))
                ch = out
                skips.append((ch, side))
            self.down.append(Downsample(ch))
            side //= 2
            skips.append((ch, side))
        self.skip_channels = tuple(c for c, _ in skips)
        self.fusion_side = side

        if cfg.use_mae:
            if mae_cfg is None:
                raise ConfigError("unet.use_mae is set but no MAE configuration was given")
            self.mae = MAEBranch(mae_cfg, ch, (plan.H // 4, plan.W // 4), plan.r // 4, time_dim=temb)
            self.register_buffer("visible_table", visible_grid_table(plan), persistent=False)
        else:
            self.mae = None

        self.mid = nn.ModuleList([
            Stage(ch, ch, temb, side in att, heads),
            Stage(ch, ch, temb, False, heads),
        ])

        m0, m1 = cfg.channel_mults
        width = {H: ch0 * m0, H // 2: ch0 * m1, H // 4: ch0 * m1}
        self.up = nn.ModuleList()
        for skip_ch, skip_side in reversed(skips):
            if skip_side > side:
                self.up.append(Upsample(ch))
                side *= 2
            self.up.append(Stage(ch + skip_ch, width[skip_side], temb, side in att, heads))
            ch = width[skip_side]

        self.out = nn.Sequential(
            nn.GroupNorm(_groups(ch), ch), nn.SiLU(), _zero(nn.Conv2d(ch, cfg.in_channels, 3, padding=1))
        )

    def embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_embed(t)

    def encode(self, x: torch.Tensor, temb: torch.Tensor):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ConfigError(f"input spatial size {tuple(x.shape[-2:])} must be divisible by 4")
        h = self.conv_in(x)
        skips = []
        for layer in self.down:
            h = layer(h, temb)
            skips.append(h)
        return h, skips

    def visible_index(self, patch_idx: torch.Tensor) -> torch.Tensor:
        return self.visible_table[patch_idx.to(self.visible_table.device, torch.long)]

    def forward(self, x: torch.Tensor, t: torch.Tensor, patch_idx: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != (self.plan.H, self.plan.W):
            raise ConfigError(f"input {tuple(x.shape[-2:])} does not match plan {self.plan.H}x{self.plan.W}")
        temb = self.embed(t)
        f, skips = self.encode(x, temb)
        if self.mae is not None:
            f = fuse_mae(f, self.mae(f, self.visible_index(patch_idx), temb))
        h = f
        for layer in self.mid:
            h = layer(h, temb)
        for layer in self.up:
            if isinstance(layer, Upsample):
                h = layer(h)
            else:
                h = layer(torch.cat([h, skips.pop()], dim=1), temb)
        assert not skips
        return self.out(h)


def fuse_mae(f: torch.Tensor, mae_out: torch.Tensor) -> torch.Tensor:
    if f.shape != mae_out.shape:
        raise ValueError(f"cannot fuse feature maps of shapes {tuple(f.shape)} and {tuple(mae_out.shape)}")
    return f + mae_out


def predict_x0(x_tilde: torch.Tensor, patch_idx, t, model: nn.Module) -> torch.Tensor:
    """Run the denoiser on a partially noised batch; returns the clean-image estimate."""
    B = x_tilde.shape[0]
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B) if not torch.is_tensor(t) or t.dim() == 0 \
        else t.long()
    patch_idx = torch.as_tensor(patch_idx, dtype=torch.long).reshape(-1).expand(B) \
        if not torch.is_tensor(patch_idx) or patch_idx.dim() == 0 else patch_idx.long()
    return model(x_tilde, t, patch_idx)


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())
