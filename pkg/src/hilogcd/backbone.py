"""Tiny ViT with per-layer taps and CLS attention, plus a frozen toy text tower."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import torch_gen


class ShapeError(ValueError):
    pass


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    ncut_tap: int = 1
    dom_tap: int = 1
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ShapeError("embed_dim must be divisible by heads")
        if not 0 <= self.ncut_tap <= self.depth or not 0 <= self.dom_tap <= self.depth:
            raise ShapeError("tap layers must lie in [0, depth]")
        if self.depth < 1:
            raise ShapeError("depth must be >= 1")
        if self.pixel_std <= 0:
            raise ShapeError("pixel_std must be > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2


@dataclass
class FeatureBundle:
    patch_embeddings: torch.Tensor      # [B, P, d]
    layer_cls: list                     # L+1 tensors [B, d]; the last one after the final norm
    last_attn_cls: torch.Tensor         # [B, P]
    mid_patch_feats: torch.Tensor       # [B, P, d]


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (C // self.heads) ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


class TinyViT(nn.Module):
    def __init__(self, cfg: VitConfig | None = None):
        super().__init__()
        self.cfg = cfg or VitConfig()
        c = self.cfg
        d = c.embed_dim
        self.patch_proj = nn.Linear(3 * c.patch_size ** 2, d)
        self.pos_embed = nn.Parameter(torch.randn(1, c.num_patches, d) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.cls_pos = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = nn.LayerNorm(d)

    def patch_pixels(self, images: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, c.image_size, c.image_size):
            raise ShapeError(f"expected [B, 3, {c.image_size}, {c.image_size}], got {tuple(images.shape)}")
        B, S, g = images.shape[0], c.patch_size, c.grid
        x = images.reshape(B, 3, g, S, g, S).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, 3 * S * S)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """Patch embeddings phi(x): [B, P, d], positional embedding included."""
        pix = (self.patch_pixels(images) - self.cfg.pixel_mean) / self.cfg.pixel_std
        return self.patch_proj(pix) + self.pos_embed

    def with_cls(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        cls = (self.cls_token + self.cls_pos).expand(patch_tokens.shape[0], -1, -1)
        return torch.cat([cls, patch_tokens], dim=1)

    def encode_to_layer(self, tokens: torch.Tensor, layer: int, start: int = 0) -> torch.Tensor:
        """Run blocks ``start..layer-1`` on ``tokens`` (CLS + patches)."""
        L = self.cfg.depth
        if not 0 <= start <= layer <= L:
            raise ValueError(f"layer range [{start}, {layer}] outside [0, {L}]")
        x = tokens
        for blk in self.blocks[start:layer]:
            x, _ = blk(x)
        return x

    def forward_tokens(self, patch_tokens: torch.Tensor) -> FeatureBundle:
        x = self.with_cls(patch_tokens)
        layer_cls = [x[:, 0]]
        mid = x[:, 1:] if self.cfg.ncut_tap == 0 else None
        attn = None
        L = self.cfg.depth
        for i, blk in enumerate(self.blocks, start=1):
            x, attn = blk(x)
            layer_cls.append(self.norm(x[:, 0]) if i == L else x[:, 0])
            if i == self.cfg.ncut_tap:
                mid = x[:, 1:]
        cls_attn = attn[:, :, 0, 1:].mean(dim=1)
        cls_attn = cls_attn / cls_attn.sum(dim=-1, keepdim=True)
        return FeatureBundle(patch_tokens, layer_cls, cls_attn, mid)

    def forward(self, images: torch.Tensor) -> FeatureBundle:
        return self.forward_tokens(self.patchify(images))

    def cls_attention(self, images_or_tokens: torch.Tensor) -> torch.Tensor:
        """Head-averaged final-block attention from CLS to patches; rows sum to 1."""
        if images_or_tokens.dim() == 4:
            return self.forward(images_or_tokens).last_attn_cls
        return self.forward_tokens(images_or_tokens).last_attn_cls


class TextEncoder(nn.Module):
    """Frozen toy text tower. Weights are buffers, so no optimizer can reach them."""

    def __init__(self, token_dim: int = 64, out_dim: int = 64, depth: int = 2, heads: int = 4,
                 max_len: int = 16, seed: int = 1234):
        super().__init__()
        self.token_dim, self.out_dim, self.depth, self.heads = token_dim, out_dim, depth, heads
        g = torch_gen("text-encoder", seed)
        D = token_dim

        def w(*shape, scale):
            return torch.randn(*shape, generator=g) * scale

        self.register_buffer("pos", w(max_len, D, scale=0.1))
        for i in range(depth):
            self.register_buffer(f"qkv{i}", w(D, 3 * D, scale=1 / math.sqrt(D)))
            self.register_buffer(f"o{i}", w(D, D, scale=1 / math.sqrt(D)))
            self.register_buffer(f"m1_{i}", w(D, 2 * D, scale=1 / math.sqrt(D)))
            self.register_buffer(f"m2_{i}", w(2 * D, D, scale=1 / math.sqrt(2 * D)))
        q, _ = torch.linalg.qr(w(D, max(D, out_dim), scale=1.0).T)
        self.register_buffer("proj", q.T[:, :out_dim].contiguous() if out_dim <= D else w(D, out_dim, scale=1 / math.sqrt(D)))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """[..., n, D_t] token sequence -> [..., D] final-token representation."""
        if seq.shape[-2] == 0:
            raise ShapeError("empty token sequence")
        if seq.shape[-2] > self.pos.shape[0]:
            raise ShapeError("token sequence longer than max_len")
        n, D = seq.shape[-2], self.token_dim
        x = seq + self.pos[:n].to(seq.dtype)
        h = self.heads
        for i in range(self.depth):
            qkv_w = getattr(self, f"qkv{i}").to(seq.dtype)
            y = F.layer_norm(x, (D,))
            q, k, v = (y @ qkv_w).split(D, dim=-1)

            def heads_(t):
                return t.reshape(*t.shape[:-1], h, D // h).transpose(-3, -2)

            q, k, v = heads_(q), heads_(k), heads_(v)
            a = ((q @ k.transpose(-2, -1)) * (D // h) ** -0.5).softmax(-1)
            y = (a @ v).transpose(-3, -2).reshape(*x.shape)
            x = x + y @ getattr(self, f"o{i}").to(seq.dtype)
            y = F.layer_norm(x, (D,))
            x = x + F.gelu(y @ getattr(self, f"m1_{i}").to(seq.dtype)) @ getattr(self, f"m2_{i}").to(seq.dtype)
        x = F.layer_norm(x, (D,))
        return x[..., -1, :] @ self.proj.to(seq.dtype)

    def weights(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.named_buffers()}
