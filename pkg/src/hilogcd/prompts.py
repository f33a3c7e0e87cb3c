"""NCut foreground masks, spatial prompts, factorized text prompts and phase scheduling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPT, MODEL = "prompt", "model"


class PromptError(ValueError):
    pass


# --------------------------------------------------------------------------
# normalized cut

@dataclass
class AffinityConfig:
    sigma: float | str = "median"
    radius: int = 3
    tap_layer: int = 1
    quantile_sweep: bool = False

    def __post_init__(self):
        if self.radius < 1:
            raise PromptError("locality radius must be >= 1")
        if not (self.sigma == "median" or (isinstance(self.sigma, (int, float)) and self.sigma > 0)):
            raise PromptError("sigma must be positive or 'median'")


def grid_chebyshev(grid: int) -> np.ndarray:
    ys, xs = np.divmod(np.arange(grid * grid), grid)
    return np.maximum(np.abs(ys[:, None] - ys[None]), np.abs(xs[:, None] - xs[None]))


def affinity(features: np.ndarray, cfg: AffinityConfig) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    P = f.shape[0]
    grid = math.isqrt(P)
    if grid * grid != P:
        raise PromptError("patch count must be a square grid")
    gate = grid_chebyshev(grid) < cfg.radius
    sq = ((f[:, None, :] - f[None, :, :]) ** 2).sum(-1)
    if cfg.sigma == "median":
        off = sq[gate & ~np.eye(P, dtype=bool)]
        sigma = float(np.sqrt(np.median(off))) if off.size else 1.0
        if sigma <= 0:
            sigma = 1.0
    else:
        sigma = float(cfg.sigma)
    return np.exp(-sq / (2 * sigma ** 2)) * gate


def ncut_value(W: np.ndarray, mask: np.ndarray) -> float:
    a = np.asarray(mask, dtype=bool)
    if a.all() or (~a).all():
        return float("inf")
    cut = W[a][:, ~a].sum()
    return float(cut / W[a].sum() + cut / W[~a].sum())


def second_eigenvector(W: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve (D - W) v = mu D v for the second-smallest mu.

    Works on the symmetric normalised Laplacian with the trivial eigenvector
    D^{1/2} 1 shifted out of the bottom of the spectrum, so on graphs with
    several components v2 is still orthogonal (in D) to the constant vector.
    """
    W = np.array(W, dtype=np.float64)
    deg = W.sum(axis=1)
    zero = deg <= 0
    if zero.any():
        W[zero, zero] += 1e-8
        deg = W.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    L = np.eye(len(W)) - dinv[:, None] * W * dinv[None, :]
    u1 = np.sqrt(deg) / np.linalg.norm(np.sqrt(deg))
    vals, vecs = np.linalg.eigh(L + 3.0 * np.outer(u1, u1))
    u2 = vecs[:, 0]
    v2 = dinv * u2
    i = np.argmax(np.abs(v2))
    if v2[i] < 0:
        v2 = -v2
    return v2 / np.linalg.norm(v2), float(vals[0])


def ncut_bipartition(W: np.ndarray, quantile_sweep: bool = False) -> np.ndarray:
    v2, _ = second_eigenvector(W)
    part = v2 > 0
    if quantile_sweep:
        best = ncut_value(W, part)
        for q in (0.3, 0.4, 0.5, 0.6, 0.7):
            cand = v2 > np.quantile(v2, q)
            val = ncut_value(W, cand)
            if val < best:
                best, part = val, cand
    if part.all() or (~part).all():
        part = v2 > np.median(v2)
    return part


def ncut_mask(features, cls_attention, cfg: AffinityConfig | None = None) -> np.ndarray:
    """Binary foreground mask over patches; the side with higher mean CLS attention wins."""
    cfg = cfg or AffinityConfig()
    f = np.asarray(features, dtype=np.float64)
    att = np.asarray(cls_attention, dtype=np.float64)
    if f.shape[0] < 4:
        raise PromptError("need at least 4 patches")
    if not np.all(np.isfinite(f)):
        raise PromptError("non-finite patch features")
    part = ncut_bipartition(affinity(f, cfg), cfg.quantile_sweep)
    if part.all() or (~part).all():
        return part.astype(np.int64)
    fg = part if att[part].mean() >= att[~part].mean() else ~part
    return fg.astype(np.int64)


def ncut_masks(features: torch.Tensor, attention: torch.Tensor, cfg: AffinityConfig | None = None) -> torch.Tensor:
    f = features.detach().cpu().numpy()
    a = attention.detach().cpu().numpy()
    return torch.from_numpy(np.stack([ncut_mask(fi, ai, cfg) for fi, ai in zip(f, a)]))


# --------------------------------------------------------------------------
# spatial prompts

def apply_semantic_spt(patch_tokens: torch.Tensor, mask: torch.Tensor, q_fg: torch.Tensor) -> torch.Tensor:
    """x_j + M_j q_fg for every patch j."""
    if mask.shape != patch_tokens.shape[:-1] or q_fg.shape[-1] != patch_tokens.shape[-1]:
        raise PromptError("mask or prompt shape does not match the patch tokens")
    return patch_tokens + mask.to(patch_tokens.dtype).unsqueeze(-1) * q_fg


def boundary_mask(S: int, p: int, grid: int | None = None) -> torch.Tensor:
    """Per-patch border mask (1 on the border of width p); tiled to grid x grid patches if given."""
    if not 0 <= p <= math.ceil(S / 2):
        raise PromptError(f"border width {p} outside [0, {math.ceil(S / 2)}]")
    u = torch.arange(S)
    inner = (u >= p) & (u < S - p)
    m = (~(inner[:, None] & inner[None, :])).to(torch.int64)
    if grid is not None:
        m = m.repeat(grid, grid)
    return m


def apply_boundary_spt(images: torch.Tensor, Q_s: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if Q_s.shape != images.shape[-3:] or mask.shape != images.shape[-2:]:
        raise PromptError("prompt or mask shape does not match the images")
    return images + Q_s * mask.to(images.dtype)


class SpatialPrompt(nn.Module):
    """Pixel-space boundary prompt Q_s with its fixed periodic mask."""

    def __init__(self, image_size: int, patch_size: int, border: int = 1):
        super().__init__()
        self.Q_s = nn.Parameter(torch.zeros(3, image_size, image_size))
        self.register_buffer("mask", boundary_mask(patch_size, border, image_size // patch_size))

    def forward(self, images):
        return apply_boundary_spt(images, self.Q_s, self.mask)


class ForegroundPrompt(nn.Module):
    """Single shared foreground prompt q_fg, gated per patch by the NCut mask."""

    def __init__(self, dim: int):
        super().__init__()
        self.q_fg = nn.Parameter(torch.zeros(dim))

    def forward(self, patch_tokens, mask):
        return apply_semantic_spt(patch_tokens, mask, self.q_fg)


# --------------------------------------------------------------------------
# factorized text prompts

class TextPrompts(nn.Module):
    def __init__(self, K: int, n_ctx: int = 4, tokens_per_class: int = 1, token_dim: int = 64,
                 init_std: float = 0.02, generator: torch.Generator | None = None):
        super().__init__()
        self.ctx = nn.Parameter(torch.randn(n_ctx, token_dim, generator=generator) * init_std)
        self.gamma = nn.Parameter(torch.randn(K, tokens_per_class, token_dim, generator=generator) * init_std)

    @property
    def K(self) -> int:
        return self.gamma.shape[0]

    def num_parameters(self) -> int:
        return self.ctx.numel() + self.gamma.numel()

    def sequences(self) -> torch.Tensor:
        """[K, N + g, D_t]: shared context followed by each category's tokens."""
        ctx = self.ctx.unsqueeze(0).expand(self.K, -1, -1)
        return torch.cat([ctx, self.gamma], dim=1)

    def bank(self, encoder) -> torch.Tensor:
        return F.normalize(encoder(self.sequences()), dim=-1)


def build_text_embedding(k: int, ctx: torch.Tensor, gamma: torch.Tensor, encoder) -> torch.Tensor:
    if not 0 <= k < gamma.shape[0]:
        raise IndexError(f"category {k} out of range")
    seq = torch.cat([ctx, gamma[k]], dim=0)
    return F.normalize(encoder(seq), dim=-1)


def independent_prompt_count(K: int, n_ctx: int, token_dim: int) -> int:
    return K * (n_ctx + 1) * token_dim


def factorized_prompt_count(K: int, n_ctx: int, tokens_per_class: int, token_dim: int) -> int:
    return (n_ctx + K * tokens_per_class) * token_dim


# --------------------------------------------------------------------------
# alternation

@dataclass
class PhaseSchedule:
    """Toggle-before-use schedule: the flag flips when (iteration + 1) % k == 0."""

    k: int = 20
    initial_phase: str = PROMPT
    enabled: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise PromptError("k must be >= 1")
        if self.initial_phase not in (PROMPT, MODEL):
            raise PromptError(f"unknown phase {self.initial_phase!r}")

    def phase(self, iteration: int) -> str:
        if not self.enabled:
            return MODEL
        flips = (iteration + 1) // self.k
        if flips % 2 == 0:
            return self.initial_phase
        return MODEL if self.initial_phase == PROMPT else PROMPT


def phase_schedule(iteration: int, k: int, initial_phase: str) -> str:
    return PhaseSchedule(k, initial_phase).phase(iteration)
