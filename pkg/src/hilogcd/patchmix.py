"""PatchMix in embedding space: mixing plans, attention-weighted coefficients and losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .losses import LossInputError, cls_loss, info_nce, vl_align_loss
from .seeding import np_rng, torch_gen


@dataclass
class MixPlan:
    partner: torch.Tensor      # [B] partner row per anchor
    beta: torch.Tensor         # [B, P]

    @property
    def beta_mean(self) -> torch.Tensor:
        return self.beta.mean(dim=-1)


def pair_partners(labelled: torch.Tensor, seed, step: int) -> torch.Tensor:
    """Partner per anchor, preferring labelled <-> unlabelled pairs.

    Each group's partners are drawn cyclically from a seeded permutation of the
    other group. When one group is empty every anchor is paired through a
    random cyclic shift of the whole batch instead.
    """
    labelled = labelled.bool()
    B = labelled.shape[0]
    g = torch_gen("pair", seed, step)
    lab = torch.nonzero(labelled).flatten()
    unl = torch.nonzero(~labelled).flatten()
    partner = torch.empty(B, dtype=torch.long)
    if len(lab) == 0 or len(unl) == 0:
        perm = torch.randperm(B, generator=g)
        partner[perm] = torch.roll(perm, -1) if B > 1 else perm
        return partner
    lab_p = lab[torch.randperm(len(lab), generator=g)]
    unl_p = unl[torch.randperm(len(unl), generator=g)]
    for i, a in enumerate(lab):
        partner[a] = unl_p[i % len(unl_p)]
    for i, a in enumerate(unl):
        partner[a] = lab_p[i % len(lab_p)]
    return partner


def make_plan(labelled: torch.Tensor, num_patches: int, seed, step: int, tag: str = "a",
              beta_a: float = 1.0, partner: torch.Tensor | None = None, dtype=torch.float64) -> MixPlan:
    if partner is None:
        partner = pair_partners(labelled, seed, step)
    B = labelled.shape[0]
    rng = np_rng("beta", seed, step, tag)
    beta = torch.from_numpy(rng.beta(beta_a, beta_a, size=(B, num_patches))).to(dtype)
    return MixPlan(partner, beta)


def mix_patch_embeddings(phi_x: torch.Tensor, phi_xp: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Row j = beta_j * phi_x[j] + (1 - beta_j) * phi_xp[j]; works batched on leading dims."""
    if phi_x.shape != phi_xp.shape:
        raise LossInputError("anchor and partner embeddings differ in shape")
    if beta.shape != phi_x.shape[:-1]:
        raise LossInputError(f"beta shape {tuple(beta.shape)} does not match {tuple(phi_x.shape[:-1])}")
    b = beta.to(phi_x.dtype).unsqueeze(-1)
    return b * phi_x + (1 - b) * phi_xp


def mix_coefficient(beta: torch.Tensor, s: torch.Tensor, s_partner: torch.Tensor) -> torch.Tensor:
    """alpha = <beta, s> / (<beta, s> + <1 - beta, s'>), batched over leading dims."""
    num = (beta * s).sum(dim=-1)
    den = num + ((1 - beta) * s_partner).sum(dim=-1)
    if torch.any(den <= 0):
        raise LossInputError("mix coefficient denominator is zero")
    return num / den


def pm_soft_label(q: torch.Tensor, alpha, K: int) -> torch.Tensor:
    """q~ = alpha q + (1 - alpha)/K; stays a distribution."""
    alpha = torch.as_tensor(alpha, dtype=q.dtype)
    if torch.any(alpha < 0) or torch.any(alpha > 1):
        raise LossInputError("alpha must lie in [0, 1]")
    if alpha.dim() == 1:
        alpha = alpha[:, None]
    return alpha * q + (1 - alpha) / K


def pm_rep_loss(mixed: torch.Tensor, pos_mask: torch.Tensor, alpha: torch.Tensor, tau: float) -> torch.Tensor:
    return info_nce(mixed, pos_mask, tau, weights=alpha)


def pm_cls_loss(h_hat_mixed: torch.Tensor, bank: torch.Tensor, q_tilde: torch.Tensor, tau: float) -> torch.Tensor:
    """Prototype bank W' for vision, text bank E for the cross-modal variant."""
    return cls_loss(h_hat_mixed, bank, q_tilde, tau)


def mix_text(t_s: torch.Tensor, t_t: torch.Tensor, beta_mean) -> torch.Tensor:
    b = torch.as_tensor(beta_mean, dtype=t_s.dtype)
    if torch.any(b < 0) or torch.any(b > 1):
        raise LossInputError("mean mixing coefficient must lie in [0, 1]")
    if b.dim() == 1:
        b = b[:, None]
    return b * t_s + (1 - b) * t_t


def pm_vl_loss(V_mixed: torch.Tensor, T_mixed: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    return vl_align_loss(V_mixed, T_mixed, tau)
