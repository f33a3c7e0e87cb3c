"""Projection heads, prototype banks, the MI discriminator and the non-PatchMix losses."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

UNIT_TOL = 1e-4


class LossInputError(ValueError):
    pass


def _check_unit(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=-1)
    if not torch.all((norms - 1).abs() <= UNIT_TOL):
        raise LossInputError(f"{name} rows must be unit-norm")


def _check_dist(q: torch.Tensor, tol: float = 1e-5) -> None:
    s = q.detach().sum(dim=-1)
    if torch.any(q.detach() < -tol) or not torch.all((s - 1).abs() <= tol):
        raise LossInputError("target rows must be distributions summing to 1")


class ProjectionHead(nn.Module):
    """3-layer MLP d -> 2d -> 2d -> d_proj with l2-normalised output."""

    def __init__(self, in_dim: int, out_dim: int = 32, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * in_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return F.normalize(self.mlp(x), dim=-1)


class PrototypeBank(nn.Module):
    def __init__(self, num: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num, dim) * 0.1)

    def normalized(self) -> torch.Tensor:
        return F.normalize(self.weight, dim=-1)

    def forward(self, h_hat: torch.Tensor) -> torch.Tensor:
        """Cosine similarities [B, K]."""
        return h_hat @ self.normalized().T


class Discriminator(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, a, b):
        return self.net(torch.cat([a, b], dim=-1)).squeeze(-1)


# --------------------------------------------------------------------------
# contrastive

def info_nce(features: torch.Tensor, pos_mask: torch.Tensor, tau: float,
             weights: torch.Tensor | None = None, anchors: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over anchors of -(1/|P|) sum_{p in P} log softmax(f.f_p / tau).

    Candidates for each anchor are all other rows. ``pos_mask[i, j]`` marks
    positives; the diagonal is ignored. ``anchors`` restricts which rows act
    as anchors, ``weights`` scales each anchor's term.
    """
    _check_unit(features, "features")
    n = features.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    pos = pos_mask.bool() & ~eye
    if anchors is None:
        anchors = torch.ones(n, dtype=torch.bool)
    if anchors.sum() == 0:
        return features.sum() * 0
    if torch.any(pos[anchors].sum(dim=1) == 0):
        raise LossInputError("every anchor needs a non-empty positive set")
    logits = features @ features.T / tau
    logits = logits.masked_fill(eye, float("-inf"))
    logp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    logp = logp.masked_fill(eye, 0.0)
    per = -(logp * pos).sum(dim=1) / pos.sum(dim=1).clamp(min=1)
    if weights is not None:
        per = per * weights
    return per[anchors].mean()


def rep_loss(anchor: torch.Tensor, positives: torch.Tensor, candidates: torch.Tensor, tau: float) -> torch.Tensor:
    """Single-anchor form. ``candidates`` excludes the anchor and includes the positives."""
    _check_unit(anchor[None], "anchor")
    _check_unit(candidates, "candidates")
    if positives.numel() == 0:
        raise LossInputError("empty positive set")
    _check_unit(positives, "positives")
    log_z = torch.logsumexp(candidates @ anchor / tau, dim=0)
    return -(positives @ anchor / tau - log_z).mean()


def view_positive_mask(n: int, views: int = 2) -> torch.Tensor:
    """Rows are ordered view-major: row v*n + i is view v of sample i."""
    idx = torch.arange(n).repeat(views)
    return idx[:, None] == idx[None, :]


def supervised_positive_mask(labels: torch.Tensor, labelled: torch.Tensor, views: int = 2) -> torch.Tensor:
    n = labels.shape[0]
    lab = labels.repeat(views)
    is_l = labelled.repeat(views)
    same_class = (lab[:, None] == lab[None, :]) & is_l[:, None] & is_l[None, :]
    return same_class | view_positive_mask(n, views)


# --------------------------------------------------------------------------
# classification

def sharpen(cos: torch.Tensor, tau_sharpen: float) -> torch.Tensor:
    return F.softmax(cos.detach() / tau_sharpen, dim=-1)


def soft_cross_entropy(logits: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    _check_dist(q)
    return -(q * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def cls_loss(h_hat: torch.Tensor, prototypes: torch.Tensor, q: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy of softmax(h_hat . w_k / tau) against ``q``; rows of both inputs unit-norm."""
    _check_unit(h_hat, "h_hat")
    _check_unit(prototypes, "prototypes")
    return soft_cross_entropy(h_hat @ prototypes.T / tau, q)


def entropy_reg(probs: torch.Tensor) -> torch.Tensor:
    """Negative entropy of the batch-mean prediction."""
    if probs.shape[0] == 0:
        raise LossInputError("empty batch")
    p_bar = probs.mean(dim=0)
    return (p_bar * torch.log(p_bar.clamp_min(1e-30))).sum()


def other_view(x: torch.Tensor, views: int = 2) -> torch.Tensor:
    """Row v*n + i -> row of the next view of sample i."""
    n = x.shape[0] // views
    return torch.cat([x[((v + 1) % views) * n:((v + 1) % views + 1) * n] for v in range(views)])


def simgcd_terms(h: torch.Tensor, h_hat: torch.Tensor, prototypes: torch.Tensor,
                 labels: torch.Tensor, labelled: torch.Tensor, tau: float, tau_sharpen: float,
                 views: int = 2) -> dict[str, torch.Tensor]:
    """Unweighted pieces of the SimGCD objective.

    ``h`` are projector outputs and ``h_hat`` normalised backbone features,
    both [views*n, .] in view-major order; ``labels``/``labelled`` are per sample.
    """
    n = labels.shape[0]
    if h.shape[0] != views * n or views < 2:
        raise LossInputError("need >= 2 views per sample, stacked view-major")
    cos = h_hat @ prototypes.T
    logits = cos / tau
    q_pseudo = sharpen(other_view(cos, views), tau_sharpen)
    rep_u = info_nce(h, view_positive_mask(n, views), tau)
    cls_u = soft_cross_entropy(logits, q_pseudo)
    lab_rows = labelled.repeat(views)
    if lab_rows.any():
        rep_s = info_nce(h, supervised_positive_mask(labels, labelled, views), tau, anchors=lab_rows)
        onehot = F.one_hot(labels.repeat(views)[lab_rows], prototypes.shape[0]).to(logits.dtype)
        cls_s = soft_cross_entropy(logits[lab_rows], onehot)
    else:
        rep_s = cls_s = logits.sum() * 0
    ent = entropy_reg(F.softmax(logits, dim=-1))
    return {"rep_u": rep_u, "cls_u": cls_u, "rep_s": rep_s, "cls_s": cls_s, "ent": ent}


def simgcd_loss(h, h_hat, prototypes, labels, labelled, lam: float, eps: float, tau: float,
                tau_sharpen: float, views: int = 2) -> torch.Tensor:
    t = simgcd_terms(h, h_hat, prototypes, labels, labelled, tau, tau_sharpen, views)
    return lam * (t["rep_u"] + t["cls_u"]) + (1 - lam) * (t["rep_s"] + t["cls_s"]) + eps * t["ent"]


# --------------------------------------------------------------------------
# mutual information

def shift_derangement(n: int) -> torch.Tensor:
    return torch.roll(torch.arange(n), -1)


def random_derangement(n: int, generator: torch.Generator) -> torch.Tensor:
    """Sattolo's algorithm: a uniformly random n-cycle, hence a derangement."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(torch.randint(0, i, (1,), generator=generator))
        perm[i], perm[j] = perm[j], perm[i]
    return torch.tensor(perm)


def jsd_mi_from_scores(joint: torch.Tensor, marginal: torch.Tensor) -> torch.Tensor:
    return -F.softplus(-joint).mean() - F.softplus(marginal).mean()


def mi_estimate(h_dom: torch.Tensor, h_sem: torch.Tensor, discriminator,
                perm: torch.Tensor | None = None) -> torch.Tensor:
    """Jensen-Shannon MI estimate; marginal pairs use a derangement of ``h_sem``."""
    n = h_dom.shape[0]
    if n < 2:
        raise LossInputError("MI estimate needs a batch of at least 2")
    if h_sem.shape[0] != n:
        raise LossInputError("h_dom and h_sem must be row-aligned")
    perm = shift_derangement(n) if perm is None else perm
    joint = discriminator(h_dom, h_sem)
    marginal = discriminator(h_dom, h_sem[perm])
    return jsd_mi_from_scores(joint, marginal)


# --------------------------------------------------------------------------
# vision-language

def match_score(pi_v: torch.Tensor, pi_t: torch.Tensor) -> torch.Tensor:
    return (pi_v * pi_t).sum(dim=-1)


def vl_cls_loss(pi_v: torch.Tensor, bank: torch.Tensor, q: torch.Tensor, tau: float) -> torch.Tensor:
    return cls_loss(pi_v, bank, q, tau)


def vl_align_loss(V: torch.Tensor, T: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Symmetric KL between row-softmax of S = V T^T / tau and row-softmax of S^T."""
    if V.shape != T.shape or V.dim() != 2:
        raise LossInputError(f"V {tuple(V.shape)} and T {tuple(T.shape)} must be equal [n, D]")
    S = V @ T.T / tau
    log_i2t = F.log_softmax(S, dim=1)
    log_t2i = F.log_softmax(S.T, dim=1)
    p_i2t, p_t2i = log_i2t.exp(), log_t2i.exp()
    kl_t2i_i2t = (p_t2i * (log_t2i - log_i2t)).sum(dim=1).mean()
    kl_i2t_t2i = (p_i2t * (log_i2t - log_t2i)).sum(dim=1).mean()
    return 0.5 * (kl_t2i_i2t + kl_i2t_t2i)
