"""Pseudo-domain partition of the unlabelled pool and curriculum-weighted sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .seeding import torch_gen

LABELLED, DOMAIN_A, DOMAIN_B = "labelled", "a", "b"


class CurriculumError(ValueError):
    pass


@dataclass
class CurriculumState:
    assignment: dict = field(default_factory=dict)   # sample_id -> "labelled" | "a" | "b"
    r0: float = 0.0
    r_prime: float = 1.0
    t_prime: int = 80
    domain_rep_kind: str = "fft_amplitude"

    def members(self, tag: str) -> list[int]:
        return [s for s, a in self.assignment.items() if a == tag]

    def counts(self) -> dict[str, int]:
        out = {LABELLED: 0, DOMAIN_A: 0, DOMAIN_B: 0}
        for a in self.assignment.values():
            out[a] += 1
        return out

    def domain_labels(self, ids) -> np.ndarray:
        """Pseudo-domain targets: labelled and D^_a -> 0, D^_b -> 1."""
        return np.array([1 if self.assignment[int(i)] == DOMAIN_B else 0 for i in ids], dtype=np.int64)

    def dump(self) -> str:
        return json.dumps({str(k): v for k, v in sorted(self.assignment.items())})


PRESETS = {
    "domainnet": {"r0": 0.0, "r_prime": 1.0, "t_prime": 80},
    "ssbc": {"r0": 0.0, "r_prime": 0.05, "t_prime": 80},
}


def fft_amplitude(images: np.ndarray, bins: int = 8, log: bool = True) -> np.ndarray:
    """Pooled 2-D amplitude spectrum of the grayscale image, [N, bins*bins].

    Pooling bins group frequencies by circular magnitude |f|, so each bin holds
    f and -f together and the vector is invariant to flips and translations.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    gray = imgs.mean(axis=1)
    amp = np.abs(np.fft.fft2(gray))
    if log:
        amp = np.log1p(amp)
    H, W = gray.shape[-2:]

    def bin_index(n):
        f = np.arange(n)
        mag = np.minimum(f, n - f)
        return np.minimum(mag * bins // (n // 2 + 1), bins - 1)

    bh, bw = bin_index(H), bin_index(W)
    onehot_h = np.eye(bins)[bh]          # [H, bins]
    onehot_w = np.eye(bins)[bw]
    sums = np.einsum("nhw,hb,wc->nbc", amp, onehot_h, onehot_w)
    counts = np.einsum("hb,wc->bc", onehot_h, onehot_w)
    return (sums / counts).reshape(len(imgs), bins * bins)


def domain_representation(x, kind: str, model=None, head=None):
    """``fft_amplitude`` works on images; ``backbone_feature`` projects the block-1 CLS."""
    if kind == "fft_amplitude":
        return fft_amplitude(x)
    if kind == "backbone_feature":
        if model is None or head is None:
            raise CurriculumError("backbone_feature needs a model and a domain head")
        with torch.no_grad():
            feats = model(x)
            return head(feats.layer_cls[model.cfg.dom_tap])
    raise CurriculumError(f"unknown domain representation kind {kind!r}")


def pinned_sse(labelled: np.ndarray, unlabelled: np.ndarray, assign: np.ndarray, centers: np.ndarray) -> float:
    pts = np.concatenate([labelled, unlabelled])
    lab = np.concatenate([np.zeros(len(labelled), dtype=int), assign])
    return float(((pts - centers[lab]) ** 2).sum())


def ss_kmeans(labelled: np.ndarray, unlabelled: np.ndarray, k: int = 2, iters: int = 100,
              history: list | None = None) -> np.ndarray:
    """Two-cluster Lloyd iterations with labelled points pinned to cluster 0.

    Returns the cluster (0 -> D^_a, 1 -> D^_b) of every unlabelled point.
    ``history`` collects the pinned SSE after every update step.
    """
    if k != 2:
        raise CurriculumError("only k = 2 is supported")
    labelled = np.asarray(labelled, dtype=np.float64)
    unlabelled = np.asarray(unlabelled, dtype=np.float64)
    if labelled.ndim == 1:
        labelled, unlabelled = labelled[:, None], unlabelled[:, None]
    if len(labelled) == 0:
        raise CurriculumError("need at least one labelled vector")
    if len(unlabelled) == 0:
        return np.zeros(0, dtype=np.int64)
    c0 = labelled.mean(axis=0)
    far = np.argmax(((unlabelled - c0) ** 2).sum(axis=1))
    centers = np.stack([c0, unlabelled[far]])
    assign = None
    for _ in range(iters):
        d = ((unlabelled[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        new = (d[:, 1] < d[:, 0]).astype(np.int64)   # ties -> cluster 0
        if history is not None:
            history.append(pinned_sse(labelled, unlabelled, new, centers))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        members0 = np.concatenate([labelled, unlabelled[assign == 0]])
        centers = centers.copy()
        centers[0] = members0.mean(axis=0)
        if np.any(assign == 1):
            centers[1] = unlabelled[assign == 1].mean(axis=0)
        if history is not None:
            history.append(pinned_sse(labelled, unlabelled, assign, centers))
    return assign


def build_state(labelled_ids, unlabelled_ids, labelled_reps, unlabelled_reps, r0=0.0, r_prime=1.0,
                t_prime=80, kind="fft_amplitude") -> CurriculumState:
    assign = ss_kmeans(labelled_reps, unlabelled_reps)
    table = {int(i): LABELLED for i in labelled_ids}
    for i, a in zip(unlabelled_ids, assign):
        table[int(i)] = DOMAIN_B if a == 1 else DOMAIN_A
    return CurriculumState(table, r0, r_prime, t_prime, kind)


def curriculum_weight(sample_id: int, t: int, state: CurriculumState, n_labelled: int, n_domain_a: int) -> float:
    try:
        tag = state.assignment[int(sample_id)]
    except KeyError:
        raise CurriculumError(f"sample {sample_id} has no curriculum assignment") from None
    if tag == LABELLED:
        return 1.0
    if tag == DOMAIN_A:
        if n_domain_a <= 0:
            raise CurriculumError("D^_a member but |D^_a| = 0")
        return n_labelled / n_domain_a
    return state.r0 + (state.r_prime - state.r0) * float(t > state.t_prime)


def weights_for(ids, t: int, state: CurriculumState) -> np.ndarray:
    c = state.counts()
    return np.array([curriculum_weight(i, t, state, c[LABELLED], c[DOMAIN_A]) for i in ids])


@dataclass
class Batch:
    labelled_ids: np.ndarray
    unlabelled_ids: np.ndarray
    with_replacement: bool = False

    @property
    def ids(self) -> np.ndarray:
        return np.concatenate([self.labelled_ids, self.unlabelled_ids])


def draw_batch(labelled_ids, unlabelled_ids, unlabelled_weights, batch_size: int, seed) -> Batch:
    """Half the batch uniform from D_l, half weighted without replacement from D_u."""
    if batch_size % 2:
        raise CurriculumError("batch_size must be even")
    half = batch_size // 2
    g = torch_gen("batch", *(seed if isinstance(seed, tuple) else (seed,)))
    labelled_ids = np.asarray(labelled_ids)
    unlabelled_ids = np.asarray(unlabelled_ids)
    if len(labelled_ids) >= half:
        li = torch.randperm(len(labelled_ids), generator=g)[:half].numpy()
    else:
        li = torch.randint(0, len(labelled_ids), (half,), generator=g).numpy()
    w = torch.as_tensor(np.asarray(unlabelled_weights, dtype=np.float64))
    if torch.any(w < 0) or w.sum() <= 0:
        raise CurriculumError("unlabelled weights must be non-negative with positive sum")
    replace = int((w > 0).sum()) < half
    ui = torch.multinomial(w, half, replacement=replace, generator=g).numpy()
    return Batch(labelled_ids[li], unlabelled_ids[ui], replace)
