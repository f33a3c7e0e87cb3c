"""Training loops for HiLo, HLPrompt and VLPrompt.

All three share one step skeleton: draw a curriculum batch, build the views,
take one discriminator ascent step on detached features, then one descent step
over the parameter groups that are active in the current phase.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blob
from .backbone import TextEncoder, TinyViT, VitConfig
from .config import RunConfig, TrainConfig
from .curriculum import CurriculumState, build_state, domain_representation, draw_batch, weights_for
from .losses import (Discriminator, LossInputError, PrototypeBank, ProjectionHead, entropy_reg, mi_estimate,
                     other_view, sharpen, shift_derangement, simgcd_terms, view_positive_mask, vl_align_loss, vl_cls_loss)
from .patchmix import (make_plan, mix_coefficient, mix_patch_embeddings, mix_text, pair_partners,
                       pm_cls_loss, pm_rep_loss, pm_soft_label, pm_vl_loss)
from .prompts import (MODEL, PROMPT, AffinityConfig, ForegroundPrompt, PhaseSchedule, SpatialPrompt,
                      TextPrompts, ncut_masks)
from .seeding import derive_seed
from .synthdata import Dataset, augment_batch

DTYPES = {"float32": torch.float32, "float64": torch.float64}
CHECKPOINT_FILE = "checkpoint.gcdt"
SIDECAR_FILE = "checkpoint.json"
HISTORY_FILE = "history.jsonl"
ECHO_FILE = "config.echo.json"

# first attribute name -> parameter group
GROUP_OF = {
    "vit": "encoder",
    "sem_head": "heads", "dom_head": "heads", "proj": "heads",
    "prototypes": "prototypes", "dom_prototypes": "prototypes", "pm_prototypes": "prototypes",
    "discriminator": "discriminator",
    "fg_prompt": "spatial_prompts", "spatial_prompt": "spatial_prompts",
    "text_prompts": "text_prompts",
}
PROMPT_GROUPS = frozenset({"spatial_prompts"})


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# models

class HiLoModel(nn.Module):
    method = "hilo"

    def __init__(self, vit_cfg: VitConfig, cfg: TrainConfig, K: int):
        super().__init__()
        d = vit_cfg.embed_dim
        self.vit = TinyViT(vit_cfg)
        self.sem_head = ProjectionHead(d, cfg.proj_dim)
        self.dom_head = ProjectionHead(d, cfg.proj_dim)
        self.prototypes = PrototypeBank(K, d)
        self.dom_prototypes = PrototypeBank(2, d)
        self.pm_prototypes = PrototypeBank(K, d)
        self.discriminator = Discriminator(cfg.proj_dim, cfg.disc_hidden)

    def tokens(self, images, use_prompts: bool = True):
        return self.vit.patchify(images)

    def logits(self, images, use_prompts: bool = True):
        """Cosine scores against the class prototypes."""
        fb = self.vit.forward_tokens(self.tokens(images, use_prompts))
        return F.normalize(fb.layer_cls[-1], dim=-1) @ self.prototypes.normalized().T

    def domain_features(self, images):
        fb = self.vit(images)
        return self.dom_head(fb.layer_cls[self.vit.cfg.dom_tap])


class HLPromptModel(HiLoModel):
    """HiLo plus a shared foreground prompt injected on NCut-selected patches."""

    method = "hlprompt"

    def __init__(self, vit_cfg: VitConfig, cfg: TrainConfig, K: int, affinity: AffinityConfig | None = None):
        super().__init__(vit_cfg, cfg, K)
        self.fg_prompt = ForegroundPrompt(vit_cfg.embed_dim)
        self.affinity = affinity or AffinityConfig()
        self.masks_computed = 0

    def foreground_masks(self, patch_tokens):
        with torch.no_grad():
            fb = self.vit.forward_tokens(patch_tokens.detach())
        self.masks_computed += patch_tokens.shape[0]
        return ncut_masks(fb.mid_patch_feats, fb.last_attn_cls, self.affinity)

    def tokens(self, images, use_prompts: bool = True):
        t = self.vit.patchify(images)
        if not use_prompts:
            return t
        return self.fg_prompt(t, self.foreground_masks(t))


class VLPromptModel(nn.Module):
    """Vision tower, projection W into the shared space, factorized text prompts and a frozen text tower."""

    method = "vlprompt"

    def __init__(self, vit_cfg: VitConfig, cfg: TrainConfig, K: int):
        super().__init__()
        d, D = vit_cfg.embed_dim, cfg.shared_dim
        self.vit = TinyViT(vit_cfg)
        self.proj = nn.Linear(d, D, bias=False)
        self.text_prompts = TextPrompts(K, cfg.n_ctx, cfg.tokens_per_class, cfg.token_dim)
        self.text_encoder = TextEncoder(cfg.token_dim, D)
        self.spatial_prompt = SpatialPrompt(vit_cfg.image_size, vit_cfg.patch_size, cfg.border)
        self.discriminator = Discriminator(D, cfg.disc_hidden)

    def tokens(self, images, use_prompts: bool = True):
        if use_prompts:
            images = self.spatial_prompt(images)
        return self.vit.patchify(images)

    def embed(self, cls):
        return F.normalize(self.proj(cls), dim=-1)

    def text_bank(self):
        return self.text_prompts.bank(self.text_encoder)

    def logits(self, images, use_prompts: bool = True):
        """Matching scores rho against the text bank."""
        fb = self.vit.forward_tokens(self.tokens(images, use_prompts))
        return self.embed(fb.layer_cls[-1]) @ self.text_bank().T

    def domain_features(self, images):
        fb = self.vit(images)
        return self.embed(fb.layer_cls[self.vit.cfg.dom_tap])


MODELS = {"hilo": HiLoModel, "hlprompt": HLPromptModel, "vlprompt": VLPromptModel}


def build_model(run_cfg: RunConfig, K: int) -> nn.Module:
    cfg = run_cfg.train
    # initialise in float64 whatever the process default, then cast to the run dtype
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed("init", run_cfg.seed))
            if run_cfg.method == "hlprompt":
                model = HLPromptModel(run_cfg.vit, cfg, K, run_cfg.affinity)
            else:
                model = MODELS[run_cfg.method](run_cfg.vit, cfg, K)
    finally:
        torch.set_default_dtype(prev)
    return model.to(DTYPES[cfg.dtype])


def param_groups(model: nn.Module) -> dict[str, list[tuple[str, nn.Parameter]]]:
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        if top not in GROUP_OF:
            raise KeyError(f"parameter {name} belongs to no group")
        groups.setdefault(GROUP_OF[top], []).append((name, p))
    return groups


# --------------------------------------------------------------------------
# trainer

@dataclass
class StepOutput:
    total: torch.Tensor
    components: dict = field(default_factory=dict)
    diag: dict = field(default_factory=dict)


class Trainer:
    """Owns the run state: model, per-group optimizers, curriculum and counters."""

    def __init__(self, dataset: Dataset, run_cfg: RunConfig):
        self.data = dataset
        self.run_cfg = run_cfg
        self.cfg = cfg = run_cfg.train
        self.method = run_cfg.method
        self.seed = run_cfg.seed
        self.dtype = DTYPES[cfg.dtype]
        self.K = dataset.K
        self.model = build_model(run_cfg, self.K)
        self.groups = param_groups(self.model)
        self.optimizers = {g: torch.optim.SGD([p for _, p in ps], lr=self.group_lr(g), momentum=cfg.momentum,
                                              weight_decay=cfg.weight_decay)
                           for g, ps in self.groups.items()}
        self.labelled_ids = dataset.labelled_ids()
        self.unlabelled_ids = dataset.unlabelled_ids()
        if len(self.labelled_ids) == 0 or len(self.unlabelled_ids) == 0:
            raise ValueError("training needs both labelled and unlabelled samples")
        self.curriculum = self.build_curriculum()
        initial = PROMPT if self.method == "hlprompt" else MODEL
        self.schedule = PhaseSchedule(cfg.k, initial, enabled=cfg.phases)
        self.iteration = 0
        self.epoch = 0
        self.history: list[dict] = []

    # -- setup ------------------------------------------------------------

    def lr_factor(self, iteration: int) -> float:
        cfg = self.cfg
        if cfg.lr_schedule == "constant" or iteration <= 0:
            return 1.0
        total = max(1, cfg.epochs * self.steps_per_epoch)
        frac = min(iteration, total) / total
        return cfg.lr_min_ratio + (1 - cfg.lr_min_ratio) * 0.5 * (1 + math.cos(math.pi * frac))

    def group_lr(self, group: str, iteration: int = 0) -> float:
        if group == "encoder":
            base = self.cfg.backbone_lr_scale * self.cfg.lr
        elif group == "spatial_prompts":
            base = self.cfg.lr_prompt
        else:
            base = self.cfg.lr
        return base * self.lr_factor(iteration)

    def images(self, ids) -> np.ndarray:
        return self.data.images[self.data.rows(ids)]

    def build_curriculum(self) -> CurriculumState | None:
        cfg = self.cfg
        needs = cfg.use_curriculum or (cfg.use_domain_head and self.method != "vlprompt")
        if not needs:
            return None
        if cfg.domain_rep_kind == "fft_amplitude":
            lab = domain_representation(self.images(self.labelled_ids), "fft_amplitude")
            unl = domain_representation(self.images(self.unlabelled_ids), "fft_amplitude")
        else:
            with torch.no_grad():
                lab = self.model.domain_features(self.tensor(self.images(self.labelled_ids))).numpy()
                unl = self.model.domain_features(self.tensor(self.images(self.unlabelled_ids))).numpy()
        return build_state(self.labelled_ids, self.unlabelled_ids, lab, unl, cfg.r0, cfg.r_prime,
                           cfg.t_prime, cfg.domain_rep_kind)

    def tensor(self, a) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a)).to(self.dtype)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.unlabelled_ids) / (self.cfg.batch_size // 2)))

    def unlabelled_weights(self, epoch: int) -> np.ndarray:
        if self.cfg.use_curriculum:
            return weights_for(self.unlabelled_ids, epoch, self.curriculum)
        return np.ones(len(self.unlabelled_ids))

    def active_groups(self, iteration: int) -> tuple[str, set[str]]:
        groups = set(self.groups)
        if self.method == "hilo":
            phase = "joint"
        elif not self.cfg.phases:
            phase = "joint"
        else:
            phase = self.schedule.phase(iteration)
            groups = groups & PROMPT_GROUPS if phase == PROMPT else groups - PROMPT_GROUPS
        if self.cfg.freeze_prompts:
            groups -= PROMPT_GROUPS
        return phase, groups

    # -- batches ----------------------------------------------------------

    def draw(self, epoch: int, step: int):
        return draw_batch(self.labelled_ids, self.unlabelled_ids, self.unlabelled_weights(epoch),
                          self.cfg.batch_size, (self.seed, epoch, step))

    def views(self, ids, epoch: int) -> torch.Tensor:
        imgs = self.images(ids)
        return self.tensor(np.concatenate([augment_batch(imgs, ids, v, epoch, self.seed, self.cfg.grayscale_p, self.cfg.hue)
                                           for v in range(self.cfg.views)]))

    def batch_targets(self, ids):
        rows = self.data.rows(ids)
        labels = torch.as_tensor(self.data.class_ids[rows])
        labelled = torch.as_tensor(self.data.is_labelled[rows])
        return labels, labelled

    # -- losses -----------------------------------------------------------

    def discriminator_step(self, h_dom, h_sem, perm, diag: dict) -> None:
        D = self.model.discriminator
        opt = self.optimizers["discriminator"]
        for _ in range(self.cfg.mi_disc_steps):
            opt.zero_grad(set_to_none=True)
            pre = mi_estimate(h_dom.detach(), h_sem.detach(), D, perm)
            (-pre).backward()
            nn.utils.clip_grad_norm_(D.parameters(), self.cfg.grad_clip)
            opt.step()
        if self.cfg.mi_diagnostics:
            with torch.no_grad():
                diag["mi_disc_pre"] = float(pre)
                diag["mi_disc_post"] = float(mi_estimate(h_dom, h_sem, D, perm))

    def mixed_plans(self, labelled, P: int):
        partner = pair_partners(labelled, self.seed, self.iteration)
        pa = make_plan(labelled, P, self.seed, self.iteration, "a", self.cfg.beta_a, partner, self.dtype)
        pb = make_plan(labelled, P, self.seed, self.iteration, "b", self.cfg.beta_a, partner, self.dtype)
        return partner, pa, pb

    def mix_views(self, tokens, attn, n: int, labelled):
        """Two cross-labelled mixed views; view 0 uses plan a, view 1 plan b."""
        P = tokens.shape[1]
        partner, pa, pb = self.mixed_plans(labelled, P)
        t0, t1 = tokens[:n], tokens[n:2 * n]
        s0, s1 = attn[:n].detach(), attn[n:2 * n].detach()
        mixed = torch.cat([mix_patch_embeddings(t0, t0[partner], pa.beta),
                           mix_patch_embeddings(t1, t1[partner], pb.beta)])
        alpha = torch.cat([mix_coefficient(pa.beta, s0, s0[partner]),
                           mix_coefficient(pb.beta, s1, s1[partner])])
        return mixed, alpha, partner, (pa, pb)

    def mixed_targets(self, scores, labels, labelled, alpha, temp):
        """One-hot for labelled anchors, the other mixed view's sharpened prediction otherwise."""
        q = sharpen(other_view(scores, 2), temp)
        lab2 = labelled.repeat(2)
        onehot = F.one_hot(labels.repeat(2), self.K).to(scores.dtype)
        q = torch.where(lab2[:, None], onehot, q)
        return pm_soft_label(q, alpha, self.K)

    def hilo_loss(self, x, ids, diag) -> StepOutput:
        cfg, m = self.cfg, self.model
        V = cfg.views
        n = len(ids)
        labels, labelled = self.batch_targets(ids)
        tokens = m.tokens(x)
        fb = m.vit.forward_tokens(tokens)
        cls_L = fb.layer_cls[-1]
        cls_d = fb.layer_cls[m.vit.cfg.dom_tap]
        h_sem = m.sem_head(cls_L)
        comp = {}
        need_dom = cfg.use_domain_head or cfg.use_mi or cfg.mi_only
        h_dom = m.dom_head(cls_d) if need_dom else None

        if not cfg.mi_only:
            t = simgcd_terms(h_sem, F.normalize(cls_L, dim=-1), m.prototypes.normalized(), labels, labelled,
                             cfg.tau, cfg.sharpen_temp, V)
            comp.update(s_rep_u=cfg.lam * t["rep_u"], s_cls_u=cfg.lam * t["cls_u"],
                        s_rep_s=(1 - cfg.lam) * t["rep_s"], s_cls_s=(1 - cfg.lam) * t["cls_s"],
                        s_ent=cfg.eps_s * t["ent"])
            if cfg.use_domain_head:
                dlab = torch.as_tensor(self.curriculum.domain_labels(ids))
                t = simgcd_terms(h_dom, F.normalize(cls_d, dim=-1), m.dom_prototypes.normalized(), dlab,
                                 torch.ones(n, dtype=torch.bool), cfg.tau, cfg.sharpen_temp, V)
                comp.update(d_rep_u=cfg.lam * t["rep_u"], d_cls_u=cfg.lam * t["cls_u"],
                            d_rep_s=(1 - cfg.lam) * t["rep_s"], d_cls_s=(1 - cfg.lam) * t["cls_s"],
                            d_ent=cfg.eps_d * t["ent"])

        if cfg.use_mi or cfg.mi_only:
            perm = shift_derangement(h_sem.shape[0])
            if "discriminator" in self._active:
                self.discriminator_step(h_dom, h_sem, perm, diag)
            comp["mi"] = mi_estimate(h_dom, h_sem, m.discriminator, perm)
            if cfg.mi_diagnostics:
                diag["mi_enc_pre"] = float(comp["mi"].detach())

        if cfg.use_patchmix and not cfg.mi_only:
            mixed, alpha, _, _ = self.mix_views(tokens, fb.last_attn_cls, n, labelled)
            cls_m = m.vit.forward_tokens(mixed).layer_cls[-1]
            hm = m.sem_head(cls_m)
            hm_hat = F.normalize(cls_m, dim=-1)
            W2 = m.pm_prototypes.normalized()
            comp["pm_rep"] = pm_rep_loss(hm, view_positive_mask(n, 2), alpha, cfg.tau)
            q_t = self.mixed_targets(hm_hat @ W2.T, labels, labelled, alpha, cfg.sharpen_temp)
            comp["pm_cls"] = pm_cls_loss(hm_hat, W2, q_t, cfg.tau)

        return StepOutput(sum(comp.values()), comp, diag)

    def vlprompt_loss(self, x, ids, diag) -> StepOutput:
        cfg, m = self.cfg, self.model
        V = cfg.views
        n = len(ids)
        labels, labelled = self.batch_targets(ids)
        tokens = m.tokens(x)
        fb = m.vit.forward_tokens(tokens)
        pi_v = m.embed(fb.layer_cls[-1])
        E = m.text_bank()
        rho = pi_v @ E.T
        temp_sh = cfg.tau_vl / 2
        lab_rows = labelled.repeat(V)
        onehot = F.one_hot(labels.repeat(V), self.K).to(rho.dtype)
        comp = {}
        if not cfg.mi_only:
            q = torch.where(lab_rows[:, None], onehot, sharpen(other_view(rho, V), temp_sh))
            comp["cls"] = vl_cls_loss(pi_v, E, q, cfg.tau_vl)
            comp["ent"] = cfg.eps * entropy_reg(F.softmax(rho / cfg.tau_vl, dim=-1))

        if (cfg.use_mi and cfg.beta1 > 0) or cfg.mi_only:
            pi_1 = m.embed(fb.layer_cls[m.vit.cfg.dom_tap])
            perm = shift_derangement(pi_v.shape[0])
            if "discriminator" in self._active:
                self.discriminator_step(pi_1, pi_v, perm, diag)
            mi = mi_estimate(pi_1, pi_v, m.discriminator, perm)
            comp["mi"] = mi if cfg.mi_only else cfg.beta1 * mi
            if cfg.mi_diagnostics:
                diag["mi_enc_pre"] = float(mi)

        T = None
        if not cfg.mi_only and (cfg.beta2 > 0 or cfg.use_patchmix):
            q_text = F.softmax(other_view(rho, V).detach() / cfg.text_temp, dim=-1)
            T = torch.where(lab_rows[:, None], E[labels.repeat(V)], F.normalize(q_text @ E, dim=-1))
        if not cfg.mi_only and cfg.beta2 > 0:
            comp["vl"] = cfg.beta2 * vl_align_loss(pi_v, T, cfg.tau_align)

        if cfg.use_patchmix and not cfg.mi_only:
            mixed, alpha, partner, (pa, pb) = self.mix_views(tokens, fb.last_attn_cls, n, labelled)
            pi_m = m.embed(m.vit.forward_tokens(mixed).layer_cls[-1])
            rho_m = pi_m @ E.T
            q_t = self.mixed_targets(rho_m, labels, labelled, alpha, temp_sh)
            comp["pm_cls"] = vl_cls_loss(pi_m, E, q_t, cfg.tau_vl)
            T0, T1 = T[:n], T[n:2 * n]
            T_m = torch.cat([mix_text(T0, T0[partner], pa.beta_mean), mix_text(T1, T1[partner], pb.beta_mean)])
            comp["pm_vl"] = pm_vl_loss(pi_m, F.normalize(T_m, dim=-1), cfg.tau_align)

        return StepOutput(sum(comp.values()), comp, diag)

    # -- stepping ---------------------------------------------------------

    def step(self, epoch: int, step_in_epoch: int) -> dict:
        cfg = self.cfg
        batch = self.draw(epoch, step_in_epoch)
        ids = batch.ids
        x = self.views(ids, epoch)
        phase, active = self.active_groups(self.iteration)
        self._active = active
        for g, opt in self.optimizers.items():
            for pg in opt.param_groups:
                pg["lr"] = self.group_lr(g, self.iteration)
        diag: dict = {}
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)
        loss_fn = self.vlprompt_loss if self.method == "vlprompt" else self.hilo_loss
        try:
            out = loss_fn(x, ids, diag)
        except LossInputError as err:
            # features that fail validation mid-run mean the model has diverged
            raise NonFiniteLossError(f"invalid features at iteration {self.iteration}: {err}",
                                     {"iteration": self.iteration, "epoch": epoch, "components": {},
                                      "batch": ids.tolist()}) from err
        comps = {k: float(v.detach()) for k, v in out.components.items()}
        total = float(out.total.detach())
        if not math.isfinite(total) or not all(math.isfinite(v) for v in comps.values()):
            raise NonFiniteLossError(
                f"non-finite loss at iteration {self.iteration}",
                {"iteration": self.iteration, "epoch": epoch, "components": comps, "batch": ids.tolist()})
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)
        out.total.backward()
        descent = [g for g in self.groups if g in active and g != "discriminator"]
        params = [p for g in descent for _, p in self.groups[g] if p.grad is not None]
        if params:
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        for g in descent:
            self.optimizers[g].step()
        if cfg.mi_diagnostics and "mi" in comps:
            diag["mi_enc_post"] = self.probe_mi(x)
        if self.curriculum is not None:
            diag["n_domain_b"] = int(sum(self.curriculum.assignment[int(i)] == "b" for i in batch.unlabelled_ids))
        diag["with_replacement"] = batch.with_replacement
        rec = {
            "iteration": self.iteration, "epoch": epoch, "step": step_in_epoch, "phase": phase,
            "lr": {g: self.group_lr(g, self.iteration) for g in sorted(active)},
            "total": total, "components": comps, "diag": diag, "batch": ids.tolist(),
        }
        self.history.append(rec)
        self.iteration += 1
        return rec

    def probe_mi(self, x) -> float:
        """Î on the same batch after the descent step."""
        m = self.model
        with torch.no_grad():
            fb = m.vit.forward_tokens(m.tokens(x))
            if self.method == "vlprompt":
                a, b = m.embed(fb.layer_cls[m.vit.cfg.dom_tap]), m.embed(fb.layer_cls[-1])
            else:
                a, b = m.dom_head(fb.layer_cls[m.vit.cfg.dom_tap]), m.sem_head(fb.layer_cls[-1])
            return float(mi_estimate(a, b, m.discriminator, shift_derangement(a.shape[0])))

    def train(self, epochs: int | None = None, max_steps: int | None = None, on_step=None) -> list[dict]:
        epochs = self.cfg.epochs if epochs is None else epochs
        done = 0
        while self.epoch < epochs:
            for s in range(self.steps_per_epoch):
                rec = self.step(self.epoch, s)
                if on_step is not None:
                    on_step(rec)
                done += 1
                if max_steps is not None and done >= max_steps:
                    return self.history
            self.epoch += 1
        return self.history

    # -- checkpoints ------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        for g, opt in self.optimizers.items():
            for name, p in self.groups[g]:
                st = opt.state.get(p, {})
                if "momentum_buffer" in st and st["momentum_buffer"] is not None:
                    out[f"momentum/{name}"] = st["momentum_buffer"]
        return out

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        chunks, entries, offset = [], {}, 0
        for name, t in self.state_tensors().items():
            arr = t.detach().cpu().numpy()
            arr = arr.astype(np.int64) if arr.dtype.kind in "iub" else arr.astype(np.float64)
            rec = blob.encode(arr)
            entries[name] = {"offset": offset, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", "")}
            chunks.append(rec)
            offset += len(rec)
        sidecar = {
            "method": self.method, "config": self.run_cfg.to_dict(), "iteration": self.iteration,
            "epoch": self.epoch, "K": self.K, "entries": entries,
            "curriculum": None if self.curriculum is None else json.loads(self.curriculum.dump()),
        }
        atomic_write(d / CHECKPOINT_FILE, b"".join(chunks))
        atomic_write(d / SIDECAR_FILE, json.dumps(sidecar, indent=1).encode("utf-8"))
        return d / CHECKPOINT_FILE

    def load_state(self, tensors: dict[str, np.ndarray], sidecar: dict) -> None:
        if sidecar["method"] != self.method:
            raise CheckpointError(f"checkpoint is for {sidecar['method']!r}, not {self.method!r}")
        sd = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model/")}
        own = self.model.state_dict()
        for k, v in sd.items():
            sd[k] = v.to(own[k].dtype)
        self.model.load_state_dict(sd, strict=True)
        for g, opt in self.optimizers.items():
            for name, p in self.groups[g]:
                key = f"momentum/{name}"
                if key in tensors:
                    opt.state[p]["momentum_buffer"] = torch.from_numpy(tensors[key]).to(p.dtype)
        self.iteration = sidecar["iteration"]
        self.epoch = sidecar["epoch"]


def atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    if d.is_file():
        d = d.parent
    try:
        sidecar = json.loads((d / SIDECAR_FILE).read_text(encoding="utf-8"))
        buf = (d / CHECKPOINT_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    tensors = {}
    for name, e in sidecar["entries"].items():
        arr, _ = blob.decode(buf, e["offset"])
        if list(arr.shape) != e["shape"]:
            raise CheckpointError(f"shape mismatch for {name}")
        tensors[name] = arr
    return sidecar, tensors


def load_trainer(dataset: Dataset, directory) -> Trainer:
    from .config import run_config_from_dict

    sidecar, tensors = read_checkpoint(directory)
    tr = Trainer(dataset, run_config_from_dict(sidecar["config"]))
    tr.load_state(tensors, sidecar)
    return tr


# --------------------------------------------------------------------------
# entry points

def write_history(history: list[dict], path: Path) -> None:
    atomic_write(path, "".join(json.dumps(r) + "\n" for r in history).encode("utf-8"))


def _run(dataset: Dataset, run_cfg: RunConfig, out_dir=None, **kw) -> Trainer:
    tr = Trainer(dataset, run_cfg)
    tr.train(**kw)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        tr.save(d)
        write_history(tr.history, d / HISTORY_FILE)
        atomic_write(d / ECHO_FILE, run_cfg.to_json().encode("utf-8"))
    return tr


def _with_method(run_cfg: RunConfig, method: str) -> RunConfig:
    if run_cfg.method != method:
        raise ValueError(f"config is for method {run_cfg.method!r}, expected {method!r}")
    return run_cfg


def train_hilo(dataset: Dataset, run_cfg: RunConfig, out_dir=None, **kw) -> Trainer:
    return _run(dataset, _with_method(run_cfg, "hilo"), out_dir, **kw)


def train_hlprompt(dataset: Dataset, run_cfg: RunConfig, out_dir=None, **kw) -> Trainer:
    return _run(dataset, _with_method(run_cfg, "hlprompt"), out_dir, **kw)


def train_vlprompt(dataset: Dataset, run_cfg: RunConfig, out_dir=None, **kw) -> Trainer:
    return _run(dataset, _with_method(run_cfg, "vlprompt"), out_dir, **kw)


TRAINERS = {"hilo": train_hilo, "hlprompt": train_hlprompt, "vlprompt": train_vlprompt}
