import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from hilogcd.config import build_run_config
from hilogcd.curriculum import draw_batch
from hilogcd.synthdata import augment_batch
from hilogcd.trainer import (CHECKPOINT_FILE, ECHO_FILE, HISTORY_FILE, CheckpointError, NonFiniteLossError,
                             Trainer, build_model, load_trainer, read_checkpoint, train_hilo)

TINY = ["vit.image_size=16", "vit.patch_size=4", "vit.embed_dim=16", "vit.depth=2", "vit.heads=2",
        "batch_size=16", "proj_dim=8", "disc_hidden=16", "shared_dim=16", "token_dim=16"]


def tiny(method="hilo", *sets, seed=1):
    return build_run_config({"method": method, "seed": seed}, TINY + list(sets))


def snapshot(tr):
    return {g: [p.detach().clone() for _, p in ps] for g, ps in tr.groups.items()}


def unchanged(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# -- independent references --------------------------------------------------------

def reference_simgcd(h, hh, W, labels, labelled, lam, eps, tau, tau_sh):
    N = h.shape[0]
    n = N // 2
    partner = torch.arange(N).add(n).remainder(N)
    z = (h @ h.T / tau).masked_fill(torch.eye(N, dtype=torch.bool), float("-inf"))
    logp = z - torch.logsumexp(z, dim=1, keepdim=True)
    rep_u = -logp[torch.arange(N), partner].mean()
    cos = hh @ W.T
    q = torch.softmax(cos[partner].detach() / tau_sh, dim=1)
    log_pred = torch.log_softmax(cos / tau, dim=1)
    cls_u = -(q * log_pred).sum(1).mean()
    y = labels.repeat(2)
    rows = [i for i in range(N) if labelled[i % n]]
    terms = []
    for i in rows:
        pos = {int(partner[i])} | {j for j in rows if j != i and y[j] == y[i]}
        terms.append(-torch.stack([logp[i, j] for j in sorted(pos)]).mean())
    rep_s = torch.stack(terms).mean()
    cls_s = -log_pred[rows, y[rows]].mean()
    pbar = torch.softmax(cos / tau, dim=1).mean(0)
    ent = (pbar * torch.log(pbar)).sum()
    return lam * (rep_u + cls_u) + (1 - lam) * (rep_s + cls_s) + eps * ent


def reference_simgcd_trace(ds, rc, steps):
    cfg = rc.train
    model = build_model(rc, ds.K)
    params = [p for name, p in model.named_parameters() if name.split(".")[0] in ("vit", "sem_head", "prototypes")]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    lab_ids, unl_ids = ds.labelled_ids(), ds.unlabelled_ids()
    per_epoch = math.ceil(len(unl_ids) / (cfg.batch_size // 2))
    trace = []
    for it in range(steps):
        epoch, s = divmod(it, per_epoch)
        ids = draw_batch(lab_ids, unl_ids, np.ones(len(unl_ids)), cfg.batch_size, (rc.seed, epoch, s)).ids
        rows = ds.rows(ids)
        x = torch.as_tensor(np.concatenate([augment_batch(ds.images[rows], ids, v, epoch, rc.seed)
                                            for v in range(2)])).double()
        cls = model.vit(x).layer_cls[-1]
        loss = reference_simgcd(model.sem_head(cls), F.normalize(cls, dim=-1), model.prototypes.normalized(),
                                torch.as_tensor(ds.class_ids[rows]), torch.as_tensor(ds.is_labelled[rows]),
                                cfg.lam, cfg.eps_s, cfg.tau, cfg.tau / 2)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], cfg.grad_clip)
        opt.step()
        trace.append(float(loss.detach()))
    return trace


PLAIN = ("use_mi=0", "use_patchmix=0", "use_curriculum=0", "use_domain_head=0")


def test_hilo_reduces_to_simgcd(small_dataset):
    rc = tiny("hilo", *PLAIN)
    tr = Trainer(small_dataset, rc)
    tr.train(max_steps=100)
    got = [r["total"] for r in tr.history]
    ref = reference_simgcd_trace(small_dataset, rc, 100)
    assert len(got) == 100
    assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-6


def test_hlprompt_zero_prompt_reproduces_hilo(small_dataset):
    a = Trainer(small_dataset, tiny("hilo"))
    b = Trainer(small_dataset, tiny("hlprompt", "phases=0", "freeze_prompts=1"))
    a.train(max_steps=30)
    b.train(max_steps=30)
    assert torch.count_nonzero(b.model.fg_prompt.q_fg) == 0
    assert max(abs(x["total"] - y["total"]) for x, y in zip(a.history, b.history)) <= 1e-6


def test_vlprompt_reduction_matches_manual_composition(small_dataset):
    tr = Trainer(small_dataset, tiny("vlprompt", "beta1=0", "beta2=0", "use_patchmix=0", "k=3"))
    cfg, m = tr.cfg, tr.model
    for it in range(8):
        epoch, s = divmod(it, tr.steps_per_epoch)
        ids = tr.draw(epoch, s).ids
        x = tr.views(ids, epoch)
        labels, labelled = tr.batch_targets(ids)
        with torch.no_grad():
            prompted = x + m.spatial_prompt.Q_s * m.spatial_prompt.mask
            pi_v = F.normalize(m.proj(m.vit(prompted).layer_cls[-1]), dim=-1)
            E = F.normalize(m.text_encoder(m.text_prompts.sequences()), dim=-1)
            rho = pi_v @ E.T
            n = len(ids)
            other = torch.cat([rho[n:], rho[:n]])
            q = torch.softmax(other / (cfg.tau_vl / 2), dim=1)
            lab2 = labelled.repeat(2)
            q[lab2] = F.one_hot(labels.repeat(2), tr.K).double()[lab2]
            cls = -(q * torch.log_softmax(rho / cfg.tau_vl, dim=1)).sum(1).mean()
            pbar = torch.softmax(rho / cfg.tau_vl, dim=1).mean(0)
            want = cls + cfg.eps * (pbar * torch.log(pbar)).sum()
        rec = tr.step(epoch, s)
        assert set(rec["components"]) == {"cls", "ent"}
        assert rec["total"] == pytest.approx(float(want), abs=1e-9)
        if s + 1 == tr.steps_per_epoch:
            tr.epoch += 1


# -- alternation ------------------------------------------------------------------------

@pytest.mark.parametrize("method,first", [("hlprompt", "prompt"), ("vlprompt", "model")])
def test_phase_isolation(small_dataset, method, first):
    tr = Trainer(small_dataset, tiny(method, "k=3", "lr_prompt=0.5"))
    phases = []
    for it in range(14):
        before = snapshot(tr)
        _, active = tr.active_groups(tr.iteration)
        rec = tr.step(0, it % tr.steps_per_epoch)
        after = snapshot(tr)
        phases.append(rec["phase"])
        for g in tr.groups:
            if g not in active:
                assert unchanged(before[g], after[g]), (it, g)
        if rec["phase"] == "prompt":
            assert active == {"spatial_prompts"}
            assert not unchanged(before["spatial_prompts"], after["spatial_prompts"])
        else:
            assert not unchanged(before["encoder"], after["encoder"])
    assert phases[0] == first
    assert phases[:2] == [first] * 2 and phases[2] != first and phases[5] == first


def test_vlprompt_iteration_zero(small_dataset):
    tr = Trainer(small_dataset, tiny("vlprompt"))
    q0 = tr.model.spatial_prompt.Q_s.detach().clone()
    ctx0 = tr.model.text_prompts.ctx.detach().clone()
    gamma0 = tr.model.text_prompts.gamma.detach().clone()
    w0 = {k: v.clone() for k, v in tr.model.text_encoder.weights().items()}
    tr.train(max_steps=3)
    assert tr.history[0]["phase"] == "model"
    assert torch.equal(tr.model.spatial_prompt.Q_s, q0)
    assert not torch.equal(tr.model.text_prompts.ctx, ctx0)
    assert not torch.equal(tr.model.text_prompts.gamma, gamma0)
    assert all(torch.equal(w0[k], v) for k, v in tr.model.text_encoder.weights().items())


def test_text_encoder_frozen_over_run(small_dataset):
    tr = Trainer(small_dataset, tiny("vlprompt", "k=2"))
    w0 = {k: v.clone() for k, v in tr.model.text_encoder.weights().items()}
    tr.train(epochs=2)
    assert all(torch.equal(w0[k], v) for k, v in tr.model.text_encoder.weights().items())
    assert "text_encoder" not in {n.split(".")[0] for n, _ in tr.model.named_parameters()}


def test_mask_counter_tracks_images(small_dataset):
    tr = Trainer(small_dataset, tiny("hlprompt"))
    tr.train(max_steps=3)
    assert tr.model.masks_computed == 3 * 2 * tr.cfg.batch_size


def test_encoder_lr_scaling(small_dataset):
    tr = Trainer(small_dataset, tiny("hlprompt", "backbone_lr_scale=0.1", "lr=0.2", "lr_prompt=0.3"))
    assert tr.group_lr("encoder") == pytest.approx(0.02)
    assert tr.group_lr("heads") == 0.2 and tr.group_lr("spatial_prompts") == 0.3
    cos = Trainer(small_dataset, tiny("hilo", "lr_schedule=cosine", "epochs=2"))
    total = 2 * cos.steps_per_epoch
    assert cos.group_lr("heads", 0) == cos.cfg.lr
    assert cos.group_lr("heads", total // 2) == pytest.approx(cos.cfg.lr * (0.5 + 0.5 * cos.cfg.lr_min_ratio))
    assert cos.group_lr("heads", total) == pytest.approx(cos.cfg.lr * cos.cfg.lr_min_ratio)


# -- contracts --------------------------------------------------------------------------

def test_one_epoch_smoke_and_decomposition(small_dataset):
    assert len(small_dataset) == 64
    for method in ("hilo", "hlprompt", "vlprompt"):
        tr = Trainer(small_dataset, tiny(method))
        tr.train(epochs=1)
        assert len(tr.history) == tr.steps_per_epoch
        for rec in tr.history:
            assert all(math.isfinite(v) for v in rec["components"].values())
            assert rec["total"] == pytest.approx(sum(rec["components"].values()), abs=1e-6)
    hilo_keys = set(Trainer(small_dataset, tiny("hilo")).train(max_steps=1)[0]["components"])
    assert {"s_rep_u", "s_cls_u", "s_rep_s", "s_cls_s", "s_ent", "d_rep_u", "d_ent", "mi", "pm_rep",
            "pm_cls"} <= hilo_keys


def test_determinism_bit_identical(small_dataset):
    runs = []
    for _ in range(2):
        tr = Trainer(small_dataset, tiny("hilo"))
        tr.train(max_steps=10)
        runs.append(tr)
    a, b = runs
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]
    assert [r["components"] for r in a.history] == [r["components"] for r in b.history]
    assert all(torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))
    c = Trainer(small_dataset, tiny("hilo", seed=2))
    c.train(max_steps=2)
    assert c.history[0]["total"] != a.history[0]["total"]


def test_adversarial_sign_contract(small_dataset):
    tr = Trainer(small_dataset, tiny("hilo", "mi_only=1", "mi_diagnostics=1", "lr=0.01"))
    tr.train(max_steps=30)
    d = [r["diag"] for r in tr.history]
    disc_up = np.mean([x["mi_disc_post"] > x["mi_disc_pre"] for x in d])
    enc_down = np.mean([x["mi_enc_post"] < x["mi_enc_pre"] for x in d])
    assert disc_up >= 0.9 and enc_down >= 0.9
    assert set(tr.history[0]["components"]) == {"mi"}


def test_curriculum_holds_back_domain_b(small_dataset):
    tr = Trainer(small_dataset, tiny("hilo", "t_prime=2", "use_patchmix=0"))
    tr.train(epochs=5)
    per_epoch = {}
    for r in tr.history:
        per_epoch.setdefault(r["epoch"], 0)
        per_epoch[r["epoch"]] += r["diag"]["n_domain_b"]
    assert all(per_epoch[e] == 0 for e in (0, 1, 2))
    assert per_epoch[3] > 0 and per_epoch[4] > 0


def test_non_finite_loss_aborts_with_snapshot(small_dataset):
    tr = Trainer(small_dataset, tiny("hilo"))
    with torch.no_grad():
        tr.model.vit.cls_token.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        tr.train(max_steps=1)
    assert info.value.snapshot["iteration"] == 0 and len(info.value.snapshot["batch"]) == 16


# -- checkpoints ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["hilo", "hlprompt", "vlprompt"])
def test_checkpoint_roundtrip_and_resume(small_dataset, tmp_path, method):
    a = Trainer(small_dataset, tiny(method, "k=2"))
    a.train(max_steps=5)
    a.save(tmp_path)
    b = load_trainer(small_dataset, tmp_path)
    sa, sb = a.state_tensors(), b.state_tensors()
    assert sa.keys() == sb.keys()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert (b.iteration, b.epoch) == (a.iteration, a.epoch)
    a.history.clear()
    a.train(max_steps=3)
    b.train(max_steps=3)
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]


def test_checkpoint_errors(small_dataset, tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path)
    tr = Trainer(small_dataset, tiny("hilo"))
    tr.save(tmp_path)
    sidecar, tensors = read_checkpoint(tmp_path / CHECKPOINT_FILE)
    other = Trainer(small_dataset, tiny("vlprompt"))
    with pytest.raises(CheckpointError):
        other.load_state(tensors, sidecar)


def test_train_entry_point_writes_artifacts(small_dataset, tmp_path):
    rc = tiny("hilo")
    tr = train_hilo(small_dataset, rc, tmp_path, max_steps=4)
    lines = (tmp_path / HISTORY_FILE).read_text().splitlines()
    assert len(lines) == 4 == len(tr.history)
    rec = json.loads(lines[0])
    assert {"iteration", "phase", "lr", "total", "components"} <= set(rec)
    assert json.loads((tmp_path / ECHO_FILE).read_text()) == rc.to_dict()
    assert (tmp_path / CHECKPOINT_FILE).exists()
    with pytest.raises(ValueError):
        train_hilo(small_dataset, tiny("vlprompt"), tmp_path, max_steps=1)


def test_init_ignores_process_default_dtype(small_dataset):
    rc = tiny("hilo", "dtype=float32")
    a = build_model(rc, 4).state_dict()
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    try:
        b = build_model(rc, 4).state_dict()
    finally:
        torch.set_default_dtype(prev)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert torch.get_default_dtype() == prev
