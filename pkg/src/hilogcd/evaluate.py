"""Hungarian-matched clustering accuracy and All/Old/New reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

SCHEMA_VERSION = 1


class EvalError(ValueError):
    pass


class MethodMismatchError(EvalError):
    pass


def hungarian_acc(y_true, y_pred, K: int | None = None) -> tuple[float, dict[int, int]]:
    """Accuracy under the best one-to-one cluster -> class map.

    Returns (acc, {cluster: class}). The contingency matrix is padded square to
    max(K, largest label + 1) so surplus clusters map to no real sample.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EvalError("empty input")
    if y_true.shape != y_pred.shape:
        raise EvalError("y_true and y_pred differ in length")
    if y_true.min() < 0 or y_pred.min() < 0:
        raise EvalError("labels must be non-negative")
    D = max(int(y_true.max()), int(y_pred.max())) + 1
    if K is not None:
        if y_true.max() >= K:
            raise EvalError(f"true label {int(y_true.max())} outside [0, {K})")
        D = max(D, K)
    w = np.zeros((D, D), dtype=np.int64)
    np.add.at(w, (y_pred, y_true), 1)
    rows, cols = linear_sum_assignment(w, maximize=True)
    acc = w[rows, cols].sum() / y_true.size
    return float(acc), {int(r): int(c) for r, c in zip(rows, cols)}


def _acc_under(y_true, y_pred, mapping, mask) -> float | None:
    if not mask.any():
        return None
    mapped = np.array([mapping.get(int(p), -1) for p in y_pred[mask]])
    return float((mapped == y_true[mask]).mean())


@dataclass
class EvalReport:
    domains: dict = field(default_factory=dict)     # "0" / "1" / "overall" -> {All, Old, New}
    counts: dict = field(default_factory=dict)      # same keys -> {All, Old, New} sample counts
    assignment: dict = field(default_factory=dict)  # cluster -> class
    config_hash: str | None = None
    checkpoint_id: str | None = None
    method: str | None = None
    schema_version: int = SCHEMA_VERSION

    def headline(self) -> dict[str, float | None]:
        """The six per-domain numbers."""
        return {f"d{d}_{s}": self.domains.get(str(d), {}).get(s) for d in (0, 1) for s in ("All", "Old", "New")}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def split_accuracies(y_true, y_pred, domain_ids, base_classes, K: int | None = None) -> EvalReport:
    """One global matching over the whole pool; splits are restrictions of it."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    domain_ids = np.asarray(domain_ids)
    _, mapping = hungarian_acc(y_true, y_pred, K)
    is_old = np.isin(y_true, np.asarray(list(base_classes), dtype=np.int64))
    rep = EvalReport(assignment={str(k): v for k, v in mapping.items()})
    subsets = {"overall": np.ones_like(y_true, dtype=bool)}
    for d in sorted(set(domain_ids.tolist())):
        subsets[str(d)] = domain_ids == d
    for key, sub in subsets.items():
        splits = {"All": sub, "Old": sub & is_old, "New": sub & ~is_old}
        rep.domains[key] = {s: _acc_under(y_true, y_pred, mapping, m) for s, m in splits.items()}
        rep.counts[key] = {s: int(m.sum()) for s, m in splits.items()}
    return rep


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def predict(model, images: np.ndarray, dtype=torch.float64, use_prompts: bool = True,
            batch_size: int = 256) -> np.ndarray:
    """Argmax over prototype logits (HiLo/HLPrompt) or matching scores (VLPrompt)."""
    out = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = torch.as_tensor(np.asarray(images[i:i + batch_size])).to(dtype)
                out.append(model.logits(x, use_prompts).argmax(dim=-1).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_trainer(trainer, use_prompts: bool = True, checkpoint_id: str | None = None) -> EvalReport:
    data = trainer.data
    ids = data.unlabelled_ids()
    rows = data.rows(ids)
    pred = predict(trainer.model, data.images[rows], trainer.dtype, use_prompts)
    rep = split_accuracies(data.class_ids[rows], pred, data.domain_ids[rows], data.base_classes, data.K)
    rep.config_hash = config_hash(trainer.run_cfg.to_dict())
    rep.checkpoint_id = checkpoint_id
    rep.method = trainer.method
    return rep


def evaluate_checkpoint(checkpoint, dataset, method: str | None = None, use_prompts: bool = True) -> EvalReport:
    from .trainer import load_trainer, read_checkpoint

    sidecar, _ = read_checkpoint(checkpoint)
    if method is not None and sidecar["method"] != method:
        raise MethodMismatchError(f"checkpoint was trained with {sidecar['method']!r}, not {method!r}")
    if sidecar["K"] != dataset.K:
        raise MethodMismatchError(f"checkpoint has K={sidecar['K']}, dataset has K={dataset.K}")
    tr = load_trainer(dataset, checkpoint)
    ckpt_id = hashlib.sha256(json.dumps(sidecar["entries"], sort_keys=True).encode()).hexdigest()[:16]
    return evaluate_trainer(tr, use_prompts, f"{sidecar['method']}@{sidecar['iteration']}:{ckpt_id}")
