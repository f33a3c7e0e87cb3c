"""Training and run configuration with JSON loading and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .backbone import VitConfig
from .prompts import AffinityConfig

METHODS = ("hilo", "hlprompt", "vlprompt")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # SimGCD / HiLo objective
    lam: float = 0.35
    eps: float = 2.0              # VLPrompt entropy weight
    eps_s: float = 2.0
    eps_d: float = 0.1
    tau: float = 0.07
    tau_sharpen: float | None = None     # None -> tau / 2
    tau_vl: float = 0.007
    tau_text: float | None = None        # None -> tau_vl / 2
    tau_align: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.4
    beta_a: float = 1.0
    # optimisation
    lr: float = 0.05
    lr_prompt: float = 0.05
    backbone_lr_scale: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-5
    grad_clip: float = 5.0
    lr_schedule: str = "constant"   # or "cosine", annealed over epochs * steps_per_epoch
    lr_min_ratio: float = 1e-3
    grayscale_p: float = 0.0        # optional random-grayscale augmentation
    hue: float = 0.0                # optional hue rotation, max fraction of a turn
    epochs: int = 50
    batch_size: int = 32
    views: int = 2
    mi_disc_steps: int = 1
    # alternation
    k: int = 20
    phases: bool = True
    freeze_prompts: bool = False
    # component switches
    use_mi: bool = True
    use_patchmix: bool = True
    use_curriculum: bool = True
    use_domain_head: bool = True
    mi_only: bool = False          # diagnostic: the encoder minimises only L_MI
    mi_diagnostics: bool = False   # log Î before/after each update on the same batch
    # curriculum
    r0: float = 0.0
    r_prime: float = 1.0
    t_prime: int = 20
    domain_rep_kind: str = "fft_amplitude"
    # heads and prompts
    proj_dim: int = 32
    disc_hidden: int = 64
    n_ctx: int = 4
    tokens_per_class: int = 1
    token_dim: int = 64
    shared_dim: int = 64
    border: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("tau", "tau_vl", "tau_align"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("tau_sharpen", "tau_text"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.views < 2:
            raise ConfigError("need at least 2 views")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 4")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.lr_min_ratio <= 1:
            raise ConfigError("lr_min_ratio must lie in [0, 1]")
        if not 0 <= self.grayscale_p <= 1:
            raise ConfigError("grayscale_p must lie in [0, 1]")
        if not 0 <= self.hue <= 0.5:
            raise ConfigError("hue must lie in [0, 0.5]")
        if self.domain_rep_kind not in ("fft_amplitude", "backbone_feature"):
            raise ConfigError(f"unknown domain_rep_kind {self.domain_rep_kind!r}")

    @property
    def sharpen_temp(self) -> float:
        return self.tau / 2 if self.tau_sharpen is None else self.tau_sharpen

    @property
    def text_temp(self) -> float:
        return self.tau_vl / 2 if self.tau_text is None else self.tau_text


# Per-method defaults layered under the user's config.
METHOD_DEFAULTS = {
    "hilo": {},
    "hlprompt": {},
    "vlprompt": {"weight_decay": 5e-4},
}


@dataclass
class RunConfig:
    method: str = "hilo"
    data: str | None = None
    out: str | None = None
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


SECTIONS = {"train": TrainConfig, "vit": VitConfig, "affinity": AffinityConfig}
TOP_LEVEL = ("method", "data", "out", "seed")


def _coerce(value, current):
    """Parse a ``--set`` string against the type of the current value."""
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {value!r} as a boolean")
    if isinstance(current, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"cannot parse {value!r} as an integer") from None
    if isinstance(current, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(current, float) or current is None:
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            if current is None:
                return value
            raise ConfigError(f"cannot parse {value!r} as a number") from None
    return value


def _locate(key: str) -> tuple[str | None, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in SECTIONS[section].__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    if key in TOP_LEVEL:
        return None, key
    hits = [s for s, cls in SECTIONS.items() if key in cls.__dataclass_fields__]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; qualify it as one of {[h + '.' + key for h in hits]}")
    return hits[0], key


def build_run_config(doc: dict | None = None, overrides=(), **top) -> RunConfig:
    """Defaults, then the JSON document, then ``key=value`` overrides, then explicit flags."""
    doc = dict(doc or {})
    flat: dict[str, dict] = {s: {} for s in SECTIONS}
    head: dict = {}
    for key, value in doc.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for k, v in value.items():
                _locate(f"{key}.{k}")
                flat[key][k] = v
        else:
            section, name = _locate(key)
            (head if section is None else flat[section])[name] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, name = _locate(key.strip())
        (head if section is None else flat[section])[name] = value
    head.update({k: v for k, v in top.items() if v is not None})
    method = head.get("method", "hilo")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    train_vals = {**METHOD_DEFAULTS[method], **flat["train"]}
    try:
        sections = {}
        for name, cls in SECTIONS.items():
            vals = train_vals if name == "train" else flat[name]
            defaults = cls()
            sections[name] = cls(**{k: _coerce(v, getattr(defaults, k)) for k, v in vals.items()})
        seed = _coerce(head.get("seed", 0), 0)
        return RunConfig(method=method, data=head.get("data"), out=head.get("out"), seed=seed, **sections)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def run_config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``; the echo file reproduces the run."""
    d = dict(d)
    for s in SECTIONS:
        if s in d and isinstance(d[s], dict):
            d[s] = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d[s].items()}
    return build_run_config(d)
