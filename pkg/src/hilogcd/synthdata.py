"""Procedural two-domain glyph datasets and their on-disk format."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import blob
from .seeding import np_rng

NUM_SHAPES = 8
NUM_FILLS = 8
GLYPH_LIBRARY_SIZE = NUM_SHAPES * NUM_FILLS

FG_COLOR = np.array([0.9, 0.55, 0.2], dtype=np.float32)
BG_COLOR = np.array([0.15, 0.2, 0.3], dtype=np.float32)
EDGE_BLUR = 0.5   # anti-aliasing; keeps clean spectra low-pass

# domain-1 photometric shift
CHANNEL_PERM = (2, 0, 1)
BRIGHTNESS_SHIFT = 0.15
NOISE_STD = 0.05


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class InconsistentManifestError(DatasetError):
    pass


@dataclass
class SplitSpec:
    base_classes: list[int]
    novel_classes: list[int]
    labelled_fraction_per_base_class: float = 0.5
    domains: dict = field(default_factory=lambda: {"seen": [0], "new": [1]})

    def validate(self, K: int) -> None:
        base, novel = set(self.base_classes), set(self.novel_classes)
        if not base:
            raise ConfigError("base class set must be non-empty")
        if base & novel:
            raise ConfigError("base and novel classes overlap")
        if base | novel != set(range(K)):
            raise ConfigError(f"base and novel classes must partition [0, {K})")
        if not 0.0 < self.labelled_fraction_per_base_class <= 1.0:
            raise ConfigError("labelled fraction must lie in (0, 1]")


@dataclass
class Record:
    sample_id: int
    class_id: int
    domain_id: int
    is_labelled: bool
    tensor_file_offset: int


@dataclass
class DatasetManifest:
    dataset_name: str
    K: int
    image_shape: list[int]
    split_spec: SplitSpec
    records: list[Record]
    generator_seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["split_spec"] = SplitSpec(**d["split_spec"])
        d["records"] = [Record(**r) for r in d["records"]]
        return cls(**d)

    def cell_counts(self) -> dict[tuple[int, int, bool], int]:
        counts: dict[tuple[int, int, bool], int] = {}
        for r in self.records:
            key = (r.class_id, r.domain_id, r.is_labelled)
            counts[key] = counts.get(key, 0) + 1
        return counts


@dataclass
class GenConfig:
    K: int = 8
    n_per_class_per_domain: int = 16
    image_shape: tuple = (3, 32, 32)
    seed: int = 0
    patch_size: int = 4
    labelled_fraction: float = 0.5
    base_classes: list | None = None
    dataset_name: str = "glyphs"

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown gen-data keys: {sorted(unknown)}")
        return cls(**d)


class Dataset:
    """A manifest plus its image tensor, with per-record arrays for indexing."""

    def __init__(self, manifest: DatasetManifest, images: np.ndarray):
        if len(manifest.records) != images.shape[0]:
            raise InconsistentManifestError(
                f"manifest has {len(manifest.records)} records, blob holds {images.shape[0]} tensors")
        self.manifest = manifest
        self.images = images
        recs = manifest.records
        self.sample_ids = np.array([r.sample_id for r in recs], dtype=np.int64)
        self.class_ids = np.array([r.class_id for r in recs], dtype=np.int64)
        self.domain_ids = np.array([r.domain_id for r in recs], dtype=np.int64)
        self.is_labelled = np.array([r.is_labelled for r in recs], dtype=bool)
        self._row = {int(s): i for i, s in enumerate(self.sample_ids)}

    @property
    def K(self) -> int:
        return self.manifest.K

    @property
    def base_classes(self) -> list[int]:
        return list(self.manifest.split_spec.base_classes)

    def rows(self, ids) -> np.ndarray:
        return np.array([self._row[int(i)] for i in ids], dtype=np.int64)

    def labelled_ids(self) -> np.ndarray:
        return self.sample_ids[self.is_labelled]

    def unlabelled_ids(self) -> np.ndarray:
        return self.sample_ids[~self.is_labelled]

    def __len__(self) -> int:
        return len(self.sample_ids)


# --------------------------------------------------------------------------
# rendering

def glyph_of_class(class_id: int) -> tuple[int, int]:
    """Library index -> (shape, fill); bijective over the 64 glyphs."""
    shape = class_id % NUM_SHAPES
    fill = (class_id // NUM_SHAPES + 3 * shape) % NUM_FILLS
    return shape, fill


def _shape_mask(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    au, av = np.abs(u), np.abs(v)
    if shape == 0:
        return np.maximum(au, av) <= 0.8
    if shape == 1:
        return r <= 0.85
    if shape == 2:
        return (v >= -0.85) & (v <= 0.85) & (au <= (v + 0.85) / 1.9)
    if shape == 3:
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if shape == 4:
        return au + av <= 0.95
    if shape == 5:
        return (r >= 0.5) & (r <= 0.95)
    if shape == 6:
        return (au <= 0.9) & ((np.abs(v - 0.5) <= 0.22) | (np.abs(v + 0.5) <= 0.22))
    if shape == 7:
        return ((np.abs(v + 0.65) <= 0.25) & (au <= 0.9)) | ((au <= 0.25) & (v >= -0.65) & (v <= 0.95))
    raise ConfigError(f"unknown shape {shape}")


def _fill_pattern(fill: int, mask: np.ndarray, x: np.ndarray, y: np.ndarray, r: np.ndarray) -> np.ndarray:
    lo = 0.3
    if fill == 0:
        return np.ones_like(r)
    if fill == 1:
        return np.where((y // 2) % 2 == 0, 1.0, lo)
    if fill == 2:
        return np.where((x // 2) % 2 == 0, 1.0, lo)
    if fill == 3:
        return np.where(((x // 2) + (y // 2)) % 2 == 0, 1.0, lo)
    if fill == 4:
        return np.where(((x + y) // 2) % 2 == 0, 1.0, lo)
    if fill == 5:
        return np.where((x % 3 == 0) | (y % 3 == 0), 1.0, lo)
    if fill == 6:
        m = mask
        inner = m.copy()
        inner[1:, :] &= m[:-1, :]
        inner[:-1, :] &= m[1:, :]
        inner[:, 1:] &= m[:, :-1]
        inner[:, :-1] &= m[:, 1:]
        return np.where(m & ~inner, 1.0, 0.2)
    if fill == 7:
        return np.clip(1.0 - 0.7 * r, 0.2, 1.0)
    raise ConfigError(f"unknown fill {fill}")


def render_glyph(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one clean image [3, size, size] in [0, 1] with jittered position and scale."""
    shape, fill = glyph_of_class(class_id)
    cx = (size - 1) / 2 + rng.uniform(-2.0, 2.0)
    cy = (size - 1) / 2 + rng.uniform(-2.0, 2.0)
    half = 0.36 * size * rng.uniform(0.85, 1.0)
    y, x = np.mgrid[0:size, 0:size]
    u = (x - cx) / half
    v = (y - cy) / half
    mask = _shape_mask(shape, u, v)
    pattern = _fill_pattern(fill, mask, x, y, np.sqrt(u * u + v * v))
    alpha = gaussian_filter((mask * pattern).astype(np.float32), EDGE_BLUR, mode="nearest")
    bg = BG_COLOR + rng.uniform(-0.03, 0.03, size=3).astype(np.float32)
    img = bg[:, None, None] + (FG_COLOR - bg)[:, None, None] * alpha[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def apply_domain_transform(image: np.ndarray, domain_id: int, seed) -> np.ndarray:
    """Domain 0 is the identity; domain 1 permutes channels, brightens and adds noise."""
    if domain_id == 0:
        return image
    if domain_id != 1:
        raise DatasetError(f"unknown domain_id {domain_id}")
    rng = np_rng("domain", *(seed if isinstance(seed, tuple) else (seed,)))
    out = image[list(CHANNEL_PERM)] + BRIGHTNESS_SHIFT
    out = out + rng.normal(0.0, NOISE_STD, size=image.shape)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


# --------------------------------------------------------------------------
# generation and splitting

def _validate_gen(cfg: GenConfig) -> None:
    C, H, W = cfg.image_shape
    if cfg.K < 2 or cfg.K % 2:
        raise ConfigError("K must be an even integer >= 2")
    if cfg.K > GLYPH_LIBRARY_SIZE:
        raise ConfigError(f"K={cfg.K} exceeds the glyph library ({GLYPH_LIBRARY_SIZE})")
    if cfg.n_per_class_per_domain < 4:
        raise ConfigError("n_per_class_per_domain must be >= 4")
    if C != 3 or H != W:
        raise ConfigError("image_shape must be [3, H, H]")
    if H % cfg.patch_size:
        raise ConfigError(f"image size {H} not divisible by patch size {cfg.patch_size}")


def default_split(K: int, fraction: float = 0.5, base_classes=None) -> SplitSpec:
    base = list(range(K // 2)) if base_classes is None else sorted(int(c) for c in base_classes)
    novel = [c for c in range(K) if c not in set(base)]
    return SplitSpec(base, novel, fraction)


def _labelled_selection(class_ids, domain_ids, sample_ids, split: SplitSpec, seed: int) -> set[int]:
    chosen: set[int] = set()
    for c in split.base_classes:
        pool = np.sort(sample_ids[(class_ids == c) & (domain_ids == 0)])
        if pool.size == 0:
            raise DatasetError(f"base class {c} has no domain-0 samples")
        m = max(1, int(math.floor(split.labelled_fraction_per_base_class * pool.size + 0.5)))
        perm = np_rng("split", seed, c).permutation(pool.size)
        chosen.update(int(i) for i in pool[perm[:m]])
    return chosen


def make_dataset(gen_config) -> tuple[DatasetManifest, np.ndarray]:
    cfg = gen_config if isinstance(gen_config, GenConfig) else GenConfig.from_dict(dict(gen_config))
    _validate_gen(cfg)
    split = default_split(cfg.K, cfg.labelled_fraction, cfg.base_classes)
    split.validate(cfg.K)
    C, H, W = cfg.image_shape
    n = cfg.n_per_class_per_domain
    images = np.empty((2 * cfg.K * n, C, H, W), dtype=np.float32)
    class_ids, domain_ids = [], []
    sid = 0
    for dom in (0, 1):
        for c in range(cfg.K):
            for i in range(n):
                rng = np_rng("render", cfg.seed, dom, c, i)
                img = render_glyph(c, H, rng)
                images[sid] = apply_domain_transform(img, dom, (cfg.seed, sid))
                class_ids.append(c)
                domain_ids.append(dom)
                sid += 1
    sample_ids = np.arange(sid, dtype=np.int64)
    class_ids = np.array(class_ids)
    domain_ids = np.array(domain_ids)
    labelled = _labelled_selection(class_ids, domain_ids, sample_ids, split, cfg.seed)
    head = blob.header_size(4)
    per = C * H * W * 4
    records = [
        Record(int(s), int(c), int(d), int(s) in labelled, head + int(s) * per)
        for s, c, d in zip(sample_ids, class_ids, domain_ids)
    ]
    manifest = DatasetManifest(cfg.dataset_name, cfg.K, [C, H, W], split, records, cfg.seed)
    return manifest, images


def split_dataset(manifest: DatasetManifest, split_spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Return (labelled ids, unlabelled ids) under ``split_spec``."""
    split_spec.validate(manifest.K)
    sample_ids = np.array([r.sample_id for r in manifest.records])
    class_ids = np.array([r.class_id for r in manifest.records])
    domain_ids = np.array([r.domain_id for r in manifest.records])
    chosen = _labelled_selection(class_ids, domain_ids, sample_ids, split_spec, manifest.generator_seed)
    d_l = sorted(chosen)
    d_u = [int(s) for s in sample_ids if int(s) not in chosen]
    return d_l, d_u


# --------------------------------------------------------------------------
# training-view augmentation

def hue_rotation(angle: float) -> np.ndarray:
    """RGB rotation about the grey axis; +-2pi/3 are the two cyclic channel permutations."""
    k = np.full(3, 1 / math.sqrt(3))
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def augment_view(image: np.ndarray, sample_id: int, view: int, epoch: int, seed: int = 0,
                 max_shift: int = 4, grayscale_p: float = 0.0, hue: float = 0.0) -> np.ndarray:
    """Random crop-pad, horizontal flip and brightness jitter, keyed by (sample, view, epoch).

    Optional extras: random grayscale with probability ``grayscale_p`` and a hue rotation drawn
    from [-hue, hue] turns. Their draws come last so the default stream is unchanged.
    """
    rng = np_rng("augment", seed, sample_id, view, epoch)
    C, H, W = image.shape
    padded = np.pad(image, ((0, 0), (max_shift, max_shift), (max_shift, max_shift)), mode="edge")
    dy, dx = rng.integers(0, 2 * max_shift + 1, size=2)
    out = padded[:, dy:dy + H, dx:dx + W]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    out = out + rng.uniform(-0.1, 0.1)
    if grayscale_p > 0 and rng.random() < grayscale_p:
        out = np.broadcast_to(out.mean(axis=0, keepdims=True), out.shape)
    if hue > 0:
        R = hue_rotation(2 * math.pi * rng.uniform(-hue, hue))
        out = np.einsum("ij,jhw->ihw", R, out)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment_batch(images: np.ndarray, sample_ids, view: int, epoch: int, seed: int = 0,
                  grayscale_p: float = 0.0, hue: float = 0.0) -> np.ndarray:
    return np.stack([augment_view(img, int(s), view, epoch, seed, grayscale_p=grayscale_p, hue=hue)
                     for img, s in zip(images, sample_ids)])


# --------------------------------------------------------------------------
# persistence

IMAGES_FILE = "images.gcdt"
MANIFEST_FILE = "manifest.json"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def persist(manifest: DatasetManifest, images: np.ndarray, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / IMAGES_FILE, blob.encode(np.asarray(images, dtype=np.float32)))
    _atomic_write(d / MANIFEST_FILE, manifest.to_json().encode("utf-8"))


def load(directory) -> tuple[DatasetManifest, np.ndarray]:
    d = Path(directory)
    manifest = DatasetManifest.from_json((d / MANIFEST_FILE).read_text(encoding="utf-8"))
    images = blob.decode_single((d / IMAGES_FILE).read_bytes())
    if images.ndim != 4:
        raise InconsistentManifestError(f"expected a rank-4 image tensor, got rank {images.ndim}")
    if images.shape[0] != len(manifest.records):
        raise InconsistentManifestError(
            f"inconsistent manifest: {len(manifest.records)} records vs {images.shape[0]} tensors")
    if list(images.shape[1:]) != list(manifest.image_shape):
        raise InconsistentManifestError("image shape differs from manifest")
    return manifest, images


def load_dataset(directory) -> Dataset:
    return Dataset(*load(directory))
