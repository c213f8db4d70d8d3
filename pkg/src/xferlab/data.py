"""Synthetic glyph domains, IDX ingestion and explanation attachment.

Each synthetic domain plants a class glyph into ``k`` random patches of its
family's half of the grid, over a textured background.  Domains built from
the same glyph family share glyph statistics, placement and background style;
domains from different families share none of them.  Clutter backgrounds
scatter non-class marks drawn from another family, so what counts as evidence
in one family is noise in another.  The planted patch set is kept as metadata only: the supervision
``phi`` always comes from a Shapley explainer run on a trained model.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ConfigurationError
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


GLYPH_FAMILIES = ("strokes", "blobs", "lattice", "specks")
TEXTURES = ("stripes", "checker", "gradient", "grain")
# clutter textures scatter non-class marks from a glyph family over the background
CLUTTER = {f"{f}-clutter": f for f in GLYPH_FAMILIES}
CLUTTER_MARKS = 3
CLUTTER_POOL = range(8, 16)
# each family plants its glyphs in its own half of the patch grid
FAMILY_REGION = {"strokes": "top", "blobs": "bottom", "lattice": "left", "specks": "right"}


def region_patches(family: str, grid: int) -> np.ndarray:
    """Patch indices where glyphs of ``family`` may be planted."""
    r, c = np.divmod(np.arange(grid * grid), grid)
    half = grid // 2
    side = FAMILY_REGION[family]
    keep = {"top": r < half, "bottom": r >= grid - half,
            "left": c < half, "right": c >= grid - half}[side]
    return np.flatnonzero(keep)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    family: str
    classes: tuple[int, ...]
    k: int = 3
    texture: str = "stripes"
    color: tuple[float, float, float] = (1.0, 0.2, 0.2)
    noise: float = 0.05
    seed: int = 0
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.family not in GLYPH_FAMILIES:
            raise ConfigurationError(f"unknown glyph family {self.family!r}")
        if self.texture not in TEXTURES and self.texture not in CLUTTER:
            raise ConfigurationError(f"unknown texture {self.texture!r}")
        if len(self.classes) < 2:
            raise ConfigurationError(f"domain {self.name} needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigurationError(f"domain {self.name} repeats a class")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size not divisible by patch_size")
        room = region_patches(self.family, self.image_size // self.patch_size).size
        if not 1 <= self.k <= room:
            raise ConfigurationError(
                f"glyph patch count k={self.k} outside [1, {room}] for family {self.family}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(f"{self.family}-{c}" for c in self.classes)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    id: str
    planted: tuple[int, ...] = ()


@dataclass
class ExplainedSample:
    image: LabeledImage
    phi: np.ndarray


@dataclass
class Dataset:
    split: str
    images: list[LabeledImage]
    class_names: tuple[str, ...]
    num_patches: int
    domain: str = ""
    phi: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def dataset_id(self) -> str:
        return f"{self.domain}/{self.split}"

    def pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images])

    def labels(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)

    def explained(self) -> list[ExplainedSample]:
        return [ExplainedSample(im, self.phi[im.id]) for im in self.images if im.id in self.phi]

    def phi_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(phi (N, M), mask (N,)) aligned with ``images``; unexplained rows are zero."""
        N = len(self.images)
        out = np.zeros((N, self.num_patches))
        mask = np.zeros(N, dtype=bool)
        for i, im in enumerate(self.images):
            p = self.phi.get(im.id)
            if p is not None:
                out[i] = p
                mask[i] = True
        return out, mask

    def subset(self, n: int) -> "Dataset":
        return replace(self, images=self.images[:n],
                       phi={im.id: self.phi[im.id] for im in self.images[:n] if im.id in self.phi})


# glyphs and textures -----------------------------------------------------------

MAX_GLYPHS = 16


def _draw_glyph(family: str, rng: np.random.Generator, p: int, parity: int) -> np.ndarray:
    g = np.zeros((p, p))
    if family == "strokes":
        for _ in range(2):
            if rng.random() < 0.5:
                g[rng.integers(p), :] = 1.0
            else:
                g[:, rng.integers(p)] = 1.0
    elif family == "blobs":
        h = max(1, p // 2)
        for _ in range(2):
            r, c = rng.integers(0, p - h + 1, size=2)
            g[r:r + h, c:c + h] = 1.0
    elif family == "lattice":
        g[(np.add.outer(np.arange(p), np.arange(p)) % 2) == parity] = 1.0
        r = rng.integers(p)
        g[r, :] = 1.0 - g[r, :]
    else:
        idx = rng.choice(p * p, size=max(2, (p * p) // 3), replace=False)
        g.reshape(-1)[idx] = 1.0
    return g


@lru_cache(maxsize=None)
def family_glyphs(family: str, p: int) -> tuple[np.ndarray, ...]:
    """Pool of distinct p x p glyph masks for a family, drawn by rejection."""
    rng = rng_for("glyph-pool", family, p)
    pool: list[np.ndarray] = []
    for _ in range(10000):
        g = _draw_glyph(family, rng, p, len(pool) % 2)
        if 0 < g.sum() < p * p and not any(np.array_equal(g, h) for h in pool):
            pool.append(g)
            if len(pool) == MAX_GLYPHS:
                break
    return tuple(pool)


def glyph(family: str, index: int, p: int) -> np.ndarray:
    pool = family_glyphs(family, p)
    if not 0 <= index < len(pool):
        raise ConfigurationError(f"family {family} has {len(pool)} glyphs, asked for {index}")
    return pool[index]


def texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if kind in CLUTTER:
        kind = "grain"
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    phase = rng.random()
    if kind == "stripes":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (3 * yy + phase))
    elif kind == "checker":
        t = ((np.floor(yy * 4 + phase) + np.floor(xx * 4)) % 2)
    elif kind == "gradient":
        t = (xx + yy * phase) / (1 + phase)
    else:
        t = rng.random((size, size))
    return 0.15 + 0.2 * t


def _render(spec: DomainSpec, label: int, rng: np.random.Generator):
    S, p, ch = spec.image_size, spec.patch_size, spec.channels
    g = S // p
    img = np.repeat(texture(spec.texture, S, rng)[None], ch, axis=0)
    region = region_patches(spec.family, g)
    planted = np.sort(rng.choice(region, size=spec.k, replace=False))
    free = np.setdiff1d(np.arange(spec.num_patches), planted)
    chosen = np.concatenate([planted, rng.permutation(free)])
    mask = glyph(spec.family, spec.classes[label], p)
    color = np.asarray(spec.color[:ch] if ch <= 3 else list(spec.color) * ch, dtype=float)[:ch]
    if spec.texture in CLUTTER:
        fam = CLUTTER[spec.texture]
        pool = family_glyphs(fam, p)
        spots = chosen[spec.k:spec.k + CLUTTER_MARKS]
        for m in spots:
            r, c = divmod(int(m), g)
            cm = pool[CLUTTER_POOL[int(rng.integers(len(CLUTTER_POOL)))] % len(pool)]
            patch = img[:, r * p:(r + 1) * p, c * p:(c + 1) * p]
            patch[:] = patch * (1 - cm) + color[:, None, None] * cm
    for m in planted:
        r, c = divmod(int(m), g)
        patch = img[:, r * p:(r + 1) * p, c * p:(c + 1) * p]
        patch[:] = patch * (1 - mask) + color[:, None, None] * mask
    img = img + spec.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0), tuple(int(m) for m in planted)


def gen_domain(spec: DomainSpec, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    if n_train < 1 or n_test < 1:
        raise ConfigurationError("split sizes must be at least 1")
    out = []
    C = len(spec.classes)
    for split, n in (("train", n_train), ("test", n_test)):
        images = []
        for i in range(n):
            sid = f"{spec.name}-{spec.seed}-{split}-{i:05d}"
            rng = rng_for("sample", spec.name, spec.seed, sid)
            label = i % C
            pix, planted = _render(spec, label, rng)
            images.append(LabeledImage(pix, label, sid, planted))
        order = rng_for("order", spec.name, spec.seed, split).permutation(n)
        images = [images[j] for j in order]
        out.append(Dataset(split, images, spec.class_names, spec.num_patches, spec.name))
    return out[0], out[1]


def gen_mixture(specs: Sequence[DomainSpec], n_per_domain: int, split: str = "train") -> Dataset:
    """Union of domains over the union label space, for base pretraining."""
    names: list[str] = []
    for s in specs:
        for n in s.class_names:
            if n not in names:
                names.append(n)
    images = []
    for s in specs:
        tr, _ = gen_domain(replace(s, seed=derive_seed("mixture", s.seed) % 2**31), n_per_domain, 1)
        for im in tr.images:
            images.append(replace(im, label=names.index(s.class_names[im.label])))
    order = rng_for("mixture-order", *[s.name for s in specs]).permutation(len(images))
    images = [images[j] for j in order]
    return Dataset(split, images, tuple(names), specs[0].num_patches, "mixture")


# IDX ----------------------------------------------------------------------------

def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head != n:
        raise DataFormatError(f"{path}: payload has {len(raw) - head} bytes, header says {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, image_size: int = 16, channels: int = 3,
             patch_size: int = 4, class_names: Sequence[str] | None = None,
             split: str = "train", name: str = "idx") -> Dataset:
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if imgs.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = imgs.shape
    rows = (np.arange(image_size) * h) // image_size
    cols = (np.arange(image_size) * w) // image_size
    scaled = imgs[:, rows][:, :, cols].astype(np.float64) / 255.0
    names = tuple(class_names) if class_names else tuple(f"digit-{d}" for d in range(10))
    if labels.size and labels.max() >= len(names):
        raise ConsistencyError(f"label {labels.max()} outside {len(names)} classes")
    images = [LabeledImage(np.repeat(scaled[i][None], channels, axis=0), int(labels[i]),
                           f"{name}-{split}-{i:06d}") for i in range(n)]
    return Dataset(split, images, names, (image_size // patch_size) ** 2, name)


# explanation attachment ---------------------------------------------------------

def attach_explanations(dataset: Dataset, explain: Callable[[np.ndarray, int, int], np.ndarray],
                        provenance: dict[str, str], fraction: float = 1.0,
                        seed: int = 0, parallel_map=map) -> Dataset:
    """Return a copy of ``dataset`` whose selected samples carry ``phi``.

    ``explain(pixels, label, sample_seed)`` returns the attribution vector for
    the ground-truth class.  A failing sample is skipped and logged.
    """
    n_sel = int(round(fraction * len(dataset)))
    chosen = dataset.images[:n_sel]

    def run(im):
        try:
            phi = np.asarray(explain(im.pixels, im.label, derive_seed(seed, im.id)), dtype=np.float64)
            if phi.shape != (dataset.num_patches,) or not np.isfinite(phi).all():
                raise ValueError(f"bad attribution shape/values {phi.shape}")
            return im.id, phi
        except Exception as exc:  # noqa: BLE001 - logged and skipped by contract
            log.warning("explainer failed on %s: %s", im.id, exc)
            return im.id, None

    phis = {}
    for sid, phi in parallel_map(run, chosen):
        if phi is not None:
            phis[sid] = phi
    prov = dict(provenance)
    prov["fraction"] = repr(float(fraction))
    prov["explained"] = str(len(phis))
    prov["seed"] = str(seed)
    return replace(dataset, phi=phis, provenance=prov)
