"""Synthetic paired-domain segmentation data, ISPRS label ingestion and batching.

Label maps are drawn from geometric primitives whose class is carried only by
shape family and stripe texture; domains differ by a per-channel affine style
transform, an optional band rotation and pixel noise. The style is therefore
non-causal by construction.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, DataError, SynthesisError

IGNORE = 255
SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    labels: np.ndarray  # uint8 [H, W]
    domain: str
    id: str


@dataclass(frozen=True)
class Dataset:
    """Immutable in-memory dataset; images are stored at 8-bit precision."""

    images: np.ndarray  # float32 [N, 3, H, W]
    labels: np.ndarray  # uint8 [N, H, W]
    domain: str
    ids: tuple
    num_classes: int
    class_names: tuple = ()

    def __post_init__(self):
        self.images.setflags(write=False)
        self.labels.setflags(write=False)
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.images):
            raise ContractError("images, labels and ids must have equal length")
        if self.domain not in DOMAINS:
            raise ContractError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], self.labels[i], self.domain, self.ids[i])

    @property
    def shape(self):
        return self.images.shape[2:]

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.images, np.ascontiguousarray(labels, dtype=np.uint8),
                       self.domain, self.ids, self.num_classes, self.class_names)


# --------------------------------------------------------------------------
# synthetic generation

@dataclass
class StyleShift:
    gains: tuple = (1.0, 1.0, 1.0)
    biases: tuple = (0.0, 0.0, 0.0)
    permute: bool = False  # rotate bands by one (IR-R-G vs R-G-B style swap)
    noise: float = 0.02

    def validate(self):
        if len(self.gains) != 3 or len(self.biases) != 3:
            raise ContractError("style gains/biases need three channels")
        if any(g <= 0 for g in self.gains):
            raise ContractError("style gains must be > 0")
        if self.noise < 0:
            raise ContractError("noise sigma must be >= 0")

    @property
    def channel_order(self):
        return (1, 2, 0) if self.permute else (0, 1, 2)


@dataclass
class SynthConfig:
    num_classes: int = 4
    height: int = 64
    width: int = 64
    n_source: int = 200
    n_target: int = 200
    n_test: int = 100
    paired: bool = True
    min_class_coverage: float = 0.05
    max_retries: int = 200
    tint: tuple = (1.0, 0.6, 0.3)
    source: StyleShift = field(default_factory=StyleShift)
    target: StyleShift = field(default_factory=lambda: StyleShift(
        gains=(0.6, 1.4, 1.1), biases=(0.25, -0.2, 0.1), permute=True, noise=0.05))

    def validate(self):
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.height < 32 or self.width < 32:
            raise ContractError("images must be at least 32x32")
        if not 0 <= self.min_class_coverage < 1:
            raise ContractError("min_class_coverage must lie in [0, 1)")
        if self.min_class_coverage * self.num_classes > 1:
            raise ContractError("min_class_coverage * num_classes exceeds 1")
        if min(self.n_source, self.n_target, self.n_test) < 0:
            raise ContractError("sample counts must be >= 0")
        self.source.validate()
        self.target.validate()


SHAPE_FAMILIES = ("rectangle", "ellipse", "band")


def texture_period(k: int) -> int:
    return 2 * k + 2


def structure_map(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Grey-level structure image: flat background, per-class stripe textures."""
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    s = np.full((h, w), 0.5, dtype=np.float64)
    for k in range(1, num_classes):
        half = texture_period(k) // 2
        coord = xx if k % 2 else yy
        stripes = np.where((coord // half) % 2 == 0, 0.85, 0.15)
        s = np.where(labels == k, stripes, s)
    return s


def _draw_primitive(lab, k, rng):
    h, w = lab.shape
    family = SHAPE_FAMILIES[(k - 1) % len(SHAPE_FAMILIES)]
    yy, xx = np.mgrid[0:h, 0:w]
    if family == "rectangle":
        rh = int(rng.integers(int(0.25 * h), int(0.5 * h) + 1))
        rw = int(rng.integers(int(0.25 * w), int(0.5 * w) + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        lab[y0:y0 + rh, x0:x0 + rw] = k
    elif family == "ellipse":
        ry = rng.uniform(0.14, 0.28) * h
        rx = rng.uniform(0.14, 0.28) * w
        cy = rng.uniform(ry, h - ry)
        cx = rng.uniform(rx, w - rx)
        lab[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = k
    else:
        vertical = bool(rng.integers(0, 2))
        extent = w if vertical else h
        bw = int(rng.integers(int(0.12 * extent), int(0.22 * extent) + 1))
        o = int(rng.integers(0, extent - bw + 1))
        if vertical:
            lab[:, o:o + bw] = k
        else:
            lab[o:o + bw, :] = k


def random_label_map(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    K, h, w = cfg.num_classes, cfg.height, cfg.width
    need = math.ceil(cfg.min_class_coverage * h * w)
    for _ in range(cfg.max_retries):
        lab = np.zeros((h, w), dtype=np.uint8)
        for k in rng.permutation(np.arange(1, K)):
            for _ in range(int(rng.integers(1, 3))):
                _draw_primitive(lab, int(k), rng)
        counts = np.bincount(lab.ravel(), minlength=K)
        if counts.min() >= need:
            return lab
    raise SynthesisError(
        f"could not reach {cfg.min_class_coverage:.3f} coverage for all {K} classes "
        f"after {cfg.max_retries} attempts")


def render(labels: np.ndarray, cfg: SynthConfig, style: StyleShift,
           rng: np.random.Generator) -> np.ndarray:
    s = structure_map(labels, cfg.num_classes)
    base = np.stack([0.5 + t * (s - 0.5) for t in cfg.tint])
    base = base[list(style.channel_order)]
    out = np.asarray(style.gains)[:, None, None] * base + np.asarray(style.biases)[:, None, None]
    if style.noise > 0:
        out = out + rng.normal(0.0, style.noise, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    # quantize now so that PNG storage is lossless
    return (np.round(out * 255.0) / 255.0).astype(np.float32)


def _build(label_maps, cfg, style, domain, prefix, rng) -> Dataset:
    images = np.stack([render(lab, cfg, style, rng) for lab in label_maps]) if label_maps \
        else np.zeros((0, 3, cfg.height, cfg.width), np.float32)
    labels = np.stack(label_maps) if label_maps else np.zeros((0, cfg.height, cfg.width), np.uint8)
    ids = tuple(f"{prefix}_{i:05d}" for i in range(len(label_maps)))
    return Dataset(images, labels, domain, ids, cfg.num_classes,
                   tuple(f"class_{k}" for k in range(cfg.num_classes)))


def gen_synthetic(cfg: SynthConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Generate (source, target) training sets; deterministic in ``seed``."""
    cfg.validate()
    ss = np.random.SeedSequence(seed)
    lab_src, lab_tgt, img_src, img_tgt = (np.random.default_rng(s) for s in ss.spawn(4))
    src_maps = [random_label_map(cfg, lab_src) for _ in range(cfg.n_source)]
    if cfg.paired:
        if cfg.n_target > cfg.n_source:
            raise ContractError("paired generation needs n_target <= n_source")
        tgt_maps = [m.copy() for m in src_maps[:cfg.n_target]]
    else:
        tgt_maps = [random_label_map(cfg, lab_tgt) for _ in range(cfg.n_target)]
    source = _build(src_maps, cfg, cfg.source, SOURCE, "src", img_src)
    target = _build(tgt_maps, cfg, cfg.target, TARGET, "tgt", img_tgt)
    return source, target


def gen_target_test(cfg: SynthConfig, seed: int) -> Dataset:
    """Held-out labelled target split, drawn from its own seed stream."""
    cfg.validate()
    lab_rng, img_rng = (np.random.default_rng(s)
                        for s in np.random.SeedSequence([seed, 1]).spawn(2))
    maps = [random_label_map(cfg, lab_rng) for _ in range(cfg.n_test)]
    return _build(maps, cfg, cfg.target, TARGET, "test", img_rng)


# --------------------------------------------------------------------------
# palettes

@dataclass(frozen=True)
class Palette:
    colors: tuple  # ((r, g, b), ...) ordered by class index
    names: tuple = ()

    def __post_init__(self):
        if len(set(self.colors)) != len(self.colors):
            raise ContractError("palette colours must be unique")
        if len(self.colors) < 2:
            raise ContractError("palette needs at least two classes")

    @property
    def num_classes(self):
        return len(self.colors)

    @classmethod
    def from_text(cls, text: str) -> "Palette":
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            r, g, b, idx = (int(v) for v in parts[:4])
            rows.append((idx, (r, g, b), parts[4] if len(parts) > 4 else f"class_{idx}"))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ContractError("palette indices must form 0..K-1")
        return cls(tuple(r[1] for r in rows), tuple(r[2] for r in rows))

    @classmethod
    def load(cls, path) -> "Palette":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def isprs_palette() -> Palette:
    text = resources.files("cpca.palettes").joinpath("isprs.txt").read_text(encoding="utf-8")
    return Palette.from_text(text)


def _pack(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.uint32)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def rgb_to_labels(image_rgb: np.ndarray, palette: Palette) -> tuple[np.ndarray, int]:
    """Map exact palette colours to class indices; returns (labels, unmatched_count)."""
    image_rgb = np.asarray(image_rgb)
    if image_rgb.ndim != 3 or image_rgb.shape[2] != 3:
        raise ContractError(f"expected [H, W, 3] image, got {image_rgb.shape}")
    codes = _pack(image_rgb)
    keys = _pack(np.asarray(palette.colors, dtype=np.uint32))
    order = np.argsort(keys)
    sorted_keys = keys[order]
    pos = np.clip(np.searchsorted(sorted_keys, codes), 0, len(keys) - 1)
    hit = sorted_keys[pos] == codes
    labels = np.where(hit, order[pos], IGNORE).astype(np.uint8)
    return labels, int((~hit).sum())


def labels_to_rgb(labels: np.ndarray, palette: Palette) -> np.ndarray:
    labels = np.asarray(labels)
    if (labels[labels != IGNORE] >= palette.num_classes).any():
        raise ContractError("label exceeds palette size")
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[:palette.num_classes] = np.asarray(palette.colors, dtype=np.uint8)
    return lut[labels]


# --------------------------------------------------------------------------
# on-disk format

def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_png(path, array: np.ndarray):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(array).save(tmp, format="PNG")
    os.replace(tmp, path)


def save_dataset(ds: Dataset, root, seed=None) -> Path:
    """Write images/labels as PNG plus a JSON manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        img = np.round(ds.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        write_png(root / "images" / f"{ds.ids[i]}.png", img)
        write_png(root / "labels" / f"{ds.ids[i]}.png", np.asarray(ds.labels[i], np.uint8))
        entries.append({"id": ds.ids[i], "image": f"images/{ds.ids[i]}.png",
                        "label": f"labels/{ds.ids[i]}.png", "domain": ds.domain})
    return write_manifest(root, ds.num_classes, ds.class_names, entries, seed)


def write_manifest(root, num_classes, class_names, entries, seed=None) -> Path:
    root = Path(root)
    doc = {"num_classes": num_classes, "class_names": list(class_names),
           "seed": seed, "entries": entries}
    path = root / MANIFEST_NAME
    _atomic_write_bytes(path, (json.dumps(doc, indent=1) + "\n").encode("utf-8"))
    return path


def _read_png(path, entry_id, what):
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"entry {entry_id!r}: cannot read {what} file {path}: {exc}") from exc


def load_manifest(path) -> Dataset:
    """Load a dataset from a manifest file (or a directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    K = int(doc.get("num_classes", 0))
    entries = doc.get("entries") or []
    if K < 2:
        raise DataError(f"manifest {path}: num_classes must be >= 2")
    if not entries:
        raise DataError(f"manifest {path}: no entries")
    domains = {e["domain"] for e in entries}
    if len(domains) != 1 or not domains <= set(DOMAINS):
        raise DataError(f"manifest {path}: expected a single known domain, got {sorted(domains)}")
    images, labels, ids = [], [], []
    for e in entries:
        eid = e.get("id", e["image"])
        img = _read_png(root / e["image"], eid, "image")
        lab = _read_png(root / e["label"], eid, "label")
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"entry {eid!r}: image must be RGB, got shape {img.shape}")
        if lab.shape != img.shape[:2]:
            raise DataError(f"entry {eid!r}: label shape {lab.shape} != image shape {img.shape[:2]}")
        bad = (lab != IGNORE) & (lab >= K)
        if bad.any():
            raise DataError(f"entry {eid!r}: label value {int(lab[bad][0])} >= num_classes {K}")
        images.append(img.transpose(2, 0, 1).astype(np.float32) / 255.0)
        labels.append(lab.astype(np.uint8))
        ids.append(eid)
    return Dataset(np.stack(images), np.stack(labels), domains.pop(), tuple(ids), K,
                   tuple(doc.get("class_names") or ()))


def ingest_isprs_tile(image_path, label_path, palette: Palette | None = None):
    """Read an ISPRS-style RGB tile and its colour-coded label image."""
    palette = palette or isprs_palette()
    img = _read_png(image_path, str(image_path), "image")
    lab_rgb = _read_png(label_path, str(label_path), "label")
    labels, unmatched = rgb_to_labels(lab_rgb[..., :3], palette)
    return img[..., :3].transpose(2, 0, 1).astype(np.float32) / 255.0, labels, unmatched


# --------------------------------------------------------------------------
# batching

def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
                 epoch: int = 0) -> list[np.ndarray]:
    """Index batches for one epoch; the final partial batch is kept."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(dataset)
    order = epoch_order(n, seed, epoch, shuffle)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class BatchStream:
    """Maps a global iteration index to a batch, so training can resume anywhere."""

    def __init__(self, n: int, batch_size: int, seed: int, shuffle: bool = True):
        if n < 1:
            raise ContractError("cannot batch an empty dataset")
        self.n, self.batch_size, self.seed, self.shuffle = n, batch_size, seed, shuffle
        self.per_epoch = math.ceil(n / batch_size)
        self._cache: tuple[int, list] | None = None

    def indices(self, t: int) -> np.ndarray:
        epoch, j = divmod(t, self.per_epoch)
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, make_batches(range(self.n), self.batch_size, self.seed,
                                               self.shuffle, epoch))
        return self._cache[1][j]

    def __iter__(self) -> Iterator[np.ndarray]:
        t = 0
        while True:
            yield self.indices(t)
            t += 1


def downsample_labels(labels, stride: int):
    """Nearest-neighbour label downsampling (top-left pixel of each stride block)."""
    return labels[..., ::stride, ::stride]


def class_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    flat = np.asarray(labels).ravel()
    return np.bincount(flat[flat != IGNORE], minlength=num_classes)[:num_classes]


def stack_samples(samples: Sequence[Sample]):
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])
