"""Dataset ingestion and the synthetic two-domain benchmark generator.

The synthetic benchmark mimics the field-of-view disparity between a
zoomed-in source modality and a wide-view target modality: both render the
same class-specific primitives inside a circular "fundus" disc, but the
source disc fills more of the canvas, so identical anatomy lands
proportionally larger in pixels. The source domain additionally carries a
per-channel color shift.

Manifests are UTF-8 CSV with header ``id,path,domain,label_0,...,label_{C-1}``
and PPM images next to them; see :func:`load_manifest`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from cdcl.ppm import read_ppm, write_ppm

__all__ = [
    "Domain",
    "Sample",
    "DatasetSplit",
    "SynthConfig",
    "IngestError",
    "load_manifest",
    "save_dataset",
    "resize_keep_aspect",
    "make_splits",
    "synth_generate",
    "synth_dataset",
    "primitive_mask",
    "sample_placements",
]

SPLIT_NAMES = ("train", "val", "test")


class IngestError(ValueError):
    """Manifest or image could not be ingested; message names the culprit."""


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class Sample:
    """One image with its multi-hot label vector and domain tag.

    Pixels are stored float32 in [0, 1] to keep large pools affordable;
    label vectors stay float64.
    """

    image: np.ndarray
    labels: np.ndarray
    domain: Domain
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.image.ndim != 3:
            raise IngestError(f"sample {self.id}: image must be (c,H,W), got {self.image.shape}")
        if self.labels.ndim != 1:
            raise IngestError(f"sample {self.id}: labels must be a vector")


@dataclass
class DatasetSplit:
    """Train/val/test sample lists; ids are disjoint across splits."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_samples(self) -> list:
        return self.train + self.val + self.test

    def domain_pool(self, split: str, domain: Domain) -> list:
        return [s for s in self.split(split) if s.domain == domain]

    def check_disjoint(self):
        seen = {}
        for name in SPLIT_NAMES:
            for s in self.split(name):
                if s.id in seen:
                    raise IngestError(f"sample id {s.id!r} appears in both {seen[s.id]} and {name}")
                seen[s.id] = name

    def merged_with(self, other: "DatasetSplit") -> "DatasetSplit":
        out = DatasetSplit(
            train=self.train + other.train,
            val=self.val + other.val,
            test=self.test + other.test,
        )
        out.check_disjoint()
        return out


# ---------------------------------------------------------------------------
# manifest I/O


def _parse_manifest_file(csv_path: Path) -> list:
    samples = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{csv_path}: empty manifest") from None
        if header[:3] != ["id", "path", "domain"]:
            raise IngestError(f"{csv_path}: header must start with id,path,domain, got {header[:3]}")
        label_cols = header[3:]
        expected = [f"label_{i}" for i in range(len(label_cols))]
        if not label_cols or label_cols != expected:
            raise IngestError(f"{csv_path}: label columns must be label_0..label_{{C-1}}, got {label_cols}")
        n_classes = len(label_cols)

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + n_classes:
                raise IngestError(
                    f"{csv_path} line {lineno}: expected {3 + n_classes} fields, got {len(row)}"
                )
            sid, rel_path, domain_str = row[0], row[1], row[2]
            try:
                domain = Domain(domain_str)
            except ValueError:
                raise IngestError(
                    f"{csv_path} line {lineno}: domain must be source or target, got {domain_str!r}"
                ) from None
            labels = []
            for col, tok in zip(label_cols, row[3:]):
                if tok not in ("0", "1"):
                    raise IngestError(f"{csv_path} line {lineno}: {col} must be 0 or 1, got {tok!r}")
                labels.append(float(tok))
            img_path = csv_path.parent / rel_path
            if not img_path.is_file():
                raise IngestError(f"{csv_path} line {lineno}: image not found: {img_path}")
            samples.append(Sample(read_ppm(img_path), np.array(labels), domain, sid))
    return samples


def load_manifest(path) -> DatasetSplit:
    """Load a manifest CSV, or a dataset directory, into a DatasetSplit.

    A single CSV file loads into the ``train`` list. A directory is expected
    to hold ``train.csv`` / ``val.csv`` / ``test.csv`` (each optional,
    at least one present); images resolve relative to each CSV.
    """
    path = Path(path)
    if path.is_file():
        out = DatasetSplit(train=_parse_manifest_file(path))
    elif path.is_dir():
        found = {name: path / f"{name}.csv" for name in SPLIT_NAMES}
        present = {n: p for n, p in found.items() if p.is_file()}
        if not present:
            raise IngestError(f"{path}: no train.csv/val.csv/test.csv manifest found")
        out = DatasetSplit(**{n: _parse_manifest_file(p) for n, p in present.items()})
    else:
        raise IngestError(f"manifest not found: {path}")
    out.check_disjoint()
    return out


def save_dataset(dataset: DatasetSplit, out_dir, n_classes: int | None = None):
    """Write PPM images plus per-split manifests and a combined manifest.csv."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if n_classes is None:
        n_classes = len(dataset.all_samples()[0].labels)
    header = ["id", "path", "domain"] + [f"label_{i}" for i in range(n_classes)]

    def rows_for(samples):
        rows = []
        for s in samples:
            rel = f"images/{s.id}.ppm"
            write_ppm(out_dir / rel, s.image)
            labels = ["1" if v >= 0.5 else "0" for v in s.labels]
            rows.append([s.id, rel, s.domain.value] + labels)
        return rows

    all_rows = []
    for name in SPLIT_NAMES:
        rows = rows_for(dataset.split(name))
        all_rows += rows
        with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(all_rows)


# ---------------------------------------------------------------------------
# geometry


def resize_keep_aspect(image: np.ndarray, target_hw) -> np.ndarray:
    """Bilinear resize to the largest size fitting target, centered, zero-padded.

    The content scale factor is the same for both axes, so aspect ratio is
    preserved up to one pixel of rounding.
    """
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {(th, tw)}")
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()
    s = min(th / h, tw / w)
    nh = max(1, min(th, round(h * s)))
    nw = max(1, min(tw, round(w * s)))
    resized = _bilinear(image, nh, nw)
    out = np.zeros((c, th, tw), dtype=np.float64)
    oy, ox = (th - nh) // 2, (tw - nw) // 2
    out[:, oy : oy + nh, ox : ox + nw] = resized
    return out


def _bilinear(image: np.ndarray, nh: int, nw: int) -> np.ndarray:
    c, h, w = image.shape
    if (nh, nw) == (h, w):
        return image.copy()
    ys = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def make_splits(samples, fractions, seed: int) -> DatasetSplit:
    """Deterministic shuffled partition into train/val/test."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(samples))
    n = len(samples)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    shuffled = [samples[i] for i in order]
    out = DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )
    out.check_disjoint()
    return out


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SynthConfig:
    """Knobs for the synthetic scale-biased two-domain benchmark."""

    num_classes: int = 8
    source_size: tuple = (128, 128)
    target_size: tuple = (128, 128)
    fov_source: float = 0.95
    fov_target: float = 0.55
    structure_scale: float = 0.16
    color_shift: tuple = (0.15, 0.0, 0.0)
    n_source_train: int = 4000
    n_source_val: int = 0
    n_source_test: int = 0
    n_target_train: int = 800
    n_target_val: int = 160
    n_target_test: int = 240
    noise: float = 0.02
    class_prob: float = 0.25
    jitter: float = 0.25
    distractor_rate: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.source_size = (int(self.source_size[0]), int(self.source_size[1]))
        self.target_size = (int(self.target_size[0]), int(self.target_size[1]))
        if min(self.source_size) < 1 or min(self.target_size) < 1:
            raise ValueError("image sizes must be positive")
        for fov in (self.fov_source, self.fov_target):
            if not 0.0 < fov <= 1.0:
                raise ValueError(f"fov_ratio must be in (0,1], got {fov}")
        if self.num_classes < 1:
            raise ValueError("need at least one class")

    def size_for(self, domain: Domain):
        return self.source_size if domain == Domain.SOURCE else self.target_size

    def fov_for(self, domain: Domain) -> float:
        return self.fov_source if domain == Domain.SOURCE else self.fov_target

    def count_for(self, domain: Domain, split: str) -> int:
        key = f"n_{domain.value}_{split}"
        return getattr(self, key)


def _class_color(k: int, n_classes: int) -> np.ndarray:
    """Fixed, saturated palette entry for class k (hue wheel)."""
    hue = (k / max(n_classes, 1)) * 6.0
    i = int(hue) % 6
    f = hue - int(hue)
    v, p, q, t = 0.95, 0.1, 0.95 - 0.85 * f, 0.1 + 0.85 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def sample_placements(rng: np.random.Generator, k: int, cfg: SynthConfig) -> dict:
    """Draw the disc-relative placement parameters for one class primitive.

    Everything here is expressed relative to the disc radius, so the same
    placement rasterizes proportionally larger on a larger disc.
    """
    size_rel = cfg.structure_scale * rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
    max_rho = max(0.15, 0.92 - size_rel)
    return {
        "kind": k % 4,
        "size_rel": size_rel,
        "phi": rng.uniform(0.0, 2.0 * math.pi),
        "rho_rel": rng.uniform(0.12, max_rho),
        "angle": rng.uniform(0.0, math.pi),
        "offsets": rng.uniform(-0.8, 0.8, size=(3, 2)),
    }


def primitive_mask(shape_hw, placement: dict, disc_radius: float, center) -> np.ndarray:
    """Rasterize one primitive as a boolean mask at the given disc scale."""
    h, w = shape_hw
    cy = center[0] + placement["rho_rel"] * disc_radius * math.sin(placement["phi"])
    cx = center[1] + placement["rho_rel"] * disc_radius * math.cos(placement["phi"])
    a = max(1.5, placement["size_rel"] * disc_radius)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    kind = placement["kind"]
    if kind == 0:  # ring
        dist = np.sqrt(dy * dy + dx * dx)
        return np.abs(dist - a) <= max(0.75, 0.3 * a)
    if kind == 1:  # cluster of three blobs
        mask = np.zeros((h, w), dtype=bool)
        for oy, ox in placement["offsets"]:
            r = max(1.0, 0.45 * a)
            mask |= (dy - oy * a) ** 2 + (dx - ox * a) ** 2 <= r * r
        return mask
    if kind == 2:  # streak: rotated bar
        ca, sa = math.cos(placement["angle"]), math.sin(placement["angle"])
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        return (np.abs(u) <= 1.4 * a) & (np.abs(v) <= max(0.75, 0.22 * a))
    # kind == 3: filled wedge-marked disc
    dist2 = dy * dy + dx * dx
    return dist2 <= (0.8 * a) ** 2


def _render_image(cfg: SynthConfig, domain: Domain, active, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.size_for(domain)
    fov = cfg.fov_for(domain)
    disc_r = fov * min(h, w) / 2.0
    center = (h / 2.0, w / 2.0)

    yy, xx = np.mgrid[0:h, 0:w]
    rad2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    disc = rad2 <= disc_r * disc_r

    brightness = 1.0 + 0.15 * rng.uniform(-1.0, 1.0)
    base = np.array([0.34, 0.17, 0.09]) * brightness
    falloff = 1.0 - 0.3 * np.clip(rad2 / (disc_r * disc_r), 0.0, 1.0)
    img = np.zeros((3, h, w))
    img[:, disc] = base[:, None] * falloff[disc]

    for k in sorted(active):
        placement = sample_placements(rng, k, cfg)
        mask = primitive_mask((h, w), placement, disc_r, center) & disc
        color = _class_color(k, cfg.num_classes) * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
        img[:, mask] = np.clip(color, 0.0, 1.0)[:, None]

    # unlabeled gray distractor spots: force shape/color discrimination
    n_distract = rng.poisson(cfg.distractor_rate)
    for _ in range(n_distract):
        dphi = rng.uniform(0.0, 2.0 * math.pi)
        drho = rng.uniform(0.1, 0.8) * disc_r
        dr = max(1.0, rng.uniform(0.4, 1.0) * cfg.structure_scale * disc_r)
        dcy = center[0] + drho * math.sin(dphi)
        dcx = center[1] + drho * math.cos(dphi)
        dmask = ((yy - dcy) ** 2 + (xx - dcx) ** 2 <= dr * dr) & disc
        img[:, dmask] = rng.uniform(0.55, 0.8)

    if domain == Domain.SOURCE:
        img += np.asarray(cfg.color_shift)[:, None, None] * disc[None, :, :]
    if cfg.noise > 0:
        img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw_labels(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    while True:
        labels = (rng.random(cfg.num_classes) < cfg.class_prob).astype(np.float64)
        if labels.sum() >= 1:
            return labels


_DOMAIN_CODE = {Domain.SOURCE: 0, Domain.TARGET: 1}
_SPLIT_CODE = {name: i for i, name in enumerate(SPLIT_NAMES)}


def synth_generate(cfg: SynthConfig, domain: Domain, split: str, seed: int) -> DatasetSplit:
    """Generate one (domain, split) block; deterministic per (seed, split, index)."""
    domain = Domain(domain)
    if split not in SPLIT_NAMES:
        raise ValueError(f"unknown split {split!r}")
    count = cfg.count_for(domain, split)
    samples = []
    for index in range(count):
        ss = np.random.SeedSequence(seed, spawn_key=(_DOMAIN_CODE[domain], _SPLIT_CODE[split], index))
        rng = np.random.Generator(np.random.PCG64(ss))
        labels = _draw_labels(rng, cfg)
        image = _render_image(cfg, domain, np.flatnonzero(labels), rng)
        sid = f"{domain.value[:3]}-{split}-{index:05d}"
        samples.append(Sample(image, labels, domain, sid))
    out = DatasetSplit()
    out.split(split).extend(samples)
    return out


def synth_dataset(cfg: SynthConfig) -> DatasetSplit:
    """Generate every domain and split of the benchmark in one DatasetSplit."""
    full = DatasetSplit()
    for domain in (Domain.SOURCE, Domain.TARGET):
        for split in SPLIT_NAMES:
            if cfg.count_for(domain, split) == 0:
                continue
            block = synth_generate(cfg, domain, split, cfg.seed)
            full.split(split).extend(block.split(split))
    full.check_disjoint()
    return full
