"""Synthetic two-domain pavement-crack benchmark.

Source-style images have a bright, evenly lit background with mild noise.
Target-style images are darker, lit by a strong left-to-right gradient and
covered in multiplicative speckle, with fainter cracks.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .augment import LabeledImage
from .boxes import BBox
from .imgproc import atomic_write, read_pgm, write_pgm

CATEGORIES = ("longitudinal", "transverse", "alligator", "pothole")
DOMAINS = ("source", "target")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class DomainStyle:
    background: tuple[float, float]       # base gray level range
    texture: float                        # smooth texture amplitude (gray levels)
    noise: float                          # additive noise sigma
    speckle: float                        # multiplicative speckle sigma
    gradient: tuple[float, float]         # illumination drop at the left edge, range
    contrast: tuple[float, float]         # fractional darkening of crack pixels, range


SOURCE_STYLE = DomainStyle((160.0, 190.0), 3.0, 4.0, 0.0, (0.0, 0.0), (0.45, 0.6))
TARGET_STYLE = DomainStyle((70.0, 90.0), 4.0, 3.0, 0.08, (0.35, 0.5), (0.25, 0.4))


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    counts: dict = field(default_factory=lambda: {
        ("source", "train"): 200, ("target", "train"): 50, ("target", "test"): 50})
    styles: dict = field(default_factory=lambda: {"source": SOURCE_STYLE,
                                                 "target": TARGET_STYLE})
    objects_per_image: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        for key, n in self.counts.items():
            if key[0] not in DOMAINS or key[1] not in SPLITS or n < 1:
                raise ValueError(f"bad count entry {key}: {n}")
        if self.objects_per_image < 1:
            raise ValueError("objects_per_image must be >= 1")


# --- rendering --------------------------------------------------------------------

def _wobble(rng, n, amp):
    """Smooth bounded 1-D random walk of length ``n`` with |value| <= amp."""
    steps = rng.normal(0.0, 0.6, n)
    walk = ndimage.gaussian_filter1d(np.cumsum(steps), 2.0)
    walk -= walk.mean()
    peak = np.abs(walk).max()
    return walk * (amp / peak) if peak > amp else walk


def _line_mask(size, rng, vertical: bool) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    length = int(rng.integers(int(size * 0.45), int(size * 0.78)))
    thick = int(rng.integers(2, 4))
    start = int(rng.integers(2, size - length - 1))
    centre = rng.uniform(8, size - 9)
    path = centre + _wobble(rng, length, 2.5)
    for k in range(length):
        lo = int(round(path[k] - thick / 2))
        if vertical:
            mask[start + k, lo:lo + thick] = True
        else:
            mask[lo:lo + thick, start + k] = True
    return mask


def _alligator_mask(size, rng) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    side = int(rng.integers(int(size * 0.35), int(size * 0.53)))
    y0 = int(rng.integers(2, size - side - 2))
    x0 = int(rng.integers(2, size - side - 2))
    pitch = int(rng.integers(5, 8))
    for k in range(0, side, pitch):
        j = int(rng.integers(-1, 2))
        r = min(max(k + j, 0), side - 1)
        mask[y0 + r, x0:x0 + side] = True
        c = min(max(k - j, 0), side - 1)
        mask[y0:y0 + side, x0 + c] = True
    mask[y0 + side - 1, x0:x0 + side] = True
    mask[y0:y0 + side, x0 + side - 1] = True
    return mask


def _pothole_mask(size, rng) -> np.ndarray:
    ry, rx = rng.uniform(size * 0.1, size * 0.19, size=2)
    cy = rng.uniform(ry + 2, size - ry - 2)
    cx = rng.uniform(rx + 2, size - rx - 2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    theta = np.arctan2(yy - cy, xx - cx)
    edge = 1.0 + 0.08 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi))
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= edge ** 2


def render_mask(category: int, size: int, rng: np.random.Generator) -> np.ndarray:
    if category == 0:
        return _line_mask(size, rng, vertical=True)
    if category == 1:
        return _line_mask(size, rng, vertical=False)
    if category == 2:
        return _alligator_mask(size, rng)
    if category == 3:
        return _pothole_mask(size, rng)
    raise ValueError(f"unknown category {category}")


def mask_box(mask: np.ndarray) -> BBox:
    """Normalized bounding box of a mask, quantized to the label-file precision."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    x1, x2 = xs.min() / w, (xs.max() + 1) / w
    y1, y2 = ys.min() / h, (ys.max() + 1) / h
    cx, cy, bw, bh = (round(v, 6) for v in ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
    return BBox.from_cxcywh(cx, cy, bw, bh).clip()


def _background(size, style: DomainStyle, rng) -> np.ndarray:
    level = rng.uniform(*style.background)
    tex = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.5)
    tex *= style.texture / max(tex.std(), 1e-12)
    return level + tex


def synth_sample(spec: SynthSpec, domain: str, category, rng: np.random.Generator,
                 origin: str = "") -> LabeledImage:
    """Render one category-shaped dark structure on a domain-styled background."""
    size = spec.image_size
    style = spec.styles[domain]
    cats = [category] if isinstance(category, (int, np.integer)) else list(category)
    reflect = _background(size, style, rng)
    labels = []
    occupied = np.zeros((size, size), dtype=bool)
    for cat in cats:
        for _ in range(20):
            mask = render_mask(int(cat), size, rng)
            if not (mask & occupied).any():
                break
        occupied |= mask
        soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.5)
        soft = np.maximum(soft, mask * 0.85)
        darkening = rng.uniform(*style.contrast)
        reflect = reflect * (1.0 - darkening * soft)
        labels.append((int(cat), mask_box(mask)))
    drop = rng.uniform(*style.gradient)
    illum = 1.0 - drop * (1.0 - np.linspace(0.0, 1.0, size))[None, :]
    img = reflect * illum
    if style.speckle:
        img = img * (1.0 + rng.normal(0.0, style.speckle, img.shape))
    img = img + rng.normal(0.0, style.noise, img.shape)
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return LabeledImage(pixels, labels, domain, origin)


# --- files ------------------------------------------------------------------------

def format_labels(labels) -> str:
    lines = []
    for cls, b in labels:
        cx, cy, w, h = BBox(*b).to_cxcywh()
        lines.append(f"{int(cls)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    return "".join(line + "\n" for line in lines)


def parse_labels(text: str) -> list[tuple[int, BBox]]:
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"label line {n}: expected 'class cx cy w h', got {line!r}")
        cx, cy, w, h = (float(v) for v in parts[1:])
        out.append((int(parts[0]), BBox.from_cxcywh(cx, cy, w, h)))
    return out


def write_labels(labels, path) -> None:
    atomic_write(path, format_labels(labels).encode("ascii"))


def read_labels(path) -> list[tuple[int, BBox]]:
    return parse_labels(Path(path).read_text())


def sample_seed(seed: int, domain: str, split: str, category: int, index: int) -> list[int]:
    return [seed, DOMAINS.index(domain), SPLITS.index(split), category, index]


def synth_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write images/*.pgm, labels/*.txt and manifest.txt; returns the directory.

    ``counts`` are per category. Every sample has its own sub-seed, so the
    output is independent of generation order.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rows = []
    n_cat = len(CATEGORIES)
    for (domain, split), per_cat in sorted(spec.counts.items()):
        for cat in range(n_cat):
            for i in range(per_cat):
                rng = np.random.default_rng(sample_seed(spec.seed, domain, split, cat, i))
                cats = [cat] + [int(c) for c in rng.integers(0, n_cat, spec.objects_per_image - 1)]
                stem = f"{domain}_{split}_{CATEGORIES[cat][:4]}_{i:05d}"
                s = synth_sample(spec, domain, cats, rng, origin=stem)
                write_pgm(s.image, out / "images" / f"{stem}.pgm")
                write_labels(s.labels, out / "labels" / f"{stem}.txt")
                rows.append(f"{stem}\t{domain}\t{split}\n")
    atomic_write(out / "manifest.txt", "".join(rows).encode("ascii"))
    return out


def read_manifest(data_dir) -> list[tuple[str, str, str]]:
    path = Path(data_dir) / "manifest.txt"
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'stem<TAB>domain<TAB>split'")
        rows.append(tuple(parts))
    return rows


def load_dataset(data_dir, domain: str | None = None, split: str | None = None,
                 labeled: bool = True) -> list[LabeledImage]:
    data_dir = Path(data_dir)
    out = []
    for stem, dom, spl in read_manifest(data_dir):
        if (domain and dom != domain) or (split and spl != split):
            continue
        img = read_pgm(data_dir / "images" / f"{stem}.pgm")
        lbl_path = data_dir / "labels" / f"{stem}.txt"
        labels = read_labels(lbl_path) if os.path.exists(lbl_path) else []
        out.append(LabeledImage(img, labels, dom, stem, labeled and os.path.exists(lbl_path)))
    return out
