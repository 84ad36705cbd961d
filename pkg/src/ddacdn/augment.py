"""Label-consistent training augmentations and pixel corruption."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boxes import BBox

Label = tuple[int, BBox]


class AugKind(str, enum.Enum):
    SHARPEN = "sharpen"
    CHANNEL_SCALE = "channel-scale"
    GAUSSIAN_NOISE = "gaussian-noise"
    ROTATE = "rotate"
    TRANSLATE = "translate"
    CONTRAST = "contrast"


AUG_KINDS = tuple(AugKind)


@dataclass
class LabeledImage:
    """Gray image with normalized, class-tagged boxes."""

    image: np.ndarray
    labels: list[Label] = field(default_factory=list)
    domain: str = "source"
    origin: str = ""
    labeled: bool = True

    def __post_init__(self):
        for cls, box in self.labels:
            if cls < 0 or not BBox(*box).is_valid():
                raise ValueError(f"invalid label ({cls}, {box})")
        self.labels = [(int(c), BBox(*b)) for c, b in self.labels]

    def replace(self, image=None, labels=None) -> LabeledImage:
        return LabeledImage(self.image if image is None else image,
                            list(self.labels if labels is None else labels),
                            self.domain, self.origin, self.labeled)


@dataclass(frozen=True)
class AugParams:
    sharpen_amount: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 5.0
    max_rotate_deg: float = 10.0
    max_shift: float = 0.10
    contrast_range: tuple[float, float] = (0.7, 1.3)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def sharpen(img: np.ndarray, amount: float = 0.5) -> np.ndarray:
    """Unsharp mask against a 3x3 box blur."""
    f = img.astype(np.float64)
    blur = ndimage.uniform_filter(f, size=3, mode="nearest")
    return _to_u8(f + amount * (f - blur))


def scale_intensity(img: np.ndarray, factor: float) -> np.ndarray:
    return _to_u8(img.astype(np.float64) * factor)


def add_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return _to_u8(img + rng.normal(0.0, sigma, img.shape))


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    f = img.astype(np.float64)
    m = f.mean()
    return _to_u8(m + factor * (f - m))


def _transform_labels(labels, w, h, fwd) -> list[Label]:
    """Map each box's corners through ``fwd`` (pixel coords), take the hull, clip."""
    out = []
    for cls, b in labels:
        xs = np.array([b.x1, b.x2, b.x2, b.x1]) * w
        ys = np.array([b.y1, b.y1, b.y2, b.y2]) * h
        tx, ty = fwd(xs, ys)
        nb = BBox(tx.min() / w, ty.min() / h, tx.max() / w, ty.max() / h).clip()
        if nb.x2 > nb.x1 and nb.y2 > nb.y1:
            out.append((cls, nb))
    return out


def rotate(sample: LabeledImage, degrees: float) -> LabeledImage:
    """Rotate about the image centre (counter-clockwise on screen), edge-replicated."""
    img = sample.image
    h, w = img.shape
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    cx, cy = w / 2, h / 2

    def fwd(x, y):
        # y axis points down, so a visual CCW turn is a CW turn in array coords
        dx, dy = x - cx, y - cy
        return cx + c * dx + s * dy, cy - s * dx + c * dy

    # inverse map for pixel centres: output (r, col) -> input (r', col')
    m = np.array([[c, s], [-s, c]])  # (row, col) order
    centre = np.array([cy - 0.5, cx - 0.5])
    offset = centre - m @ centre
    out = ndimage.affine_transform(img.astype(np.float64), m, offset=offset, order=1,
                                   mode="nearest")
    return sample.replace(_to_u8(out), _transform_labels(sample.labels, w, h, fwd))


def translate(sample: LabeledImage, dx: float, dy: float) -> LabeledImage:
    """Shift content by (dx, dy) image fractions, edge-replicated."""
    img = sample.image
    h, w = img.shape
    if dx == 0 and dy == 0:
        return sample.replace()
    out = ndimage.shift(img.astype(np.float64), (dy * h, dx * w), order=1, mode="nearest")
    labels = _transform_labels(sample.labels, w, h, lambda x, y: (x + dx * w, y + dy * h))
    return sample.replace(_to_u8(out), labels)


def augment(sample: LabeledImage, kind: AugKind | str, rng: np.random.Generator,
            params: AugParams = AugParams()) -> LabeledImage:
    kind = AugKind(kind)
    img = sample.image
    if kind is AugKind.SHARPEN:
        return sample.replace(sharpen(img, params.sharpen_amount))
    if kind is AugKind.CHANNEL_SCALE:
        return sample.replace(scale_intensity(img, rng.uniform(*params.scale_range)))
    if kind is AugKind.GAUSSIAN_NOISE:
        return sample.replace(add_noise(img, params.noise_sigma, rng))
    if kind is AugKind.ROTATE:
        return rotate(sample, rng.uniform(-params.max_rotate_deg, params.max_rotate_deg))
    if kind is AugKind.TRANSLATE:
        dx, dy = rng.uniform(-params.max_shift, params.max_shift, size=2)
        return translate(sample, float(dx), float(dy))
    return sample.replace(adjust_contrast(img, rng.uniform(*params.contrast_range)))


def augment_all(sample: LabeledImage, rng: np.random.Generator,
                params: AugParams = AugParams()) -> list[LabeledImage]:
    """One variant per kind, in ``AUG_KINDS`` order (the target-domain policy)."""
    return [augment(sample, k, rng, params) for k in AUG_KINDS]


def augment_random(sample: LabeledImage, rng: np.random.Generator,
                   params: AugParams = AugParams()) -> LabeledImage:
    """One uniformly drawn kind (the source-domain policy)."""
    return augment(sample, AUG_KINDS[rng.integers(len(AUG_KINDS))], rng, params)


def corrupt_gaussian(img: np.ndarray, ratio: float, sigma: float, rng: np.random.Generator,
                     return_mask: bool = False):
    """Perturb exactly round(ratio * W * H) distinct pixels with N(0, sigma^2) noise."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    n = img.size
    k = int(math.floor(ratio * n + 0.5))
    idx = rng.choice(n, size=k, replace=False)
    flat = img.astype(np.float64).ravel()
    flat[idx] += rng.normal(0.0, sigma, size=k)
    out = _to_u8(flat).reshape(img.shape)
    if return_mask:
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        return out, mask.reshape(img.shape)
    return out
