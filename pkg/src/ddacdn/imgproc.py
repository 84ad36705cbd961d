"""Adaptive patch gamma correction with global CLAHE (APAGE), plus PGM I/O.

Images are 2-D ``uint8`` numpy arrays of shape (height, width).
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DEFAULT_GAMMAS = tuple(round(0.5 + 0.1 * i, 1) for i in range(16))


class PGMError(ValueError):
    """Malformed or unsupported PGM data."""


@dataclass(frozen=True)
class ApageConfig:
    patch_h: int = 100
    patch_w: int = 100
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMAS
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)  # (rows, cols)

    def __post_init__(self):
        if self.patch_h <= 0 or self.patch_w <= 0:
            raise ValueError("patch size must be positive")
        g = self.gamma_grid
        if not g or any(v <= 0 for v in g) or any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("gamma_grid must be strictly increasing and positive")
        if 1.0 not in g:
            raise ValueError("gamma_grid must contain 1.0")
        if self.clahe_clip <= 0:
            raise ValueError("clahe_clip must be positive")
        if min(self.clahe_tiles) <= 0:
            raise ValueError("clahe_tiles must be positive")


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 2 or img.dtype != np.uint8:
        raise TypeError("expected a 2-D uint8 array")
    if img.size == 0:
        raise ValueError("image is empty")
    return img


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luminance of an (H, W, 3) image."""
    y = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


# --- patch gamma --------------------------------------------------------------

def patch_bounds(height: int, width: int, cfg: ApageConfig) -> list[list[tuple[slice, slice]]]:
    """Row-major grid of (row slice, col slice); edge patches keep the residual size."""
    rows = [slice(r, min(r + cfg.patch_h, height)) for r in range(0, height, cfg.patch_h)]
    cols = [slice(c, min(c + cfg.patch_w, width)) for c in range(0, width, cfg.patch_w)]
    return [[(r, c) for c in cols] for r in rows]


def split_patches(img: np.ndarray, cfg: ApageConfig) -> list[list[np.ndarray]]:
    """Views of ``img`` tiling it exactly, ceil(H/patch_h) x ceil(W/patch_w)."""
    check_image(img)
    return [[img[r, c] for r, c in row] for row in patch_bounds(*img.shape, cfg)]


def gamma_lut(gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    x = np.arange(256, dtype=np.float64) / 255.0
    return np.clip(np.floor(255.0 * x ** gamma + 0.5), 0, 255).astype(np.uint8)


def gamma_correct(patch: np.ndarray, gamma: float) -> np.ndarray:
    """round(255 * (in/255) ** gamma), via a 256-entry lookup table."""
    return gamma_lut(gamma)[patch]


class GammaChoice(NamedTuple):
    gamma: float
    corrected: np.ndarray
    variance: float


def select_gamma(patch: np.ndarray, cfg: ApageConfig = ApageConfig()) -> GammaChoice:
    """Grid gamma giving the largest pixel variance after 8-bit rounding.

    Ties go to the gamma closest to 1.0, then to the smaller gamma.
    """
    best = None
    for g in cfg.gamma_grid:
        out = gamma_correct(patch, g)
        var = float(np.var(out.astype(np.float64)))
        key = (-var, abs(g - 1.0), g)
        if best is None or key < best[0]:
            best = (key, GammaChoice(g, out, var))
    return best[1]


def patch_gamma(img: np.ndarray, cfg: ApageConfig = ApageConfig()) -> tuple[np.ndarray, np.ndarray]:
    """First APAGE stage. Returns the corrected image and the chosen gamma grid."""
    check_image(img)
    out = np.empty_like(img)
    grid = patch_bounds(*img.shape, cfg)
    gammas = np.empty((len(grid), len(grid[0])))
    for i, row in enumerate(grid):
        for j, (r, c) in enumerate(row):
            choice = select_gamma(img[r, c], cfg)
            out[r, c] = choice.corrected
            gammas[i, j] = choice.gamma
    return out, gammas


# --- CLAHE ------------------------------------------------------------------

def _clip_histograms(hist: np.ndarray, limit: int) -> np.ndarray:
    """Clip each row at ``limit`` and spread the excess over all bins."""
    nbins = hist.shape[1]
    excess = np.maximum(hist - limit, 0).sum(axis=1)
    hist = np.minimum(hist, limit) + (excess // nbins)[:, None]
    residual = excess % nbins
    for t in np.flatnonzero(residual):
        step = max(nbins // int(residual[t]), 1)
        idx = np.arange(0, nbins, step)[: residual[t]]
        hist[t, idx] += 1
    return hist


def clahe(img: np.ndarray, cfg: ApageConfig = ApageConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per-tile 256-bin histograms are clipped at ``clip * tile_pixels / 256``
    (integer, at least 1), the clipped mass is spread uniformly, and each
    tile's CDF gives a lookup table. Output pixels blend the tables of the
    four nearest tile centres bilinearly. A tile holding a single gray level
    has nothing to equalize and keeps the identity table. When the image size
    is not a multiple of the tile grid, histograms are taken over a
    reflect-101 padded copy.
    """
    check_image(img)
    ty, tx = cfg.clahe_tiles
    h, w = img.shape
    if h < ty or w < tx:
        raise ValueError(f"image {w}x{h} is smaller than the {tx}x{ty} tile grid")
    ph, pw = (-h) % ty, (-w) % tx
    src = np.pad(img, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else img
    th, tw = src.shape[0] // ty, src.shape[1] // tx
    tiles = src.reshape(ty, th, tx, tw).transpose(0, 2, 1, 3).reshape(ty * tx, th * tw)
    offsets = (np.arange(ty * tx) * 256)[:, None]
    hist = np.bincount((tiles.astype(np.int64) + offsets).ravel(),
                       minlength=ty * tx * 256).reshape(ty * tx, 256)
    npix = th * tw
    limit = max(int(cfg.clahe_clip * npix / 256), 1)
    flat = (hist > 0).sum(axis=1) == 1
    hist = _clip_histograms(hist, limit)
    lut = np.rint(np.cumsum(hist, axis=1) * (255.0 / npix))
    lut[flat] = np.arange(256)
    lut = np.clip(lut, 0, 255).reshape(ty, tx, 256)

    def axis_weights(n, size, ntiles):
        f = np.arange(n) / size - 0.5
        lo = np.floor(f).astype(int)
        a = f - lo
        return np.maximum(lo, 0), np.minimum(lo + 1, ntiles - 1), a

    y1, y2, ya = axis_weights(h, th, ty)
    x1, x2, xa = axis_weights(w, tw, tx)
    v = img.astype(np.intp)
    Y1, Y2 = y1[:, None], y2[:, None]
    X1, X2 = x1[None, :], x2[None, :]
    top = lut[Y1, X1, v] * (1 - xa) + lut[Y1, X2, v] * xa
    bot = lut[Y2, X1, v] * (1 - xa) + lut[Y2, X2, v] * xa
    res = top * (1 - ya[:, None]) + bot * ya[:, None]
    return np.clip(np.rint(res), 0, 255).astype(np.uint8)


def apage(img: np.ndarray, cfg: ApageConfig = ApageConfig()) -> np.ndarray:
    """Patch-wise variance-maximizing gamma correction, then global CLAHE."""
    corrected, _ = patch_gamma(img, cfg)
    return clahe(corrected, cfg)


# --- PGM ----------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PGMError(f"truncated header at byte {pos}")
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if len(buf) < 2:
        raise PGMError("truncated magic at byte 0")
    magic = buf[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P6"):
        raise PGMError(f"unsupported format {magic.decode()} at byte 0 (only binary P5)")
    if magic != b"P5":
        raise PGMError("not a PGM file: bad magic at byte 0")
    (ws, hs, ms), pos = _header_tokens(buf[2:], 3)
    pos += 2
    try:
        width, height, maxval = int(ws), int(hs), int(ms)
    except ValueError:
        raise PGMError(f"non-integer header field before byte {pos}") from None
    if width <= 0 or height <= 0:
        raise PGMError(f"non-positive dimensions {width}x{height} before byte {pos}")
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise PGMError(f"truncated raster at byte {len(buf)}: need {need} bytes from {pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def encode_pgm(img: np.ndarray) -> bytes:
    check_image(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary sibling file and rename, so no partial file is left."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pgm(img: np.ndarray, path) -> None:
    atomic_write(path, encode_pgm(img))
