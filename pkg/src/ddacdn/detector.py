"""Toy single-stage grid detector with a three-scale feature pyramid.

A stride-2 stem is followed by three stride-2 stages whose outputs (strides
4, 8, 16) form the feature pyramid; each scale has a 1x1 prediction head.
Every forward pass, whichever domain it serves, reads one shared parameter
dictionary.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import ndgrad as nd
from .boxes import BBox, iou
from .imgproc import ApageConfig, atomic_write
from .ndgrad import Tensor

CHECKPOINT_MAGIC = b"DDAC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DetectorGeometry:
    input_size: int = 64
    strides: tuple[int, int, int] = (4, 8, 16)
    widths: tuple[int, int, int] = (16, 32, 64)
    stem_width: int = 8
    boxes_per_cell: int = 1
    num_classes: int = 4

    def __post_init__(self):
        if len(self.strides) != 3 or len(self.widths) != 3:
            raise ValueError("geometry needs exactly three scales")
        if list(self.strides) != [4, 8, 16]:
            raise ValueError("strides are fixed by the stem + three stride-2 stages: (4, 8, 16)")
        if self.input_size % max(self.strides):
            raise ValueError(f"input size {self.input_size} not divisible by {max(self.strides)}")
        if self.boxes_per_cell < 1 or self.num_classes < 1:
            raise ValueError("need at least one box per cell and one class")

    @property
    def grid_sizes(self) -> tuple[int, int, int]:
        return tuple(self.input_size // s for s in self.strides)

    @property
    def slot_channels(self) -> int:
        return 5 + self.num_classes

    @property
    def head_channels(self) -> int:
        return self.boxes_per_cell * self.slot_channels


@dataclass(frozen=True)
class Detection:
    cls: int
    conf: float
    box: BBox


ModelParams = dict  # name -> Tensor, insertion-ordered


def param_shapes(geom: DetectorGeometry) -> dict[str, tuple[int, ...]]:
    w0 = geom.stem_width
    w1, w2, w3 = geom.widths
    hc = geom.head_channels
    return {
        "stem.w": (w0, 1, 3, 3), "stem.b": (w0,),
        "stage2.w": (w1, w0, 3, 3), "stage2.b": (w1,),
        "stage3.w": (w2, w1, 3, 3), "stage3.b": (w2,),
        "stage4.w": (w3, w2, 3, 3), "stage4.b": (w3,),
        "head1.w": (hc, w1, 1, 1), "head1.b": (hc,),
        "head2.w": (hc, w2, 1, 1), "head2.b": (hc,),
        "head3.w": (hc, w3, 1, 1), "head3.b": (hc,),
    }


def init_params(geom: DetectorGeometry, rng: np.random.Generator,
                obj_prior: float = 0.01) -> ModelParams:
    """He-normal convolutions, small heads, objectness bias at a low prior."""
    params = {}
    for name, shape in param_shapes(geom).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
            if name.startswith("head"):
                obj = np.arange(geom.boxes_per_cell) * geom.slot_channels + 4
                data[obj] = -math.log((1 - obj_prior) / obj_prior)
        elif name.startswith("head"):
            data = rng.normal(0.0, 0.01, shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def zero_params(geom: DetectorGeometry) -> ModelParams:
    return {k: Tensor(np.zeros(s), requires_grad=True) for k, s in param_shapes(geom).items()}


def images_to_tensor(images) -> Tensor:
    """Stack uint8 (H, W) images into a (B, 1, H, W) tensor scaled to [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr[:, None] / 255.0)


def backbone_forward(params: ModelParams, images, geom: DetectorGeometry) -> list[Tensor]:
    x = images if isinstance(images, Tensor) else images_to_tensor(images)
    if x.shape[2:] != (geom.input_size, geom.input_size):
        raise ValueError(f"image size {x.shape[2:]} does not match geometry {geom.input_size}")
    h = nd.relu(nd.conv2d(x, params["stem.w"], params["stem.b"], stride=2))
    pyramid = []
    for stage in ("stage2", "stage3", "stage4"):
        h = nd.relu(nd.conv2d(h, params[f"{stage}.w"], params[f"{stage}.b"], stride=2))
        pyramid.append(h)
    return pyramid


def head_forward(pyramid: Sequence[Tensor], params: ModelParams) -> list[Tensor]:
    out = []
    for i, feat in enumerate(pyramid, start=1):
        w = params[f"head{i}.w"]
        if feat.shape[1] != w.shape[1]:
            raise ValueError(f"scale {i}: {feat.shape[1]} channels, head expects {w.shape[1]}")
        out.append(nd.conv2d(feat, w, params[f"head{i}.b"]))
    return out


@dataclass
class ScaleOutputs:
    """One scale's predictions laid out as (B, S, S, ...)."""

    box_params: Tensor  # (B, S, S, M, 4) raw tx, ty, tw, th
    obj: Tensor         # (B, S, S, M)
    cls: Tensor         # (B, S, S, C), averaged over slots
    boxes: Tensor       # (B, S, S, M, 4) decoded xyxy


def split_raw(raw: Tensor, geom: DetectorGeometry) -> ScaleOutputs:
    b, _, s, _ = raw.shape
    m, k = geom.boxes_per_cell, geom.slot_channels
    if raw.shape[1] != m * k:
        raise ValueError(f"raw channels {raw.shape[1]} != M*(5+C) = {m * k}")
    x = nd.transpose(nd.reshape(raw, (b, m, k, s, s)), (0, 3, 4, 1, 2))
    box_params = x[..., 0:4]
    obj = x[..., 4]
    if m > 1:
        cls = nd.tmean(x[..., 5:], axis=3)
    else:
        cls = nd.reshape(x[..., 5:], (b, s, s, k - 5))
    return ScaleOutputs(box_params, obj, cls, decode_boxes(box_params, s))


def decode_boxes(box_params: Tensor, s: int) -> Tensor:
    """Differentiable grid decode to xyxy: centre (col + sig(tx)) / S, size sig(tw)."""
    sig = nd.sigmoid(box_params)
    cols = np.arange(s, dtype=np.float64).reshape(1, 1, s, 1)
    rows = np.arange(s, dtype=np.float64).reshape(1, s, 1, 1)
    cx = (sig[..., 0] + cols) * (1.0 / s)
    cy = (sig[..., 1] + rows) * (1.0 / s)
    hw, hh = sig[..., 2] * 0.5, sig[..., 3] * 0.5
    stacked = nd.concat([nd.reshape(v, v.shape + (1,)) for v in
                         (cx - hw, cy - hh, cx + hw, cy + hh)], axis=-1)
    return stacked


def forward(params: ModelParams, images, geom: DetectorGeometry):
    pyramid = backbone_forward(params, images, geom)
    return pyramid, head_forward(pyramid, params)


# --- targets --------------------------------------------------------------------

@dataclass
class ScaleTargets:
    obj: np.ndarray       # (B, S, S, M) responsibility I_jm, also the objectness target
    cell_obj: np.ndarray  # (B, S, S) I_j
    cls: np.ndarray       # (B, S, S, C) one-hot(s)
    box: np.ndarray       # (B, S, S, M, 4) cx, cy, w, h

    def box_xyxy(self) -> np.ndarray:
        cx, cy, w, h = np.moveaxis(self.box, -1, 0)
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


@dataclass
class TargetAssignment:
    scales: list[ScaleTargets] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.scales[0].obj.shape[0]

    @classmethod
    def stack(cls, parts: Sequence[TargetAssignment]) -> TargetAssignment:
        return cls([ScaleTargets(*(np.concatenate([getattr(p.scales[i], f) for p in parts])
                                   for f in ("obj", "cell_obj", "cls", "box")))
                    for i in range(len(parts[0].scales))])

    def has_objects(self) -> bool:
        return any(sc.obj.any() for sc in self.scales)


def assign_targets(labels, geom: DetectorGeometry) -> TargetAssignment:
    """Centre-cell responsibility at every scale for one image (batch of 1).

    Boxes are placed largest-area first (ties: lower class id) into the next
    free slot of their cell; boxes finding no free slot are dropped at that
    scale.
    """
    m, c = geom.boxes_per_cell, geom.num_classes
    order = sorted(((int(k), BBox(*b)) for k, b in labels), key=lambda kb: (-kb[1].area, kb[0]))
    scales = []
    for s in geom.grid_sizes:
        obj = np.zeros((1, s, s, m))
        cls = np.zeros((1, s, s, c))
        box = np.zeros((1, s, s, m, 4))
        for k, b in order:
            cx, cy = b.center
            col, row = min(int(cx * s), s - 1), min(int(cy * s), s - 1)
            free = np.flatnonzero(obj[0, row, col] == 0)
            if len(free) == 0:
                continue
            obj[0, row, col, free[0]] = 1.0
            box[0, row, col, free[0]] = (cx, cy, b.width, b.height)
            cls[0, row, col, k] = 1.0
        scales.append(ScaleTargets(obj, obj.any(axis=-1).astype(np.float64), cls, box))
    return TargetAssignment(scales)


def assign_batch(label_lists, geom: DetectorGeometry) -> TargetAssignment:
    return TargetAssignment.stack([assign_targets(lbl, geom) for lbl in label_lists])


# --- inference --------------------------------------------------------------------

def decode(raw: Sequence[Tensor], geom: DetectorGeometry, conf_thresh: float = 0.25):
    """Detections per image, confidence-sorted (descending) and clipped to [0, 1]."""
    batch = raw[0].shape[0]
    m, k = geom.boxes_per_cell, geom.slot_channels
    per_image: list[list[tuple]] = [[] for _ in range(batch)]
    for r in raw:
        data = r.data if isinstance(r, Tensor) else np.asarray(r)
        s = data.shape[-1]
        x = data.reshape(batch, m, k, s, s).transpose(0, 3, 4, 1, 2)  # B,S,S,M,K
        cls_logits = x[..., 5:].mean(axis=3)  # B,S,S,C
        best = cls_logits.argmax(axis=-1)
        cls_p = expit(np.take_along_axis(cls_logits, best[..., None], axis=-1)[..., 0])
        sig = expit(x[..., :5])
        conf = sig[..., 4] * cls_p[..., None]
        rows = np.arange(s).reshape(1, s, 1, 1)
        cols = np.arange(s).reshape(1, 1, s, 1)
        cx = (cols + sig[..., 0]) / s
        cy = (rows + sig[..., 1]) / s
        w, h = sig[..., 2], sig[..., 3]
        keep = np.argwhere(conf >= conf_thresh)
        for bi, ri, ci, mi in keep:
            box = BBox(cx[bi, ri, ci, mi] - w[bi, ri, ci, mi] / 2,
                       cy[bi, ri, ci, mi] - h[bi, ri, ci, mi] / 2,
                       cx[bi, ri, ci, mi] + w[bi, ri, ci, mi] / 2,
                       cy[bi, ri, ci, mi] + h[bi, ri, ci, mi] / 2).clip()
            box = BBox(*(float(v) for v in box))
            per_image[bi].append(Detection(int(best[bi, ri, ci]), float(conf[bi, ri, ci, mi]), box))
    return [sorted(d, key=lambda det: -det.conf) for d in per_image]


def nms(dets: Sequence[Detection], iou_thresh: float = 0.45) -> list[Detection]:
    """Greedy per-class suppression, highest confidence first."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda det: -det.conf):
        if all(k.cls != d.cls or iou(k.box, d.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def detect(params: ModelParams, images, geom: DetectorGeometry, conf_thresh: float = 0.25,
           iou_thresh: float = 0.45, batch_size: int = 64) -> list[list[Detection]]:
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        _, raw = forward(params, images[start:start + batch_size], geom)
        out.extend(nms(d, iou_thresh) for d in decode(raw, geom, conf_thresh))
    return out


# --- checkpoints --------------------------------------------------------------------

@dataclass
class Checkpoint:
    geometry: DetectorGeometry
    params: ModelParams
    apage: ApageConfig | None = None  # preprocessing expected on target-domain inputs


_GEOM_FMT = "<9I"
_APAGE_FMT = "<B4Id"


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    g = ckpt.geometry
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack(_GEOM_FMT, g.input_size, *g.strides, *g.widths, g.stem_width,
                          g.boxes_per_cell))
    buf.write(struct.pack("<I", g.num_classes))
    a = ckpt.apage
    if a is None:
        buf.write(struct.pack(_APAGE_FMT, 0, 0, 0, 0, 0, 0.0))
    else:
        if a.gamma_grid != ApageConfig().gamma_grid:
            raise ValueError("checkpoints only record the default gamma grid")
        buf.write(struct.pack(_APAGE_FMT, 1, a.patch_h, a.patch_w, *a.clahe_tiles, a.clahe_clip))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def decode_checkpoint(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 4
    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    size, s1, s2, s3, w1, w2, w3, stem, m = take(_GEOM_FMT)
    (c,) = take("<I")
    geom = DetectorGeometry(size, (s1, s2, s3), (w1, w2, w3), stem, m, c)
    flag, ph, pw, ty, tx, clip = take(_APAGE_FMT)
    apage_cfg = ApageConfig(ph, pw, clahe_clip=clip, clahe_tiles=(ty, tx)) if flag else None
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(take(f"<{n}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        numel = int(np.prod(dims)) if rank else 1
        vals = take(f"<{numel * 8}s")[0]
        data = np.frombuffer(vals, dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Tensor(data, requires_grad=True)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return Checkpoint(geom, params, apage_cfg)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
