"""Two-branch domain-adaptive training and the source-only baseline.

Each iteration of :func:`train_ddacdn` draws a source batch and a
category-balanced batch from the enhanced, augmented target pool, runs both
through the shared-weight detector, aligns the three feature scales with
MK-MMD, regroups both batches into a shuffled intermediate batch for the
supervised losses and takes one optimizer step on the summed objective.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ndgrad as nd
from .augment import AUG_KINDS, AugParams, LabeledImage, augment, augment_random
from .detector import (Checkpoint, DetectorGeometry, ModelParams, ScaleOutputs, assign_batch,
                       forward, init_params, save_checkpoint, split_raw)
from .imgproc import ApageConfig, apage, atomic_write
from .losses import FocalParams, LossWeights, box_loss, cls_loss, obj_loss, total_loss
from .mkmmd import BANDWIDTH_MULTIPLIERS, build_intermediate, domain_loss_terms, median_banks

# 64x64 inputs: 2x2 gamma patches and a 4x4 CLAHE grid keep tiles at 16 px
DESK_APAGE = ApageConfig(patch_h=32, patch_w=32, clahe_clip=2.0, clahe_tiles=(4, 4))

LOG_HEADER = "epoch,iter,l_box,l_cls,l_obj,l_dom1,l_dom2,l_dom3,total,lambda_obj"


class InsufficientLabelsError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, record: TrainRecord):
        super().__init__(f"non-finite loss at epoch {record.epoch}, iteration {record.iter}: "
                         f"{record.csv_row()}")
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    optimizer: str = "sgd"
    lr: float | None = None  # None: 0.01 for sgd, 1e-3 for adam
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = None  # global L2 norm cap, off by default
    weights: LossWeights = LossWeights()
    focal: FocalParams = FocalParams()
    apage: ApageConfig = DESK_APAGE
    use_apage: bool = True
    intermediate: bool = True
    mmd_multipliers: tuple[float, ...] = BANDWIDTH_MULTIPLIERS
    freeze_bandwidths: bool = False  # keep the first batch's median banks
    geometry: DetectorGeometry = DetectorGeometry()
    aug: AugParams = AugParams()
    seed: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr is not None and not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if self.optimizer == "sgd" else 1e-3


@dataclass
class TrainRecord:
    epoch: int
    iter: int
    l_box: float
    l_cls: float
    l_obj: float
    l_dom: tuple[float, float, float]
    total: float
    lambda_obj: int

    def values(self) -> list[float]:
        return [self.l_box, self.l_cls, self.l_obj, *self.l_dom, self.total]

    def csv_row(self) -> str:
        nums = ",".join(repr(float(v)) for v in self.values())
        return f"{self.epoch},{self.iter},{nums},{self.lambda_obj}"


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    epoch_metrics: list[tuple[int, float]] = field(default_factory=list)  # (epoch, macro F1)

    def to_csv(self) -> str:
        return LOG_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in self.records)

    def write(self, path) -> None:
        atomic_write(path, self.to_csv().encode("ascii"))

    def column(self, name: str) -> np.ndarray:
        if name.startswith("l_dom"):
            return np.array([r.l_dom[int(name[-1]) - 1] for r in self.records])
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


# --- optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)  # momentum buffer (sgd) / first moment (adam)
    v: dict = field(default_factory=dict)  # second moment (adam)


def optimizer_step(params: ModelParams, grads, state: OptimizerState, cfg: TrainConfig):
    """One in-place update; returns ``(params, state)``.

    sgd: v <- mu v + g, theta <- theta - lr v. adam: bias-corrected moments
    with eps = 1e-8.
    """
    for name, t in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        if np.shape(grads[name]) != t.shape:
            raise nd.ShapeError(f"{name}: gradient shape {np.shape(grads[name])} != {t.shape}")
    lr = cfg.learning_rate
    state.step += 1
    for name, t in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if cfg.optimizer == "sgd":
            v = cfg.momentum * state.m.get(name, 0.0) + g
            state.m[name] = v
            t.data = t.data - lr * v
        else:
            b1, b2 = cfg.betas
            m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    return params, state


def _clip_grads(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# --- data preparation --------------------------------------------------------------

@dataclass
class _Streams:
    init: np.random.Generator
    source: np.random.Generator
    target_aug: np.random.Generator
    target_pick: np.random.Generator
    mix: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> _Streams:
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)))


def _enhance(sample: LabeledImage, cfg: ApageConfig) -> LabeledImage:
    return sample.replace(apage(sample.image, cfg))


def category_of(sample: LabeledImage) -> int:
    return int(sample.labels[0][0])


def _target_pool(target: Sequence[LabeledImage], cfg: TrainConfig, rng) -> list[list[LabeledImage]]:
    """Per category, every labeled target image enhanced and expanded six ways."""
    n_cls = cfg.geometry.num_classes
    per_cls = max(1, cfg.batch_size // n_cls)
    groups: list[list[LabeledImage]] = [[] for _ in range(n_cls)]
    for s in target:
        if s.labeled and s.labels:
            groups[category_of(s)].append(s)
    for c, g in enumerate(groups):
        if len(g) < per_cls:
            raise InsufficientLabelsError(
                f"category {c} has {len(g)} labeled target samples, need at least {per_cls}")
    pool = []
    for g in groups:
        variants = []
        for s in g:
            base = _enhance(s, cfg.apage) if cfg.use_apage else s
            variants.extend(augment(base, k, rng, cfg.aug) for k in AUG_KINDS)
        pool.append(variants)
    return pool


def _sample_target(pool, per_cls: int, rng) -> list[LabeledImage]:
    batch = []
    for variants in pool:
        idx = rng.choice(len(variants), size=per_cls, replace=False)
        batch.extend(variants[i] for i in idx)
    return batch


def _prepare_source(source: Sequence[LabeledImage], enhance: ApageConfig | None):
    if not source:
        raise InsufficientLabelsError("source manifest is empty")
    return [_enhance(s, enhance) if enhance else s for s in source]


# --- losses on one batch --------------------------------------------------------------

def _stack_images(samples: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _supervised(raw: Sequence[nd.Tensor], samples: Sequence[LabeledImage], cfg: TrainConfig):
    geom = cfg.geometry
    assign = assign_batch([s.labels for s in samples], geom)
    outs: list[ScaleOutputs] = [split_raw(r, geom) for r in raw]
    l_box = box_loss(assign, [o.boxes for o in outs])
    l_cls = cls_loss(assign, [o.cls for o in outs], cfg.focal)
    l_obj = obj_loss(assign, [o.obj for o in outs], cfg.weights, cfg.focal)
    scale = 1.0 / len(samples)
    return l_box * scale, l_cls * scale, l_obj * scale, int(assign.has_objects())


def _step(params, loss_parts, state, cfg, epoch, it, log: TrainLog):
    l_box, l_cls, l_obj, lam, dom_terms = loss_parts
    dom = dom_terms[0] + dom_terms[1] + dom_terms[2]
    total = total_loss(l_box, l_cls, l_obj, dom, lam, cfg.weights)
    rec = TrainRecord(epoch, it, l_box.item(), l_cls.item(), l_obj.item(),
                      tuple(t.item() for t in dom_terms), total.item(), lam)
    if not all(math.isfinite(v) for v in rec.values()):
        raise NonFiniteLossError(rec)
    grads = nd.backward(total)
    g = _clip_grads({k: grads.of(t) for k, t in params.items()}, cfg.grad_clip)
    optimizer_step(params, g, state, cfg)
    log.records.append(rec)


def _end_epoch(params, cfg: TrainConfig, epoch: int, log: TrainLog, apage_cfg,
               eval_fn: Callable | None):
    if cfg.checkpoint_dir:
        ckpt = Checkpoint(cfg.geometry, params, apage_cfg)
        Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, Path(cfg.checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
    if eval_fn is not None:
        log.epoch_metrics.append((epoch, float(eval_fn(params))))


def _finish(params, cfg: TrainConfig, log: TrainLog):
    if cfg.log_path:
        log.write(cfg.log_path)
    return params, log


# --- trainers --------------------------------------------------------------------------

def train_ddacdn(cfg: TrainConfig, source: Sequence[LabeledImage],
                 target: Sequence[LabeledImage], eval_fn: Callable | None = None):
    """Domain-adaptive training; returns ``(params, log)``.

    Args:
        cfg: training configuration; ``cfg.seed`` fixes every random choice.
        source: labeled source-domain samples.
        target: labeled target-domain samples (at least ``batch_size // C``
            per category).
        eval_fn: optional ``params -> macro F1`` called after each epoch.
    """
    streams = _Streams.from_seed(cfg.seed)
    geom = cfg.geometry
    params = init_params(geom, streams.init)
    src = _prepare_source(source, None)
    per_cls = max(1, cfg.batch_size // geom.num_classes)
    beta = cfg.weights.beta
    use_target = any(b != 0 for b in beta) or cfg.intermediate
    pool = _target_pool(target, cfg, streams.target_aug) if use_target else None
    state, log = OptimizerState(), TrainLog()
    n_iter = math.ceil(len(src) / cfg.batch_size)
    it = 0
    banks = None
    for epoch in range(1, cfg.epochs + 1):
        order = streams.source.permutation(len(src))
        for k in range(n_iter):
            batch_s = [augment_random(src[i], streams.source, cfg.aug)
                       for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            with nd.Graph():
                pyr_s, raw_s = forward(params, _stack_images(batch_s), geom)
                zero = nd.Tensor(0.0)
                dom_terms = [zero, zero, zero]
                sup_raw, sup_samples = raw_s, batch_s
                if use_target:
                    batch_t = _sample_target(pool, per_cls, streams.target_pick)
                    pyr_t, raw_t = forward(params, _stack_images(batch_t), geom)
                    if any(b != 0 for b in beta):
                        if banks is None or not cfg.freeze_bandwidths:
                            banks = median_banks(pyr_s, pyr_t, cfg.mmd_multipliers)
                        dom_terms = domain_loss_terms(pyr_s, pyr_t, banks, beta)
                    if cfg.intermediate:
                        sup_samples, perm = build_intermediate(batch_s, batch_t, streams.mix)
                        sup_raw = [nd.getitem(nd.concat([rs, rt], axis=0), perm)
                                   for rs, rt in zip(raw_s, raw_t)]
                parts = _supervised(sup_raw, sup_samples, cfg)
                it += 1
                _step(params, (*parts, dom_terms), state, cfg, epoch, it, log)
        _end_epoch(params, cfg, epoch, log, cfg.apage if cfg.use_apage else None, eval_fn)
    return _finish(params, cfg, log)


def train_baseline(cfg: TrainConfig, source: Sequence[LabeledImage],
                   eval_fn: Callable | None = None, enhance: bool = False):
    """Source-only training of the same detector; returns ``(params, log)``.

    With ``enhance`` the source images are passed through APAGE (with
    ``cfg.apage``) and the checkpoint asks evaluation to enhance its inputs
    the same way.
    """
    streams = _Streams.from_seed(cfg.seed)
    geom = cfg.geometry
    params = init_params(geom, streams.init)
    src = _prepare_source(source, cfg.apage if enhance else None)
    state, log = OptimizerState(), TrainLog()
    n_iter = math.ceil(len(src) / cfg.batch_size)
    it = 0
    zero = nd.Tensor(0.0)
    for epoch in range(1, cfg.epochs + 1):
        order = streams.source.permutation(len(src))
        for k in range(n_iter):
            batch_s = [augment_random(src[i], streams.source, cfg.aug)
                       for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            with nd.Graph():
                _, raw_s = forward(params, _stack_images(batch_s), geom)
                parts = _supervised(raw_s, batch_s, cfg)
                it += 1
                _step(params, (*parts, [zero, zero, zero]), state, cfg, epoch, it, log)
        _end_epoch(params, cfg, epoch, log, cfg.apage if enhance else None, eval_fn)
    return _finish(params, cfg, log)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, **kw)
