"""Flat ``key = value`` configuration files with namespaced, validated keys."""
from __future__ import annotations

import dataclasses
import difflib
from pathlib import Path

from .detector import DetectorGeometry
from .imgproc import ApageConfig
from .losses import FocalParams, LossWeights
from .mkmmd import BANDWIDTH_MULTIPLIERS
from .train import DESK_APAGE, TrainConfig
from .datasynth import SynthSpec

KNOWN_KEYS = {
    "loss.eta_box", "loss.eta_cls", "loss.eta_obj", "loss.alpha", "loss.gamma",
    "loss.balance", "loss.beta",
    "apage.patch", "apage.clip", "apage.tiles",
    "train.epochs", "train.batch_size", "train.optimizer", "train.lr", "train.momentum",
    "train.betas", "train.grad_clip", "train.seed", "train.apage", "train.intermediate",
    "mmd.multipliers", "mmd.freeze",
    "synth.image_size", "synth.source_train", "synth.source_test", "synth.target_train",
    "synth.target_test", "synth.objects_per_image", "synth.seed",
}


class ConfigError(ValueError):
    pass


class Config:
    """Parsed key-value map with typed accessors."""

    def __init__(self, values: dict[str, str] | None = None, lines: dict[str, int] | None = None,
                 source: str = "<config>"):
        self.values = dict(values or {})
        self.lines = dict(lines or {})
        self.source = source

    def __contains__(self, key):
        return key in self.values

    def _fail(self, key, msg):
        where = f"{self.source}:{self.lines[key]}" if key in self.lines else self.source
        raise ConfigError(f"{where}: {key}: {msg}")

    def get_str(self, key, default=None):
        return self.values.get(key, default)

    def get_float(self, key, default=None):
        if key not in self.values:
            return default
        try:
            return float(self.values[key])
        except ValueError:
            self._fail(key, f"expected a number, got {self.values[key]!r}")

    def get_int(self, key, default=None):
        if key not in self.values:
            return default
        try:
            return int(self.values[key])
        except ValueError:
            self._fail(key, f"expected an integer, got {self.values[key]!r}")

    def get_bool(self, key, default=None):
        if key not in self.values:
            return default
        v = self.values[key].lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        self._fail(key, f"expected a boolean, got {self.values[key]!r}")

    def get_floats(self, key, default=None):
        if key not in self.values:
            return default
        try:
            return tuple(float(v) for v in self.values[key].split(","))
        except ValueError:
            self._fail(key, f"expected comma-separated numbers, got {self.values[key]!r}")

    # --- builders: each module validates its own values -----------------------

    def _build(self, key_prefix, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            keys = [k for k in self.values if k.startswith(key_prefix)]
            raise ConfigError(f"{self.source}: invalid {key_prefix}* settings "
                              f"({', '.join(keys) or 'defaults'}): {exc}") from exc

    def focal_params(self) -> FocalParams:
        d = FocalParams()
        alpha = self.get_str("loss.alpha")
        if alpha is None:
            a = d.alpha
        elif alpha.lower() == "none":
            a = None
        else:
            a = self.get_float("loss.alpha")
        return self._build("loss.", lambda: FocalParams(a, self.get_float("loss.gamma", d.gamma)))

    def loss_weights(self) -> LossWeights:
        d = LossWeights()
        return self._build("loss.", lambda: LossWeights(
            self.get_float("loss.eta_box", d.eta_box), self.get_float("loss.eta_cls", d.eta_cls),
            self.get_float("loss.eta_obj", d.eta_obj), self.get_floats("loss.beta", d.beta),
            self.get_floats("loss.balance", d.balance)))

    def apage_config(self, default: ApageConfig = DESK_APAGE) -> ApageConfig:
        patch = self.get_int("apage.patch")
        tiles = self.get_str("apage.tiles")

        def build():
            cfg = dataclasses.replace(default, clahe_clip=self.get_float("apage.clip",
                                                                          default.clahe_clip))
            if patch is not None:
                cfg = dataclasses.replace(cfg, patch_h=patch, patch_w=patch)
            if tiles is not None:
                cfg = dataclasses.replace(cfg, clahe_tiles=parse_tiles(tiles))
            return cfg
        return self._build("apage.", build)

    def train_config(self, **overrides) -> TrainConfig:
        d = TrainConfig()

        def build():
            cfg = TrainConfig(
                epochs=self.get_int("train.epochs", d.epochs),
                batch_size=self.get_int("train.batch_size", d.batch_size),
                optimizer=self.get_str("train.optimizer", d.optimizer),
                lr=self.get_float("train.lr", d.lr),
                momentum=self.get_float("train.momentum", d.momentum),
                betas=self.get_floats("train.betas", d.betas),
                grad_clip=self.get_float("train.grad_clip", d.grad_clip),
                weights=self.loss_weights(),
                focal=self.focal_params(),
                apage=self.apage_config(),
                use_apage=self.get_bool("train.apage", d.use_apage),
                intermediate=self.get_bool("train.intermediate", d.intermediate),
                mmd_multipliers=self.get_floats("mmd.multipliers", BANDWIDTH_MULTIPLIERS),
                freeze_bandwidths=self.get_bool("mmd.freeze", d.freeze_bandwidths),
                geometry=DetectorGeometry(),
                seed=self.get_int("train.seed", d.seed),
            )
            return dataclasses.replace(cfg, **overrides)
        return self._build("train.", build)

    def synth_spec(self, **overrides) -> SynthSpec:
        d = SynthSpec()

        def build():
            counts = dict(d.counts)
            for (dom, split) in (("source", "train"), ("source", "test"),
                                 ("target", "train"), ("target", "test")):
                n = self.get_int(f"synth.{dom}_{split}")
                if n is not None:
                    counts[(dom, split)] = n
            spec = SynthSpec(image_size=self.get_int("synth.image_size", d.image_size),
                             counts=counts,
                             objects_per_image=self.get_int("synth.objects_per_image",
                                                            d.objects_per_image),
                             seed=self.get_int("synth.seed", d.seed))
            return dataclasses.replace(spec, **overrides)
        return self._build("synth.", build)


def parse_tiles(text: str) -> tuple[int, int]:
    try:
        ty, tx = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"tiles must look like '8x8', got {text!r}") from None
    return ty, tx


def parse_config_text(text: str, source: str = "<config>") -> Config:
    values, lines = {}, {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{n}: empty key or value")
        if key not in KNOWN_KEYS:
            near = difflib.get_close_matches(key, sorted(KNOWN_KEYS), n=1, cutoff=0.0)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            raise ConfigError(f"{source}:{n}: unknown key {key!r}{hint}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r} (first set on line {lines[key]})")
        values[key], lines[key] = value, n
    return Config(values, lines, source)


def parse_config(path) -> Config:
    if path is None:
        return Config()
    return parse_config_text(Path(path).read_text(), str(path))
