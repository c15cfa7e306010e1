"""Sectioned ``key = value`` run configuration (INI syntax via configparser).

Sections and keys (every key optional; unknown sections or keys are errors):

[model]
    variant       concat | blstm_blstm | trans_trans | blstm_time_trans_spk | eda_dot | eda_tsvad
    scale         full | toy
    seed          parameter initialisation seed (default 0)
    <dim>         any field of TsVadConfig (TS-VAD variants) or EendEdaConfig
                  (eda_*), e.g. ``jsd_blocks = 1``, ``time_blstm = 40,40``,
                  ``spk_trans = 4,40,40``, ``downsample = 4,2``
[features]        sample_rate, window_ms, hop_ms, n_mels, log_floor
                  (n_mels defaults to the model's input size: 80 for TS-VAD, 40 for EDA)
[training]        peak_lr, warmup_steps, total_steps, batch, chunk_seconds, seed,
                  existence_weight, clip_norm, checkpoint_every
                  (defaults 2e-4 / 20000 / 200000 for TS-VAD variants and
                  5e-5 / 27000 / 230000 for EDA variants)
[inference]       threshold, median_taps, chunk_seconds, min_profile_dur, ahc_threshold,
                  vad_threshold_db, vad_hangover, segment_length, eda_threshold,
                  max_attractors, collar, first_pass
[paths]           train_manifest, test_manifest, dataset_dir, checkpoint, loss_log,
                  profiles, output_rttm
[simulate]        any field of SimulationConfig
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .eda import EendEdaConfig, EendEdaModel, eda_preset
from .features import FeatureConfig
from .pipeline import InferenceConfig
from .simulate import SimulationConfig
from .training import TrainConfig
from .tsvad import BlstmSpec, JsdVariant, TransformerSpec, TsVadConfig, TsVadModel, preset

TSVAD_VARIANTS = tuple(v.value for v in JsdVariant)
EDA_VARIANTS = ("eda_dot", "eda_tsvad")
VARIANTS = TSVAD_VARIANTS + EDA_VARIANTS

TSVAD_SCHEDULE = dict(peak_lr=2e-4, warmup_steps=20_000, total_steps=200_000)
EDA_SCHEDULE = dict(peak_lr=5e-5, warmup_steps=27_000, total_steps=230_000)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending section/key."""


@dataclass
class ModelSection:
    variant: str = JsdVariant.BLSTM_TIME_TRANS_SPK.value
    scale: str = "full"
    seed: int = 0
    overrides: dict[str, str] = field(default_factory=dict)

    @property
    def is_eda(self) -> bool:
        return self.variant in EDA_VARIANTS

    def build_config(self) -> TsVadConfig | EendEdaConfig:
        if self.variant not in VARIANTS:
            raise ConfigError(f"[model] variant: unknown value {self.variant!r}")
        if self.scale not in ("full", "toy"):
            raise ConfigError(f"[model] scale: unknown value {self.scale!r}")
        if self.is_eda:
            base = eda_preset(self.variant.removeprefix("eda_"), self.scale)
        else:
            base = preset(self.variant, self.scale)
        hints = typing.get_type_hints(type(base))
        values = {}
        for key, text in self.overrides.items():
            if key not in hints or key in ("variant", "matcher"):
                raise ConfigError(f"[model] unknown key {key!r}")
            values[key] = _parse(text, hints[key], f"[model] {key}")
        cfg = replace(base, **values)
        if not self.is_eda and cfg.jsd_blocks not in (1, 2):
            raise ConfigError("[model] jsd_blocks must be 1 or 2")
        return cfg

    def build(self):
        cfg = self.build_config()
        return EendEdaModel(cfg, self.seed) if self.is_eda else TsVadModel(cfg, self.seed)


@dataclass
class Paths:
    train_manifest: str | None = None
    test_manifest: str | None = None
    dataset_dir: str | None = None
    checkpoint: str | None = None
    loss_log: str | None = None
    profiles: str | None = None
    output_rttm: str | None = None


@dataclass
class RunInference(InferenceConfig):
    first_pass: bool = True


@dataclass
class RunTraining(TrainConfig):
    checkpoint_every: int = 100


@dataclass
class Config:
    model: ModelSection = field(default_factory=ModelSection)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    training: RunTraining = field(default_factory=RunTraining)
    inference: RunInference = field(default_factory=RunInference)
    paths: Paths = field(default_factory=Paths)
    simulate: SimulationConfig = field(default_factory=SimulationConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        model = {"variant": self.model.variant, "scale": self.model.scale,
                 "seed": str(self.model.seed), **self.model.overrides}
        cp["model"] = model
        for name in ("features", "training", "inference", "paths", "simulate"):
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)
                        if getattr(section, f.name) is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_SECTIONS = {"features": FeatureConfig, "training": RunTraining, "inference": RunInference,
             "paths": Paths, "simulate": SimulationConfig}


def parse_config(text: str) -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - {"model", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")

    model = ModelSection()
    if cp.has_section("model"):
        items = dict(cp["model"])
        model.variant = items.pop("variant", model.variant)
        model.scale = items.pop("scale", model.scale)
        if "seed" in items:
            model.seed = _parse(items.pop("seed"), int, "[model] seed")
        model.overrides = items
    model.build_config()  # validate early

    sections = {}
    for name, cls in _SECTIONS.items():
        items = dict(cp[name]) if cp.has_section(name) else {}
        sections[name] = _build_section(cls, items, name)

    feats = sections["features"]
    if "n_mels" not in (dict(cp["features"]) if cp.has_section("features") else {}):
        feats = replace(feats, n_mels=model.build_config().n_mels)
    training = sections["training"]
    given = dict(cp["training"]) if cp.has_section("training") else {}
    schedule = EDA_SCHEDULE if model.is_eda else TSVAD_SCHEDULE
    training = replace(training, **{k: v for k, v in schedule.items() if k not in given})
    return Config(model, feats, training, sections["inference"], sections["paths"],
                  sections["simulate"])


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _build_section(cls, items: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    values = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        values[key] = _parse(text, hints[key], f"[{section}] {key}")
    try:
        obj = cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    if cls is SimulationConfig:
        try:
            obj.conversation_specs()
        except ValueError as exc:
            raise ConfigError(f"[simulate] {exc}") from exc
    return obj


def _parse(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if text.lower() in ("", "none"):
                return None
            inner = [a for a in args if a is not type(None)]
            return _parse(text, inner[0], where)
        if hint is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            parts = [p for p in text.replace(" ", "").split(",") if p]
            kind = args[0]
            return tuple(kind(p) for p in parts)
        if hint in (BlstmSpec, TransformerSpec):
            parts = [int(p) for p in text.split(",")]
            return hint(*parts)
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint(text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from exc
    raise ConfigError(f"{where}: unsupported type {hint}")


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if dataclasses.is_dataclass(value):
        return ",".join(str(getattr(value, f.name)) for f in fields(value))
    return repr(value) if isinstance(value, float) else str(value)
