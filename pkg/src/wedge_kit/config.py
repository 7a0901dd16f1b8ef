"""Experiment configuration: an INI file layered over shipped defaults.

``wedge-kit print-config`` prints the full default file; any subset of
keys may be overridden. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple

from .affinity import ConfigError
from .data import DEFAULT_CLASS_NAMES, DEFAULT_COLORS, TARGET_SHIFTS, SceneSpec
from .injection import InjectionConfig
from .model import TrainConfig
from .pseudo_label import PseudoLabelConfig


@dataclass(frozen=True)
class PathsSection:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    class_names: Tuple[str, ...] = DEFAULT_CLASS_NAMES
    num_source: int = 200
    num_web: int = 200
    num_target: int = 60
    height: int = 32
    width: int = 32
    density: float = 2.0
    web_density_min: float = 0.3
    web_density_max: float = 4.0
    web_max_distractors: int = 4
    target_domains: Tuple[str, ...] = tuple(TARGET_SHIFTS)


@dataclass(frozen=True)
class ModelSection:
    feat_channels: int = 8


@dataclass(frozen=True)
class StageSection:
    learning_rate: float = 0.1
    iterations: int = 1500
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class InjectionSection:
    method: str = "procrustes"
    points: Tuple[int, ...] = (1, 2)
    probability: float = 1.0
    knn_k: int = 5
    adain_epsilon: float = 1e-5
    affinity_epsilon: float = 1e-8
    subsample_stride: int = 0  # 0 = use every web position


@dataclass(frozen=True)
class PseudoLabelSection:
    tau: float = 5e-2


@dataclass(frozen=True)
class SweepSection:
    tau: Tuple[float, ...] = (0.1, 0.05, 0.01, 0.005)
    methods: Tuple[str, ...] = ("none", "adain", "mast_knn", "procrustes")
    points: Tuple[str, ...] = ("1", "2", "1+2")
    corpus_fractions: Tuple[float, ...] = (0.25, 0.5, 1.0)


@dataclass(frozen=True)
class RunSection:
    seeds: Tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class BenchSection:
    sizes: Tuple[int, ...] = (256, 1024, 4096)
    channels: Tuple[int, ...] = (16, 64)
    repetitions: int = 10
    knn_k: int = 5
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    stage1: StageSection = field(default_factory=StageSection)
    stage2: StageSection = field(default_factory=lambda: StageSection(learning_rate=0.05))
    injection: InjectionSection = field(default_factory=InjectionSection)
    pseudo_label: PseudoLabelSection = field(default_factory=PseudoLabelSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    run: RunSection = field(default_factory=RunSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # -- derived objects -------------------------------------------------

    def scene_spec(self) -> SceneSpec:
        k = len(self.data.class_names)
        return SceneSpec(
            num_classes=k,
            height=self.data.height,
            width=self.data.width,
            colors=DEFAULT_COLORS[:k],
            density=self.data.density,
        )

    def injection_config(self, method: Optional[str] = None, points=None) -> InjectionConfig:
        inj = self.injection
        return InjectionConfig(
            method=method or inj.method,
            injection_points=frozenset(points if points is not None else inj.points),
            probability=inj.probability,
            adain_epsilon=inj.adain_epsilon,
            knn_k=inj.knn_k,
            affinity_epsilon=inj.affinity_epsilon,
            subsample_stride=inj.subsample_stride or None,
        )

    def train_config(self, stage: str, seed: int, injection: Optional[InjectionConfig] = None) -> TrainConfig:
        section = self.stage2 if stage == "stage2_PL" else self.stage1
        return TrainConfig(
            learning_rate=section.learning_rate,
            iterations=section.iterations,
            seed=seed,
            stage=stage,
            injection=injection or self.injection_config(),
            tau=PseudoLabelConfig(self.pseudo_label.tau),
            batch_size=section.batch_size,
            momentum=section.momentum,
            weight_decay=section.weight_decay,
        )

    def with_overrides(self, **sections) -> "ExperimentConfig":
        return replace(self, **sections)

    def validate(self) -> "ExperimentConfig":
        names = self.data.class_names
        if not names:
            raise ConfigError("[data] class_names must not be empty")
        if not 2 <= len(names) <= len(DEFAULT_COLORS) or len(set(names)) != len(names):
            raise ConfigError(f"[data] class_names needs 2..{len(DEFAULT_COLORS)} distinct names (background first), got {names}")
        unknown = set(self.data.target_domains) - set(TARGET_SHIFTS)
        if unknown:
            raise ConfigError(f"[data] target_domains: unknown domains {sorted(unknown)}; known {sorted(TARGET_SHIFTS)}")
        if self.model.feat_channels < 1:
            raise ConfigError("[model] feat_channels must be >= 1")
        if not self.run.seeds:
            raise ConfigError("[run] seeds must not be empty")
        for name in ("num_source", "num_web", "num_target"):
            if getattr(self.data, name) < 1:
                raise ConfigError(f"[data] {name} must be >= 1")
        if not 0 <= self.data.web_density_min <= self.data.web_density_max or self.data.web_max_distractors < 0:
            raise ConfigError("[data] need 0 <= web_density_min <= web_density_max and web_max_distractors >= 0")
        for name in ("stage1", "stage2"):
            sec = getattr(self, name)
            if sec.learning_rate <= 0 or sec.iterations < 0 or sec.batch_size < 1:
                raise ConfigError(f"[{name}] learning_rate must be > 0, iterations >= 0, batch_size >= 1")
        for p in self.sweep.points:
            parse_points(p)
        for f in self.sweep.corpus_fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"[sweep] corpus_fractions must lie in (0, 1], got {f}")
        try:
            self.injection_config()
            for tau in (self.pseudo_label.tau,) + tuple(self.sweep.tau):
                PseudoLabelConfig(tau)
            for method in self.sweep.methods:
                self.injection_config(method=method)
            self.train_config("stage1_SI", 0)
            self.train_config("stage2_PL", 0)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def parse_points(text: str) -> Tuple[int, ...]:
    try:
        pts = tuple(sorted({int(p) for p in text.replace("+", " ").split()}))
    except ValueError:
        raise ConfigError(f"bad injection point set {text!r}; use e.g. '1+2'") from None
    if not pts or not set(pts) <= {1, 2}:
        raise ConfigError(f"injection points must be a non-empty subset of {{1, 2}}, got {text!r}")
    return pts


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def dump_config(cfg: ExperimentConfig = ExperimentConfig()) -> str:
    parser = configparser.ConfigParser()
    for sec in fields(cfg):
        section = getattr(cfg, sec.name)
        parser[sec.name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig()
    known = {f.name for f in fields(cfg)}
    updates = {}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]")
        section = getattr(cfg, name)
        keys = {f.name for f in fields(section)}
        values = {}
        for key, raw in parser[name].items():
            if key not in keys:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _parse(raw, getattr(section, key), f"[{name}] {key}")
        updates[name] = replace(section, **values)
    return replace(cfg, **updates).validate()


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def seeds_or_override(cfg: ExperimentConfig, seed: Optional[int]) -> List[int]:
    return [seed] if seed is not None else list(cfg.run.seeds)
