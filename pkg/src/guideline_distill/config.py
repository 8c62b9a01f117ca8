"""Run configuration and the flat ``section.key = value`` file format.

Example file::

    # desk-scale benchmark
    stage1.epochs = 20
    teacher.decoder_dim = 64
    seeds = [0, 1, 2]

Values are parsed as JSON when possible and kept as strings otherwise.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .distill import LossConfig
from .errors import ConfigError
from .guideline_network import GuidelineNetConfig
from .scoring import FocalLossParams
from .train_eval import StageSchedule, stage1_schedule, stage2_schedule, student_schedule


@dataclass
class DataSettings:
    seed: int = 7
    n_train: int = 683
    n_val: int = 79
    n_test: int = 293
    class_distribution: list = field(default_factory=lambda: [0.2] * 5)
    volume_shape: list = field(default_factory=lambda: [4, 32, 32])
    label_noise: float = 0.0


@dataclass
class PretrainSettings:
    """Text-only language pretraining of the teacher decoder."""

    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 3e-3
    warmup_steps: int = 30
    seed: int = 0


@dataclass
class LossSettings:
    alpha: float = 0.4
    temperature: float = 1.0
    gamma: float = 2.0
    class_weights: list = field(default_factory=lambda: [2.0, 2.0, 1.0, 1.0, 1.0])
    teacher_norm: str = "standardize"

    def __post_init__(self):
        self.to_loss_config()  # raises on bad values

    def to_loss_config(self, alpha: float | None = None) -> LossConfig:
        return LossConfig(
            alpha=self.alpha if alpha is None else alpha,
            temperature=self.temperature,
            focal=FocalLossParams(tuple(self.class_weights), self.gamma),
            teacher_norm=self.teacher_norm,
        )


@dataclass
class RunConfig:
    dataset: str = "data/synthetic"
    out: str = "runs/default"
    seed: int = 0
    backbone: str = "vgg3d"
    backbones: list = field(default_factory=lambda: ["vgg3d", "resnet3d"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    alphas: list = field(default_factory=lambda: [0.2, 0.4, 0.6])
    arms: list = field(default_factory=lambda: ["w/o PICG", "with PICG", "baseline MLLM"])
    eval_split: str = "test"
    data: DataSettings = field(default_factory=DataSettings)
    teacher: GuidelineNetConfig = field(default_factory=GuidelineNetConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    stage1: StageSchedule = field(default_factory=stage1_schedule)
    stage2: StageSchedule = field(default_factory=stage2_schedule)
    student: StageSchedule = field(default_factory=student_schedule)
    loss: LossSettings = field(default_factory=LossSettings)

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    v = getattr(value, g.name)
                    flat[f"{f.name}.{g.name}"] = list(v) if isinstance(v, tuple) else v
            else:
                flat[f.name] = value
        return flat

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(self.to_flat().items()))

    def updated(self, flat: dict[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied; unknown keys raise ConfigError."""
        known = self.to_flat()
        top, sections = {}, {}
        for key, value in flat.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if "." in key:
                section, name = key.split(".", 1)
                sections.setdefault(section, {})[name] = value
            else:
                top[key] = value
        new = dataclasses.replace(self, **top)
        for section, values in sections.items():
            current = getattr(new, section)
            try:
                setattr(new, section, dataclasses.replace(current, **values))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad values for {section}: {exc}") from exc
        return new


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        if text in ("true", "false", "True", "False"):
            return text.lower() == "true"
        return text.strip("'\"")


def parse_config_text(text: str) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.updated(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.updated(overrides)
    return cfg


def bench_config(**top) -> RunConfig:
    """Desk-scale preset used by the acceptance benchmark; mirrored by ``configs/bench.cfg``.

    Smaller teacher, shorter stage 2 and a CPU-sized student schedule; data,
    split sizes, seeds and loss settings keep their defaults.
    """
    cfg = RunConfig().updated({
        "teacher.encoder_layers": 2, "teacher.encoder_dim": 64,
        "teacher.decoder_layers": 2, "teacher.decoder_dim": 64,
        "stage2.epochs": 12, "stage2.warmup_epochs": 1,
        "student.epochs": 30, "student.learning_rate": 3e-3, "student.decay": "cosine",
    })
    return dataclasses.replace(cfg, **top)
