"""Flat key=value run configuration.

One file drives every subcommand; unknown keys are rejected so typos
fail at parse time instead of silently running defaults. Every run
writes its fully resolved config next to its outputs, and that file
parses back into an identical RunConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_TASKS = ("ZSL", "GZSL", "both")
_SWEEP_AXES = ("lambda", "k")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dataset_dir: str = ""
    checkpoint: str = ""

    # world and dataset
    n_labels: int = 20
    seen_fraction: float = 0.8
    n_categories: int = 4
    max_labels: int = 3
    sigma: float = 0.1
    channels: int = 1
    image_size: int = 12
    patch_size: int = 4
    token_width: int = 16
    embed_dim: int = 8
    surrogate_depth: int = 1
    surrogate_heads: int = 2
    prompt_length: int = 4
    token_jitter: float = 0.25
    background: str = "zero"
    n_train: int = 600
    n_test: int = 200

    # model
    width: int = 16
    heads: int = 2
    depth: int = 2
    k: int = 3
    head_mode: str = "both"

    # training
    lambda_distill: float = 1.0
    lr_stage1: float = 1e-3
    lr_stage2: float = 3e-5
    weight_decay: float = 5e-3
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    batch_size: int = 16

    # evaluation and retrieval
    task: str = "both"
    k_list: tuple[int, ...] = (3,)
    topn: int = 3

    # sweeps
    sweep_axis: str = "lambda"
    sweep_values: tuple[float, ...] = (0.0, 0.5, 1.0)

    def __post_init__(self):
        if self.task not in _TASKS:
            raise ConfigError(f"task must be one of {_TASKS}, got {self.task!r}")
        if self.sweep_axis not in _SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {_SWEEP_AXES}")

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            channels=self.channels,
            image_size=self.image_size,
            patch_size=self.patch_size,
            n_categories=self.n_categories,
            max_labels=self.max_labels,
            sigma=self.sigma,
            token_width=self.token_width,
            embed_dim=self.embed_dim,
            surrogate_depth=self.surrogate_depth,
            surrogate_heads=self.surrogate_heads,
            prompt_length=self.prompt_length,
            token_jitter=self.token_jitter,
            background=self.background,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            width=self.width,
            heads=self.heads,
            depth=self.depth,
            k=self.k,
            head_mode=self.head_mode,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_distill=self.lambda_distill,
            lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2,
            weight_decay=self.weight_decay,
            epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2,
            batch_size=self.batch_size,
        )

    def tasks(self) -> tuple[str, ...]:
        return ("ZSL", "GZSL") if self.task == "both" else (self.task,)


def _convert(name: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw.strip("'\"")
        if kind.startswith("tuple[int"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if kind.startswith("tuple[float"):
            return tuple(float(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"key {name!r}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"key {name!r} has unsupported type {kind}")


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def parse_config_text(text: str) -> RunConfig:
    kinds = {
        f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(RunConfig)
    }
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, kinds[key], raw)
    try:
        return RunConfig(**values)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def resolved_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.txt"
    path.write_text(resolved_text(cfg))
    return path
