"""Run configuration: nested dataclasses, JSON files, dotted-key overrides.

The defaults are the desk-scale settings (small model, short runs, CPU
friendly). `configs/full_50Mx2.json` in the repository root scales the same
schema up to the full training recipe.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .hierarchy import HierarchyConfig


class ConfigError(ValueError):
    """Invalid structure, unknown key, or out-of-range value."""


@dataclass
class EnvSection:
    name: str = "dodgeworld"          # "dodgeworld" | "constant"
    image_size: int = 32
    grid: int = 16
    cell_px: int = 2
    spawn_prob: float = 0.30
    telegraph_steps: int = 3
    max_steps: int = 200
    survival_reward: float = 0.1
    hit_penalty: float = -1.0
    constant_value: int = 128         # fill value for the "constant" env
    parallel: int = 1                 # concurrent environment instances

    def validate(self) -> None:
        if self.name not in ("dodgeworld", "constant"):
            raise ConfigError(f"unknown env name: {self.name!r}")
        if self.parallel < 1:
            raise ConfigError("env.parallel must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("env.max_steps must be >= 1")


@dataclass
class ModelSection:
    layers: int = 2
    h_size: int = 256
    groups: int = 16
    classes: int = 16
    cnn_base: int = 16
    hidden: int = 256
    foresight_frames: int = 4
    foresight_stride: int = 1
    use_hints: bool = True
    hint_from_next_step: bool = False
    unimix_ratio: float = 0.01
    normalizer_decay: float = 0.99
    only_residual_hints: bool = False
    no_residual: bool = False
    stacked_state_heads: bool = False
    dreamer_plus_rollout: bool = False


@dataclass
class TrainSection:
    lr: float = 4e-5
    batch_size: int = 8
    batch_length: int = 32
    buffer_capacity: int = 200_000
    prefill: int = 1024
    train_ratio: float = 32.0
    imagination_horizon: int = 15
    entry_stride: int = 1             # subsample imagination entry points
    bins: int = 41
    bin_low: float = -20.0
    bin_high: float = 20.0
    discount: float = 1.0 - 1.0 / 333.0
    return_lambda: float = 0.95
    entropy_coeff: float = 3e-4
    slow_critic_rate: float = 0.02
    slow_reg_scale: float = 1.0
    rec_scale: float = 1.0
    dyn_scale: float = 1.0
    rep_scale: float = 0.1
    replay_value_scale: float = 0.3
    free_bits: float = 1.0
    grad_clip: float = 1000.0
    return_scale_decay: float = 0.99

    def validate(self) -> None:
        if self.train_ratio <= 0:
            raise ConfigError("train.train_ratio must be > 0")
        if self.batch_size < 1 or self.batch_length < 2:
            raise ConfigError("train.batch_size >= 1 and batch_length >= 2")
        if self.prefill < self.batch_length:
            raise ConfigError("train.prefill must cover one batch_length")
        if self.imagination_horizon < 1:
            raise ConfigError("train.imagination_horizon must be >= 1")
        if self.entry_stride < 1:
            raise ConfigError("train.entry_stride must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("train.discount must be in (0, 1]")


@dataclass
class RunSection:
    steps: int = 50_000               # environment-step budget
    seed: int = 0
    synchronous: bool = True          # deterministic alternation; no threads
    logdir: str = "runs/dev"
    device: str = "cpu"
    log_every: int = 20               # train steps between metric records
    checkpoint_every: int = 10_000    # env steps between checkpoints
    eval_every: int = 10_000          # env steps between eval rounds (0 = off)
    eval_episodes: int = 5
    snapshot_every: int = 200         # env steps between collector refreshes

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("run.steps must be >= 1")
        if self.log_every < 1 or self.snapshot_every < 1:
            raise ConfigError("run.log_every and run.snapshot_every >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("run.checkpoint_every must be >= 1")


@dataclass
class Config:
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> None:
        self.env.validate()
        self.train.validate()
        self.run.validate()
        # constructing the model config runs its own validation (including
        # the ablation-flag compatibility rules)
        self.hierarchy_config(action_dim=3)

    def hierarchy_config(self, action_dim: int) -> HierarchyConfig:
        m = self.model
        return HierarchyConfig(
            action_dim=action_dim, image_size=self.env.image_size,
            layers=m.layers, h_size=m.h_size, groups=m.groups,
            classes=m.classes, cnn_base=m.cnn_base, hidden=m.hidden,
            foresight_frames=m.foresight_frames,
            foresight_stride=m.foresight_stride, use_hints=m.use_hints,
            hint_from_next_step=m.hint_from_next_step,
            unimix_ratio=m.unimix_ratio,
            normalizer_decay=m.normalizer_decay,
            only_residual_hints=m.only_residual_hints,
            no_residual=m.no_residual,
            stacked_state_heads=m.stacked_state_heads,
            dreamer_plus_rollout=m.dreamer_plus_rollout)


def _build_section(cls, data: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        ftype = known[key].type
        if ftype == "int" and isinstance(value, float) and value.is_integer():
            value = int(value)
        expected = {"int": int, "float": (int, float), "str": str,
                    "bool": bool}.get(ftype)
        bad_bool = ftype in ("int", "float") and isinstance(value, bool)
        if expected is not None and (bad_bool
                                     or not isinstance(value, expected)):
            raise ConfigError(
                f"config key {prefix}{key} expects {ftype}, got "
                f"{type(value).__name__}")
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    sections = {}
    classes = {"env": EnvSection, "model": ModelSection,
               "train": TrainSection, "run": RunSection}
    for key, value in data.items():
        if key not in classes:
            raise ConfigError(f"unknown config key: {key}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key} must be an object")
        sections[key] = _build_section(classes[key], value, f"{key}.")
    cfg = Config(**sections)
    cfg.validate()
    return cfg


def to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def from_file(path: str | Path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return from_dict(data)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse one `dotted.key=value` override; values are JSON literals."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value: {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are allowed unquoted
    return key, value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `dotted.key=value` strings to a nested config dict (copies)."""
    result = json.loads(json.dumps(data))
    for item in overrides:
        key, value = parse_override(item)
        parts = key.split(".")
        node = result
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path crosses a leaf: {key}")
        node[parts[-1]] = value
    return result


def config_hash(cfg: Config) -> str:
    canonical = json.dumps(to_dict(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def build_env(cfg: Config, seed: int | None = None):
    """Instantiate the configured environment (resized if necessary)."""
    from .envs import ConstantImageEnv, DodgeWorld, ResizeAdapter
    e = cfg.env
    if e.name == "dodgeworld":
        env = DodgeWorld(grid=e.grid, cell_px=e.cell_px,
                         spawn_prob=e.spawn_prob,
                         telegraph_steps=e.telegraph_steps,
                         max_steps=e.max_steps,
                         survival_reward=e.survival_reward,
                         hit_penalty=e.hit_penalty, seed=seed)
    else:
        env = ConstantImageEnv(value=e.constant_value, size=e.image_size,
                               episode_len=e.max_steps)
    if e.grid * e.cell_px != e.image_size and e.name == "dodgeworld":
        env = ResizeAdapter(env, e.image_size)
    return env
