"""Experiment configuration (YAML) with field-named validation errors.

Schema (every section optional, defaults shown in the dataclasses below)::

    name: str
    task:     {kind: tiny_lm | quadratic_multiobj, vocab, seq_len, train_sequences,
               valid_sequences, branching, objectives, dim, spectrum: [lo, hi], x0_scale}
    model:    {layers, dim, experts, k, expert_kind: mlp | linear, hidden_mult,
               expert_out_scale, share_dynamics}
    dynamics: a DynamicsConfig mapping shared by all layers, or a list of them (one per layer)
    adam_first_layer: bool   # layer 0 runs adam, later layers the shared dynamics
    trainer:  {optimizer: adam | sgd, lr, weight_decay, epochs, batch_size, seed, max_steps}
    eval:     {swap_rate, corruption_seed}
    diagnostics: {every: N batches between norm-trace checkpoints, probe_sequences}
    output_dir: str   # relative paths resolve against $MOMOE_OUTPUT_ROOT (default: cwd)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .autodiff import ContractError
from .dynamics import DynamicsConfig
from .model import ModelConfig

__all__ = ["ConfigError", "ExperimentConfig", "TaskConfig", "TrainerConfig", "EvalConfig",
           "DiagnosticsConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending field."""


@dataclass
class TaskConfig:
    kind: str = "tiny_lm"
    vocab: int = 128
    seq_len: int = 32
    train_sequences: int = 256
    valid_sequences: int = 64
    branching: int = 4
    objectives: int = 4
    dim: int = 8
    spectrum: tuple[float, float] = (1.0, 10.0)
    x0_scale: float = 3.0


@dataclass
class TrainerConfig:
    optimizer: str = "adam"
    lr: float = 3e-3
    weight_decay: float = 0.0
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    max_steps: int | None = None


@dataclass
class EvalConfig:
    swap_rate: float = 0.1
    corruption_seed: int | None = None


@dataclass
class DiagnosticsConfig:
    every: int = 0  # 0: one norm-trace checkpoint per epoch
    probe_sequences: int = 16


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dynamics: list[DynamicsConfig] = field(default_factory=list)
    adam_first_layer: bool = False
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"]["spectrum"] = list(self.task.spectrum)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def layer_dynamics(self) -> list[DynamicsConfig]:
        return list(self.dynamics)


def _section(cls, raw: Any, prefix: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    names = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}: unknown field")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{prefix}.{key}: expected a boolean")
        if isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{prefix}.{key}: expected an integer")
        if isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"{prefix}.{key}: expected a number")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{prefix}.{key}: expected a string")
        if isinstance(default, float):
            value = float(value)
        if isinstance(default, tuple):
            if not (isinstance(value, (list, tuple)) and len(value) == len(default)):
                raise ConfigError(f"{prefix}.{key}: expected a list of {len(default)} numbers")
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def _positive(value, name: str) -> None:
    if not value > 0:
        raise ConfigError(f"{name}: must be positive")


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    task = _section(TaskConfig, raw.get("task"), "task")
    model = _section(ModelConfig, raw.get("model"), "model")
    trainer = _section(TrainerConfig, raw.get("trainer"), "trainer")
    ev = _section(EvalConfig, raw.get("eval"), "eval")
    diag = _section(DiagnosticsConfig, raw.get("diagnostics"), "diagnostics")

    if task.kind not in ("tiny_lm", "quadratic_multiobj"):
        raise ConfigError(f"task.kind: unknown task {task.kind!r}")
    if task.kind == "tiny_lm":
        if not 3 <= task.vocab <= 256:
            raise ConfigError("task.vocab: must be in [3, 256]")
        if not 2 <= task.seq_len <= 64:
            raise ConfigError("task.seq_len: must be in [2, 64]")
        if model.vocab != task.vocab:
            model.vocab = task.vocab
    for name in ("train_sequences", "valid_sequences", "branching", "objectives", "dim"):
        _positive(getattr(task, name), f"task.{name}")
    for name in ("layers", "dim", "experts", "hidden_mult"):
        _positive(getattr(model, name), f"model.{name}")
    if not 1 <= model.k <= model.experts:
        raise ConfigError("model.k: must be in [1, model.experts]")
    if model.expert_kind not in ("mlp", "linear"):
        raise ConfigError(f"model.expert_kind: unknown kind {model.expert_kind!r}")
    if trainer.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"trainer.optimizer: unknown optimizer {trainer.optimizer!r}")
    _positive(trainer.lr, "trainer.lr")
    _positive(trainer.epochs, "trainer.epochs")
    _positive(trainer.batch_size, "trainer.batch_size")
    if not 0.0 <= ev.swap_rate <= 1.0:
        raise ConfigError("eval.swap_rate: must be in [0, 1]")

    dyn_raw = raw.get("dynamics", {"mode": "heavy_ball"})
    try:
        if isinstance(dyn_raw, list):
            if len(dyn_raw) != model.layers:
                raise ConfigError(f"dynamics: {len(dyn_raw)} entries for {model.layers} layers")
            dynamics = [DynamicsConfig.from_dict(d) for d in dyn_raw]
        elif isinstance(dyn_raw, dict):
            shared = DynamicsConfig.from_dict(dyn_raw)
            dynamics = [shared] * model.layers
        else:
            raise ConfigError("dynamics: expected a mapping or a list of mappings")
    except (ContractError, TypeError) as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith("dynamics") else f"dynamics: {msg}") from exc

    adam_first = raw.get("adam_first_layer", False)
    if not isinstance(adam_first, bool):
        raise ConfigError("adam_first_layer: expected a boolean")
    if adam_first:
        dynamics = [DynamicsConfig.for_mode("adam")] + list(dynamics[1:])

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        task=task,
        model=model,
        dynamics=dynamics,
        adam_first_layer=adam_first,
        trainer=trainer,
        eval=ev,
        diagnostics=diag,
        output_dir=str(raw.get("output_dir", f"runs/{raw.get('name', 'experiment')}")),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: not valid YAML ({exc})") from exc
    return parse_config(raw or {})
