"""Run configuration loaded from YAML, with line-numbered diagnostics."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .data import Dataset, copy_task, teacher_regression
from .models import ToyMLPConfig, ToyTransformerConfig, build_toy_mlp, build_toy_transformer
from .optim import AdamHyper
from .selection import WARMUP_PRESETS, AllocationPolicy

# trainable-parameter grid (fractions of the model) of the plateau study
PLATEAU_FRACTIONS = [0.0043, 0.0084, 0.0126, 0.0250, 0.0373, 0.0491]
DEFAULT_EPOCHS = 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and source line."""


@dataclass
class ModelSection:
    kind: str = "transformer"
    vocab: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_mlp: int = 128
    seq_len: int = 32
    d_in: int = 32
    d_hidden: int = 64
    d_out: int = 16


@dataclass
class PolicySection:
    variant: str = "attention_qkv"
    budget_fraction: float = 0.05
    mlp_fraction: float = 0.0
    attn_fraction: float = 0.0
    roles: list = None


@dataclass
class OptimizerSection:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class LoraSection:
    rank: int = 4
    scale: float = 1.0
    roles: list = None


@dataclass
class DatasetSection:
    preset: str = "copy"
    n_examples: int = 2048
    batch_size: int = 16
    noise: float = 0.3
    period: int = None
    heldout_examples: int = 256


@dataclass
class PretrainSection:
    steps: int = 0
    lr: float = 3e-3
    n_examples: int = 1024


@dataclass
class SweepSection:
    fractions: list = field(default_factory=lambda: list(PLATEAU_FRACTIONS))
    modes: list = field(default_factory=lambda: ["smt", "lora", "full_ft"])


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    mode: str = "smt"
    policy: PolicySection = field(default_factory=PolicySection)
    block_side: int = 16
    warmup_iters: int = None
    warmup_preset: str = "small"
    score_mode: str = "sum_then_abs"
    inline_warmup: bool = False
    steps: int = None
    epochs: int = DEFAULT_EPOCHS
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    lora: LoraSection = field(default_factory=LoraSection)
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    out_dir: str = None
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- derived values ---------------------------------------------------

    @property
    def n_warmup(self) -> int:
        if self.warmup_iters is not None:
            return self.warmup_iters
        return WARMUP_PRESETS[self.warmup_preset]

    def allocation_policy(self, budget_fraction: float | None = None) -> AllocationPolicy:
        p = self.policy
        budget = p.budget_fraction if budget_fraction is None else budget_fraction
        if p.variant == "mixed" and budget_fraction is not None:
            share = p.mlp_fraction / p.budget_fraction
            return AllocationPolicy("mixed", budget, share * budget, (1 - share) * budget)
        return AllocationPolicy(p.variant, budget, p.mlp_fraction, p.attn_fraction,
                                tuple(p.roles) if p.roles else None)

    def hyper(self) -> AdamHyper:
        o = self.optimizer
        return AdamHyper(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay)

    def tokens_per_step(self) -> int:
        b = min(self.dataset.batch_size, self.dataset.n_examples)
        return b * self.model.seq_len if self.model.kind == "transformer" else b

    def total_steps(self, data: Dataset) -> int:
        return self.steps if self.steps is not None else self.epochs * data.batches_per_epoch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("sweep")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # -- builders ---------------------------------------------------------

    def build_model(self):
        m = self.model
        side = self.block_side if self.mode == "smt" else None
        try:
            if m.kind == "transformer":
                cfg = ToyTransformerConfig(m.vocab, m.d_model, m.n_layers, m.n_heads, m.d_mlp, m.seq_len, self.seed)
                return build_toy_transformer(cfg, side)
            return build_toy_mlp(ToyMLPConfig(m.d_in, m.d_hidden, m.d_out, self.seed), side)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def train_data(self) -> Dataset:
        return self._dataset(self.dataset.n_examples, self.seed + 1, self.dataset.noise)

    def heldout_data(self) -> Dataset:
        return self._dataset(self.dataset.heldout_examples, self.seed + 2, self.dataset.noise)

    def pretrain_data(self) -> Dataset:
        return self._dataset(self.pretrain.n_examples, self.seed + 3, 0.0)

    def _dataset(self, n: int, seed: int, noise: float) -> Dataset:
        m, d = self.model, self.dataset
        if d.preset == "copy":
            return copy_task(m.vocab, m.seq_len, n, d.batch_size, seed, d.period, noise)
        return teacher_regression(m.d_in, m.d_hidden, m.d_out, n, d.batch_size, seed)


_CHOICES = {
    ("model", "kind"): ("transformer", "mlp"),
    ("mode",): ("full_ft", "smt", "lora"),
    ("policy", "variant"): ("attention_qkv", "mlp_only", "mixed", "q_only", "k_only", "v_only"),
    ("warmup_preset",): tuple(WARMUP_PRESETS),
    ("score_mode",): ("sum_then_abs", "abs_then_sum"),
    ("dataset", "preset"): ("copy", "teacher"),
}


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            p = path + (key.value,)
            out[p] = key.start_mark.line + 1
            _line_map(value, p, out)
    return out


def _where(path, lines) -> str:
    name = ".".join(path)
    line = lines.get(tuple(path))
    return f"{name} (line {line})" if line else name


def _coerce(value, hint, path, lines):
    if value is None:
        return None
    if hint in (int,) or hint == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{_where(path, lines)}: expected an integer, got {value!r}")
        return value
    if hint in (float,) or hint == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{_where(path, lines)}: expected a number, got {value!r}")
        return float(value)
    if hint in (bool,) or hint == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{_where(path, lines)}: expected true/false, got {value!r}")
        return value
    if hint in (str,) or hint == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{_where(path, lines)}: expected a string, got {value!r}")
        return value
    if hint in (list,) or hint == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{_where(path, lines)}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data, path, lines):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(path, lines) or 'config'}: expected a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{_where(path + (key,), lines)}: unknown field")
    kwargs: dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        p = path + (f.name,)
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], p, lines)
        else:
            value = _coerce(data[f.name], hint, p, lines)
            choices = _CHOICES.get(p)
            if choices and value not in choices:
                raise ConfigError(f"{_where(p, lines)}: {value!r} is not one of {', '.join(choices)}")
            kwargs[f.name] = value
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        ctx = getattr(exc, "context_mark", None)
        if ctx is not None and (mark is None or ctx.line != mark.line):
            where += f" ({getattr(exc, 'context', 'construct')} at line {ctx.line + 1})"
        raise ConfigError(f"{source}: YAML syntax error{where}: {getattr(exc, 'problem', exc)}") from None
    lines = _line_map(node) if node is not None else {}
    cfg = _build(RunConfig, data or {}, (), lines)
    _validate(cfg, lines)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _validate(cfg: RunConfig, lines) -> None:
    try:
        cfg.allocation_policy()
    except ValueError as exc:
        raise ConfigError(f"{_where(('policy',), lines)}: {exc}") from None
    for path, value in ((("block_side",), cfg.block_side), (("dataset", "batch_size"), cfg.dataset.batch_size),
                        (("dataset", "n_examples"), cfg.dataset.n_examples), (("epochs",), cfg.epochs),
                        (("lora", "rank"), cfg.lora.rank)):
        if value is None or value < 1:
            raise ConfigError(f"{_where(path, lines)}: must be a positive integer")
    if cfg.steps is not None and cfg.steps < 1:
        raise ConfigError(f"{_where(('steps',), lines)}: must be a positive integer")
    if cfg.warmup_iters is not None and cfg.warmup_iters < 1:
        raise ConfigError(f"{_where(('warmup_iters',), lines)}: must be a positive integer")
    if not 0.0 <= cfg.dataset.noise < 1.0:
        raise ConfigError(f"{_where(('dataset', 'noise'), lines)}: must be in [0, 1)")
    for f in cfg.sweep.fractions:
        if not isinstance(f, (int, float)) or not 0 < f <= 1 or math.isnan(f):
            raise ConfigError(f"{_where(('sweep', 'fractions'), lines)}: fractions must be numbers in (0, 1]")
    for mode in cfg.sweep.modes:
        if mode not in _CHOICES[("mode",)]:
            raise ConfigError(f"{_where(('sweep', 'modes'), lines)}: unknown mode {mode!r}")
