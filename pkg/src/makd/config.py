"""Plain-text run configuration.

A run config is a list of ``key = value`` lines; ``#`` starts a comment.
Keys are dotted, with the prefix naming the group they configure::

    teacher = runs/teacher.ckpt
    data.corpus = toy_grammar
    model.d_model = 32
    train.steps = 10000
    plan.matrix_layers = 1-2
    plan.layer_layers = 3-4
    factorize.rank = 8

Values are parsed as JSON when possible (numbers, ``true``/``false``,
quoted strings, lists) and kept as bare strings otherwise. Layer sets are
written as inclusive intervals, e.g. ``1-3,6`` or ``none``.

Reference BERT-base values, for comparison with the desk-scale defaults
used here: batch 512, 400,000 steps, peak learning rate 1e-4, AdamW with
beta1 = 0.9 and beta2 = 0.99, BERT-base shape (L=12, d=768, d_ff=3072,
12 heads, vocabulary 30522, length 512).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import DistillPlan, assign_aspects
from .factorize import FactorizationSpec
from .train import TrainConfig
from .transformer import MODEL_KINDS, ROLES, ModelConfig

GROUPS = ("run", "data", "model", "train", "plan", "factorize")


class ConfigError(ValueError):
    """Malformed or unknown configuration key or value."""


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (frozenset, set, range)):
        return format_layers(value)
    return json.dumps(value)


def parse_config_text(text: str) -> dict[str, object]:
    """Flat ``{dotted key: value}`` from config text; later keys win."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = parse_value(value)
    return out


def read_config(path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def parse_overrides(items) -> dict[str, object]:
    """``["train.steps=100", ...]`` from repeated ``--set`` flags."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def parse_layers(value) -> frozenset[int]:
    """``"1-3,6"`` -> {1, 2, 3, 6}; ``"none"`` or ``""`` -> empty."""
    if isinstance(value, int):
        return frozenset({value})
    if isinstance(value, (list, tuple, set, frozenset)):
        return frozenset(int(v) for v in value)
    text = str(value).strip().lower()
    if text in ("", "none", "-"):
        return frozenset()
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(s) for s in part.split("-", 1))
                if hi < lo:
                    raise ConfigError(f"empty layer interval {part!r}")
                out.update(range(lo, hi + 1))
            else:
                out.add(int(part))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad layer interval {part!r}") from None
    return frozenset(out)


def format_layers(layers) -> str:
    """Inverse of :func:`parse_layers`, merging consecutive runs."""
    xs = sorted(layers)
    if not xs:
        return "none"
    parts, start, prev = [], xs[0], xs[0]
    for x in xs[1:] + [None]:
        if x is not None and x == prev + 1:
            prev = x
            continue
        parts.append(str(start) if start == prev else f"{start}-{prev}")
        if x is not None:
            start = prev = x
    return ",".join(parts)


def parse_rank_map(value) -> dict[str, int]:
    """``"query:8,key:8"`` or a JSON object."""
    if isinstance(value, dict):
        return {str(k): int(v) for k, v in value.items()}
    out = {}
    for part in str(value).split(","):
        role, _, k = part.partition(":")
        role = role.strip()
        if role not in ROLES or not k.strip():
            raise ConfigError(f"bad rank_map entry {part!r}")
        out[role] = int(k)
    return out


@dataclass
class DataConfig:
    corpus: str = "toy_grammar"  # bundled corpus name or a path
    vocab_size: int = 4096
    max_len: int = 16
    eval_size: int = 500  # held-out documents, taken from the end of the corpus
    eval_draws: int = 3  # independent mask draws over the held-out documents
    eval_seed: int = 12345
    eval_batch_size: int = 64
    dedupe: bool = True


MODEL_DEFAULTS = dict(model_kind="encoder-mlm", n_layers=4, d_model=32, n_heads=4, d_ff=128, max_seq_len=16)


@dataclass
class RunConfig:
    """Everything a CLI run needs, after merging file keys and flag overrides."""

    teacher: str | None = None
    out: str | None = None
    student_init: str = "svd"  # "svd" or "random"
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    plan: dict = field(default_factory=dict)
    factorize: dict = field(default_factory=dict)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def distill_plan(self, n_layers: int) -> DistillPlan:
        return assign_aspects(n_layers, **self.plan)

    def factorization(self) -> FactorizationSpec:
        kw = dict(self.factorize)
        if not any(k in kw for k in ("rank", "rank_map", "rate")):
            raise ConfigError("factorize needs one of factorize.rank, factorize.rank_map, factorize.rate")
        return FactorizationSpec(**kw)

    def flat(self) -> dict[str, object]:
        """Effective config as dotted keys, for manifests and round trips."""
        out: dict[str, object] = {}
        for k in ("teacher", "out", "student_init"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        out.update({f"data.{k}": v for k, v in asdict(self.data).items()})
        out.update({f"model.{k}": v for k, v in self.model.items()})
        out.update({f"train.{k}": v for k, v in asdict(self.train).items()})
        for k, v in self.plan.items():
            out[f"plan.{k}"] = format_layers(v) if k.endswith("_layers") else v
        for k, v in self.factorize.items():
            out[f"factorize.{k}"] = list(v) if isinstance(v, tuple) else v
        return out


_PLAN_FIELDS = {f.name for f in fields(DistillPlan)} - {"n_layers"}
_FACT_FIELDS = {f.name for f in fields(FactorizationSpec)}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"vocab_size", "rank_map"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_DATA_FIELDS = {f.name for f in fields(DataConfig)}


def build_run_config(values: dict[str, object], overrides: dict[str, object] | None = None) -> RunConfig:
    """Validate dotted keys and assemble a :class:`RunConfig`.

    ``overrides`` (from command-line flags) replace file keys one by one.
    Unknown keys are errors so typos do not silently fall back to defaults.
    """
    merged = dict(values)
    merged.update(overrides or {})
    rc = RunConfig()
    data, train = {}, {}
    for key, value in merged.items():
        group, _, name = key.partition(".")
        if not name:
            if group in ("teacher", "out", "student_init"):
                setattr(rc, group, None if value is None else str(value))
                continue
            raise ConfigError(f"unknown key {key!r}")
        if group == "data" and name in _DATA_FIELDS:
            data[name] = value
        elif group == "model" and name in _MODEL_FIELDS:
            rc.model[name] = value
        elif group == "train" and name in _TRAIN_FIELDS:
            train[name] = value
        elif group == "plan" and name in _PLAN_FIELDS:
            rc.plan[name] = parse_layers(value) if name.endswith("_layers") else value
        elif group == "factorize" and name in _FACT_FIELDS:
            if name == "rank_map":
                value = parse_rank_map(value)
            elif name == "roles":
                value = tuple(value) if isinstance(value, list) else tuple(s.strip() for s in str(value).split(","))
            rc.factorize[name] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    if rc.student_init not in ("svd", "random"):
        raise ConfigError(f"student_init must be 'svd' or 'random', got {rc.student_init!r}")
    if rc.model.get("model_kind") not in MODEL_KINDS:
        raise ConfigError(f"model.model_kind must be one of {MODEL_KINDS}")
    try:
        rc.data = DataConfig(**{**asdict(rc.data), **data})
        rc.train = TrainConfig(**{**asdict(rc.train), **train})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return rc


def write_config(path, values: dict[str, object]) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
