"""Teacher pretraining, student distillation, AdamW and checkpointed state."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import Batch, BatchStream
from .distill import DistillPlan, LossReport, logit_only_plan, total_loss
from .transformer import TransformerModel, from_state_dict, model_forward

log = logging.getLogger(__name__)

MODES = ("teacher-pretrain", "distill-makd", "distill-logit-only")

# Large-scale reference values (BERT-base pretraining budget).
REFERENCE_BATCH_SIZE = 512
REFERENCE_STEPS = 400_000
REFERENCE_PEAK_LR = 1e-4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "distill-makd"
    steps: int = 5000
    batch_size: int = 32
    lr: float = REFERENCE_PEAK_LR
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 0
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.warmup_frac <= 1:
            raise ValueError("warmup_frac must be in [0, 1]")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.steps)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(step: int, total: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` over ``warmup_steps``, then linear decay to 0 at ``total``."""
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    if total <= warmup_steps:
        return peak
    return max(0.0, peak * (total - step) / (total - warmup_steps))


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8, weight_decay: float = 0.0) -> AdamWState:
    """One bias-corrected Adam update with decoupled weight decay (in place).

    Decay is applied to matrices only; biases, gains and other vectors are
    not decayed.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        data = p.data
        if weight_decay and data.ndim >= 2:
            data -= lr * weight_decay * data
        data -= lr * update
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --------------------------------------------------------------------------
# state and checkpoints
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    model: TransformerModel
    optim: AdamWState
    step: int = 0
    best_value: float | None = None
    best_step: int | None = None
    best_path: str | None = None


def save_state(path, state: TrainState, meta: dict | None = None) -> None:
    tensors = dict(state.model.state_dict())
    for name, arr in state.optim.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in state.optim.v.items():
        tensors[f"opt.v.{name}"] = arr
    full_meta = {
        "step": state.step,
        "optim_step": state.optim.step,
        "best_value": state.best_value,
        "best_step": state.best_step,
        "best_path": state.best_path,
        **(meta or {}),
    }
    ckpt.save_tensors(path, tensors, state.model.config, full_meta)


def load_state(path) -> tuple[TrainState, dict]:
    cfg_fields, meta, tensors = ckpt.load_tensors(path)
    cfg = ckpt.config_from_fields(cfg_fields)
    model = from_state_dict(cfg, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    optim = AdamWState(
        step=int(meta.get("optim_step", 0)),
        m={k[len("opt.m."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.m.")},
        v={k[len("opt.v."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.v.")},
    )
    state = TrainState(model, optim, int(meta.get("step", 0)), meta.get("best_value"), meta.get("best_step"), meta.get("best_path"))
    return state, meta


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

StepFn = Callable[[Batch], tuple[T.Tensor, dict[str, float]]]


def train_loop(state: TrainState, step_fn: StepFn, stream: BatchStream, tcfg: TrainConfig,
               eval_fn: Callable[[], dict] | None = None, log_path=None, ckpt_path=None,
               meta: dict | None = None, best_key: str | None = None, stop_at: int | None = None) -> list[dict]:
    """Run optimisation from ``state.step`` up to ``tcfg.steps`` (or ``stop_at``).

    Every ``eval_interval`` steps a record with the interval-mean training
    components, the learning rate and ``eval_fn()`` is appended to the
    metrics log (one JSON object per line). Returns the records written by
    this call.
    """
    model = state.model
    params = dict(model.named_parameters())
    for p in params.values():
        p.requires_grad = True
    end = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)
    records: list[dict] = []
    acc: dict[str, float] = {}
    n_acc = 0
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(step, lr):
        nonlocal acc, n_acc
        rec = {"step": step, "lr": lr}
        if n_acc:
            rec["train"] = {k: v / n_acc for k, v in acc.items()}
        if eval_fn is not None:
            rec["eval"] = eval_fn()
        records.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
        acc, n_acc = {}, 0
        return rec

    try:
        if state.step == 0 and eval_fn is not None and tcfg.eval_interval:
            emit(0, 0.0)
        lr = 0.0
        while state.step < end:
            s = state.step
            lr = lr_at(s, tcfg.steps, tcfg.warmup_steps, tcfg.lr)
            batch = stream.batch(s)
            with T.GradientTape() as tape:
                objective, comps = step_fn(batch)
            value = objective.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"objective became {value} at step {s}; last checkpoint kept")
            raw = T.backward(objective, tape)
            grads = {name: raw[p] for name, p in params.items() if p in raw}
            comps = dict(comps)
            comps["grad_norm"] = clip_global_norm(grads, tcfg.grad_clip)
            adamw_step(params, grads, state.optim, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)
            state.step += 1
            for k, v in comps.items():
                acc[k] = acc.get(k, 0.0) + v
            n_acc += 1
            if tcfg.eval_interval and state.step % tcfg.eval_interval == 0:
                rec = emit(state.step, lr)
                if best_key and ckpt_path and "eval" in rec and best_key in rec["eval"]:
                    val = rec["eval"][best_key]
                    if state.best_value is None or val < state.best_value:
                        state.best_value, state.best_step = val, state.step
                        state.best_path = str(Path(ckpt_path).with_suffix(".best.ckpt"))
                        ckpt.save_model(state.best_path, model, {"step": state.step, best_key: val})
            if ckpt_path and tcfg.checkpoint_interval and state.step % tcfg.checkpoint_interval == 0:
                save_state(ckpt_path, state, meta)
        if tcfg.eval_interval and n_acc:
            emit(state.step, lr)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_path:
        save_state(ckpt_path, state, meta)
    return records


def new_state(model: TransformerModel) -> TrainState:
    return TrainState(model=model, optim=AdamWState())


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------


def pretrain_step_fn(model: TransformerModel) -> StepFn:
    def step(batch: Batch):
        trace = model_forward(model, batch.ids, batch.attn_mask)
        loss = T.cross_entropy(trace.logits, batch.labels, batch.label_mask)
        return loss, {"lm_loss": loss.item()}

    return step


def distill_step_fn(student: TransformerModel, teacher: TransformerModel, plan: DistillPlan) -> StepFn:
    def step(batch: Batch):
        with T.no_grad():
            t_trace = model_forward(teacher, batch.ids, batch.attn_mask)
        s_trace = model_forward(student, batch.ids, batch.attn_mask)
        report = total_loss(s_trace, t_trace, plan, batch.label_mask)
        return report.objective, report.components()

    return step


def pretrain_teacher(model: TransformerModel, stream: BatchStream, tcfg: TrainConfig, eval_fn=None,
                     log_path=None, ckpt_path=None, meta=None) -> tuple[TransformerModel, list[dict]]:
    if tcfg.mode != "teacher-pretrain":
        raise ValueError(f"pretrain_teacher needs mode teacher-pretrain, got {tcfg.mode}")
    state = new_state(model)
    records = train_loop(state, pretrain_step_fn(model), stream, tcfg, eval_fn, log_path, ckpt_path, meta)
    return model, records


def plan_for_mode(tcfg: TrainConfig, plan: DistillPlan) -> DistillPlan:
    if tcfg.mode == "distill-logit-only":
        return logit_only_plan(
            plan.n_layers, temperature=plan.temperature, w_model=plan.w_model, scale_model_by_t2=plan.scale_model_by_t2
        )
    if tcfg.mode == "distill-makd":
        return plan
    raise ValueError(f"mode {tcfg.mode} is not a distillation mode")


def distill_run(teacher: TransformerModel, student: TransformerModel, plan: DistillPlan, tcfg: TrainConfig,
                stream: BatchStream, eval_fn=None, log_path=None, ckpt_path=None, meta=None,
                state: TrainState | None = None, stop_at: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train ``student`` to match the frozen ``teacher`` under ``plan``.

    Teacher and student see the same batch (and the same MLM masks) every
    step. Pass a loaded ``state`` to resume; its model replaces ``student``.
    """
    plan = plan_for_mode(tcfg, plan)
    teacher.set_trainable(False)
    if state is None:
        state = new_state(student)
    step_fn = distill_step_fn(state.model, teacher, plan)
    records = train_loop(state, step_fn, stream, tcfg, eval_fn, log_path, ckpt_path, meta,
                         best_key="logit_kl", stop_at=stop_at)
    return state, records
