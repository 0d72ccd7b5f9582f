"""Multi-aspect distillation losses and the layer-to-aspect schedule.

Three aspects compare a student trace with a teacher trace:

* matrix aspect, per layer: MSE of per-head queries/keys/values plus MSE of
  the feed-forward up activation and down output;
* layer aspect, per layer: KL between attention distributions plus MSE of
  the layer output;
* model aspect: soft cross-entropy between temperature-softened logits.

The default schedule uses the matrix aspect on the lower half of the stack,
the layer aspect on the upper half, and the model aspect on the output.
Layers are numbered from 1 everywhere in this module.

Padded query positions never contribute to any loss. All reductions are
means, so losses do not grow with sequence length or batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import ShapeError, Tensor, custom_op, log_softmax_np
from .transformer import ActivationTrace


# --------------------------------------------------------------------------
# fused loss kernels
# --------------------------------------------------------------------------


def masked_mse(a: Tensor, b: Tensor, weight: np.ndarray) -> Tensor:
    """Mean of ``(a - b)**2`` over entries whose broadcast ``weight`` is 1."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    w = np.broadcast_to(weight, a.shape)
    count = float(w.sum())
    if count == 0:
        raise ValueError("mse: no unmasked entries")
    diff = (a.data - b.data) * weight
    loss = np.asarray(np.sum(diff * diff) / count)

    def bw(g):
        ga = (2.0 * g / count) * diff
        return ga, -ga

    return custom_op(loss, (a, b), bw)


def rows_kl(p: Tensor, q: Tensor, row_weight: np.ndarray, eps: float) -> Tensor:
    """Mean over weighted rows of ``sum_j p_j (log p_j - log q_j)``.

    Both distributions are clamped below at ``eps`` before the logs, which
    makes masked (exactly zero) entries contribute nothing.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl: shapes differ {p.shape} vs {q.shape}")
    rw = np.broadcast_to(row_weight, p.shape[:-1])
    count = float(rw.sum())
    if count == 0:
        raise ValueError("kl: no unmasked rows")
    pc = np.maximum(p.data, eps)
    qc = np.maximum(q.data, eps)
    logratio = np.log(pc) - np.log(qc)
    w = row_weight[..., None]
    loss = np.asarray(np.sum(pc * logratio * w) / count)

    def bw(g):
        scale = g * w / count
        gp = scale * (logratio + 1.0) * (p.data > eps) if p.requires_grad else None
        gq = -scale * (pc / qc) * (q.data > eps) if q.requires_grad else None
        return gp, gq

    return custom_op(loss, (p, q), bw)


def soft_cross_entropy(student_logits: Tensor, teacher_logits: Tensor, temperature: float, row_mask: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum_c softmax(z_T/t)_c * log softmax(z_S/t)_c``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shapes differ {student_logits.shape} vs {teacher_logits.shape}")
    rm = np.broadcast_to(np.asarray(row_mask, dtype=bool), student_logits.shape[:-1])
    count = float(rm.sum())
    if count == 0:
        raise ValueError("model loss: no positions selected")
    w = rm[..., None].astype(np.float64)
    log_ps = log_softmax_np(student_logits.data / temperature)
    log_pt = log_softmax_np(teacher_logits.data / temperature)
    pt = np.exp(log_pt)
    row_ce = -np.sum(pt * log_ps, axis=-1)
    loss = np.asarray(np.sum(row_ce * rm) / count)

    def bw(g):
        gs = gt = None
        if student_logits.requires_grad:
            gs = g * w * (np.exp(log_ps) - pt) / (temperature * count)
        if teacher_logits.requires_grad:
            gt = g * w * pt * (-log_ps - row_ce[..., None]) / (temperature * count)
        return gs, gt

    return custom_op(loss, (student_logits, teacher_logits), bw)


# --------------------------------------------------------------------------
# per-aspect losses
# --------------------------------------------------------------------------


def _rows(student: ActivationTrace, teacher: ActivationTrace) -> np.ndarray:
    if student.attn_mask.shape != teacher.attn_mask.shape or not np.array_equal(student.attn_mask, teacher.attn_mask):
        raise ValueError("student and teacher traces were computed with different masks")
    return student.attn_mask.astype(np.float64)


def attn_kl_loss(student: ActivationTrace, teacher: ActivationTrace, l: int, eps: float = 1e-10, direction: str = "student-teacher") -> Tensor:
    """Head-averaged KL between attention maps of layer ``l``.

    ``direction="student-teacher"`` computes KL(A_S || A_T);
    ``"teacher-student"`` swaps the arguments.
    """
    a_s, a_t = student.layer(l).attn, teacher.layer(l).attn
    if a_s.shape[1] != a_t.shape[1]:
        raise ShapeError(f"head count mismatch: student {a_s.shape[1]} vs teacher {a_t.shape[1]}")
    rows = _rows(student, teacher)[:, None, :]
    if direction == "student-teacher":
        return rows_kl(a_s, a_t, rows, eps)
    if direction == "teacher-student":
        return rows_kl(a_t, a_s, rows, eps)
    raise ValueError(f"unknown KL direction {direction!r}")


def hidden_mse_loss(student: ActivationTrace, teacher: ActivationTrace, l: int) -> Tensor:
    rows = _rows(student, teacher)[:, :, None]
    return masked_mse(student.layer(l).hidden, teacher.layer(l).hidden, rows)


def layer_loss(student, teacher, l: int, eps: float = 1e-10, direction: str = "student-teacher") -> Tensor:
    return attn_kl_loss(student, teacher, l, eps, direction) + hidden_mse_loss(student, teacher, l)


def mha_matrix_loss(student: ActivationTrace, teacher: ActivationTrace, l: int) -> Tensor:
    """Head-averaged MSE of queries, keys and values (``[B, A_h, |x|, d_k]`` each).

    Heads are all the same size, so the head average equals one mean over
    every unmasked entry.
    """
    s, t = student.layer(l), teacher.layer(l)
    rows = _rows(student, teacher)[:, None, :, None]
    return masked_mse(s.query, t.query, rows) + masked_mse(s.key, t.key, rows) + masked_mse(s.value, t.value, rows)


def ffn_matrix_loss(student: ActivationTrace, teacher: ActivationTrace, l: int) -> Tensor:
    s, t = student.layer(l), teacher.layer(l)
    rows = _rows(student, teacher)[:, :, None]
    return masked_mse(s.ffn_up, t.ffn_up, rows) + masked_mse(s.ffn_down, t.ffn_down, rows)


def matrix_loss(student, teacher, l: int) -> Tensor:
    return mha_matrix_loss(student, teacher, l) + ffn_matrix_loss(student, teacher, l)


def model_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0, row_mask=None, scale_by_t2: bool = False) -> Tensor:
    """Soft cross-entropy with the softened teacher distribution as target."""
    if row_mask is None:
        row_mask = np.ones(student_logits.shape[:-1], dtype=bool)
    loss = soft_cross_entropy(student_logits, teacher_logits, temperature, row_mask)
    return loss * (temperature**2) if scale_by_t2 else loss


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillPlan:
    n_layers: int
    matrix_layers: frozenset = frozenset()
    layer_layers: frozenset = frozenset()
    use_model_loss: bool = True
    temperature: float = 1.0
    w_matrix: float = 1.0
    w_layer: float = 1.0
    w_model: float = 1.0
    w_mha: float = 1.0
    w_ffn: float = 1.0
    w_attn: float = 1.0
    w_hidn: float = 1.0
    kl_epsilon: float = 1e-10
    kl_direction: str = "student-teacher"
    scale_model_by_t2: bool = False
    allow_overlap: bool = False

    def __post_init__(self):
        object.__setattr__(self, "matrix_layers", frozenset(int(x) for x in self.matrix_layers))
        object.__setattr__(self, "layer_layers", frozenset(int(x) for x in self.layer_layers))
        for l in self.matrix_layers | self.layer_layers:
            if not 1 <= l <= self.n_layers:
                raise ValueError(f"layer index {l} outside [1, {self.n_layers}]")
        if not self.allow_overlap and self.matrix_layers & self.layer_layers:
            both = sorted(self.matrix_layers & self.layer_layers)
            raise ValueError(f"layers {both} carry both aspects; set allow_overlap to permit this")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kl_direction not in ("student-teacher", "teacher-student"):
            raise ValueError(f"unknown KL direction {self.kl_direction!r}")
        if self.kl_epsilon <= 0:
            raise ValueError("kl_epsilon must be positive")

    def aspect_of(self, l: int) -> set[str]:
        out = set()
        if l in self.matrix_layers:
            out.add("matrix")
        if l in self.layer_layers:
            out.add("layer")
        return out


def assign_aspects(n_layers: int, **overrides) -> DistillPlan:
    """Default hierarchical plan, with any field overridable.

    Matrix aspect on ``1..floor(L/2)``, layer aspect on the rest, model
    aspect on. For odd ``L`` the extra middle layer goes to the layer aspect.
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    half = n_layers // 2
    base = dict(
        n_layers=n_layers,
        matrix_layers=range(1, half + 1),
        layer_layers=range(half + 1, n_layers + 1),
        use_model_loss=True,
    )
    base.update(overrides)
    return DistillPlan(**base)


def logit_only_plan(n_layers: int, **overrides) -> DistillPlan:
    return assign_aspects(n_layers, matrix_layers=(), layer_layers=(), use_model_loss=True, **overrides)


def layer_range_plans(n_layers: int, half_inclusive: bool = False, **common) -> dict[str, DistillPlan]:
    """The eight layer-range configurations of the layer-range ablation grid.

    ``"[L/2,L]"`` means ``L/2+1..L`` by default; ``half_inclusive=True``
    reads it as ``L/2..L`` (which then overlaps ``[1,L/2]`` at one layer).
    """
    half = n_layers // 2
    low = range(1, half + 1)
    high = range(half if half_inclusive and half >= 1 else half + 1, n_layers + 1)
    full = range(1, n_layers + 1)
    none = ()
    rows = {
        "matrix[1,L/2]": (low, none, False),
        "matrix[L/2,L]": (high, none, False),
        "matrix[1,L]": (full, none, False),
        "layer[1,L/2]": (none, low, False),
        "layer[L/2,L]": (none, high, False),
        "layer[1,L]": (none, full, False),
        "matrix[1,L]+layer[1,L]+model": (full, full, True),
        "matrix[1,L/2]+layer[L/2,L]+model": (low, high, True),
    }
    plans = {}
    for name, (m, lay, use_model) in rows.items():
        overlap = bool(set(m) & set(lay))
        plans[name] = assign_aspects(
            n_layers, matrix_layers=m, layer_layers=lay, use_model_loss=use_model, allow_overlap=overlap, **common
        )
    return plans


# --------------------------------------------------------------------------
# combined objective
# --------------------------------------------------------------------------


@dataclass
class LossReport:
    per_layer: dict[int, dict[str, float]] = field(default_factory=dict)
    matrix: float = 0.0
    layer: float = 0.0
    model: float = 0.0
    total: float = 0.0
    objective: Tensor | None = field(default=None, repr=False)

    def components(self) -> dict[str, float]:
        """Flat ``name -> value`` view, e.g. ``L_attn.3`` or ``L_model``."""
        out = {"L_matrix": self.matrix, "L_layer": self.layer, "L_model": self.model, "total": self.total}
        for l in sorted(self.per_layer):
            for key, value in self.per_layer[l].items():
                out[f"L_{key}.{l}"] = value
        return out


def total_loss(student: ActivationTrace, teacher: ActivationTrace, plan: DistillPlan, label_mask=None) -> LossReport:
    """Weighted sum of the aspects assigned by ``plan``.

    ``label_mask`` selects the positions for the model aspect (masked
    positions for MLM, next-token positions for causal LM); it defaults to
    every real token.
    """
    n = len(student.layers)
    if len(teacher.layers) != n:
        raise ValueError(f"layer count mismatch: student {n} vs teacher {len(teacher.layers)}")
    if plan.n_layers != n:
        raise ValueError(f"plan is for {plan.n_layers} layers, traces have {n}")
    report = LossReport()
    terms: list[Tensor] = []
    matrix_terms, layer_terms = [], []
    for l in sorted(plan.matrix_layers | plan.layer_layers):
        entry = {}
        if l in plan.matrix_layers:
            mha = mha_matrix_loss(student, teacher, l)
            ffn = ffn_matrix_loss(student, teacher, l)
            entry["MHA"], entry["FNN"] = mha.item(), ffn.item()
            matrix_terms.append(mha * plan.w_mha + ffn * plan.w_ffn)
        if l in plan.layer_layers:
            attn = attn_kl_loss(student, teacher, l, plan.kl_epsilon, plan.kl_direction)
            hidn = hidden_mse_loss(student, teacher, l)
            entry["attn"], entry["hidn"] = attn.item(), hidn.item()
            layer_terms.append(attn * plan.w_attn + hidn * plan.w_hidn)
        report.per_layer[l] = entry
    if matrix_terms:
        agg = _sum(matrix_terms)
        report.matrix = agg.item()
        terms.append(agg * plan.w_matrix)
    if layer_terms:
        agg = _sum(layer_terms)
        report.layer = agg.item()
        terms.append(agg * plan.w_layer)
    if plan.use_model_loss:
        if label_mask is None:
            label_mask = student.attn_mask
        z = model_loss(student.logits, teacher.logits, plan.temperature, label_mask, plan.scale_model_by_t2)
        report.model = z.item()
        terms.append(z * plan.w_model)
    objective = _sum(terms) if terms else Tensor(np.zeros(()))
    report.objective = objective
    report.total = objective.item()
    return report


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def with_overrides(plan: DistillPlan, **kw) -> DistillPlan:
    return replace(plan, **kw)
