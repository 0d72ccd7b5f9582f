"""Low-rank student construction by truncated SVD of teacher weights.

A dense ``W`` (``n x m``) is replaced by ``A = U_k diag(s_k)`` and
``B = V_k^T`` so that ``A @ B`` is the best rank-``k`` approximation of
``W`` in Frobenius norm, at a cost of ``k (n + m)`` parameters instead of
``n m``. Biases stay on the output side of ``B``; layer norms, position
embeddings and (by default) token embeddings are copied unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, svd
from .transformer import (
    ROLES,
    Block,
    LinearLayer,
    LowRankEmbedding,
    ModelConfig,
    TransformerModel,
)


class RankError(ValueError):
    """Requested rank is outside ``[1, min(n, m)]`` for some matrix."""


@dataclass
class FactorizationSpec:
    """Which ranks to use.

    Exactly one of ``rank`` (uniform), ``rank_map`` (per role) or ``rate``
    should be set. ``rate`` is the target ratio of factorized to dense
    parameters over the covered weight matrices; it resolves to the
    largest uniform ``k`` whose ratio does not exceed it.
    """

    rank: int | None = None
    rank_map: dict[str, int] | None = None
    rate: float | None = None
    roles: tuple[str, ...] = ROLES
    factorize_embeddings: bool = False
    embedding_rank: int | None = None
    svd_method: str = "lapack"

    def resolve(self, config: ModelConfig) -> dict[str, int]:
        given = [x is not None for x in (self.rank, self.rank_map, self.rate)]
        if sum(given) != 1:
            raise ValueError("FactorizationSpec needs exactly one of rank, rank_map, rate")
        for role in self.roles:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.rank_map is not None:
            ranks = {r: int(self.rank_map[r]) for r in self.roles if r in self.rank_map}
        elif self.rank is not None:
            ranks = {r: int(self.rank) for r in self.roles}
        else:
            ranks = {r: resolve_rate(config, self.rate, self.roles) for r in self.roles}
        for role, k in ranks.items():
            n, m = config.role_shape(role)
            if not 1 <= k <= min(n, m):
                raise RankError(f"rank {k} for role {role!r} outside [1, {min(n, m)}] (matrix {n}x{m})")
        return ranks

    def resolve_embedding_rank(self, config: ModelConfig) -> int | None:
        if not self.factorize_embeddings:
            return None
        k = self.embedding_rank if self.embedding_rank is not None else self.rank
        if k is None:
            raise ValueError("factorize_embeddings needs rank or embedding_rank")
        if not 1 <= k <= min(config.vocab_size, config.d_model):
            raise RankError(f"embedding rank {k} outside [1, {min(config.vocab_size, config.d_model)}]")
        return k


def resolve_rate(config: ModelConfig, rate: float, roles=ROLES) -> int:
    """Largest uniform rank whose factorized/dense weight ratio is ``<= rate``."""
    if not rate > 0:
        raise ValueError(f"compression rate must be positive, got {rate}")
    shapes = [config.role_shape(r) for r in roles]
    dense = sum(n * m for n, m in shapes)
    kmax = min(min(s) for s in shapes)
    best = None
    for k in range(1, kmax + 1):
        if k * sum(n + m for n, m in shapes) <= rate * dense:
            best = k
    if best is None:
        raise RankError(f"no rank >= 1 reaches compression rate {rate}")
    return best


def svd_truncate(w, k: int, method: str = "lapack") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, B)`` with ``A = U[:, :k] diag(S[:k])`` and ``B = V[:, :k]^T``."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    n, m = w.shape
    if not 1 <= k <= min(n, m):
        raise RankError(f"rank {k} outside [1, {min(n, m)}] for a {n}x{m} matrix")
    u, s, v = svd(w, method=method)
    return u[:, :k] * s[:k], np.ascontiguousarray(v[:, :k].T)


def truncation_error(s: np.ndarray, k: int) -> float:
    """``sqrt(sum_{i>k} s_i^2)``: the Frobenius error of the best rank-k fit."""
    tail = np.asarray(s[k:], dtype=np.float64)
    return float(math.sqrt(np.sum(tail * tail)))


def build_student(teacher: TransformerModel, spec: FactorizationSpec) -> TransformerModel:
    """Student with the teacher's depth and widths and SVD-initialised projections."""
    if not teacher.is_dense():
        raise ValueError("build_student expects a dense teacher")
    cfg = teacher.config
    ranks = spec.resolve(cfg)
    emb_rank = spec.resolve_embedding_rank(cfg)
    copy = lambda t: Tensor(t.data.copy())

    blocks = []
    for blk in teacher.blocks:
        layers = {}
        for role, lin in {**blk.attn, **blk.ffn}.items():
            if role in ranks:
                a, b = svd_truncate(lin.weight.data, ranks[role], spec.svd_method)
                layers[role] = LinearLayer(a=Tensor(a), b=Tensor(b), bias=copy(lin.bias))
            else:
                layers[role] = LinearLayer(weight=copy(lin.weight), bias=copy(lin.bias))
        blocks.append(
            Block(
                attn={r: layers[r] for r in blk.attn},
                ffn={r: layers[r] for r in blk.ffn},
                ln_attn=tuple(copy(t) for t in blk.ln_attn),
                ln_ffn=tuple(copy(t) for t in blk.ln_ffn),
            )
        )
    if emb_rank is not None:
        a, b = svd_truncate(teacher.token_embed.data, emb_rank, spec.svd_method)
        token_embed = LowRankEmbedding(Tensor(a), Tensor(b))
    else:
        token_embed = copy(teacher.token_embed)
    student_cfg = replace(cfg, rank_map=dict(ranks) or None)
    return TransformerModel(
        student_cfg,
        token_embed=token_embed,
        pos_embed=copy(teacher.pos_embed),
        embed_ln=tuple(copy(t) for t in teacher.embed_ln),
        blocks=blocks,
        head_bias=copy(teacher.head_bias),
        head_weight=None if teacher.head_weight is None else copy(teacher.head_weight),
    )


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------


@dataclass
class MatrixReport:
    layer: int  # 1-based
    role: str
    n: int
    m: int
    rank: int | None
    dense_params: int
    params: int
    frobenius_error: float | None = None
    retained_energy: float | None = None


@dataclass
class CompressionReport:
    matrices: list[MatrixReport] = field(default_factory=list)
    teacher_params: int = 0
    student_params: int = 0
    teacher_linear_macs: int = 0
    student_linear_macs: int = 0
    embedding_factorized: bool = False

    @property
    def param_ratio(self) -> float:
        return self.teacher_params / self.student_params

    @property
    def flops_ratio(self) -> float:
        """Teacher/student multiply-accumulates per token over layer projections."""
        return self.teacher_linear_macs / self.student_linear_macs

    @property
    def inflated(self) -> list[str]:
        """Matrices whose factorization has at least as many parameters as the dense form."""
        return [
            f"layers.{r.layer}.{r.role}"
            for r in self.matrices
            if r.rank is not None and r.params >= r.dense_params
        ]

    def summary(self) -> dict:
        return {
            "teacher_params": self.teacher_params,
            "student_params": self.student_params,
            "param_ratio": self.param_ratio,
            "teacher_linear_macs_per_token": self.teacher_linear_macs,
            "student_linear_macs_per_token": self.student_linear_macs,
            "flops_ratio": self.flops_ratio,
            "embedding_factorized": self.embedding_factorized,
            "n_inflated_matrices": len(self.inflated),
            "compresses": self.flops_ratio > 1.0 and not self.inflated,
        }


def linear_macs(model: TransformerModel) -> int:
    """Per-token multiply-accumulates of all layer projections (weights only)."""
    total = 0
    for _, _, lin in model.linear_layers():
        n, m = lin.shape
        total += lin.rank * (n + m) if lin.factorized else n * m
    return total


def compression_report(teacher: TransformerModel, student: TransformerModel, spectra: bool = True) -> CompressionReport:
    """Parameter and FLOP accounting, plus per-matrix truncation diagnostics.

    With ``spectra=True`` the teacher singular values are computed to report
    retained energy, and ``||W - A B||_F`` is measured on the actual factors.
    """
    tc, sc = teacher.config, student.config
    for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len"):
        if getattr(tc, name) != getattr(sc, name):
            raise ValueError(f"architecture mismatch on {name}: {getattr(tc, name)} vs {getattr(sc, name)}")
    report = CompressionReport(
        teacher_params=teacher.n_params(),
        student_params=student.n_params(),
        teacher_linear_macs=linear_macs(teacher),
        student_linear_macs=linear_macs(student),
        embedding_factorized=isinstance(student.token_embed, LowRankEmbedding),
    )
    for (i, role, t_lin), (_, _, s_lin) in zip(teacher.linear_layers(), student.linear_layers()):
        n, m = t_lin.shape
        row = MatrixReport(
            layer=i + 1,
            role=role,
            n=n,
            m=m,
            rank=s_lin.rank,
            dense_params=n * m,
            params=s_lin.rank * (n + m) if s_lin.factorized else n * m,
        )
        if spectra and s_lin.factorized:
            w = t_lin.dense_weight()
            s = np.linalg.svd(w, compute_uv=False)
            row.retained_energy = float(np.sum(s[: s_lin.rank] ** 2) / np.sum(s**2))
            row.frobenius_error = float(np.linalg.norm(w - s_lin.dense_weight()))
        report.matrices.append(row)
    return report
