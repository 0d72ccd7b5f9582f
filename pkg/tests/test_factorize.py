import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from makd.checkpoint import manifest_param_count, save_model
from makd.factorize import (
    FactorizationSpec,
    RankError,
    build_student,
    compression_report,
    linear_macs,
    resolve_rate,
    svd_truncate,
    truncation_error,
)
from makd.transformer import ROLES, LowRankEmbedding, ModelConfig, init_model, model_forward

BERT_BASE = dict(n_layers=12, d_model=768, n_heads=12, d_ff=3072, vocab_size=30522, max_seq_len=512)


def _cfg(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=19, max_seq_len=8)
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# svd_truncate
# --------------------------------------------------------------------------


def test_diagonal_truncation():
    a, b = svd_truncate(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(a @ b, np.diag([3.0, 2.0, 0.0]), atol=1e-14)
    assert np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - a @ b) == pytest.approx(1.0, abs=1e-14)


def test_identity_truncation_error_is_sqrt_two():
    a, b = svd_truncate(np.eye(4), 2)
    assert np.linalg.norm(np.eye(4) - a @ b) == pytest.approx(math.sqrt(2), abs=1e-14)


def test_random_rivals_never_beat_truncation():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(8, 6))
    a, b = svd_truncate(w, 3)
    err = np.linalg.norm(w - a @ b)
    # spectrum oracle independent of the SVD routine: eigenvalues of W^T W
    lam = np.sort(np.linalg.eigh(w.T @ w)[0])[::-1]
    assert err == pytest.approx(math.sqrt(lam[3] + lam[4] + lam[5]), abs=1e-8)
    for _ in range(1000):
        rival = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 6))
        rival *= np.sum(rival * w) / np.sum(rival * rival)  # best scaling of the rival
        assert np.linalg.norm(w - rival) >= err


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_truncation_factor_shapes_and_formula(method):
    w = np.random.default_rng(1).normal(size=(7, 5))
    a, b = svd_truncate(w, 2, method=method)
    assert a.shape == (7, 2) and b.shape == (2, 5)
    s = np.linalg.svd(w, compute_uv=False)
    assert np.linalg.norm(w - a @ b) == pytest.approx(truncation_error(s, 2), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 10), m=st.integers(2, 10), seed=st.integers(0, 9999))
def test_error_is_non_increasing_in_rank(n, m, seed):
    w = np.random.default_rng(seed).normal(size=(n, m))
    errs = [np.linalg.norm(w - np.matmul(*svd_truncate(w, k))) for k in range(1, min(n, m) + 1)]
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))
    assert errs[-1] < 1e-10


@pytest.mark.parametrize("k", [0, -1, 6])
def test_rank_out_of_range(k):
    with pytest.raises(RankError):
        svd_truncate(np.ones((5, 7)), k)


# --------------------------------------------------------------------------
# specs and students
# --------------------------------------------------------------------------


def test_spec_needs_exactly_one_target():
    with pytest.raises(ValueError):
        FactorizationSpec().resolve(_cfg())
    with pytest.raises(ValueError):
        FactorizationSpec(rank=2, rate=0.5).resolve(_cfg())


def test_rank_error_names_the_role():
    with pytest.raises(RankError, match="'query'"):
        FactorizationSpec(rank_map={"query": 9}).resolve(_cfg())


def test_uniform_rank_above_smallest_dimension_fails():
    with pytest.raises(RankError):
        FactorizationSpec(rank=9).resolve(_cfg())


def test_rate_resolves_to_largest_rank_meeting_it():
    cfg = _cfg()
    for rate in (0.3, 0.5, 0.9):
        k = resolve_rate(cfg, rate)
        shapes = [cfg.role_shape(r) for r in ROLES]
        dense = sum(n * m for n, m in shapes)
        per_k = sum(n + m for n, m in shapes)
        assert k * per_k <= rate * dense
        assert (k + 1) * per_k > rate * dense or k == min(min(s) for s in shapes)


def test_rate_too_small_fails():
    with pytest.raises(RankError):
        resolve_rate(_cfg(), 0.01)


def test_student_copies_everything_but_projections():
    teacher = init_model(_cfg(), seed=0)
    student = build_student(teacher, FactorizationSpec(rank=3))
    t, s = dict(teacher.named_parameters()), dict(student.named_parameters())
    for name in t:
        if name.endswith(".weight") and name.startswith("layers."):
            assert name not in s
            base = name[: -len(".weight")]
            np.testing.assert_allclose(s[base + ".a"].data @ s[base + ".b"].data,
                                       np.matmul(*svd_truncate(t[name].data, 3)), atol=1e-12)
        else:
            np.testing.assert_array_equal(t[name].data, s[name].data)
            assert t[name] is not s[name]
    assert student.config.rank_map == {r: 3 for r in ROLES}


def test_student_rank_one_runs_and_counts():
    cfg = _cfg()
    student = build_student(init_model(cfg, seed=0), FactorizationSpec(rank=1))
    for _, role, lin in student.linear_layers():
        n, m = cfg.role_shape(role)
        assert lin.n_params() - m == n + m  # k(n+m) plus the bias
    assert model_forward(student, np.array([[1, 2, 3]])).logits.shape == (1, 3, 19)


def test_rank_one_square_768_matrix_count():
    w = np.random.default_rng(0).normal(size=(768, 768))
    a, b = svd_truncate(w, 1)
    assert a.size + b.size == 1536


def test_square_768_rank_256_counts():
    a, b = svd_truncate(np.random.default_rng(0).normal(size=(768, 768)), 256)
    assert 768 * 768 == 589_824
    assert a.size + b.size == 393_216


def test_build_student_rejects_factorized_teacher():
    teacher = init_model(_cfg(rank_map={"query": 2}), seed=0)
    with pytest.raises(ValueError):
        build_student(teacher, FactorizationSpec(rank=2))


def test_embedding_factorization_is_opt_in():
    teacher = init_model(_cfg(), seed=0)
    dense = build_student(teacher, FactorizationSpec(rank=2))
    low = build_student(teacher, FactorizationSpec(rank=2, factorize_embeddings=True, embedding_rank=4))
    assert not isinstance(dense.token_embed, LowRankEmbedding)
    assert isinstance(low.token_embed, LowRankEmbedding)
    assert teacher.n_params() - low.n_params() > teacher.n_params() - dense.n_params()
    ids = np.array([[3, 4, 5]])
    assert model_forward(low, ids).logits.shape == (1, 3, 19)


def test_full_rank_embedding_factorization_is_lossless():
    teacher = init_model(_cfg(), seed=1)
    full = {r: min(_cfg().role_shape(r)) for r in ROLES}
    student = build_student(teacher, FactorizationSpec(rank_map=full, factorize_embeddings=True, embedding_rank=8))
    ids = np.random.default_rng(2).integers(0, 19, size=(2, 6))
    np.testing.assert_allclose(model_forward(student, ids).logits.data, model_forward(teacher, ids).logits.data,
                               atol=1e-8)


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------


def test_report_counts_match_checkpoint_walk(tmp_path):
    teacher = init_model(_cfg(), seed=0)
    student = build_student(teacher, FactorizationSpec(rank_map={"query": 2, "up": 3, "down": 1}))
    rep = compression_report(teacher, student)
    save_model(tmp_path / "s.ckpt", student)
    save_model(tmp_path / "t.ckpt", teacher)
    assert rep.student_params == manifest_param_count(tmp_path / "s.ckpt")
    assert rep.teacher_params == manifest_param_count(tmp_path / "t.ckpt")
    for row in rep.matrices:
        assert row.params == (row.rank * (row.n + row.m) if row.rank else row.n * row.m)


def test_report_truncation_diagnostics():
    teacher = init_model(_cfg(), seed=0)
    student = build_student(teacher, FactorizationSpec(rank=4))
    for row in compression_report(teacher, student).matrices:
        assert 0 < row.retained_energy <= 1
        assert row.frobenius_error >= 0


def test_full_rank_student_is_flagged_as_not_compressing():
    teacher = init_model(_cfg(), seed=0)
    full = {r: min(_cfg().role_shape(r)) for r in ROLES}
    rep = compression_report(teacher, build_student(teacher, FactorizationSpec(rank_map=full)))
    assert rep.flops_ratio <= 1
    assert len(rep.inflated) == 12
    assert rep.summary()["compresses"] is False


def test_report_rejects_architecture_mismatch():
    a = init_model(_cfg(), seed=0)
    b = init_model(_cfg(n_layers=3), seed=0)
    with pytest.raises(ValueError):
        compression_report(a, b)


def test_bert_base_rank_256_flop_ratio_closed_form():
    per_layer_dense = 4 * 768**2 + 2 * 768 * 3072
    per_layer_low = 4 * 256 * 1536 + 2 * 256 * 3840
    assert per_layer_dense / per_layer_low == pytest.approx(2.0, abs=0.01)
    cfg = ModelConfig(**BERT_BASE, rank_map={r: 256 for r in ROLES})
    # MAC counting needs only shapes; build tiny stand-ins with the same shapes lazily
    dense_macs = sum(n * m for n, m in (cfg.role_shape(r) for r in ROLES)) * 12
    low_macs = sum(256 * (n + m) for n, m in (cfg.role_shape(r) for r in ROLES)) * 12
    assert dense_macs / low_macs == pytest.approx(per_layer_dense / per_layer_low)


def test_linear_macs_on_small_models():
    cfg = _cfg()
    dense = init_model(cfg, seed=0)
    low = build_student(dense, FactorizationSpec(rank=2))
    assert linear_macs(dense) == 2 * (4 * 64 + 2 * 128)
    assert linear_macs(low) == 2 * (4 * 2 * 16 + 2 * 2 * 24)


def test_bert_base_parameter_arithmetic():
    """Closed-form totals for the two rank settings of the compression table."""
    d, f, v, p, L = 768, 3072, 30522, 512, 12
    embeddings = v * d + p * d + 2 * d
    per_layer_other = 4 * d + d + f + d + 4 * d  # six biases + two layer norms
    def total(k):
        return embeddings + L * (k * (4 * 2 * d + 2 * (d + f)) + per_layer_other) + v  # + head bias
    assert abs(total(256) - 67.0e6) / 67.0e6 < 0.03
    # the rank-64 setting with dense embeddings stays far above the 24.1M figure
    assert total(64) > 30e6
