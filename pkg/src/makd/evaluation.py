"""Quality, agreement and speed metrics."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Tokenizer
from .distill import DistillPlan, total_loss
from .factorize import linear_macs
from .tensor import log_softmax_np
from .transformer import TransformerModel, model_forward


def _logits(model: TransformerModel, batch: Batch):
    with T.no_grad():
        return model_forward(model, batch.ids, batch.attn_mask)


def masked_accuracy(model: TransformerModel, batches: Sequence[Batch]) -> float:
    """Fraction of labelled positions whose argmax logit equals the label.

    For a causal model this is next-token accuracy.
    """
    hits = total = 0
    for b in batches:
        pred = _logits(model, b).logits.data.argmax(axis=-1)
        hits += int(np.sum((pred == b.labels) & b.label_mask))
        total += b.n_labels
    if total == 0:
        raise ValueError("masked_accuracy: no labelled positions")
    return hits / total


@dataclass
class AgreementReport:
    logit_kl: float  # mean per-position KL(teacher || student)
    top1_agreement: float
    attn_kl: list[float]  # per layer, KL(teacher || student), head- and row-averaged

    def as_dict(self) -> dict:
        out = {"logit_kl": self.logit_kl, "top1_agreement": self.top1_agreement}
        out.update({f"attn_kl.{i + 1}": v for i, v in enumerate(self.attn_kl)})
        return out


def _check_pair(student: TransformerModel, teacher: TransformerModel) -> None:
    a, b = student.config, teacher.config
    for name in ("n_layers", "d_model", "n_heads", "vocab_size", "model_kind"):
        if getattr(a, name) != getattr(b, name):
            raise ValueError(f"architecture mismatch on {name}: {getattr(a, name)} vs {getattr(b, name)}")


def agreement(student: TransformerModel, teacher: TransformerModel, batches: Sequence[Batch], eps: float = 1e-10) -> AgreementReport:
    """Teacher-student agreement on the labelled positions of ``batches``."""
    _check_pair(student, teacher)
    kl_sum = agree = count = 0.0
    attn_sum = np.zeros(student.config.n_layers)
    attn_rows = 0.0
    for b in batches:
        s, t = _logits(student, b), _logits(teacher, b)
        lp_s, lp_t = log_softmax_np(s.logits.data), log_softmax_np(t.logits.data)
        kl = np.sum(np.exp(lp_t) * (lp_t - lp_s), axis=-1)
        sel = b.label_mask
        kl_sum += float(np.sum(kl[sel]))
        agree += float(np.sum((lp_s.argmax(-1) == lp_t.argmax(-1))[sel]))
        count += float(sel.sum())
        rows = b.attn_mask[:, None, :]
        n_rows = float(np.broadcast_to(rows, s.layers[0].attn.shape[:-1]).sum()) if s.layers else 0.0
        for i, (ls, lt) in enumerate(zip(s.layers, t.layers)):
            p, q = np.maximum(lt.attn.data, eps), np.maximum(ls.attn.data, eps)
            attn_sum[i] += float(np.sum(np.sum(p * (np.log(p) - np.log(q)), axis=-1) * rows))
        attn_rows += n_rows
    if count == 0:
        raise ValueError("agreement: no labelled positions")
    attn = (attn_sum / attn_rows).tolist() if attn_rows else []
    return AgreementReport(kl_sum / count, agree / count, attn)


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> tuple[float, float, float]:
    """LCS precision, recall and F1 between two token sequences.

    An empty candidate scores 0 (with a warning); an empty reference is an error.
    """
    cand, ref = list(candidate), list(reference)
    if not ref:
        raise ValueError("rouge_l: reference must be non-empty")
    if not cand:
        warnings.warn("rouge_l: empty candidate scored as 0", stacklevel=2)
        return 0.0, 0.0, 0.0
    prev = [0] * (len(ref) + 1)
    for c in cand:
        cur = [0] * (len(ref) + 1)
        for j, r in enumerate(ref, 1):
            cur[j] = prev[j - 1] + 1 if c == r else max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return p, r, 2 * p * r / (p + r)


def greedy_generate(model: TransformerModel, prompt_ids: Sequence[int], max_new: int, eos_id: int) -> list[int]:
    """Greedy continuation of ``prompt_ids`` (causal models only), stopping at ``eos_id``."""
    if not model.config.causal:
        raise ValueError("greedy_generate needs a decoder-causal model")
    ids = list(prompt_ids)
    out: list[int] = []
    for _ in range(max_new):
        if len(ids) >= model.config.max_seq_len:
            break
        with T.no_grad():
            logits = model_forward(model, np.array(ids)[None, :]).logits.data[0, -1]
        nxt = int(np.argmax(logits))
        if nxt == eos_id:
            break
        ids.append(nxt)
        out.append(nxt)
    return out


def generation_rouge(student: TransformerModel, teacher: TransformerModel, tokenizer: Tokenizer,
                     prompts: Sequence[str], max_new: int = 12) -> float:
    """Mean Rouge-L F1 of student greedy outputs against teacher greedy outputs."""
    scores = []
    for prompt in prompts:
        ids = tokenizer.encode(prompt)[:-1]  # drop [SEP] so generation continues the prompt
        ref = tokenizer.decode(greedy_generate(teacher, ids, max_new, tokenizer.eos_id)).split()
        cand = tokenizer.decode(greedy_generate(student, ids, max_new, tokenizer.eos_id)).split()
        if not ref:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scores.append(rouge_l(cand, ref)[2])
    return float(np.mean(scores)) if scores else 0.0


def eval_losses(student: TransformerModel, teacher: TransformerModel, plan: DistillPlan, batches: Sequence[Batch]) -> dict:
    """Mean of each loss component over ``batches`` (no gradients)."""
    sums: dict[str, float] = {}
    for b in batches:
        with T.no_grad():
            s = model_forward(student, b.ids, b.attn_mask)
            t = model_forward(teacher, b.ids, b.attn_mask)
        for k, v in total_loss(s, t, plan, b.label_mask).components().items():
            sums[k] = sums.get(k, 0.0) + v
    return {f"eval_{k}": v / len(batches) for k, v in sums.items()}


def distill_eval_fn(student: TransformerModel, teacher: TransformerModel, plan: DistillPlan, batches: Sequence[Batch]):
    def fn() -> dict:
        out = {"accuracy": masked_accuracy(student, batches)}
        out.update(agreement(student, teacher, batches).as_dict())
        out.update(eval_losses(student, teacher, plan, batches))
        return out

    return fn


def lm_eval_fn(model: TransformerModel, batches: Sequence[Batch]):
    def fn() -> dict:
        return {"accuracy": masked_accuracy(model, batches)}

    return fn


# --------------------------------------------------------------------------
# speed
# --------------------------------------------------------------------------


@dataclass
class ThroughputReport:
    tokens_per_sec: float
    median_seconds: float
    linear_macs_per_token: int
    per_layer_linear_macs: float


def throughput_bench(model: TransformerModel, seq_len: int, repetitions: int = 5, batch_size: int = 1,
                     warmup: int = 1, seed: int = 0) -> ThroughputReport:
    """Median forward wall-clock over ``repetitions`` after ``warmup`` runs."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, model.config.vocab_size, size=(batch_size, seq_len))
    times = []
    with T.no_grad():
        for i in range(warmup + repetitions):
            t0 = time.perf_counter()
            model_forward(model, ids)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    macs = linear_macs(model)
    return ThroughputReport(
        tokens_per_sec=batch_size * seq_len / med,
        median_seconds=med,
        linear_macs_per_token=macs,
        per_layer_linear_macs=macs / max(1, model.config.n_layers),
    )

