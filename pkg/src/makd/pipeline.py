"""End-to-end runs: corpus preparation, teacher pretraining, student distillation.

These functions tie the library modules together with the data split and
tokenizer conventions the CLI uses. The teacher checkpoint carries its
vocabulary and data settings in its metadata so that students and
evaluations reproduce the same tokenization and held-out split.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .config import DataConfig, RunConfig
from .data import (
    Batch,
    BatchStream,
    Tokenizer,
    build_tokenizer,
    bundled_corpus,
    encode_corpus,
    fixed_batches,
    read_corpus,
)
from .distill import DistillPlan
from .evaluation import distill_eval_fn, lm_eval_fn
from .factorize import build_student
from .train import TrainConfig, TrainState, distill_run, load_state, pretrain_teacher
from .transformer import TransformerModel, init_model

log = logging.getLogger(__name__)

PROMPT_END = "response :"


def corpus_docs(corpus: str) -> list[str]:
    """Documents of a bundled corpus (by name, ``.txt`` optional) or of a file path."""
    path = Path(corpus)
    if path.is_file():
        return read_corpus(path)
    name = corpus if corpus.endswith(".txt") else corpus + ".txt"
    try:
        return read_corpus(bundled_corpus(name))
    except FileNotFoundError:
        raise FileNotFoundError(f"corpus {corpus!r} is neither a file nor a bundled corpus") from None


@dataclass
class PreparedData:
    tokenizer: Tokenizer
    train_docs: list[str]
    eval_docs: list[str]
    train_seqs: list[list[int]]
    eval_seqs: list[list[int]]
    objective: str  # "mlm" or "causal"
    config: DataConfig

    def stream(self, batch_size: int, seed: int, mask_rate: float = 0.15) -> BatchStream:
        return BatchStream(self.train_seqs, self.tokenizer, batch_size, seed, self.objective, mask_rate)

    def eval_batches(self, mask_rate: float = 0.15) -> list[Batch]:
        """Held-out batches; MLM data gets ``eval_draws`` independent mask draws."""
        dc = self.config
        draws = dc.eval_draws if self.objective == "mlm" else 1
        out: list[Batch] = []
        for d in range(draws):
            out += fixed_batches(self.eval_seqs, self.tokenizer, dc.eval_batch_size, dc.eval_seed + d,
                                 self.objective, mask_rate)
        return out

    def prompts(self) -> list[str]:
        """Held-out instruction prompts, cut just after the response marker."""
        out = []
        for doc in self.eval_docs:
            i = doc.find(PROMPT_END)
            if i >= 0:
                out.append(doc[: i + len(PROMPT_END)])
        return out


def prepare_data(dc: DataConfig, objective: str, tokenizer: Tokenizer | None = None) -> PreparedData:
    """Load, optionally dedupe, split (held-out tail) and encode a corpus.

    With ``dedupe`` repeated documents are dropped (first occurrence kept)
    so no held-out document also appears in the training split.
    """
    docs = corpus_docs(dc.corpus)
    if dc.dedupe:
        docs = list(dict.fromkeys(docs))
    if not 0 < dc.eval_size < len(docs):
        raise ValueError(f"eval_size {dc.eval_size} must be in (0, {len(docs)})")
    train_docs, eval_docs = docs[: -dc.eval_size], docs[-dc.eval_size :]
    if tokenizer is None:
        tokenizer = build_tokenizer(train_docs, dc.vocab_size)
    return PreparedData(
        tokenizer=tokenizer,
        train_docs=train_docs,
        eval_docs=eval_docs,
        train_seqs=encode_corpus(tokenizer, train_docs, dc.max_len),
        eval_seqs=encode_corpus(tokenizer, eval_docs, dc.max_len),
        objective=objective,
        config=dc,
    )


def objective_for(model_kind: str) -> str:
    return "causal" if model_kind == "decoder-causal" else "mlm"


def teacher_meta(prep: PreparedData) -> dict:
    return {"vocab": list(prep.tokenizer.itos), "data": asdict(prep.config)}


def data_from_meta(meta: dict, rc: RunConfig | None = None, model_kind: str = "encoder-mlm") -> PreparedData:
    """Rebuild the teacher's tokenizer and split from checkpoint metadata.

    Data keys set explicitly in ``rc`` take precedence over the stored ones,
    except the vocabulary, which is always the teacher's.
    """
    if "vocab" not in meta:
        raise ValueError("checkpoint metadata has no vocabulary; was it written by pretrain-teacher?")
    stored = DataConfig(**meta.get("data", {}))
    dc = stored
    if rc is not None:
        default = asdict(DataConfig())
        explicit = {k: v for k, v in asdict(rc.data).items() if v != default[k]}
        dc = replace(stored, **explicit)
    return prepare_data(dc, objective_for(model_kind), Tokenizer(meta["vocab"]))


def run_pretrain(rc: RunConfig, log_path=None, out=None) -> tuple[TransformerModel, list[dict], PreparedData]:
    """Pretrain a dense teacher with masked (or causal) language modelling."""
    objective = objective_for(rc.model.get("model_kind", "encoder-mlm"))
    prep = prepare_data(rc.data, objective)
    cfg = rc.model_config(prep.tokenizer.vocab_size)
    if cfg.max_seq_len < rc.data.max_len:
        raise ValueError(f"model.max_seq_len {cfg.max_seq_len} < data.max_len {rc.data.max_len}")
    tcfg = replace(rc.train, mode="teacher-pretrain")
    model = init_model(cfg, seed=tcfg.seed)
    eval_fn = lm_eval_fn(model, prep.eval_batches(tcfg.mask_rate))
    model, records = pretrain_teacher(model, prep.stream(tcfg.batch_size, tcfg.seed, tcfg.mask_rate), tcfg,
                                      eval_fn=eval_fn, log_path=log_path, ckpt_path=out,
                                      meta=teacher_meta(prep))
    return model, records, prep


def make_student(teacher: TransformerModel, rc: RunConfig, seed: int | None = None) -> TransformerModel:
    """SVD-initialised student, or a random one with the same ranks (``student_init = random``)."""
    spec = rc.factorization()
    if rc.student_init == "svd":
        return build_student(teacher, spec)
    if spec.factorize_embeddings:
        raise ValueError("random student init does not support factorized embeddings")
    ranks = spec.resolve(teacher.config)
    seed = rc.train.seed if seed is None else seed
    return init_model(replace(teacher.config, rank_map=ranks), seed=10_000 + seed)


def run_distill(rc: RunConfig, teacher: TransformerModel, prep: PreparedData, log_path=None, out=None,
                resume=None, stop_at: int | None = None, meta: dict | None = None
                ) -> tuple[TrainState, list[dict], DistillPlan]:
    """Distil ``teacher`` into a fresh (or resumed) student under the configured plan."""
    tcfg: TrainConfig = rc.train
    if tcfg.mode == "teacher-pretrain":
        tcfg = replace(tcfg, mode="distill-makd")
    plan = rc.distill_plan(teacher.config.n_layers)
    state = None
    if resume is not None:
        state, _ = load_state(resume)
        student = state.model
        log.info("resuming from %s at step %d", resume, state.step)
    else:
        student = make_student(teacher, rc)
    eval_fn = distill_eval_fn(student, teacher, plan, prep.eval_batches(tcfg.mask_rate))
    full_meta = {**teacher_meta(prep), **(meta or {})}
    state, records = distill_run(teacher, student, plan, tcfg, prep.stream(tcfg.batch_size, tcfg.seed, tcfg.mask_rate),
                                 eval_fn=eval_fn, log_path=log_path, ckpt_path=out, meta=full_meta,
                                 state=state, stop_at=stop_at)
    return state, records, plan
