import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from makd.config import DataConfig
from makd.data import (
    IGNORE,
    SPECIALS,
    BatchStream,
    Tokenizer,
    build_tokenizer,
    causal_targets,
    collate,
    encode_corpus,
    fixed_batches,
    generate_bracket_corpus,
    generate_grammar_corpus,
    generate_instruction_corpus,
    mlm_mask,
    read_corpus,
)
from makd.pipeline import corpus_docs, data_from_meta, prepare_data, teacher_meta


@pytest.fixture(scope="module")
def tok():
    return build_tokenizer(generate_grammar_corpus(400, seed=3))


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------


def test_frequency_order():
    t = build_tokenizer(["a a b"], vocab_size=10)
    assert t.stoi["a"] < t.stoi["b"]
    assert t.itos[: len(SPECIALS)] == list(SPECIALS)


def test_ties_broken_alphabetically():
    t = build_tokenizer(["zeta beta alpha", "beta alpha zeta"])
    assert t.itos[len(SPECIALS):] == ["alpha", "beta", "zeta"]


def test_vocab_cap_and_unknown_words():
    t = build_tokenizer(["a a a b b c"], vocab_size=len(SPECIALS) + 2)
    assert t.vocab_size == 7
    assert t.encode("c a", add_special=False) == [t.unk_id, t.stoi["a"]]


def test_encode_decode_round_trip(tok):
    text = "the happy cat sees a red ball ."
    ids = tok.encode(text)
    assert ids[0] == tok.cls_id and ids[-1] == tok.sep_id
    assert tok.decode(ids) == text
    assert tok.encode("The HAPPY cat") == tok.encode("the happy cat")


def test_decode_keeps_unk():
    t = build_tokenizer(["a b"])
    assert t.decode(t.encode("a zzz")) == "a [UNK]"


@pytest.mark.parametrize("corpus", [[], ["   "]])
def test_empty_corpus_rejected(corpus):
    with pytest.raises(ValueError):
        build_tokenizer(corpus)


def test_small_vocab_rejected():
    with pytest.raises(ValueError):
        build_tokenizer(["a b"], vocab_size=len(SPECIALS))


def test_save_load(tmp_path, tok):
    tok.save(tmp_path / "v.tsv")
    again = Tokenizer.load(tmp_path / "v.tsv")
    assert again.itos == tok.itos


def test_vocab_must_start_with_specials():
    with pytest.raises(ValueError):
        Tokenizer(["a", "b"])
    with pytest.raises(ValueError):
        Tokenizer([*SPECIALS, "a", "a"])


def test_read_corpus_skips_blank_lines(tmp_path):
    (tmp_path / "c.txt").write_text("one\n\n  two  \n")
    assert read_corpus(tmp_path / "c.txt") == ["one", "two"]
    (tmp_path / "e.txt").write_text("\n\n")
    with pytest.raises(ValueError):
        read_corpus(tmp_path / "e.txt")


# --------------------------------------------------------------------------
# corpora
# --------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["toy_grammar", "instructions", "brackets", "nursery_rhymes"])
def test_bundled_corpora_load(name):
    docs = corpus_docs(name)
    assert len(docs) > 20 and all(d.strip() for d in docs)


def test_missing_corpus():
    with pytest.raises(FileNotFoundError):
        corpus_docs("no_such_corpus")


def test_generators_are_seeded():
    assert generate_grammar_corpus(20, seed=1) == generate_grammar_corpus(20, seed=1)
    assert generate_grammar_corpus(20, seed=1) != generate_grammar_corpus(20, seed=2)


def test_bracket_corpus_is_balanced():
    pairs = {")": "(", "]": "[", "}": "{"}
    for doc in generate_bracket_corpus(200, seed=0):
        stack = []
        for tok in doc.split():
            if tok in pairs:
                assert stack and stack.pop() == pairs[tok]
            else:
                stack.append(tok)
        assert not stack


def test_instruction_corpus_has_prompt_marker():
    for doc in generate_instruction_corpus(50, seed=0):
        assert doc.startswith("instruction :") and "response :" in doc


# --------------------------------------------------------------------------
# batches and masking
# --------------------------------------------------------------------------


def test_encode_corpus_truncates_with_sep(tok):
    seqs = encode_corpus(tok, ["the cat sees the dog in the garden ."], max_len=5)
    assert len(seqs[0]) == 5 and seqs[0][-1] == tok.sep_id


def test_collate_pads():
    b = collate([[2, 5, 6], [2, 7]])
    np.testing.assert_array_equal(b.ids, [[2, 5, 6], [2, 7, 0]])
    np.testing.assert_array_equal(b.attn_mask, [[1, 1, 1], [1, 1, 0]])
    assert b.n_labels == 0


def test_mask_rate_validation(tok):
    b = collate([[2, 8, 9, 3]])
    for rate in (0.0, 1.0):
        with pytest.raises(ValueError):
            mlm_mask(b, tok, rate)


def test_ceil_rule_masks_at_least_one(tok):
    b = collate([[tok.cls_id, 10, 11, tok.sep_id]])
    out = mlm_mask(b, tok, mask_rate=1e-6, rng_seed=0)
    assert out.n_labels == 1


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 30), rate=st.floats(0.01, 0.99), seed=st.integers(0, 2**31))
def test_masked_count_is_ceil(tok, n, rate, seed):
    import math

    row = [tok.cls_id] + list(range(len(SPECIALS), len(SPECIALS) + n)) + [tok.sep_id]
    out = mlm_mask(collate([row]), tok, rate, rng_seed=seed)
    assert out.n_labels == max(1, math.ceil(rate * n))
    # specials and padding are never selected
    assert not out.label_mask[0, 0] and not out.label_mask[0, -1]


def test_masking_is_deterministic(tok):
    b = collate(encode_corpus(tok, generate_grammar_corpus(8, seed=0), 16))
    x, y = mlm_mask(b, tok, rng_seed=[4, 2]), mlm_mask(b, tok, rng_seed=[4, 2])
    np.testing.assert_array_equal(x.ids, y.ids)
    np.testing.assert_array_equal(x.labels, y.labels)


def test_corruption_split_80_10_10(tok):
    rng = np.random.default_rng(0)
    rows = [[tok.cls_id, *rng.integers(len(SPECIALS), tok.vocab_size, size=14), tok.sep_id] for _ in range(400)]
    b = collate(rows)
    out = mlm_mask(b, tok, mask_rate=0.5, rng_seed=7)
    sel = out.label_mask
    total = sel.sum()
    masked = (out.ids[sel] == tok.mask_id).sum() / total
    kept = (out.ids[sel] == b.ids[sel]).sum() / total
    assert abs(masked - 0.8) < 0.02
    # a random replacement can coincide with the original word (rate 1/|words|)
    assert abs(kept - 0.1) < 0.02
    assert abs(1 - masked - kept - 0.1) < 0.02
    np.testing.assert_array_equal(out.labels[sel], b.ids[sel])
    assert np.all(out.labels[~sel] == IGNORE)


def test_row_without_maskable_tokens_is_skipped(tok, caplog):
    b = collate([[tok.cls_id, tok.sep_id], [tok.cls_id, 12, tok.sep_id]])
    out = mlm_mask(b, tok, rng_seed=0)
    assert out.label_mask[0].sum() == 0 and out.label_mask[1].sum() == 1
    assert "no maskable positions" in caplog.text


def test_causal_targets():
    b = causal_targets(collate([[2, 5, 6, 3], [2, 7, 3]]))
    np.testing.assert_array_equal(b.labels, [[5, 6, 3, IGNORE], [7, 3, IGNORE, IGNORE]])
    assert b.n_labels == 5


def test_batch_stream_is_a_function_of_seed_and_step(tok):
    seqs = encode_corpus(tok, generate_grammar_corpus(100, seed=0), 16)
    a = BatchStream(seqs, tok, 8, seed=3)
    b = BatchStream(seqs, tok, 8, seed=3)
    for step in (40, 0, 13, 40, 7):  # out of order on purpose
        x, y = a.batch(step), b.batch(step)
        np.testing.assert_array_equal(x.ids, y.ids)
        np.testing.assert_array_equal(x.labels, y.labels)
    assert not np.array_equal(a.batch(0).ids, BatchStream(seqs, tok, 8, seed=4).batch(0).ids)


def test_batch_stream_epoch_covers_every_sequence(tok):
    seqs = [[tok.cls_id, 5 + i % 40, tok.sep_id] for i in range(24)]
    s = BatchStream(seqs, tok, 6, seed=0, objective="causal")
    seen = sorted(int(x) for step in range(4) for x in s.batch(step).ids[:, 1])
    assert seen == sorted(5 + i % 40 for i in range(24))


def test_batch_stream_validation(tok):
    with pytest.raises(ValueError):
        BatchStream([], tok, 4, seed=0)
    with pytest.raises(ValueError):
        BatchStream([[2, 3]], tok, 4, seed=0, objective="seq2seq")


def test_fixed_batches_cover_in_order(tok):
    seqs = encode_corpus(tok, generate_grammar_corpus(10, seed=0), 16)
    batches = fixed_batches(seqs, tok, 4, seed=0, objective="causal")
    assert [b.ids.shape[0] for b in batches] == [4, 4, 2]
    assert list(batches[0].ids[0, : len(seqs[0])]) == seqs[0]


# --------------------------------------------------------------------------
# prepared splits
# --------------------------------------------------------------------------


def test_prepare_data_dedupes_and_holds_out():
    prep = prepare_data(DataConfig(corpus="instructions", eval_size=100), "causal")
    assert not set(prep.train_docs) & set(prep.eval_docs)
    assert len(set(prep.train_docs)) == len(prep.train_docs)
    assert len(prep.eval_docs) == 100
    assert all(p.endswith("response :") for p in prep.prompts())


def test_prepare_data_without_dedupe_keeps_duplicates():
    prep = prepare_data(DataConfig(corpus="instructions", eval_size=100, dedupe=False), "causal")
    assert len(prep.train_docs) + len(prep.eval_docs) == len(corpus_docs("instructions"))


def test_tokenizer_sees_only_training_docs(tmp_path):
    (tmp_path / "c.txt").write_text("alpha beta\nalpha gamma\nzeta omega\n")
    prep = prepare_data(DataConfig(corpus=str(tmp_path / "c.txt"), eval_size=1), "mlm")
    assert "zeta" not in prep.tokenizer.stoi
    assert prep.eval_seqs[0][1] == prep.tokenizer.unk_id


def test_eval_size_validation():
    with pytest.raises(ValueError):
        prepare_data(DataConfig(corpus="nursery_rhymes", eval_size=10_000), "mlm")


def test_eval_draws_give_independent_masks():
    prep = prepare_data(DataConfig(corpus="toy_grammar", eval_size=64, eval_batch_size=64, eval_draws=3), "mlm")
    batches = prep.eval_batches()
    assert len(batches) == 3
    assert not np.array_equal(batches[0].labels, batches[1].labels)
    np.testing.assert_array_equal(batches[0].labels, prep.eval_batches()[0].labels)


def test_meta_round_trip():
    prep = prepare_data(DataConfig(corpus="nursery_rhymes", eval_size=5), "mlm")
    again = data_from_meta(teacher_meta(prep))
    assert again.tokenizer.itos == prep.tokenizer.itos
    assert again.eval_seqs == prep.eval_seqs
    with pytest.raises(ValueError):
        data_from_meta({})
