"""Tokenizer, toy corpora and batch construction.

Batches are a pure function of ``(seed, step)`` so a resumed run sees the
same data as an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
IGNORE = -1


class Tokenizer:
    """Lower-cased whitespace tokenizer over a frequency-ranked vocabulary."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    pad_id, unk_id, cls_id, sep_id, mask_id = range(5)
    bos_id, eos_id = cls_id, sep_id

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @staticmethod
    def split(text: str) -> list[str]:
        return text.lower().split()

    def encode(self, text: str, add_special: bool = True) -> list[int]:
        ids = [self.stoi.get(w, self.unk_id) for w in self.split(text)]
        return [self.cls_id, *ids, self.sep_id] if add_special else ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIALS) and i != self.unk_id:
                continue
            words.append(self.itos[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{i}\t{t}\n" for i, t in enumerate(self.itos)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                idx, tok = line.split("\t")
                rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not dense")
        return cls([t for _, t in rows])


def build_tokenizer(corpus: Iterable[str], vocab_size: int = 4096) -> Tokenizer:
    """Most frequent words first; ties broken alphabetically."""
    counts = Counter()
    n_docs = 0
    for line in corpus:
        counts.update(Tokenizer.split(line))
        n_docs += 1
    if n_docs == 0 or not counts:
        raise ValueError("cannot build a tokenizer from an empty corpus")
    if vocab_size <= len(SPECIALS):
        raise ValueError(f"vocab_size must exceed {len(SPECIALS)}")
    ranked = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], w))
    return Tokenizer(list(SPECIALS) + ranked[: vocab_size - len(SPECIALS)])


def read_corpus(path) -> list[str]:
    """One document per non-empty line."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    docs = [ln for ln in lines if ln]
    if not docs:
        raise ValueError(f"{path}: corpus is empty")
    return docs


def bundled_corpus(name: str) -> Path:
    """Path of a corpus shipped with the package (``toy_grammar.txt`` etc.)."""
    return Path(str(resources.files("makd") / "corpora" / name))


# --------------------------------------------------------------------------
# synthetic corpora
# --------------------------------------------------------------------------

_AGENTS = {
    "cat": "cats", "dog": "dogs", "bird": "birds", "horse": "horses", "fox": "foxes",
    "mouse": "mice", "rabbit": "rabbits", "wolf": "wolves", "farmer": "farmers",
    "child": "children", "teacher": "teachers", "king": "kings", "girl": "girls", "boy": "boys",
}
_OBJECTS = {
    "ball": "balls", "book": "books", "stone": "stones", "box": "boxes", "hat": "hats",
    "cup": "cups", "key": "keys", "coin": "coins",
}
_FOODS = {"apple": "apples", "cake": "cakes", "bread": "breads", "fish": "fish", "egg": "eggs"}
_TRANSITIVE = {
    "sees": "see", "finds": "find", "likes": "like", "carries": "carry",
    "holds": "hold", "wants": "want", "drops": "drop",
}
_EATING = {"eats": "eat", "cooks": "cook", "shares": "share"}
_INTRANSITIVE = {"sleeps": "sleep", "runs": "run", "sings": "sing", "waits": "wait", "jumps": "jump", "hides": "hide"}
_DET_SG = ("the", "a", "every", "this")
_DET_PL = ("the", "some", "many", "these", "two")
_MOOD = ("happy", "sad", "old", "young", "brave", "lazy")
_COLOR = ("red", "green", "blue", "yellow", "black", "white")
_SIZE = ("small", "big", "tiny", "huge")
_PLACES = ("garden", "river", "forest", "house", "market", "hill", "field")
_PREPS = ("in", "near", "behind", "beside")
_ADVERBS = ("quietly", "quickly", "slowly", "often")


def _noun_phrase(rng, table, adjectives, p_adj):
    plural = rng.random() < 0.4
    noun = rng.choice(sorted(table))
    word = table[noun] if plural else noun
    det = rng.choice(_DET_PL if plural else _DET_SG)
    words = [det]
    if rng.random() < p_adj:
        words.append(rng.choice(adjectives))
    words.append(word)
    return words, plural


def grammar_sentence(rng: np.random.Generator) -> str:
    """One sentence with number agreement and selectional restrictions."""
    subj, plural = _noun_phrase(rng, _AGENTS, _MOOD + _SIZE, 0.5)
    words = list(subj)
    kind = rng.random()
    if kind < 0.45:
        verb = rng.choice(sorted(_TRANSITIVE))
        obj, _ = _noun_phrase(rng, _OBJECTS, _COLOR + _SIZE, 0.5)
        words += [_TRANSITIVE[verb] if plural else verb] + obj
    elif kind < 0.7:
        verb = rng.choice(sorted(_EATING))
        obj, _ = _noun_phrase(rng, _FOODS, _SIZE, 0.3)
        words += [_EATING[verb] if plural else verb] + obj
    else:
        verb = rng.choice(sorted(_INTRANSITIVE))
        words += [_INTRANSITIVE[verb] if plural else verb]
        if rng.random() < 0.5:
            words.append(rng.choice(_ADVERBS))
    if rng.random() < 0.5:
        words += [rng.choice(_PREPS), "the", rng.choice(_PLACES)]
    return " ".join(words) + " ."


def generate_grammar_corpus(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [grammar_sentence(rng) for _ in range(n)]


def generate_bracket_corpus(n: int, seed: int = 0, max_depth: int = 4, max_len: int = 14) -> list[str]:
    """Balanced sequences over three bracket pairs, e.g. ``( [ ] ) { }``."""
    rng = np.random.default_rng(seed)
    pairs = (("(", ")"), ("[", "]"), ("{", "}"))
    out = []
    while len(out) < n:
        stack, toks = [], []
        while len(toks) < max_len:
            remaining = max_len - len(toks)
            can_open = len(stack) < max_depth and remaining > len(stack) + 1
            if stack and (not can_open or rng.random() < 0.45):
                toks.append(stack.pop())
                if not stack and rng.random() < 0.3:
                    break
            elif can_open:
                o, c = pairs[rng.integers(3)]
                toks.append(o)
                stack.append(c)
            else:
                break
        toks.extend(reversed(stack))
        if toks:
            out.append(" ".join(toks))
    return out


_FACT_COLOR = {"apple": "red", "banana": "yellow", "grass": "green", "sky": "blue", "snow": "white", "coal": "black", "orange": "orange", "plum": "purple"}
_FACT_SOUND = {"cat": "meow", "dog": "woof", "cow": "moo", "duck": "quack", "sheep": "baa", "owl": "hoot", "bee": "buzz", "lion": "roar"}
_FACT_HOME = {"bird": "nest", "bee": "hive", "fish": "river", "fox": "den", "horse": "stable", "dog": "kennel", "spider": "web", "king": "castle"}
_LETTERS = tuple("abcdefgh")


def instruction_example(rng: np.random.Generator) -> tuple[str, str]:
    """``(prompt, response)``; the prompt ends with ``response :``."""
    kind = rng.integers(5)
    if kind == 0:
        thing = rng.choice(sorted(_FACT_COLOR))
        q, a = f"what color is the {thing} ?", f"the {thing} is {_FACT_COLOR[thing]} ."
    elif kind == 1:
        thing = rng.choice(sorted(_FACT_SOUND))
        q, a = f"what does the {thing} say ?", f"the {thing} says {_FACT_SOUND[thing]} ."
    elif kind == 2:
        thing = rng.choice(sorted(_FACT_HOME))
        q, a = f"where does the {thing} live ?", f"the {thing} lives in the {_FACT_HOME[thing]} ."
    elif kind == 3:
        seq = list(rng.choice(_LETTERS, size=int(rng.integers(2, 5))))
        q, a = "reverse the letters " + " ".join(seq), " ".join(reversed(seq)) + " ."
    else:
        seq = list(rng.choice(_LETTERS, size=int(rng.integers(2, 5))))
        q, a = "repeat the letters " + " ".join(seq), " ".join(seq) + " ."
    return f"instruction : {q} response :", a


def generate_instruction_corpus(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [" ".join(instruction_example(rng)) for _ in range(n)]


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # [B, |x|] int64
    attn_mask: np.ndarray  # [B, |x|] bool, True on real tokens
    labels: np.ndarray  # [B, |x|] int64, IGNORE where no target
    label_mask: np.ndarray  # [B, |x|] bool

    @property
    def n_labels(self) -> int:
        return int(self.label_mask.sum())


def encode_corpus(tokenizer: Tokenizer, docs: Iterable[str], max_len: int) -> list[list[int]]:
    out = []
    for doc in docs:
        ids = tokenizer.encode(doc)
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [tokenizer.sep_id]
        out.append(ids)
    return out


def collate(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> Batch:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    labels = np.full(ids.shape, IGNORE, dtype=np.int64)
    return Batch(ids, mask, labels, np.zeros(ids.shape, dtype=bool))


def mlm_mask(batch: Batch, tokenizer: Tokenizer, mask_rate: float = 0.15, rng_seed=0) -> Batch:
    """Select ``ceil(mask_rate * n)`` of the ``n`` maskable tokens per row.

    Selected tokens become ``[MASK]`` 80% of the time, a random word 10%,
    and stay unchanged 10%; labels hold the original ids there.
    """
    if not 0 < mask_rate < 1:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    rng = np.random.default_rng(rng_seed)
    ids = batch.ids.copy()
    labels = np.full(ids.shape, IGNORE, dtype=np.int64)
    n_special = len(SPECIALS)
    maskable = batch.attn_mask & (batch.ids >= n_special) | (batch.attn_mask & (batch.ids == tokenizer.unk_id))
    for i in range(ids.shape[0]):
        pos = np.flatnonzero(maskable[i])
        if pos.size == 0:
            log.warning("mlm_mask: row %d has no maskable positions; skipped", i)
            continue
        k = max(1, math.ceil(mask_rate * pos.size))
        chosen = np.sort(rng.choice(pos, size=k, replace=False))
        labels[i, chosen] = ids[i, chosen]
        u = rng.random(k)
        ids[i, chosen[u < 0.8]] = tokenizer.mask_id
        rand_pos = chosen[(u >= 0.8) & (u < 0.9)]
        if rand_pos.size and tokenizer.vocab_size > n_special:
            ids[i, rand_pos] = rng.integers(n_special, tokenizer.vocab_size, size=rand_pos.size)
    return Batch(ids, batch.attn_mask, labels, labels != IGNORE)


def causal_targets(batch: Batch) -> Batch:
    """Next-token labels on every real position that has a real successor."""
    labels = np.full(batch.ids.shape, IGNORE, dtype=np.int64)
    nxt = batch.attn_mask[:, 1:] & batch.attn_mask[:, :-1]
    labels[:, :-1] = np.where(nxt, batch.ids[:, 1:], IGNORE)
    return replace(batch, labels=labels, label_mask=labels != IGNORE)


class BatchStream:
    """Deterministic batches: shuffled epochs from ``(seed, epoch)``, masks from ``(seed, step)``."""

    def __init__(self, seqs: list[list[int]], tokenizer: Tokenizer, batch_size: int, seed: int,
                 objective: str = "mlm", mask_rate: float = 0.15):
        if not seqs:
            raise ValueError("no sequences to batch")
        if objective not in ("mlm", "causal"):
            raise ValueError(f"unknown objective {objective!r}")
        self.seqs = seqs
        self.tokenizer = tokenizer
        self.batch_size = min(batch_size, len(seqs))
        self.seed = seed
        self.objective = objective
        self.mask_rate = mask_rate
        self._perm_cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng([self.seed, epoch, 1]).permutation(len(self.seqs))}
        return self._perm_cache[epoch]

    def batch(self, step: int) -> Batch:
        per_epoch = len(self.seqs) // self.batch_size
        epoch, slot = divmod(step, per_epoch)
        idx = self._perm(epoch)[slot * self.batch_size : (slot + 1) * self.batch_size]
        raw = collate([self.seqs[i] for i in idx], self.tokenizer.pad_id)
        if self.objective == "mlm":
            return mlm_mask(raw, self.tokenizer, self.mask_rate, rng_seed=[self.seed, step, 2])
        return causal_targets(raw)


def fixed_batches(seqs: list[list[int]], tokenizer: Tokenizer, batch_size: int, seed: int,
                  objective: str = "mlm", mask_rate: float = 0.15) -> list[Batch]:
    """Held-out batches in corpus order with masks fixed by ``seed``."""
    out = []
    for j, start in enumerate(range(0, len(seqs), batch_size)):
        raw = collate(seqs[start : start + batch_size], tokenizer.pad_id)
        if objective == "mlm":
            out.append(mlm_mask(raw, tokenizer, mask_rate, rng_seed=[seed, j, 3]))
        else:
            out.append(causal_targets(raw))
    return out
