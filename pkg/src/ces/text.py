"""Word-level vocabulary, [SEP]-packed pair encoding and BERT-style masking."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import IGNORE_INDEX

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:5]) != SPECIALS:
            raise ValueError("vocab must start with the five special tokens")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Ids after the specials are ordered by (count desc, token asc)."""
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(tokenize(line))
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


@dataclass
class TokenSequence:
    ids: np.ndarray
    segments: np.ndarray
    attn_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return int(self.attn_mask.sum())


@dataclass
class MaskedBatch:
    ids: np.ndarray
    mlm_labels: np.ndarray
    seed: tuple


def encode_pair(c: str, c_star: str | None, vocab: Vocab, max_len: int) -> TokenSequence:
    """Pack ``[CLS] c [SEP] c* [SEP]`` (or ``[CLS] c [SEP]``) and pad to ``max_len``.

    Over-long inputs lose tokens from the end of whichever segment is
    currently longer, one token at a time.
    """
    if max_len < 5:
        raise ValueError("max_len must be at least 5")
    a = vocab.ids(c)
    b = vocab.ids(c_star) if c_star is not None else None
    if b is None:
        a = a[: max_len - 2]
        body = [CLS_ID] + a + [SEP_ID]
        segs = [0] * len(body)
    else:
        budget = max_len - 3
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        body = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
        segs = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    n = len(body)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[:n] = body
    segments = np.zeros(max_len, dtype=np.int64)
    segments[:n] = segs
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return TokenSequence(ids, segments, mask)


def special_mask(ids: np.ndarray) -> np.ndarray:
    return ids < len(SPECIALS)


def apply_mlm_mask(
    seq: TokenSequence | np.ndarray,
    rng: np.random.Generator,
    vocab_size: int,
    select: float = 0.15,
    mask: float = 0.8,
    random: float = 0.1,
    keep: float = 0.1,
    seed: tuple = (),
) -> MaskedBatch:
    """Select each content position w.p. ``select``; of those, [MASK] / random id / unchanged."""
    if not 0.0 <= select <= 1.0 or min(mask, random, keep) < 0 or abs(mask + random + keep - 1.0) > 1e-9:
        raise ValueError(f"invalid masking rates select={select} mask={mask} random={random} keep={keep}")
    ids = np.asarray(seq.ids if isinstance(seq, TokenSequence) else seq, dtype=np.int64)
    content = ~special_mask(ids)
    chosen = content & (rng.random(ids.shape) < select)
    labels = np.where(chosen, ids, IGNORE_INDEX)
    action = rng.random(ids.shape)
    randoms = rng.integers(len(SPECIALS), vocab_size, size=ids.shape)
    out = ids.copy()
    to_mask = chosen & (action < mask)
    to_rand = chosen & (action >= mask) & (action < mask + random)
    out[to_mask] = MASK_ID
    out[to_rand] = randoms[to_rand]
    return MaskedBatch(out, labels, seed)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= len(vocab):
            raise ValueError(f"token id {i} out of range for vocab of size {len(vocab)}")
        if i >= len(SPECIALS):
            words.append(vocab.itos[i])
    return " ".join(words)
