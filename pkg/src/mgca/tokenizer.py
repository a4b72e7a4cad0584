"""Byte-pair subword vocabulary with greedy longest-match encoding.

Non-initial pieces of a word carry a ``##`` prefix so that decoding can put
word boundaries back unambiguously.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

CLS, SEP, MASK, PAD, UNK = "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"
SPECIAL_TOKENS = (CLS, SEP, MASK, PAD, UNK)
CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)
CONTINUATION = "##"


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text).lower()


def split_words(text: str) -> list[str]:
    return normalize_text(text).split()


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    max_piece: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with " + ", ".join(SPECIAL_TOKENS))
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate token strings in vocab")
        object.__setattr__(self, "index", index)
        longest = max((len(t.removeprefix(CONTINUATION)) for t in self.tokens[NUM_SPECIAL:]),
                      default=1)
        object.__setattr__(self, "max_piece", longest)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass(frozen=True)
class Tokenization:
    """Token ids of one line plus, per whitespace word, its half-open token span."""

    ids: tuple[int, ...]
    words: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.ids)


def _word_symbols(word: str) -> list[str]:
    return [c if i == 0 else CONTINUATION + c for i, c in enumerate(word)]


def _merge_symbol(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):]


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Greedy BPE over whitespace words.

    Each round merges the most frequent adjacent symbol pair; ties go to the
    lexicographically smallest pair. Stops when the vocab reaches
    ``target_size`` or no pair remains.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(split_words(line))
    if not word_counts:
        raise ValueError("cannot train a vocabulary on an empty corpus")

    symbols: list[str] = []
    seen: set[str] = set()
    for word in sorted(word_counts):
        for sym in _word_symbols(word):
            if sym not in seen:
                seen.add(sym)
                symbols.append(sym)
    symbols.sort()
    # the alphabet counts word-initial and ##-continuation forms separately
    if target_size < NUM_SPECIAL + len(symbols):
        raise ValueError(f"target_size {target_size} is below {NUM_SPECIAL} specials "
                         f"+ {len(symbols)} alphabet symbols")

    words = sorted(word_counts)
    segmented = {w: _word_symbols(w) for w in words}
    budget = target_size - NUM_SPECIAL - len(symbols)
    while budget > 0:
        pairs: Counter[tuple[str, str]] = Counter()
        for w in words:
            seg = segmented[w]
            c = word_counts[w]
            for a, b in zip(seg, seg[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best_count = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == best_count)
        merged = _merge_symbol(*best)
        for w in words:
            seg = segmented[w]
            if len(seg) < 2:
                continue
            out: list[str] = []
            i = 0
            while i < len(seg):
                if i + 1 < len(seg) and (seg[i], seg[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segmented[w] = out
        if merged not in seen:
            seen.add(merged)
            symbols.append(merged)
            budget -= 1

    # drop pieces that longest-match never selects on any training word
    draft = Vocab(SPECIAL_TOKENS + tuple(symbols))
    used: set[int] = set()
    for w in words:
        used.update(_segment_word(draft, w, draft.max_piece))
    kept = tuple(t for i, t in enumerate(draft.tokens) if i < NUM_SPECIAL or i in used)
    return Vocab(kept)


def _segment_word(vocab: Vocab, word: str, max_piece: int) -> list[int]:
    ids: list[int] = []
    i = 0
    while i < len(word):
        prefix = "" if i == 0 else CONTINUATION
        for j in range(min(len(word), i + max_piece), i, -1):
            tid = vocab.index.get(prefix + word[i:j])
            if tid is not None and tid >= NUM_SPECIAL:
                ids.append(tid)
                i = j
                break
        else:
            ids.append(UNK_ID)
            i += 1
    return ids


def encode(vocab: Vocab, text: str) -> Tokenization:
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    words = split_words(text)
    for word in words:
        start = len(ids)
        ids.extend(_segment_word(vocab, word, vocab.max_piece))
        spans.append((start, len(ids)))
    return Tokenization(tuple(ids), tuple(words), tuple(spans))


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    """Join pieces back into words; specials are dropped."""
    words: list[str] = []
    for tid in ids:
        tid = int(tid)
        if not 0 <= tid < vocab.size:
            raise IndexError(f"token id {tid} outside vocab of size {vocab.size}")
        if tid in (CLS_ID, SEP_ID, MASK_ID, PAD_ID):
            continue
        tok = vocab.tokens[tid]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)
