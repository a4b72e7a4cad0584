"""Synthetic "cipher language" corpora with exact word-level ground truth.

The source language is a random sparse bigram chain over invented words; the
target language replaces every word through a fixed bijection onto a second,
character-disjoint word list. By default the target also reverses word order,
so that position embeddings alone cannot align the two sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SOURCE_LETTERS = ("bdgkmpst", "aeiou")
TARGET_LETTERS = ("cfhjlnrvwz", "qxy")


def _invent_words(count: int, consonants: str, vowels: str, rng: np.random.Generator) -> list[str]:
    words: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        syllables = int(rng.integers(2, 4))
        w = "".join(consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
                    for _ in range(syllables))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


@dataclass
class CipherCorpus:
    source_words: list[str]
    target_words: list[str]
    mono: dict[str, list[str]]
    train_pairs: list[tuple[str, str]]
    heldout_pairs: list[tuple[str, str]]
    source_lang: str = "src"
    target_lang: str = "tgt"

    @property
    def cipher(self) -> dict[str, str]:
        return dict(zip(self.source_words, self.target_words))

    def dictionary_pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.source_words, self.target_words))

    def all_text(self) -> list[str]:
        lines = [ln for v in self.mono.values() for ln in v]
        for s, t in self.train_pairs:
            lines += [s, t]
        return lines

    def write(self, root: str | Path) -> dict[str, Path]:
        """Lay the corpus out in the on-disk formats the CLI reads."""
        root = Path(root)
        mono_dir = root / "mono"
        mono_dir.mkdir(parents=True, exist_ok=True)
        for lang, lines in self.mono.items():
            (mono_dir / f"{lang}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        tag = f"{self.source_lang}-{self.target_lang}"
        parallel = root / f"{tag}.tsv"
        parallel.write_text("".join(f"{s}\t{t}\n" for s, t in self.train_pairs), encoding="utf-8")
        heldout = root / f"heldout.{tag}.tsv"
        heldout.write_text("".join(f"{s}\t{t}\n" for s, t in self.heldout_pairs), encoding="utf-8")
        dictionary = root / "dictionary.txt"
        dictionary.write_text("".join(f"{s} {t}\n" for s, t in self.dictionary_pairs()),
                              encoding="utf-8")
        return {"mono_dir": mono_dir, "parallel": parallel, "heldout": heldout,
                "dictionary": dictionary}


def make_cipher_corpus(n_words: int = 100, n_train: int = 2000, n_heldout: int = 200,
                       n_mono: int = 2000, min_len: int = 4, max_len: int = 10,
                       successors: int = 6, reverse_order: bool = True,
                       seed: int = 0) -> CipherCorpus:
    """Build a cipher corpus with ``2 * n_words`` distinct words.

    Held-out pairs never repeat a training sentence.
    """
    rng = np.random.default_rng(seed)
    source = _invent_words(n_words, *SOURCE_LETTERS, rng)
    target = _invent_words(n_words, *TARGET_LETTERS, rng)
    mapping = dict(zip(source, target))

    # Zipf-weighted sparse successor lists
    weights = 1.0 / np.arange(1, n_words + 1)
    weights /= weights.sum()
    nexts = [rng.choice(n_words, size=successors, replace=False, p=weights) for _ in range(n_words)]
    start_p = weights

    def sentence() -> str:
        length = int(rng.integers(min_len, max_len + 1))
        w = int(rng.choice(n_words, p=start_p))
        out = [w]
        while len(out) < length:
            w = int(nexts[w][rng.integers(successors)])
            out.append(w)
        return " ".join(source[i] for i in out)

    def translate(s: str) -> str:
        words = [mapping[w] for w in s.split()]
        return " ".join(words[::-1] if reverse_order else words)

    seen: set[str] = set()
    train, heldout = [], []
    while len(train) < n_train:
        s = sentence()
        seen.add(s)
        train.append((s, translate(s)))
    while len(heldout) < n_heldout:
        s = sentence()
        if s in seen:
            continue
        seen.add(s)
        heldout.append((s, translate(s)))
    mono = {"src": [sentence() for _ in range(n_mono)],
            "tgt": [translate(sentence()) for _ in range(n_mono)]}
    return CipherCorpus(source, target, mono, train, heldout)
