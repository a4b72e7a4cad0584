"""Thesaurus dictionary loading and synonym-pair mining over parallel pairs."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .tokenizer import Tokenization, normalize_text

log = logging.getLogger(__name__)

Span = tuple[int, int]


@dataclass(frozen=True)
class Dictionary:
    entries: Mapping[str, frozenset[str]]
    skipped: int = 0

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def translations(self, word: str) -> frozenset[str]:
        return self.entries.get(normalize_text(word), frozenset())

    def without(self, source: str, target: str | None = None) -> Dictionary:
        """Copy with one entry (or one whole source word) removed."""
        entries = dict(self.entries)
        source = normalize_text(source)
        if target is None:
            entries.pop(source, None)
        elif source in entries:
            remaining = entries[source] - {normalize_text(target)}
            if remaining:
                entries[source] = remaining
            else:
                del entries[source]
        return Dictionary(entries, self.skipped)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> Dictionary:
        agg: dict[str, set[str]] = {}
        for src, tgt in pairs:
            agg.setdefault(normalize_text(src), set()).add(normalize_text(tgt))
        return cls({k: frozenset(v) for k, v in agg.items()})


def load_dictionary(path: str | Path) -> Dictionary:
    """Read a MUSE-style word list: one ``source target`` pair per line.

    Lines that do not split into exactly two fields are skipped and counted.
    """
    agg: dict[str, set[str]] = {}
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                skipped += 1
                log.warning("%s:%d: expected 2 fields, got %d; skipped", path, lineno, len(fields))
                continue
            src, tgt = normalize_text(fields[0]), normalize_text(fields[1])
            agg.setdefault(src, set()).add(tgt)
    if not agg:
        raise ValueError(f"dictionary {path} has no usable entries")
    d = Dictionary({k: frozenset(v) for k, v in agg.items()}, skipped)
    log.info("loaded %d translations for %d source words from %s", len(d), len(agg), path)
    return d


@dataclass(frozen=True)
class SynonymPair:
    source: Span
    target: Span
    source_word: str = ""
    target_word: str = ""

    def all_positions(self) -> list[int]:
        return [*range(*self.source), *range(*self.target)]


@dataclass(frozen=True)
class SynonymPairSet:
    pairs: tuple[SynonymPair, ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[SynonymPair]:
        return iter(self.pairs)

    def __bool__(self) -> bool:
        return bool(self.pairs)


def mine_pairs(source: Tokenization, target: Tokenization, dictionary: Dictionary,
               source_offset: int = 0, target_offset: int | None = None) -> SynonymPairSet:
    """Extract one-to-one synonym pairs from a translation pair.

    Source words are scanned left to right. A word is paired when it occurs
    once in the source and exactly one unclaimed target position holds any of
    its translations, and that target word occurs once in the target.
    Spans are shifted by the offsets into instance coordinates; the default
    target offset places ``target`` after ``CLS x SEP``.
    """
    if target_offset is None:
        target_offset = source_offset + len(source) + 1
    src_counts = Counter(source.words)
    tgt_counts = Counter(target.words)
    claimed: set[int] = set()
    found: list[SynonymPair] = []
    for i, word in enumerate(source.words):
        if src_counts[word] != 1:
            continue
        options = dictionary.entries.get(word)
        if not options:
            continue
        hits = [k for k, v in enumerate(target.words) if v in options and k not in claimed]
        if len(hits) != 1 or tgt_counts[target.words[hits[0]]] != 1:
            continue
        k = hits[0]
        s0, s1 = source.spans[i]
        t0, t1 = target.spans[k]
        if s0 == s1 or t0 == t1:
            continue
        claimed.add(k)
        found.append(SynonymPair((s0 + source_offset, s1 + source_offset),
                                 (t0 + target_offset, t1 + target_offset),
                                 word, target.words[k]))
    return SynonymPairSet(tuple(found))


def swap_sides(pairs: SynonymPairSet) -> SynonymPairSet:
    return SynonymPairSet(tuple(SynonymPair(p.target, p.source, p.target_word, p.source_word)
                                for p in pairs))


def drop_masked_pairs(pairs: SynonymPairSet, mask_positions) -> SynonymPairSet:
    """Remove pairs whose source or target span touches a masked position."""
    masked = set(np.asarray(getattr(mask_positions, "mask_positions", mask_positions)).tolist())
    if not masked:
        return pairs
    return SynonymPairSet(tuple(p for p in pairs if masked.isdisjoint(p.all_positions())))
