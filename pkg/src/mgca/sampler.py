"""Language sampling, alternating mono/bilingual batches, TLM layout and masking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .synonyms import Dictionary, SynonymPairSet, mine_pairs, swap_sides
from .tokenizer import (
    CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, Tokenization, Vocab, encode,
)

log = logging.getLogger(__name__)

IGNORE = -100
NON_MASKABLE = (CLS_ID, SEP_ID, MASK_ID, PAD_ID)

MONOLINGUAL = "monolingual"
BILINGUAL = "bilingual"


@dataclass
class SamplerConfig:
    alpha: float = 0.5
    batch_size: int = 16
    mono_mask_rate: float = 0.15
    bi_mask_rate: float = 0.25
    max_len_mono: int = 64
    max_len_bi: int = 64
    seed: int = 0
    tlm_random_order: bool = False

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        for name in ("mono_mask_rate", "bi_mask_rate"):
            rate = getattr(self, name)
            if not 0 < rate < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {rate}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_len_mono < 3 or self.max_len_bi < 5:
            raise ValueError("max lengths too small to hold special tokens")


def language_sampling_probs(counts: Sequence[float], alpha: float) -> np.ndarray:
    """Exponent-smoothed multinomial over languages.

    ``q_i = p_i**alpha / sum_j p_j**alpha`` with ``p_i = n_i / sum_k n_k``.
    Languages with zero sentences get probability 0.
    """
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if np.any(n < 0):
        raise ValueError("counts must be non-negative")
    if not np.any(n > 0):
        raise ValueError("at least one language needs a non-zero sentence count")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    p = n / n.sum()
    w = np.where(p > 0, p, 0.0) ** alpha
    w[p == 0] = 0.0
    return w / w.sum()


def draw_languages(probs: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(probs), size=count, p=probs)


# corpora ---------------------------------------------------------------------


@dataclass
class MonoCorpus:
    lines: dict[str, list[Tokenization]]

    def __post_init__(self):
        if not any(self.lines.values()):
            raise ValueError("monolingual corpus has no sentences")

    @property
    def languages(self) -> list[str]:
        return list(self.lines)

    @property
    def counts(self) -> list[int]:
        return [len(v) for v in self.lines.values()]

    @classmethod
    def from_text(cls, vocab: Vocab, texts: Mapping[str, Sequence[str]]) -> MonoCorpus:
        return cls({lang: [encode(vocab, t) for t in lines if t.strip()]
                    for lang, lines in sorted(texts.items())})


@dataclass(frozen=True)
class ParallelPair:
    source: Tokenization
    target: Tokenization
    tag: str = ""


@dataclass
class ParallelCorpus:
    pairs: list[ParallelPair]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("parallel corpus is empty")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_text(cls, vocab: Vocab, rows: Sequence[tuple[str, str]], tag: str = "") -> ParallelCorpus:
        pairs = []
        for src, tgt in rows:
            if not src.strip() or not tgt.strip():
                continue
            pairs.append(ParallelPair(encode(vocab, src), encode(vocab, tgt), tag))
        return cls(pairs)


def read_mono_dir(path: str | Path) -> dict[str, list[str]]:
    """``<lang>.txt`` files, one sentence per line."""
    out = {}
    for f in sorted(Path(path).glob("*.txt")):
        out[f.stem] = [ln for ln in f.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not out:
        raise FileNotFoundError(f"no <lang>.txt files in {path}")
    return out


def read_parallel_tsv(path: str | Path) -> tuple[list[tuple[str, str]], str]:
    """``source<TAB>target`` rows; the tag comes from a ``<src>-<tgt>.tsv`` filename."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) != 2:
            continue
        rows.append((parts[0], parts[1]))
    return rows, Path(path).stem


# instances -------------------------------------------------------------------


@dataclass
class MaskedInstance:
    input_ids: np.ndarray
    label_ids: np.ndarray
    mask_positions: np.ndarray
    segment_boundary: int | None = None
    clean_ids: np.ndarray | None = None

    @property
    def attention_length(self) -> int:
        return int(self.input_ids.shape[0])

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])


@dataclass
class TLMInstance:
    ids: np.ndarray
    segment_boundary: int
    pairs: SynonymPairSet = field(default_factory=SynonymPairSet)


def _truncate(tok: Tokenization, n: int) -> Tokenization:
    if n >= len(tok.ids):
        return tok
    words, spans = [], []
    for w, (s, e) in zip(tok.words, tok.spans):
        if s >= n:
            break
        words.append(w)
        spans.append((s, min(e, n)))
    return Tokenization(tok.ids[:n], tuple(words), tuple(spans))


def tlm_budget(len_x: int, len_y: int, max_len: int) -> tuple[int, int]:
    """Token counts kept from each side so ``CLS x SEP y SEP`` fits ``max_len``.

    Overlong pairs are cut in proportion to their lengths; a non-empty side
    keeps at least one token whenever the budget allows.
    """
    room = max_len - 3
    if len_x + len_y <= room:
        return len_x, len_y
    keep_x = int(room * len_x / (len_x + len_y))
    if len_x and room >= 2:
        keep_x = min(max(keep_x, 1), room - (1 if len_y else 0))
    keep_y = min(len_y, room - keep_x)
    keep_x = min(len_x, room - keep_y)
    return keep_x, keep_y


def build_tlm_instance(source: Tokenization, target: Tokenization, max_len: int,
                       dictionary: Dictionary | None = None, swap: bool = False) -> TLMInstance | None:
    """``CLS x SEP y SEP`` (``CLS y SEP x SEP`` with ``swap``).

    Returns None when either side is empty after truncation. Synonym pairs
    are mined from the truncated sides and always list the first segment's
    span as ``source``.
    """
    keep_x, keep_y = tlm_budget(len(source), len(target), max_len)
    if keep_x == 0 or keep_y == 0:
        return None
    x = _truncate(source, keep_x)
    y = _truncate(target, keep_y)
    first, second = (y, x) if swap else (x, y)
    ids = np.array([CLS_ID, *first.ids, SEP_ID, *second.ids, SEP_ID], dtype=np.int64)
    boundary = 1 + len(first)
    if dictionary is None:
        pairs = SynonymPairSet()
    elif swap:
        pairs = swap_sides(mine_pairs(x, y, dictionary, boundary + 1, 1))
    else:
        pairs = mine_pairs(x, y, dictionary, 1, boundary + 1)
    return TLMInstance(ids, boundary, pairs)


def build_mono_instance(tok: Tokenization, max_len: int) -> np.ndarray:
    body = tok.ids[: max_len - 2]
    return np.array([CLS_ID, *body, SEP_ID], dtype=np.int64)


def maskable(ids: np.ndarray) -> np.ndarray:
    return ~np.isin(ids, NON_MASKABLE)


def apply_mask(ids, rate: float, rng: np.random.Generator, vocab_size: int,
               segment_boundary: int | None = None) -> MaskedInstance:
    """Bernoulli(rate) selection over maskable positions, then 80/10/10 corruption.

    Selected positions become MASK with probability 0.8, a random non-special
    token with 0.1, and stay unchanged with 0.1; their labels hold the
    original ids.
    """
    if not 0 < rate < 1:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    clean = np.asarray(ids, dtype=np.int64)
    n = clean.shape[0]
    selected = (rng.random(n) < rate) & maskable(clean)
    action = rng.random(n)
    random_ids = rng.integers(NUM_SPECIAL, max(vocab_size, NUM_SPECIAL + 1), size=n)
    inputs = clean.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    inputs[to_mask] = MASK_ID
    inputs[to_random] = random_ids[to_random]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[selected] = clean[selected]
    return MaskedInstance(inputs, labels, np.flatnonzero(selected), segment_boundary, clean)


# batches ---------------------------------------------------------------------


@dataclass
class Batch:
    kind: str
    instances: list[MaskedInstance]
    source_ids: list[tuple[int, ...]] = field(default_factory=list)
    target_ids: list[tuple[int, ...]] = field(default_factory=list)
    pair_sets: list[SynonymPairSet] = field(default_factory=list)
    languages: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """(ids padded with PAD to the longest instance, lengths)."""
        lengths = np.array([len(i) for i in self.instances], dtype=np.int64)
        ids = np.full((len(self.instances), int(lengths.max())), PAD_ID, dtype=np.int64)
        for row, inst in enumerate(self.instances):
            ids[row, : len(inst)] = inst.input_ids
        return ids, lengths

    def fingerprint(self) -> bytes:
        parts = [self.kind.encode()]
        for inst in self.instances:
            parts.append(inst.input_ids.tobytes())
            parts.append(inst.label_ids.tobytes())
        for ps in self.pair_sets:
            parts.append(repr([(p.source, p.target) for p in ps]).encode())
        return b"|".join(parts)


class CorpusSampler:
    """Alternates monolingual and bilingual batches, starting with monolingual."""

    def __init__(self, config: SamplerConfig, vocab_size: int, mono: MonoCorpus,
                 parallel: ParallelCorpus, dictionary: Dictionary | None = None):
        self.config = config
        self.vocab_size = vocab_size
        self.mono = mono
        self.parallel = parallel
        self.dictionary = dictionary
        self.languages = mono.languages
        self.probs = language_sampling_probs(mono.counts, config.alpha)
        self.rng = np.random.default_rng(config.seed)
        self.batches_emitted = 0
        self.epoch = 0
        self.cursor = 0
        self.skipped = 0
        self.order = self.rng.permutation(len(parallel))

    # state -------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "batches_emitted": self.batches_emitted,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "skipped": self.skipped,
            "order": self.order.tolist(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.batches_emitted = state["batches_emitted"]
        self.epoch = state["epoch"]
        self.cursor = state["cursor"]
        self.skipped = state["skipped"]
        self.order = np.array(state["order"], dtype=np.int64)

    # drawing -------------------------------------------------------------------

    def draw_languages(self, count: int) -> np.ndarray:
        """Indices into ``self.languages`` drawn from the smoothed multinomial."""
        return draw_languages(self.probs, count, self.rng)

    def _next_pair_index(self) -> int:
        if self.cursor >= len(self.order):
            self.epoch += 1
            self.cursor = 0
            self.order = self.rng.permutation(len(self.parallel))
        idx = int(self.order[self.cursor])
        self.cursor += 1
        return idx

    def next_batch(self) -> Batch:
        kind = MONOLINGUAL if self.batches_emitted % 2 == 0 else BILINGUAL
        batch = self._mono_batch() if kind == MONOLINGUAL else self._bilingual_batch()
        self.batches_emitted += 1
        return batch

    def _mono_batch(self) -> Batch:
        cfg = self.config
        instances, langs = [], []
        while len(instances) < cfg.batch_size:
            lang = self.languages[int(self.draw_languages(1)[0])]
            store = self.mono.lines[lang]
            tok = store[int(self.rng.integers(len(store)))]
            if not tok.ids:
                self.skipped += 1
                continue
            ids = build_mono_instance(tok, cfg.max_len_mono)
            instances.append(apply_mask(ids, cfg.mono_mask_rate, self.rng, self.vocab_size))
            langs.append(lang)
        return Batch(MONOLINGUAL, instances, languages=langs)

    def _bilingual_batch(self) -> Batch:
        cfg = self.config
        batch = Batch(BILINGUAL, [])
        attempts = 0
        while len(batch.instances) < cfg.batch_size:
            attempts += 1
            if attempts > 100 * cfg.batch_size + len(self.parallel):
                raise RuntimeError("parallel corpus yields no usable pairs")
            pair = self.parallel.pairs[self._next_pair_index()]
            swap = bool(cfg.tlm_random_order and self.rng.random() < 0.5)
            inst = build_tlm_instance(pair.source, pair.target, cfg.max_len_bi,
                                      self.dictionary, swap=swap)
            if inst is None:
                self.skipped += 1
                log.debug("skipped empty pair after truncation (total %d)", self.skipped)
                continue
            masked = apply_mask(inst.ids, cfg.bi_mask_rate, self.rng, self.vocab_size,
                                inst.segment_boundary)
            batch.instances.append(masked)
            batch.source_ids.append(tuple(inst.ids[1:inst.segment_boundary].tolist()))
            batch.target_ids.append(tuple(inst.ids[inst.segment_boundary + 1:-1].tolist()))
            batch.pair_sets.append(inst.pairs)
            batch.languages.append(pair.tag)
        return batch
