"""Retrieval and synonym-alignment accuracy, transfer gap, and the ablation runner."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .model import Model, content_positions
from .objectives import LossConfig
from .sampler import ParallelPair, SamplerConfig, build_mono_instance
from .synonyms import Dictionary
from .tensor import DegenerateVectorError
from .tokenizer import PAD_ID, Tokenization
from .trainer import TrainConfig, TrainingDiverged, train_step

log = logging.getLogger(__name__)

SentenceEncoder = Callable[[Sequence[Sequence[int]]], np.ndarray]
TokenEncoder = Callable[[Sequence[Sequence[int]]], list[np.ndarray]]


# encoding --------------------------------------------------------------------


def token_states(model: Model, sequences: Sequence[Sequence[int]], batch_size: int = 64) -> list[np.ndarray]:
    """Eval-mode hidden states of ``CLS s SEP`` for each token sequence.

    Row ``k + 1`` of each result belongs to token ``k`` of the sequence.
    """
    max_len = model.config.max_positions
    out: list[np.ndarray] = []
    for start in range(0, len(sequences), batch_size):
        chunk = [build_mono_instance(Tokenization(tuple(s), (), ()), max_len)
                 for s in sequences[start:start + batch_size]]
        lengths = np.array([len(c) for c in chunk])
        ids = np.full((len(chunk), lengths.max()), PAD_ID, dtype=np.int64)
        for r, c in enumerate(chunk):
            ids[r, : len(c)] = c
        hidden = model.encode(ids, lengths, train=False).data
        out.extend(hidden[r, : lengths[r]] for r in range(len(chunk)))
    return out


def sentence_vectors(model: Model, sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean of content-token states per sequence, encoded on its own."""
    vecs = []
    for seq, h in zip(sequences, token_states(model, sequences)):
        ids = np.array([0, *seq, 0])[: len(h)]
        pos = content_positions(ids, 1, len(h) - 1)
        if pos.size == 0:
            raise ValueError("cannot pool a sentence without content tokens")
        vecs.append(h[pos].mean(axis=0))
    return np.stack(vecs)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("degenerate vector: zero-norm pooled representation")
    return x / norms


def nearest_neighbour_accuracy(queries: np.ndarray, keys: np.ndarray) -> tuple[float, int]:
    """Fraction of rows i whose cosine-argmax over ``keys`` is i; also the tie count.

    Ties go to the lowest index.
    """
    sims = _unit_rows(np.asarray(queries, float)) @ _unit_rows(np.asarray(keys, float)).T
    best = sims.max(axis=1, keepdims=True)
    ties = int(np.sum((sims == best).sum(axis=1) > 1))
    hits = np.argmax(sims, axis=1) == np.arange(len(sims))
    return float(hits.mean()), ties


# metrics ---------------------------------------------------------------------


@dataclass
class RetrievalSet:
    pairs: list[ParallelPair]

    def __post_init__(self):
        if len(self.pairs) < 2:
            raise ValueError("retrieval needs at least two pairs")
        if any(not p.source.ids or not p.target.ids for p in self.pairs):
            raise ValueError("retrieval pairs need non-empty sides")


def retrieval_accuracy(model: Model | SentenceEncoder, rset: RetrievalSet) -> float:
    """Accuracy@1 of matching each source sentence to its translation by cosine."""
    encode = model if callable(model) and not isinstance(model, Model) else \
        (lambda seqs: sentence_vectors(model, seqs))
    src = encode([p.source.ids for p in rset.pairs])
    tgt = encode([p.target.ids for p in rset.pairs])
    acc, ties = nearest_neighbour_accuracy(src, tgt)
    if ties:
        log.info("retrieval: %d queries had tied best scores", ties)
    return acc


@dataclass(frozen=True)
class SynonymItem:
    source: Tokenization
    target: Tokenization
    source_word: int
    target_word: int


def synonym_items(pairs: Sequence[ParallelPair], dictionary: Dictionary) -> list[SynonymItem]:
    """One item per source word that occurs once and has exactly one translation
    occurring once in the paired sentence."""
    items = []
    for p in pairs:
        src_counts, tgt_counts = Counter(p.source.words), Counter(p.target.words)
        for i, w in enumerate(p.source.words):
            if src_counts[w] != 1:
                continue
            hits = [k for k, v in enumerate(p.target.words) if v in dictionary.translations(w)]
            if len(hits) == 1 and tgt_counts[p.target.words[hits[0]]] == 1:
                items.append(SynonymItem(p.source, p.target, i, hits[0]))
    return items


def synonym_alignment_accuracy(model: Model | TokenEncoder, items: Sequence[SynonymItem]) -> float:
    """Fraction of items whose correct target word is the cosine-nearest target word.

    Words are represented by the mean of their subword states; each sentence
    is encoded on its own. Ties go to the lowest word index.
    """
    if not items:
        return 0.0
    encode = model if callable(model) and not isinstance(model, Model) else \
        (lambda seqs: token_states(model, seqs))
    sentences: dict[tuple[int, ...], int] = {}
    for it in items:
        sentences.setdefault(it.source.ids, len(sentences))
        sentences.setdefault(it.target.ids, len(sentences))
    states = encode(list(sentences))

    def word_vec(tok: Tokenization, w: int) -> np.ndarray:
        s, e = tok.spans[w]
        return states[sentences[tok.ids]][s + 1:e + 1].mean(axis=0)

    hits = 0
    for it in items:
        query = word_vec(it.source, it.source_word)
        cands = np.stack([word_vec(it.target, k) for k in range(len(it.target.words))])
        sims = _unit_rows(cands) @ _unit_rows(query[None, :])[0]
        hits += int(np.argmax(sims) == it.target_word)
    return hits / len(items)


def transfer_gap(english_score: float, other_scores: Sequence[float]) -> float:
    """English score minus the mean of the other languages' scores; 0 is perfect transfer."""
    others = list(other_scores)
    if not others:
        raise ValueError("transfer gap needs at least one non-English score")
    return float(english_score - np.mean(others))


# ablation --------------------------------------------------------------------

ABLATION_ROWS = (
    ("MLM+TLM", False, False),
    ("+SeqCTL", True, False),
    ("+TokCTL", False, True),
    ("+MCTL", True, True),
)
METRICS = ("retrieval_acc", "synonym_acc")


@dataclass
class RunResult:
    row: str
    seed: int
    retrieval_acc: float | None = None
    synonym_acc: float | None = None
    first_loss: float | None = None
    final_loss: float | None = None
    stream_hash: str = ""
    failed: str | None = None


@dataclass
class AblationReport:
    rows: list[str]
    seeds: list[int]
    runs: list[RunResult] = field(default_factory=list)

    def run(self, row: str, seed: int) -> RunResult:
        return next(r for r in self.runs if r.row == row and r.seed == seed)

    def mean(self, row: str, metric: str) -> float | None:
        vals = [getattr(r, metric) for r in self.runs if r.row == row and r.failed is None]
        return float(np.mean(vals)) if vals else None

    def delta(self, row: str, metric: str) -> float | None:
        base, cur = self.mean(self.rows[0], metric), self.mean(row, metric)
        return None if base is None or cur is None else cur - base

    def seed_wins(self, row: str, metric: str, margin: float = 0.0) -> int:
        """Seeds on which ``row`` beats the baseline by more than ``margin``
        (by at least ``margin`` when it is positive)."""
        wins = 0
        for s in self.seeds:
            a, b = self.run(row, s), self.run(self.rows[0], s)
            if a.failed or b.failed:
                continue
            d = getattr(a, metric) - getattr(b, metric)
            wins += d >= margin if margin > 0 else d > margin
        return wins

    def seed_majority(self, row: str, metric: str, margin: float = 0.0) -> bool:
        return self.seed_wins(row, metric, margin) > len(self.seeds) / 2

    def stream_hashes_agree(self) -> bool:
        for s in self.seeds:
            hashes = {r.stream_hash for r in self.runs if r.seed == s and r.failed is None}
            if len(hashes) > 1:
                return False
        return True

    def to_json(self) -> dict:
        table = {}
        for row in self.rows:
            table[row] = {m: {"mean": self.mean(row, m), "delta": self.delta(row, m)}
                          for m in METRICS}
            table[row]["failed_seeds"] = [r.seed for r in self.runs
                                          if r.row == row and r.failed is not None]
        return {"rows": self.rows, "metrics": list(METRICS), "seeds": self.seeds,
                "table": table, "runs": [asdict(r) for r in self.runs]}

    def format_table(self) -> str:
        header = f"{'setting':<10}" + "".join(f"{m:>24}" for m in METRICS)
        lines = [header, "-" * len(header)]
        for i, row in enumerate(self.rows):
            cells = []
            for m in METRICS:
                mean = self.mean(row, m)
                if mean is None:
                    cells.append(f"{'failed':>24}")
                elif i == 0:
                    cells.append(f"{100 * mean:>24.1f}")
                else:
                    cells.append(f"{f'{100 * mean:.1f} ({100 * self.delta(row, m):+.1f})':>24}")
            lines.append(f"{row:<10}" + "".join(cells))
        return "\n".join(lines)


@dataclass
class AblationSpec:
    """Everything one ablation cell needs; picklable for worker processes."""

    data: object
    model_config: object
    sampler_config: SamplerConfig
    train_config: TrainConfig
    loss_config: LossConfig
    steps: int


def run_single(spec: AblationSpec, row: str, seq: bool, tok: bool, seed: int) -> RunResult:
    from .pipeline import build_state

    result = RunResult(row, seed)
    loss_cfg = replace(spec.loss_config, enable_seq_ctl=seq, enable_tok_ctl=tok)
    train_cfg = replace(spec.train_config, seed=seed, total_steps=spec.steps,
                        warmup_steps=min(spec.train_config.warmup_steps, spec.steps))
    sampler_cfg = replace(spec.sampler_config, seed=seed)
    state = build_state(spec.data, spec.model_config, sampler_cfg, train_cfg, loss_cfg)
    digest = hashlib.sha256()
    try:
        for _ in range(spec.steps):
            batch = state.sampler.next_batch()
            digest.update(batch.fingerprint())
            bundle, _ = train_step(state, batch)
            if result.first_loss is None:
                result.first_loss = bundle.total
            result.final_loss = bundle.total
        result.stream_hash = digest.hexdigest()
        data = spec.data
        result.retrieval_acc = retrieval_accuracy(state.model, RetrievalSet(data.heldout))
        result.synonym_acc = synonym_alignment_accuracy(
            state.model, synonym_items(data.heldout, data.dictionary))
    except (TrainingDiverged, FloatingPointError, DegenerateVectorError) as exc:
        result.failed = str(exc)
        log.warning("ablation row %s seed %d failed: %s", row, seed, exc)
    return result


def _run_cell(args):
    return run_single(*args)


def run_ablation(spec: AblationSpec, seeds: Sequence[int], workers: int | None = None,
                 rows=ABLATION_ROWS) -> AblationReport:
    """Train every row for every seed with identical data order, init and steps."""
    if workers is None:
        workers = int(os.environ.get("MGCA_THREADS", "1"))
    cells = [(spec, name, seq, tok, s) for s in seeds for name, seq, tok in rows]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    report = AblationReport([r[0] for r in rows], list(seeds), results)
    if not report.stream_hashes_agree():
        log.warning("ablation rows consumed different batch streams")
    return report


def save_report(report: AblationReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2)
