"""MLM/TLM cross-entropy and the sequence- and token-level contrastive losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import Model, content_positions, pooling_matrix
from .sampler import BILINGUAL, IGNORE, Batch, MaskedInstance
from .synonyms import SynonymPairSet, drop_masked_pairs
from .tensor import Tensor

TOK_AVERAGES = ("nonempty", "all")


@dataclass
class LossConfig:
    temperature: float = 0.05
    enable_seq_ctl: bool = True
    enable_tok_ctl: bool = True
    # contrastive representations from a second, unmasked pass
    ctl_on_clean_input: bool = False
    # instances averaged over in the token loss: those with pairs, or all
    tok_average: str = "nonempty"
    mlm_weight: float = 1.0
    tlm_weight: float = 1.0
    seq_weight: float = 1.0
    tok_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.tok_average not in TOK_AVERAGES:
            raise ValueError(f"tok_average must be one of {TOK_AVERAGES}")


@dataclass
class LossBundle:
    kind: str
    mlm: float = 0.0
    tlm: float = 0.0
    seq: float = 0.0
    tok: float = 0.0
    total: float = 0.0
    pair_coverage: float = 0.0
    masked_count: int = 0
    objective: Tensor | None = field(default=None, repr=False)

    def record(self) -> dict:
        return {"kind": self.kind, "mlm": self.mlm, "tlm": self.tlm, "seq": self.seq,
                "tok": self.tok, "total": self.total, "pair_coverage": self.pair_coverage}


def _zero() -> Tensor:
    return Tensor(0.0)


def seq_ctl_loss(x_reps: Tensor, y_reps: Tensor, temperature: float) -> Tensor:
    """In-batch sequence contrastive loss over n translation pairs.

    Each of the 2n representations queries the other 2n - 1 with its
    translation as the positive; the result is the mean of the 2n terms.
    """
    x_reps, y_reps = T.as_tensor(x_reps), T.as_tensor(y_reps)
    if x_reps.ndim != 2 or x_reps.shape != y_reps.shape or x_reps.shape[0] < 1:
        raise ValueError(f"expected two (n, d) blocks, got {x_reps.shape} and {y_reps.shape}")
    n = x_reps.shape[0]
    z = T.normalize(T.concat([x_reps, y_reps], axis=0))
    logits = (z @ T.transpose(z)) * (1.0 / temperature)
    candidates = ~np.eye(2 * n, dtype=bool)
    targets = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return T.mean(T.softmax_cross_entropy(logits, targets, candidates))


@dataclass
class TokenUnits:
    """Candidate set of one bilingual instance for the token loss.

    ``groups[u]`` lists the positions pooled into unit ``u``; ``pairs`` holds
    (source unit, target unit) indices of the synonym pairs.
    """

    groups: list[np.ndarray]
    pairs: list[tuple[int, int]]


def token_units(length: int, content: np.ndarray, pairs: SynonymPairSet) -> TokenUnits:
    """Pool each paired word span into one unit; other content positions stay single."""
    in_content = np.zeros(length, dtype=bool)
    in_content[np.asarray(content, dtype=np.int64)] = True
    groups: list[np.ndarray] = []
    claimed = np.zeros(length, dtype=bool)
    unit_pairs = []
    for p in pairs:
        for s, e in (p.source, p.target):
            if not 0 <= s < e <= length:
                raise IndexError(f"span {(s, e)} lies outside an instance of length {length}")
        a = np.arange(*p.source)
        b = np.arange(*p.target)
        unit_pairs.append((len(groups), len(groups) + 1))
        groups.extend([a, b])
        claimed[a] = True
        claimed[b] = True
    for pos in np.flatnonzero(in_content & ~claimed):
        groups.append(np.array([pos]))
    return TokenUnits(groups, unit_pairs)


def tok_ctl_loss(token_reps: Tensor, pair_sets: Sequence[SynonymPairSet], temperature: float,
                 content: Sequence[np.ndarray] | None = None, average: str = "nonempty") -> Tensor:
    """Token-to-token contrastive loss over a batch of bilingual instances.

    ``token_reps`` is ``(batch, length, hidden)`` (or ``(length, hidden)`` for a
    single instance). ``content[b]`` lists the positions of instance ``b``
    that belong to the candidate set; by default every position does. For
    each pair both sides query all other units of their own instance.
    Instance losses are averaged over instances with at least one pair
    (``average="nonempty"``) or over the whole batch (``"all"``).
    """
    token_reps = T.as_tensor(token_reps)
    if token_reps.ndim == 2:
        token_reps = T.reshape(token_reps, (1,) + token_reps.shape)
    batch, length, hidden = token_reps.shape
    if len(pair_sets) != batch:
        raise ValueError(f"{len(pair_sets)} pair sets for {batch} instances")
    if content is None:
        content = [np.arange(length)] * batch
    units = [token_units(length, content[b], pair_sets[b]) for b in range(batch)]
    active = [b for b in range(batch) if units[b].pairs]
    if not active:
        return _zero()
    denom = len(active) if average == "nonempty" else batch

    groups, owner, offsets = [], [], []
    for b, u in enumerate(units):
        offsets.append(len(groups))
        groups.extend(g + b * length for g in u.groups)
        owner.extend([b] * len(u.groups))
    owner = np.asarray(owner)
    queries, targets, weights = [], [], []
    for b in active:
        w = 1.0 / (2 * len(units[b].pairs) * denom)
        for a, c in units[b].pairs:
            queries += [offsets[b] + a, offsets[b] + c]
            targets += [offsets[b] + c, offsets[b] + a]
            weights += [w, w]
    queries = np.asarray(queries)

    flat = T.reshape(token_reps, (batch * length, hidden))
    reps = T.normalize(T.matmul(Tensor(pooling_matrix(groups, batch * length)), flat))
    logits = (T.gather_rows(reps, queries) @ T.transpose(reps)) * (1.0 / temperature)
    candidates = owner[None, :] == owner[queries][:, None]
    candidates[np.arange(len(queries)), queries] = False
    losses = T.softmax_cross_entropy(logits, np.asarray(targets), candidates)
    return T.sum(losses * np.asarray(weights))


def mlm_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows; rows labelled IGNORE are skipped."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(labels != IGNORE)
    if keep.size == 0:
        return _zero()
    if keep.size != labels.size:
        logits = T.gather_rows(logits, keep)
    return T.mean(T.softmax_cross_entropy(logits, labels[keep]))


def masked_lm_loss(model: Model, hidden: Tensor, instances: Sequence[MaskedInstance]) -> tuple[Tensor, int]:
    """MLM loss of a padded ``(batch, length, hidden)`` block; returns (loss, masked count)."""
    batch, length, width = hidden.shape
    rows, labels = [], []
    for b, inst in enumerate(instances):
        rows.append(inst.mask_positions + b * length)
        labels.append(inst.label_ids[inst.mask_positions])
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    if rows.size == 0:
        return _zero(), 0
    flat = T.reshape(hidden, (batch * length, width))
    logits = model.mlm_logits(T.gather_rows(flat, rows))
    return mlm_loss(logits, np.concatenate(labels)), int(rows.size)


def segment_positions(ids: np.ndarray, boundary: int) -> tuple[np.ndarray, np.ndarray]:
    """Content positions of the first and second segment of ``CLS x SEP y SEP``.

    A segment whose tokens are all masked falls back to its full span.
    """
    end = len(ids) - 1
    first = content_positions(ids, 1, boundary)
    second = content_positions(ids, boundary + 1, end)
    if first.size == 0:
        first = np.arange(1, boundary)
    if second.size == 0:
        second = np.arange(boundary + 1, end)
    return first, second


def combined_loss(batch: Batch, model: Model, config: LossConfig, train: bool = False,
                  rng: np.random.Generator | None = None) -> LossBundle:
    """Monolingual batch: MLM. Bilingual batch: TLM + sequence + token contrastive."""
    ids, lengths = batch.padded()
    hidden = model.encode(ids, lengths, train=train, rng=rng)
    lm, masked = masked_lm_loss(model, hidden, batch.instances)

    if batch.kind != BILINGUAL:
        objective = lm * config.mlm_weight
        return LossBundle(batch.kind, mlm=lm.item(), total=objective.item(),
                          masked_count=masked, objective=objective)

    n = len(batch.instances)
    clean = config.ctl_on_clean_input
    want_ctl = config.enable_seq_ctl or config.enable_tok_ctl
    reps_hidden = hidden
    if want_ctl and clean:
        clean_ids = ids.copy()
        for b, inst in enumerate(batch.instances):
            clean_ids[b, : len(inst)] = inst.clean_ids
        reps_hidden = model.encode(clean_ids, lengths, train=train, rng=rng)
        rep_ids = clean_ids
    else:
        rep_ids = ids

    pair_sets = [ps if clean else drop_masked_pairs(ps, inst.mask_positions)
                 for ps, inst in zip(batch.pair_sets, batch.instances)]
    coverage = sum(1 for ps in pair_sets if len(ps)) / n if n else 0.0

    seq = _zero()
    if config.enable_seq_ctl:
        length, width = reps_hidden.shape[1], reps_hidden.shape[2]
        firsts, seconds = [], []
        for b, inst in enumerate(batch.instances):
            f, s = segment_positions(rep_ids[b, : len(inst)], inst.segment_boundary)
            firsts.append(f + b * length)
            seconds.append(s + b * length)
        flat = T.reshape(reps_hidden, (n * length, width))
        pooled = T.matmul(Tensor(pooling_matrix(firsts + seconds, n * length)), flat)
        x_reps = T.gather_rows(pooled, np.arange(n))
        y_reps = T.gather_rows(pooled, np.arange(n, 2 * n))
        seq = seq_ctl_loss(x_reps, y_reps, config.temperature)

    tok = _zero()
    if config.enable_tok_ctl:
        content = []
        for b, inst in enumerate(batch.instances):
            pos = content_positions(rep_ids[b, : len(inst)])
            if not clean:
                pos = np.setdiff1d(pos, inst.mask_positions)
            content.append(pos)
        tok = tok_ctl_loss(reps_hidden, pair_sets, config.temperature, content, config.tok_average)

    objective = lm * config.tlm_weight + seq * config.seq_weight + tok * config.tok_weight
    return LossBundle(batch.kind, tlm=lm.item(), seq=seq.item(), tok=tok.item(),
                      total=objective.item(), pair_coverage=coverage, masked_count=masked,
                      objective=objective)
