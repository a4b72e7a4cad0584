"""Glue that turns text corpora and configs into a ready-to-train state."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .model import ModelConfig, init_model
from .objectives import LossConfig
from .sampler import (CorpusSampler, MonoCorpus, ParallelCorpus, ParallelPair, SamplerConfig,
                      read_mono_dir, read_parallel_tsv)
from .synonyms import Dictionary, load_dictionary
from .tokenizer import Vocab, train_vocab
from .toy import CipherCorpus
from .trainer import TrainConfig, TrainState, new_state


@dataclass
class TrainingData:
    vocab: Vocab
    mono: MonoCorpus
    parallel: ParallelCorpus
    dictionary: Dictionary | None
    heldout: list[ParallelPair]


def prepare_cipher_data(corpus: CipherCorpus, vocab_size: int = 600) -> TrainingData:
    vocab = train_vocab(corpus.all_text(), vocab_size)
    return TrainingData(
        vocab=vocab,
        mono=MonoCorpus.from_text(vocab, corpus.mono),
        parallel=ParallelCorpus.from_text(vocab, corpus.train_pairs,
                                          f"{corpus.source_lang}-{corpus.target_lang}"),
        dictionary=Dictionary.from_pairs(corpus.dictionary_pairs()),
        heldout=ParallelCorpus.from_text(vocab, corpus.heldout_pairs).pairs,
    )


def build_state(data: TrainingData, model_config: ModelConfig, sampler_config: SamplerConfig,
                train_config: TrainConfig, loss_config: LossConfig) -> TrainState:
    """Model and sampler seeded from ``train_config.seed`` / ``sampler_config.seed``."""
    if model_config.vocab_size != data.vocab.size:
        model_config = replace(model_config, vocab_size=data.vocab.size)
    longest = max(sampler_config.max_len_mono, sampler_config.max_len_bi)
    if longest > model_config.max_positions:
        raise ValueError(f"sampler max length {longest} exceeds model max_positions "
                         f"{model_config.max_positions}")
    model = init_model(model_config, train_config.seed)
    sampler = CorpusSampler(sampler_config, data.vocab.size, data.mono, data.parallel,
                            data.dictionary)
    return new_state(model, sampler, train_config, loss_config)


def load_training_data(parallel_file: str | Path, mono_dir: str | Path | None = None,
                       dictionary_file: str | Path | None = None, vocab_file: str | Path | None = None,
                       heldout_file: str | Path | None = None, vocab_size: int = 600) -> TrainingData:
    """Read corpora from disk; train a vocabulary on them unless one is given.

    Without a monolingual directory each side of the parallel file doubles as
    monolingual text for its language.
    """
    rows, tag = read_parallel_tsv(parallel_file)
    if mono_dir:
        texts = read_mono_dir(mono_dir)
    else:
        src_lang, _, tgt_lang = tag.partition("-")
        texts = {src_lang or "src": [s for s, _ in rows], tgt_lang or "tgt": [t for _, t in rows]}
    if vocab_file:
        vocab = Vocab.load(vocab_file)
    else:
        corpus = [ln for lines in texts.values() for ln in lines]
        corpus += [x for row in rows for x in row]
        vocab = train_vocab(corpus, vocab_size)
    heldout = []
    if heldout_file:
        held_rows, _ = read_parallel_tsv(heldout_file)
        heldout = ParallelCorpus.from_text(vocab, held_rows, tag).pairs
    return TrainingData(
        vocab=vocab,
        mono=MonoCorpus.from_text(vocab, texts),
        parallel=ParallelCorpus.from_text(vocab, rows, tag),
        dictionary=load_dictionary(dictionary_file) if dictionary_file else None,
        heldout=heldout,
    )
