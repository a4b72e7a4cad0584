"""Finite-difference gradient checks for the primitives, losses and full encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig
from .objectives import LossConfig, combined_loss, mlm_loss, seq_ctl_loss, tok_ctl_loss
from .sampler import SamplerConfig
from .synonyms import SynonymPair, SynonymPairSet
from .tensor import Tensor, gradcheck

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
# Central differences at h=1e-5 carry roundoff near 1e-16 * |loss| / h, about
# 1e-10 here, so gradient entries smaller than this floor are held to an
# absolute error of MODEL_TOL * MODEL_FLOOR = 1e-9 instead of a relative one.
MODEL_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _leaf(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 4, 3), _leaf(rng, 3, 2)
    c, d = _leaf(rng, 4, 3), _leaf(rng, 3)
    pos = _leaf(rng, 4, 3, positive=True)
    x3 = _leaf(rng, 2, 4, 3)
    gain, bias = _leaf(rng, 3), _leaf(rng, 3)
    u, v = _leaf(rng, 5), _leaf(rng, 5)
    table = _leaf(rng, 6, 3)
    logits = _leaf(rng, 3, 5)
    w = rng.normal(size=(4, 2))
    w3 = rng.normal(size=(4, 3))

    cases = {
        "matmul": (lambda: T.sum((a @ b) * w), [a, b]),
        "batched_matmul": (lambda: T.sum(T.matmul(x3, b) * rng_fixed(x3.shape[:-1] + (2,))), [x3, b]),
        "add_broadcast": (lambda: T.sum((a + d) * w3), [a, d]),
        "sub": (lambda: T.sum((a - c) * w3), [a, c]),
        "mul": (lambda: T.sum(a * c * w3), [a, c]),
        "div": (lambda: T.sum(a / pos * w3), [a, pos]),
        "exp": (lambda: T.sum(T.exp(a) * w3), [a]),
        "log": (lambda: T.sum(T.log(pos) * w3), [pos]),
        "sqrt": (lambda: T.sum(T.sqrt(pos) * w3), [pos]),
        "tanh": (lambda: T.sum(T.tanh(a) * w3), [a]),
        "gelu": (lambda: T.sum(T.gelu(a) * w3), [a]),
        "softmax": (lambda: T.sum(T.softmax(a, axis=-1) * w3), [a]),
        "layer_norm": (lambda: T.sum(T.layer_norm(x3, gain, bias) * rng_fixed(x3.shape)), [x3, gain, bias]),
        "normalize": (lambda: T.sum(T.normalize(a) * w3), [a]),
        "cosine_similarity": (lambda: T.cosine_similarity(u, v), [u, v]),
        "embedding": (lambda: T.sum(T.gather_rows(table, [[0, 2, 2], [5, 1, 0]]) * rng_fixed((2, 3, 3))), [table]),
        "cross_entropy": (lambda: T.sum(T.softmax_cross_entropy(logits, [1, 0, 4]) * np.array([1.0, 2.0, 0.5])), [logits]),
        "masked_cross_entropy": (lambda: T.sum(T.softmax_cross_entropy(
            logits, [1, 0, 4], np.array([[1, 1, 0, 1, 0], [1, 0, 1, 1, 1], [0, 1, 1, 0, 1]], bool))), [logits]),
        "sum_mean": (lambda: T.mean(T.sum(a * w3, axis=0)) + T.sum(T.mean(a, axis=1) * T.mean(a, axis=1)), [a]),
        "transpose_reshape": (lambda: T.sum(T.reshape(T.transpose(x3, (0, 2, 1)), (6, 4)) * rng_fixed((6, 4))), [x3]),
        "concat_gather": (lambda: T.sum(T.gather_rows(T.concat([a, c], axis=0), [7, 1, 1]) * rng_fixed((3, 3))), [a, c]),
    }
    return [CheckResult(name, gradcheck(fn, params), PRIMITIVE_TOL) for name, (fn, params) in cases.items()]


_FIXED: dict[tuple, np.ndarray] = {}


def rng_fixed(shape) -> np.ndarray:
    """A fixed random weighting per shape, so projections stay constant across calls."""
    shape = tuple(shape)
    if shape not in _FIXED:
        _FIXED[shape] = np.random.default_rng(list(shape)).normal(size=shape)
    return _FIXED[shape]


def loss_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    x, y = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    for tau in (0.05, 0.1, 1.0):
        out.append(CheckResult(f"seq_ctl tau={tau}",
                               gradcheck(lambda: seq_ctl_loss(x, y, tau), [x, y]), PRIMITIVE_TOL))
    hidden = _leaf(rng, 2, 8, 5)
    sets = [SynonymPairSet((SynonymPair((1, 2), (5, 7)), SynonymPair((2, 4), (4, 5)))),
            SynonymPairSet((SynonymPair((1, 3), (6, 7)),))]
    content = [np.arange(1, 8), np.array([1, 2, 3, 4, 6])]
    for tau in (0.1, 1.0):
        out.append(CheckResult(f"tok_ctl tau={tau}",
                               gradcheck(lambda: tok_ctl_loss(hidden, sets, tau, content), [hidden]),
                               PRIMITIVE_TOL))
    logits = _leaf(rng, 5, 7)
    labels = np.array([3, -100, 0, 6, -100])
    out.append(CheckResult("mlm_loss", gradcheck(lambda: mlm_loss(logits, labels), [logits]),
                           PRIMITIVE_TOL))
    return out


def desk_setup(hidden: int = 16, layers: int = 2, seed: int = 0, batch_size: int = 4):
    """A small model and one batch of each kind from a tiny cipher corpus."""
    from .pipeline import build_state, prepare_cipher_data
    from .toy import make_cipher_corpus
    from .trainer import TrainConfig

    corpus = make_cipher_corpus(n_words=30, n_train=40, n_heldout=10, n_mono=40,
                                min_len=3, max_len=6, seed=seed)
    data = prepare_cipher_data(corpus, vocab_size=120)
    mcfg = ModelConfig(vocab_size=data.vocab.size, layers=layers, hidden=hidden, heads=2,
                       ffn=2 * hidden, dropout=0.0, max_positions=32)
    state = build_state(data, mcfg, SamplerConfig(batch_size=batch_size, seed=seed, max_len_mono=32,
                                              max_len_bi=32),
                        TrainConfig(total_steps=10, warmup_steps=1, seed=seed), LossConfig())
    mono = state.sampler.next_batch()
    bi = state.sampler.next_batch()
    return state.model, mono, bi


def model_checks(seed: int = 0, fraction: float = 0.01) -> list[CheckResult]:
    """Gradients of MLM and the full bilingual objective through a 2-layer encoder."""
    model, mono, bi = desk_setup(seed=seed)
    params = model.parameters()
    rng = np.random.default_rng(seed + 1)
    out = []
    cfgs = {
        "mlm (monolingual batch)": (mono, LossConfig()),
        "combined tlm+seq+tok": (bi, LossConfig(temperature=0.1)),
        "seq_ctl through encoder": (bi, LossConfig(temperature=0.1, enable_tok_ctl=False,
                                                   tlm_weight=0.0)),
        "tok_ctl through encoder": (bi, LossConfig(temperature=0.1, enable_seq_ctl=False,
                                                   tlm_weight=0.0)),
    }
    for name, (batch, cfg) in cfgs.items():
        fn = lambda batch=batch, cfg=cfg: combined_loss(batch, model, cfg).objective
        err = gradcheck(fn, params, fraction=fraction, rng=rng, floor=MODEL_FLOOR)
        out.append(CheckResult(name, err, MODEL_TOL))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + loss_checks(seed) + model_checks(seed)
