"""Post-LN transformer encoder with tied MLM head and no language embedding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID

# finite stand-in for -inf on padded keys; exp() of it underflows to exactly 0
ATTENTION_MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1
    max_positions: int = 128
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.layers < 0 or self.vocab_size <= NUM_SPECIAL or self.max_positions < 1:
            raise ValueError("invalid model size")

    def to_dict(self) -> dict:
        return asdict(self)


# reference values for the full-scale model (not instantiated here)
FULL_SCALE = dict(layers=24, hidden=1024, ffn=4096, heads=16, dropout=0.1)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, h),
        "embeddings.position": (config.max_positions, h),
        "embeddings.norm.gain": (h,),
        "embeddings.norm.bias": (h,),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        for name in ("query", "key", "value", "output"):
            shapes[p + f"attention.{name}.weight"] = (h, h)
            shapes[p + f"attention.{name}.bias"] = (h,)
        shapes[p + "attention.norm.gain"] = (h,)
        shapes[p + "attention.norm.bias"] = (h,)
        shapes[p + "ffn.inner.weight"] = (h, f)
        shapes[p + "ffn.inner.bias"] = (f,)
        shapes[p + "ffn.outer.weight"] = (f, h)
        shapes[p + "ffn.outer.bias"] = (h,)
        shapes[p + "ffn.norm.gain"] = (h,)
        shapes[p + "ffn.norm.bias"] = (h,)
    shapes["mlm.bias"] = (config.vocab_size,)
    return shapes


def is_decayed(name: str) -> bool:
    """Weight matrices and embeddings decay; biases and norm parameters do not."""
    return not (name.endswith(".bias") or name.endswith(".gain"))


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> Model:
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                   for k, v in self.params.items()})

    # forward -----------------------------------------------------------------

    def encode(self, ids, lengths=None, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states for a ``(batch, length)`` id array (or one 1-D sequence).

        Positions at or beyond ``lengths[b]`` are padding: they are masked out
        of every attention distribution. Dropout runs only with ``train`` and
        an ``rng``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        batch, length = ids.shape
        cfg = self.config
        if length > cfg.max_positions:
            raise ValueError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
        if lengths is None:
            lengths = np.full(batch, length)
        lengths = np.asarray(lengths, dtype=np.int64).reshape(batch)
        drop_rng = rng if train else None
        rate = cfg.dropout

        key_pad = np.arange(length)[None, :] >= lengths[:, None]
        bias = np.where(key_pad, ATTENTION_MASK_BIAS, 0.0)[:, None, None, :]

        x = T.embedding(self["embeddings.token"], ids)
        x = x + T.gather_rows(self["embeddings.position"], np.arange(length))
        x = T.layer_norm(x, self["embeddings.norm.gain"], self["embeddings.norm.bias"],
                         cfg.layer_norm_eps)
        x = T.dropout(x, rate, drop_rng)
        for i in range(cfg.layers):
            x = self._layer(i, x, bias, drop_rng)
        if single:
            x = T.reshape(x, (length, cfg.hidden))
        return x

    def _layer(self, i: int, x: Tensor, bias: np.ndarray, rng) -> Tensor:
        cfg = self.config
        p = f"layers.{i}."
        batch, length, hidden = x.shape
        heads = cfg.heads
        dh = hidden // heads

        def project(name):
            y = x @ self[p + f"attention.{name}.weight"] + self[p + f"attention.{name}.bias"]
            return T.transpose(T.reshape(y, (batch, length, heads, dh)), (0, 2, 1, 3))

        q, k, v = project("query"), project("key"), project("value")
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + bias
        attn = T.dropout(T.softmax(scores, axis=-1), cfg.dropout, rng)
        ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (batch, length, hidden))
        out = ctx @ self[p + "attention.output.weight"] + self[p + "attention.output.bias"]
        out = T.dropout(out, cfg.dropout, rng)
        x = T.layer_norm(x + out, self[p + "attention.norm.gain"], self[p + "attention.norm.bias"],
                         cfg.layer_norm_eps)

        inner = T.gelu(x @ self[p + "ffn.inner.weight"] + self[p + "ffn.inner.bias"])
        out = inner @ self[p + "ffn.outer.weight"] + self[p + "ffn.outer.bias"]
        out = T.dropout(out, cfg.dropout, rng)
        return T.layer_norm(x + out, self[p + "ffn.norm.gain"], self[p + "ffn.norm.bias"],
                            cfg.layer_norm_eps)

    def mlm_logits(self, hidden_rows: Tensor) -> Tensor:
        """Vocabulary scores from the tied token embedding."""
        return hidden_rows @ T.transpose(self["embeddings.token"]) + self["mlm.bias"]


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """Weights ~ N(0, 0.02); biases 0; norm gains 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


def parameter_count(config: ModelConfig) -> int:
    """Closed form for the number of scalars in :func:`init_model`'s output."""
    v, p, h, f, n = config.vocab_size, config.max_positions, config.hidden, config.ffn, config.layers
    per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h
    return v * h + p * h + 2 * h + n * per_layer + v


def pooling_matrix(groups: list[np.ndarray], total: int) -> np.ndarray:
    """Row r averages the flat positions in ``groups[r]``."""
    mat = np.zeros((len(groups), total))
    for r, g in enumerate(groups):
        g = np.asarray(g, dtype=np.int64)
        if g.size == 0:
            raise ValueError("cannot pool an empty segment")
        np.add.at(mat[r], g, 1.0 / g.size)
    return mat


def pool(hidden: Tensor, positions) -> Tensor:
    """Mean of the rows of ``hidden`` (length x hidden) at ``positions``."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise ValueError("cannot pool an empty segment")
    return T.mean(T.gather_rows(hidden, positions), axis=0)


def content_positions(ids, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Positions in ``ids[start:stop]`` holding lexical tokens.

    CLS, SEP, MASK and PAD are excluded; UNK counts as content.
    """
    ids = np.asarray(ids)
    stop = len(ids) if stop is None else stop
    idx = np.arange(start, stop)
    keep = ~np.isin(ids[start:stop], (CLS_ID, SEP_ID, MASK_ID, PAD_ID))
    return idx[keep]
