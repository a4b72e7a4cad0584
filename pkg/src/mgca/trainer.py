"""Optimisation loop: linear warmup/decay, clipped AdamW, metrics and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import IO, Callable

import numpy as np

from .model import Model, ModelConfig, is_decayed
from .objectives import LossBundle, LossConfig, combined_loss
from .sampler import CorpusSampler, SamplerConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"MGCA"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    # off: wallclock_ms is written as 0 so metrics files are byte-reproducible
    log_wallclock: bool = False

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 < warmup_steps <= total_steps")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over the warmup, then linear decay to 0 at total_steps."""
    w, total, peak = config.warmup_steps, config.total_steps, config.lr_peak
    if step <= w:
        return peak * step / w
    if step >= total:
        return 0.0
    return peak * (total - step) / (total - w)


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-6,
                 weight_decay=0.0, decay_filter: Callable[[str], bool] = is_decayed):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay = {k: decay_filter(k) for k in params}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            if self.decay[k] and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    sampler: CorpusSampler
    train_config: TrainConfig
    loss_config: LossConfig
    sampler_config: SamplerConfig
    dropout_rng: np.random.Generator
    step: int = 0


def new_state(model: Model, sampler: CorpusSampler, train_config: TrainConfig,
              loss_config: LossConfig) -> TrainState:
    opt = AdamW(model.params, train_config.adam_beta1, train_config.adam_beta2,
                train_config.adam_eps, train_config.weight_decay)
    return TrainState(model, opt, sampler, train_config, loss_config, sampler.config,
                      np.random.default_rng(train_config.seed + 7919))


def train_step(state: TrainState, batch=None, clock: Callable[[], float] = time.perf_counter) -> tuple[LossBundle, dict]:
    """One forward/backward/update. Returns the loss bundle and its metrics record."""
    start = clock()
    cfg = state.train_config
    if batch is None:
        batch = state.sampler.next_batch()
    model = state.model
    model.zero_grad()
    bundle = combined_loss(batch, model, state.loss_config, train=True, rng=state.dropout_rng)
    lr = lr_schedule(state.step, cfg)
    record = {"step": state.step + 1, "kind": batch.kind, "mlm": bundle.mlm, "tlm": bundle.tlm,
              "seq": bundle.seq, "tok": bundle.tok, "total": bundle.total, "lr": lr,
              "pair_coverage": bundle.pair_coverage, "masked_count": bundle.masked_count}
    if not all(math.isfinite(record[k]) for k in ("mlm", "tlm", "seq", "tok", "total")):
        raise TrainingDiverged(f"non-finite loss at step {state.step + 1}", record)
    if bundle.objective is not None and bundle.objective.requires_grad:
        bundle.objective.backward()
    params = model.parameters()
    record["grad_norm"] = clip_grad_norm(params, cfg.grad_clip_norm)
    state.optimizer.step(lr)
    state.step += 1
    record["wallclock_ms"] = (clock() - start) * 1000.0 if cfg.log_wallclock else 0.0
    return bundle, record


METRIC_KEYS = ("step", "kind", "mlm", "tlm", "seq", "tok", "total", "lr", "pair_coverage",
               "masked_count", "grad_norm", "wallclock_ms")


def metrics_line(record: dict) -> str:
    return json.dumps({k: record[k] for k in METRIC_KEYS}) + "\n"


def train(state: TrainState, steps: int | None = None, metrics: IO[str] | None = None,
          checkpoint_dir: str | Path | None = None, on_step=None) -> list[dict]:
    """Run until ``state.step`` reaches ``steps`` (default total_steps)."""
    cfg = state.train_config
    end = cfg.total_steps if steps is None else steps
    records = []
    while state.step < end:
        _, record = train_step(state)
        records.append(record)
        if metrics is not None:
            metrics.write(metrics_line(record))
        if on_step is not None:
            on_step(state, record)
        every = cfg.checkpoint_every
        if checkpoint_dir is not None and every > 0 and (state.step % every == 0 or state.step == end):
            save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:06d}.ckpt")
    return records


# checkpoints -----------------------------------------------------------------


def _write_tensor(f: IO[bytes], name: str, data: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_exact(f: IO[bytes], n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_tensor(f: IO[bytes]) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
    name = _read_exact(f, n, "name").decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 8 * count, f"tensor {name}"), dtype="<f8")
    return name, data.reshape(shape).astype(np.float64)


def checkpoint_size(state: TrainState) -> int:
    """Exact byte size :func:`save_checkpoint` will produce for ``state``."""
    size = 4 + 4 + 4 + len(_config_blob(state))
    for prefix in ("", "adam.m/", "adam.v/"):
        for name, p in state.model.params.items():
            size += 4 + len((prefix + name).encode()) + 1 + 4 * p.data.ndim + 8 * p.data.size
    return size + 8 + 8 + 4 + len(_rng_blob(state))


def _config_blob(state: TrainState) -> bytes:
    cfg = {
        "model": state.model.config.to_dict(),
        "train": asdict(state.train_config),
        "loss": asdict(state.loss_config),
        "sampler": asdict(state.sampler_config),
        "tensors": len(state.model.params),
    }
    return json.dumps(cfg, sort_keys=True).encode("utf-8")


def _rng_blob(state: TrainState) -> bytes:
    return json.dumps({"sampler": state.sampler.state_dict(),
                       "dropout": state.dropout_rng.bit_generator.state},
                      sort_keys=True).encode("utf-8")


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Binary little-endian layout:

    magic ``MGCA`` | u32 version | u32 len + JSON configs | parameter records |
    Adam first/second moment records | u64 step | u64 Adam t | u32 len + JSON rng state.
    A record is u32 name length, name, u8 rank, u32 dims, float64 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = _config_blob(state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, p in state.model.params.items():
            _write_tensor(f, name, p.data)
        for name in state.model.params:
            _write_tensor(f, "adam.m/" + name, state.optimizer.m[name])
        for name in state.model.params:
            _write_tensor(f, "adam.v/" + name, state.optimizer.v[name])
        f.write(struct.pack("<Q", state.step))
        f.write(struct.pack("<Q", state.optimizer.t))
        rng = _rng_blob(state)
        f.write(struct.pack("<I", len(rng)))
        f.write(rng)
    tmp.replace(path)


@dataclass
class Checkpoint:
    configs: dict
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    step: int
    adam_t: int
    rng_state: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError("bad magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        configs = json.loads(_read_exact(f, n, "config").decode("utf-8"))
        count = configs["tensors"]
        params = dict(_read_tensor(f) for _ in range(count))
        m, v = {}, {}
        for _ in range(count):
            name, data = _read_tensor(f)
            m[name.removeprefix("adam.m/")] = data
        for _ in range(count):
            name, data = _read_tensor(f)
            v[name.removeprefix("adam.v/")] = data
        (step,) = struct.unpack("<Q", _read_exact(f, 8, "step"))
        (adam_t,) = struct.unpack("<Q", _read_exact(f, 8, "adam step"))
        (n,) = struct.unpack("<I", _read_exact(f, 4, "rng length"))
        rng_state = json.loads(_read_exact(f, n, "rng state").decode("utf-8"))
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(configs, params, m, v, step, adam_t, rng_state)


def restore_state(ckpt: Checkpoint, state: TrainState) -> TrainState:
    """Overwrite ``state`` (built from the same configs and corpora) with ``ckpt``."""
    if set(ckpt.params) != set(state.model.params):
        raise CheckpointError("checkpoint parameters do not match the model")
    for name, p in state.model.params.items():
        if ckpt.params[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data = ckpt.params[name].copy()
        p.grad = None
        state.optimizer.m[name] = ckpt.moments_m[name].copy()
        state.optimizer.v[name] = ckpt.moments_v[name].copy()
    state.optimizer.t = ckpt.adam_t
    state.step = ckpt.step
    state.sampler.load_state_dict(ckpt.rng_state["sampler"])
    state.dropout_rng.bit_generator.state = ckpt.rng_state["dropout"]
    return state


def configs_from_checkpoint(ckpt: Checkpoint) -> tuple[ModelConfig, TrainConfig, LossConfig, SamplerConfig]:
    c = ckpt.configs

    def build(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    return (build(ModelConfig, c["model"]), build(TrainConfig, c["train"]),
            build(LossConfig, c["loss"]), build(SamplerConfig, c["sampler"]))
