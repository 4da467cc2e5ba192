"""Joint end-to-end training of the coarse predictor and the residual denoiser.

One step: coarse prediction, residual, forward noising, residual
prediction from (x_t, t, detached coarse prediction), frequency-separated
loss, one Adam update of both nets, one EMA update.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import sample_batch
from .freqsep import LossWeights, total_loss
from .model import ModelBundle, UNetConfig, default_configs
from .numerics import Adam, Tensor, concat_channels
from .schedule import linear_schedule, q_sample

__all__ = [
    "TrainConfig",
    "TrainState",
    "NonFiniteLossError",
    "CheckpointError",
    "train_step",
    "ema_update",
    "train",
    "new_training_state",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

LOSS_KEYS = ("pixel", "low", "dm", "high", "total")


@dataclass
class TrainConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta0: float = 2.0
    beta1: float = 0.5
    lr: float = 1e-3
    batch: int = 8
    iters: int = 2000
    ema_decay: float = 0.999
    crop: int = 32
    seed: int = 0
    eval_every: int = 50
    channels: int = 1
    base_channels: int = 16
    channel_multipliers: str = "1,2,2"
    time_embed_dim: int = 32
    augment: bool = True
    freqsep: bool = True
    detach_target: bool = False
    predict_eps: bool = False

    def __post_init__(self):
        for name in ("T", "lr", "batch", "iters", "crop", "eval_every", "channels", "base_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(beta0=self.beta0 if self.freqsep else 0.0, beta1=self.beta1)

    @property
    def multipliers(self) -> tuple[int, ...]:
        return tuple(int(m) for m in str(self.channel_multipliers).split(","))

    def model_configs(self) -> tuple[UNetConfig, UNetConfig]:
        return default_configs(self.channels, self.base_channels, self.multipliers, self.time_embed_dim)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values (config files, checkpoints); unknown keys raise."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].type, raw)
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    if type_name in ("bool", bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if type_name in ("int", int):
        return int(raw)
    if type_name in ("float", float):
        return float(raw)
    return raw.strip()


class NonFiniteLossError(FloatingPointError):
    def __init__(self, terms: dict[str, float]):
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss: {detail}")
        self.terms = terms


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizer: Adam
    rng: np.random.Generator
    config: TrainConfig
    iteration: int = 0


def new_training_state(cfg: TrainConfig) -> TrainState:
    cp_cfg, den_cfg = cfg.model_configs()
    schedule = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    bundle = ModelBundle.create(cp_cfg, den_cfg, seed=cfg.seed, schedule=schedule, predict_eps=cfg.predict_eps)
    opt = Adam(bundle.named_parameters(), lr=cfg.lr)
    # separate stream from the initialisation stream
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(bundle, opt, rng, cfg)


def train_step(bundle: ModelBundle, optimizer: Adam | None, batch: tuple[np.ndarray, np.ndarray],
               cfg: TrainConfig, rng: np.random.Generator,
               t: np.ndarray | None = None, eps: np.ndarray | None = None,
               sever_residual: bool = False, pixel_losses: bool = True) -> dict[str, float]:
    """One optimisation step; returns the five loss terms as floats.

    With `optimizer=None` gradients are left on the parameters and nothing
    is updated. `sever_residual` replaces both attached occurrences of the
    residual with constants so only the detached condition path remains;
    it exists, together with `pixel_losses=False` (drop the coarse-predictor
    branch from the objective), to probe the gradient contract.
    """
    y, x_gt = (np.asarray(a, dtype=np.float32) for a in batch)
    n = y.shape[0]
    s = bundle.schedule
    if t is None:
        t = rng.integers(1, s.T + 1, size=n)  # one timestep per sample
    if eps is None:
        eps = rng.standard_normal(size=x_gt.shape).astype(np.float32)

    cp = bundle.cp_net(ema=False)
    den = bundle.den_net(ema=False)
    x_c = cp(y)
    x_res = Tensor(x_gt) - x_c
    diffused = x_res.detach() if sever_residual else x_res
    x_t = q_sample(diffused, t, eps, s)
    pred = den(concat_channels(x_t, x_c.detach()), t)

    target = x_res.detach() if (sever_residual or cfg.detach_target) else x_res
    if cfg.predict_eps:
        target = Tensor(eps)
    w = cfg.weights
    terms = total_loss(x_c, x_gt, target, pred, w)
    if not pixel_losses:
        terms["total"] = terms["dm"] + terms["high"] * w.beta0
    report = {k: float(terms[k].data) for k in LOSS_KEYS}
    if not all(math.isfinite(v) for v in report.values()):
        raise NonFiniteLossError(report)
    terms["total"].backward()
    if optimizer is not None:
        for name, p in optimizer.params.items():
            if p.grad is None:  # parameter not reached this step
                p.grad = np.zeros_like(p.data)
        optimizer.step()
        for name, p in bundle.named_parameters().items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"parameter {name} became non-finite")
    return report


def ema_update(bundle: ModelBundle, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * live, for every parameter."""
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    for name, p in bundle.named_parameters().items():
        shadow = bundle.ema[name]
        # incremental form: a shadow equal to the live value stays bit-identical
        shadow += np.float32(1.0 - decay) * (p.data - shadow)


def ema_decay_at(step: int, decay: float) -> float:
    # warm-up so early shadows are not dominated by the initial weights
    return min(decay, (1.0 + step) / (10.0 + step))


def train(state: TrainState, corpus: Sequence, iters: int | None = None,
          log_path=None, checkpoint_path=None,
          callback: Callable[[int, dict], None] | None = None) -> TrainState:
    """Run until `state.iteration` reaches `iters` (default: config.iters)."""
    cfg = state.config
    stop = cfg.iters if iters is None else iters
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or state.iteration == 0
        log_file = open(log_path, "w" if fresh else "a", encoding="utf-8", newline="\n")
        if fresh:
            log_file.write("iter,L_pixel,L_low,L_DM,L_high,L_total\n")
    try:
        while state.iteration < stop:
            batch = sample_batch(corpus, state.rng, cfg.batch, cfg.crop, cfg.augment)
            report = train_step(state.bundle, state.optimizer, batch, cfg, state.rng)
            ema_update(state.bundle, ema_decay_at(state.iteration, cfg.ema_decay))
            state.iteration += 1
            if callback is not None:
                callback(state.iteration, report)
            if state.iteration % cfg.eval_every == 0 or state.iteration == stop:
                row = ",".join(repr(report[k]) for k in LOSS_KEYS)
                if log_file is not None:
                    log_file.write(f"{state.iteration},{row}\n")
                    log_file.flush()
                log.info("iter %d total %.5f", state.iteration, report["total"])
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# checkpoint format
#
#   "DDCP" | u32 version | u32 tensor count
#   per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims... | f32 LE payload
#   u32 config length | UTF-8 "key=value" lines
# all integers little-endian.

MAGIC = b"DDCP"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    b, opt = state.bundle, state.optimizer
    tensors = {name: p.data for name, p in b.named_parameters().items()}
    tensors.update({f"ema.{k}": v for k, v in b.ema.items()})
    tensors.update({f"opt.m.{k}": v for k, v in opt.m.items()})
    tensors.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    return tensors


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict[str, str]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4")
        tensors[name] = data.astype(np.float32).reshape(shape)
    (clen,) = struct.unpack("<I", take(4, "config length"))
    text = take(clen, "config").decode("utf-8")
    if pos != len(buf):
        raise CheckpointError("trailing bytes after config block", pos)
    config = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}", pos)
        config[key] = value
    return tensors, config


def save_checkpoint(state: TrainState, path) -> None:
    """Atomically write model, EMA, optimizer moments, config and RNG state."""
    config = dict(line.split("=", 1) for line in state.config.to_lines())
    config["iteration"] = str(state.iteration)
    config["adam_step"] = str(state.optimizer.step_count)
    config["rng_state"] = json.dumps(state.rng.bit_generator.state, sort_keys=True)
    config["format"] = "docdiff"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(_checkpoint_tensors(state), config))
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    tensors, config = decode_checkpoint(Path(path).read_bytes())
    meta = {k: config.pop(k) for k in ("iteration", "adam_step", "rng_state", "format") if k in config}
    cfg = TrainConfig.from_mapping(config)
    state = new_training_state(cfg)
    b, opt = state.bundle, state.optimizer
    live = b.named_parameters()
    expected = set(live) | {f"ema.{k}" for k in live} | {f"opt.m.{k}" for k in live} | {f"opt.v.{k}" for k in live}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise CheckpointError(f"tensor names do not match the config (missing {missing}, extra {extra})", 0)
    for name, p in live.items():
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}", 0)
    for name, p in live.items():
        p.data[...] = tensors[name]
        b.ema[name] = tensors[f"ema.{name}"].copy()
        opt.m[name] = tensors[f"opt.m.{name}"].copy()
        opt.v[name] = tensors[f"opt.v.{name}"].copy()
    state.iteration = int(meta.get("iteration", 0))
    opt.step_count = int(meta.get("adam_step", state.iteration))
    if "rng_state" in meta:
        state.rng.bit_generator.state = json.loads(meta["rng_state"])
    return state
