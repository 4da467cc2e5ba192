"""Convolution-only U-Nets for the coarse predictor and the residual denoiser.

Both nets share one layout: stride-2 convolution downsampling, four dilated
convolutions at the lowest resolution, and nearest-upsample decoding with
skip concatenation. There is no attention and no normalization. The
denoiser additionally receives a sinusoidal timestep embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .numerics import (
    Tensor,
    concat_channels,
    conv2d,
    crop,
    linear,
    pad_replicate,
    reshape,
    silu,
    upsample_nearest,
)
from .schedule import NoiseSchedule, linear_schedule

__all__ = [
    "UNetConfig",
    "UNet",
    "ModelBundle",
    "build_unet",
    "time_embedding",
    "bottleneck",
    "cp_forward",
    "denoiser_forward",
    "count_parameters",
]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    bottleneck_dilations: tuple[int, ...] = (1, 2, 4, 8)
    time_embed_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "bottleneck_dilations", tuple(int(d) for d in self.bottleneck_dilations))
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ValueError(f"channel counts must be positive: {self}")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError(f"channel_multipliers must be non-empty and positive: {self}")
        if len(self.bottleneck_dilations) != 4 or min(self.bottleneck_dilations) < 1:
            raise ValueError(f"exactly four positive bottleneck dilations required: {self}")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even and non-negative: {self}")

    @property
    def depth(self) -> int:
        return len(self.channel_multipliers)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]


def _conv_param(rng: np.random.Generator, cout: int, cin: int, k: int, zero: bool = False):
    if zero:
        w = np.zeros((cout, cin, k, k), dtype=np.float32)
    else:
        # He-uniform, suited to SiLU-activated stacks without normalization
        bound = np.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
    return w, np.zeros(cout, dtype=np.float32)


def _linear_param(rng: np.random.Generator, cout: int, cin: int):
    bound = np.sqrt(6.0 / cin)
    return rng.uniform(-bound, bound, size=(cout, cin)).astype(np.float32), np.zeros(cout, dtype=np.float32)


def build_unet(cfg: UNetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Named parameter set for `cfg`, initialised deterministically from `rng`.

    The final convolution starts at zero, so a fresh net predicts nothing.
    """
    params: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k=3, zero=False):
        params[f"{name}.w"], params[f"{name}.b"] = _conv_param(rng, cout, cin, k, zero)

    def dense(name, cout, cin):
        params[f"{name}.w"], params[f"{name}.b"] = _linear_param(rng, cout, cin)

    def resblock(name, cin, cout):
        conv(f"{name}.conv1", cout, cin)
        if cfg.time_embed_dim:
            dense(f"{name}.temb", cout, cfg.time_embed_dim)
        conv(f"{name}.conv2", cout, cout)
        if cin != cout:
            conv(f"{name}.skip", cout, cin, k=1)

    widths = cfg.widths
    if cfg.time_embed_dim:
        dense("time.fc1", cfg.time_embed_dim, cfg.time_embed_dim)
        dense("time.fc2", cfg.time_embed_dim, cfg.time_embed_dim)
    conv("in", widths[0], cfg.in_channels)
    prev = widths[0]
    for level, width in enumerate(widths):
        resblock(f"enc{level}", prev, width)
        prev = width
        if level < cfg.depth - 1:
            conv(f"down{level}", width, width)
    for i, _ in enumerate(cfg.bottleneck_dilations):
        conv(f"mid{i}", prev, prev)
    for level in reversed(range(cfg.depth)):
        width = widths[level]
        resblock(f"dec{level}", prev + width, width)
        prev = width
        if level > 0:
            conv(f"up{level}", widths[level - 1], width)
            prev = widths[level - 1]
    conv("out", cfg.out_channels, prev, zero=True)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def count_parameters(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: dim/2 sines then dim/2 cosines, with frequencies
    on a geometric ladder from 1 down to 1e-4. Returns shape (len(t), dim)."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even number, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 1e-4 ** (np.arange(half) / (half - 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


def bottleneck(h: Tensor, params: Mapping[str, Tensor], dilations) -> Tensor:
    """Four residual dilated 3x3 convolutions at the lowest resolution."""
    for i, d in enumerate(dilations):
        h = h + conv2d(silu(h), params[f"mid{i}.w"], params[f"mid{i}.b"], padding=d, dilation=d)
    return h


class UNet:
    """Forward pass over a named parameter set built by `build_unet`."""

    def __init__(self, cfg: UNetConfig, params: Mapping[str, Tensor]):
        self.cfg = cfg
        self.params = dict(params)

    @property
    def multiple(self) -> int:
        return 2 ** (self.cfg.depth - 1)

    def _resblock(self, name: str, x: Tensor, temb: Tensor | None) -> Tensor:
        p = self.params
        h = conv2d(silu(x), p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1)
        if temb is not None:
            proj = linear(temb, p[f"{name}.temb.w"], p[f"{name}.temb.b"])
            h = h + reshape(proj, proj.shape + (1, 1))
        h = conv2d(silu(h), p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=1)
        skip = x
        if f"{name}.skip.w" in p:
            skip = conv2d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
        return h + skip

    def __call__(self, x, t=None) -> Tensor:
        cfg, p = self.cfg, self.params
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
        temb = None
        if cfg.time_embed_dim:
            if t is None:
                raise ValueError("this net is timestep-conditioned; pass t")
            t = np.broadcast_to(np.asarray(t), (x.shape[0],))
            e = Tensor(time_embedding(t, cfg.time_embed_dim))
            e = linear(e, p["time.fc1.w"], p["time.fc1.b"])
            temb = silu(linear(silu(e), p["time.fc2.w"], p["time.fc2.b"]))

        h0, w0 = x.shape[2:]
        m = self.multiple
        ph, pw = (-h0) % m, (-w0) % m
        if ph or pw:
            x = pad_replicate(x, 0, ph, 0, pw)

        h = conv2d(x, p["in.w"], p["in.b"], padding=1)
        skips = []
        for level in range(cfg.depth):
            h = self._resblock(f"enc{level}", h, temb)
            skips.append(h)
            if level < cfg.depth - 1:
                h = conv2d(silu(h), p[f"down{level}.w"], p[f"down{level}.b"], stride=2, padding=1)
        h = bottleneck(h, p, cfg.bottleneck_dilations)
        for level in reversed(range(cfg.depth)):
            h = self._resblock(f"dec{level}", concat_channels(h, skips[level]), temb)
            if level > 0:
                h = conv2d(upsample_nearest(h, 2), p[f"up{level}.w"], p[f"up{level}.b"], padding=1)
        out = conv2d(silu(h), p["out.w"], p["out.b"], padding=1)
        if ph or pw:
            out = crop(out, 0, 0, h0, w0)
        return out


def default_configs(channels: int = 1, base_channels: int = 16,
                    channel_multipliers=(1, 2, 2), time_embed_dim: int = 32) -> tuple[UNetConfig, UNetConfig]:
    cp = UNetConfig(channels, channels, base_channels, tuple(channel_multipliers))
    den = replace(cp, in_channels=2 * channels, time_embed_dim=time_embed_dim)
    return cp, den


@dataclass
class ModelBundle:
    """Both nets, their EMA shadows and the noise schedule."""

    cp_config: UNetConfig
    den_config: UNetConfig
    cp_params: dict[str, Tensor]
    den_params: dict[str, Tensor]
    schedule: NoiseSchedule = field(default_factory=linear_schedule)
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    predict_eps: bool = False
    use_ema: bool = True

    @classmethod
    def create(cls, cp_config: UNetConfig, den_config: UNetConfig, seed: int = 0,
               schedule: NoiseSchedule | None = None, predict_eps: bool = False) -> "ModelBundle":
        if den_config.in_channels != cp_config.out_channels + den_config.out_channels:
            raise ValueError("denoiser input must be x_t channels plus condition channels")
        rng = np.random.default_rng(seed)
        cp = build_unet(cp_config, rng)
        den = build_unet(den_config, rng)
        bundle = cls(cp_config, den_config, cp, den, schedule or linear_schedule(), predict_eps=predict_eps)
        bundle.ema = {k: p.data.copy() for k, p in bundle.named_parameters().items()}
        return bundle

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"cp.{k}": v for k, v in self.cp_params.items()}
        out.update({f"den.{k}": v for k, v in self.den_params.items()})
        return out

    def parameter_counts(self) -> tuple[int, int]:
        return count_parameters(self.cp_params), count_parameters(self.den_params)

    def _frozen(self, prefix: str, live: Mapping[str, Tensor], ema: bool) -> dict[str, Tensor]:
        if ema:
            return {k: Tensor(self.ema[f"{prefix}.{k}"]) for k in live}
        return {k: Tensor(v.data) for k, v in live.items()}

    def cp_net(self, ema: bool | None = None, frozen: bool = False) -> UNet:
        ema = self.use_ema if ema is None else ema
        if not frozen and not ema:
            return UNet(self.cp_config, self.cp_params)
        return UNet(self.cp_config, self._frozen("cp", self.cp_params, ema))

    def den_net(self, ema: bool | None = None, frozen: bool = False) -> UNet:
        ema = self.use_ema if ema is None else ema
        if not frozen and not ema:
            return UNet(self.den_config, self.den_params)
        return UNet(self.den_config, self._frozen("den", self.den_params, ema))

    # numpy-in / numpy-out hooks used by the samplers
    def coarse(self, y: np.ndarray) -> np.ndarray:
        return cp_forward(self, y)

    def denoise(self, x_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        return denoiser_forward(self, x_t, t, cond)


def _as_batch(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3:
        return img[None], True
    if img.ndim != 4:
        raise ValueError(f"expected CHW or NCHW image, got shape {img.shape}")
    return img, False


def cp_forward(bundle: ModelBundle, y: np.ndarray, ema: bool | None = None) -> np.ndarray:
    """Coarse prediction for a CHW or NCHW image, unclamped."""
    batch, single = _as_batch(y)
    if batch.shape[1] != bundle.cp_config.in_channels:
        raise ValueError(f"coarse predictor takes {bundle.cp_config.in_channels} channels, got {batch.shape[1]}")
    out = bundle.cp_net(ema, frozen=True)(batch).data
    return out[0] if single else out


def denoiser_forward(bundle: ModelBundle, x_t: np.ndarray, t, cond: np.ndarray,
                     ema: bool | None = None) -> np.ndarray:
    """Predicted residual x0 (or noise, for an eps-predicting bundle)."""
    xb, single = _as_batch(x_t)
    cb, _ = _as_batch(cond)
    if xb.shape[0] != cb.shape[0] or xb.shape[2:] != cb.shape[2:]:
        raise ValueError(f"x_t {xb.shape} and condition {cb.shape} differ in batch or spatial size")
    x = concat_channels(Tensor(xb), Tensor(cb))
    out = bundle.den_net(ema, frozen=True)(x, np.broadcast_to(np.asarray(t), (xb.shape[0],))).data
    return out[0] if single else out
