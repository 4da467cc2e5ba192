"""Deterministic residual sampling, whole-image and tiled enhancement.

Anything with a `schedule` attribute and two numpy hooks can be enhanced:

    coarse(y) -> x_c                 # (N, C, H, W) -> same shape
    denoise(x_t, t, cond) -> x0_hat  # predicted residual

`ModelBundle` provides both; tests substitute stubs and oracles.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .schedule import NoiseSchedule, StepPlan, make_step_plan, predict_x0_from_eps, reverse_step

__all__ = [
    "Enhancer",
    "TilePlan",
    "make_tile_plan",
    "sample_residual",
    "enhance",
    "refine_external",
]

DEFAULT_TILE = 128
DEFAULT_OVERLAP = 16


class Enhancer(Protocol):
    schedule: NoiseSchedule

    def coarse(self, y: np.ndarray) -> np.ndarray: ...

    def denoise(self, x_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile_h: int
    tile_w: int
    stride: int
    origins: tuple[tuple[int, int], ...]  # (top, left)

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.height, self.width), dtype=np.int64)
        for top, left in self.origins:
            counts[top:top + self.tile_h, left:left + self.tile_w] += 1
        return counts

    @property
    def processed_pixels(self) -> int:
        return len(self.origins) * self.tile_h * self.tile_w

    @property
    def overhead(self) -> float:
        """Extra pixels pushed through the nets, as a fraction of the image."""
        return self.processed_pixels / (self.height * self.width) - 1.0


def _axis_origins(length: int, tile: int, stride: int) -> list[int]:
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)  # clamp the last tile inside the image
    return starts


def make_tile_plan(height: int, width: int, tile: int = DEFAULT_TILE,
                   stride: int | None = None) -> TilePlan:
    if stride is None:
        stride = tile - DEFAULT_OVERLAP
    if tile < 1 or not 1 <= stride <= tile:
        raise ValueError(f"need tile >= 1 and 1 <= stride <= tile, got tile={tile}, stride={stride}")
    th, tw = min(tile, height), min(tile, width)
    origins = tuple((top, left)
                    for top in _axis_origins(height, th, stride)
                    for left in _axis_origins(width, tw, stride))
    return TilePlan(height, width, th, tw, stride, origins)


def _batched(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3:
        return img[None], True
    if img.ndim != 4:
        raise ValueError(f"expected CHW or NCHW image, got {img.shape}")
    return img, False


def sample_residual(model: Enhancer, cond: np.ndarray, plan: StepPlan, seed=0,
                    stochastic: bool = False) -> np.ndarray:
    """Run the reverse process from seeded Gaussian noise down to t = 0.

    `seed` is anything `np.random.default_rng` accepts. The starting noise
    is the only random input unless `stochastic` (an ablation that injects
    ancestral noise at every hop) is set.
    """
    s = model.schedule
    if plan.T != s.T:
        raise ValueError(f"step plan is for T={plan.T} but the schedule has T={s.T}")
    cond_b, single = _batched(cond)
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal(size=cond_b.shape).astype(np.float32)
    predict_eps = getattr(model, "predict_eps", False)
    x0_hat = x_t
    for t_from, t_to in plan.transitions():
        out = np.asarray(model.denoise(x_t, t_from, cond_b), dtype=np.float32)
        x0_hat = predict_x0_from_eps(x_t, out, t_from, s) if predict_eps else out
        if stochastic and t_to > 0:
            ab_f, ab_t = s.alpha_bar[t_from], s.alpha_bar[t_to]
            var = (1.0 - ab_t) / (1.0 - ab_f) * (1.0 - ab_f / ab_t)
            eps_hat = (x_t - np.sqrt(ab_f) * x0_hat) / np.sqrt(1.0 - ab_f)
            x_t = (np.sqrt(ab_t) * x0_hat + np.sqrt(1.0 - ab_t - var) * eps_hat
                   + np.sqrt(var) * rng.standard_normal(size=x_t.shape)).astype(np.float32)
        else:
            x_t = reverse_step(x_t, x0_hat, t_from, t_to, s)
    return x0_hat[0] if single else x0_hat


def _tile_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def _restore(model: Enhancer, img: np.ndarray, steps: int, seed, use_coarse: bool) -> np.ndarray:
    plan = make_step_plan(model.schedule.T, steps)
    x_c = np.asarray(model.coarse(img), dtype=np.float32) if use_coarse else img
    return x_c.astype(np.float64) + sample_residual(model, x_c, plan, seed)


def _run(model: Enhancer, img: np.ndarray, steps: int, mode: str, seed: int,
         use_coarse: bool, tile: int, stride: int | None) -> np.ndarray:
    if not 1 <= steps <= model.schedule.T:
        raise ValueError(f"steps must lie in [1, {model.schedule.T}], got {steps}")
    batch, single = _batched(img)
    if mode == "full":
        out = _restore(model, batch, steps, seed, use_coarse)
    elif mode == "native":
        n, c, h, w = batch.shape
        tp = make_tile_plan(h, w, tile, stride)
        acc = np.zeros((n, c, h, w), dtype=np.float64)
        count = np.zeros((h, w), dtype=np.float64)
        for i, (top, left) in enumerate(tp.origins):
            patch = batch[:, :, top:top + tp.tile_h, left:left + tp.tile_w]
            acc[:, :, top:top + tp.tile_h, left:left + tp.tile_w] += _restore(
                model, patch, steps, _tile_seed(seed, i), use_coarse)
            count[top:top + tp.tile_h, left:left + tp.tile_w] += 1.0
        out = acc / count
    else:
        raise ValueError(f"mode must be 'native' or 'full', got {mode!r}")
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[0] if single else out


def enhance(model: Enhancer, y: np.ndarray, steps: int = 5, mode: str = "full", seed: int = 0,
            tile: int = DEFAULT_TILE, stride: int | None = None) -> np.ndarray:
    """Coarse prediction plus sampled residual, clamped to [0, 1].

    `mode="native"` runs the same pipeline on overlapping tiles and averages
    the overlaps; each tile draws its starting noise from (seed, tile index).
    """
    return _run(model, y, steps, mode, seed, True, tile, stride)


def refine_external(model: Enhancer, coarse: np.ndarray, steps: int = 5, mode: str = "full",
                    seed: int = 0, tile: int = DEFAULT_TILE, stride: int | None = None) -> np.ndarray:
    """Sharpen a restoration produced elsewhere: the given image replaces the
    coarse predictor's output as the condition."""
    return _run(model, coarse, steps, mode, seed, False, tile, stride)
