"""Laplacian frequency split and the four training loss terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, as_tensor, astype, conv2d, mse_mean, pad_replicate, reshape, square_mean

__all__ = [
    "LAPLACIAN",
    "LossWeights",
    "highpass",
    "lowpass",
    "loss_low",
    "loss_high",
    "total_loss",
]

LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]], dtype=np.float64)
_KERNEL = Tensor(LAPLACIAN.reshape(1, 1, 3, 3).copy())


@dataclass(frozen=True)
class LossWeights:
    beta0: float = 2.0  # weight of the filtered term inside each branch
    beta1: float = 0.5  # weight of the coarse-predictor branch

    def __post_init__(self):
        if self.beta0 < 0 or self.beta1 <= 0:
            raise ValueError(f"invalid loss weights {self}")


def highpass(x) -> Tensor:
    """Per-channel 4-neighbour Laplacian with replicate borders, in float64.

    Float64 keeps the low/high split exact: a sum of five float32 values is
    representable, so lowpass + highpass reproduces the input bit for bit.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"highpass expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        raise ValueError(f"highpass needs H, W >= 3, got {x.shape}")
    flat = reshape(astype(x, np.float64), (n * c, 1, h, w))
    out = conv2d(pad_replicate(flat, 1, 1, 1, 1), _KERNEL)
    return reshape(out, (n, c, h, w))


def lowpass(x) -> Tensor:
    x = as_tensor(x)
    return astype(x, np.float64) - highpass(x)


def loss_low(x_c, x_gt) -> Tensor:
    x_c, x_gt = as_tensor(x_c), as_tensor(x_gt)
    if x_c.shape != x_gt.shape:
        raise ValueError(f"loss_low shape mismatch: {x_c.shape} vs {x_gt.shape}")
    return square_mean(lowpass(x_c - x_gt))


def loss_high(x0, x0_hat) -> Tensor:
    x0, x0_hat = as_tensor(x0), as_tensor(x0_hat)
    if x0.shape != x0_hat.shape:
        raise ValueError(f"loss_high shape mismatch: {x0.shape} vs {x0_hat.shape}")
    return square_mean(highpass(x0 - x0_hat))


def total_loss(x_c, x_gt, x0, x0_hat, w: LossWeights = LossWeights()) -> dict[str, Tensor]:
    """All loss terms plus their weighted total under the key ``"total"``.

    Filtered terms are skipped entirely when beta0 == 0.
    """
    terms = {"pixel": mse_mean(x_c, x_gt), "dm": mse_mean(x0, x0_hat)}
    if w.beta0:
        terms["low"] = loss_low(x_c, x_gt)
        terms["high"] = loss_high(x0, x0_hat)
        cp_branch = terms["pixel"] + terms["low"] * w.beta0
        dm_branch = terms["dm"] + terms["high"] * w.beta0
    else:
        zero = Tensor(np.zeros((), dtype=np.float64))
        terms["low"] = zero
        terms["high"] = zero
        cp_branch, dm_branch = terms["pixel"], terms["dm"]
    terms["total"] = cp_branch * w.beta1 + dm_branch
    return terms
