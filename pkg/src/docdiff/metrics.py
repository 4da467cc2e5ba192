"""Distortion and binarization metrics.

Binary images follow the DIBCO convention: 0 is text (ink), 1 is background.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "psnr",
    "ssim",
    "to_gray",
    "otsu_threshold",
    "binarize",
    "f_measure",
    "pseudo_f_measure",
    "zhang_suen_thin",
]

PSNR_CAP = 100.0


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """PSNR in dB for unit-range images, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b, "psnr")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def to_gray(img) -> np.ndarray:
    """(C, H, W) or (H, W) -> (H, W); RGB uses 0.299/0.587/0.114 luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    raise ValueError(f"expected (H, W), (1, H, W) or (3, H, W), got {img.shape}")


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = img.shape
    tmp = sum(g[j] * img[:, j:j + w - k + 1] for j in range(k))
    return sum(g[i] * tmp[i:i + h - k + 1, :] for i in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, unit dynamic range."""
    a, b = to_gray(a), to_gray(b)
    _check_same(a, b, "ssim")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def otsu_threshold(img) -> float:
    """Global threshold maximising between-class variance on 256 levels.

    Levels are round(v * 255). With best level k the threshold is
    (k + 0.5) / 255, so `img > threshold` selects levels above k. Ties go to
    the lowest k.
    """
    levels = np.clip(np.floor(to_gray(img) * 255.0 + 0.5), 0, 255).astype(np.int64).ravel()
    if levels.size == 0:
        raise ValueError("otsu_threshold needs a non-empty image")
    hist = np.bincount(levels, minlength=256).astype(np.float64)
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    between = np.nan_to_num(between, nan=0.0, posinf=0.0)
    best = int(np.argmax(between))  # first maximum == lowest level on ties
    return (best + 0.5) / 255.0


def binarize(img, threshold: float | None = 0.5) -> np.ndarray:
    """Bilevel uint8 image, 1 where the value exceeds `threshold` (background).

    `threshold=None` uses Otsu.
    """
    gray = to_gray(img)
    if threshold is None:
        threshold = otsu_threshold(gray)
    return (gray > threshold).astype(np.uint8)


def _as_text_mask(img, what: str) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} must be bilevel (0 = text, 1 = background)")
    return arr == 0


def _precision_recall(pred_text: np.ndarray, ref_text: np.ndarray) -> tuple[float, float]:
    tp = np.count_nonzero(pred_text & ref_text)
    n_pred, n_ref = np.count_nonzero(pred_text), np.count_nonzero(ref_text)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_ref if n_ref else 0.0
    return precision, recall


def _harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 200.0 * p * r / (p + r)


def f_measure(pred, gt) -> tuple[float, float, float]:
    """(FM, precision, recall), all as percentages, for the text class."""
    pred_text, gt_text = _as_text_mask(pred, "pred"), _as_text_mask(gt, "gt")
    _check_same(pred_text, gt_text, "f_measure")
    if not gt_text.any() and not pred_text.any():
        return 100.0, 100.0, 100.0
    p, r = _precision_recall(pred_text, gt_text)
    return _harmonic(p, r), 100.0 * p, 100.0 * r


def pseudo_f_measure(pred, gt) -> float:
    """F-measure with recall taken against the skeleton of the GT text.

    This is the skeleton-recall form; the distance-based weighting of false
    positives used by the DIBCO toolkit is not applied.
    """
    pred_text, gt_text = _as_text_mask(pred, "pred"), _as_text_mask(gt, "gt")
    _check_same(pred_text, gt_text, "pseudo_f_measure")
    if not gt_text.any() and not pred_text.any():
        return 100.0
    p, _ = _precision_recall(pred_text, gt_text)
    _, r_skel = _precision_recall(pred_text, zhang_suen_thin(gt_text))
    return _harmonic(p, r_skel)


def zhang_suen_thin(mask) -> np.ndarray:
    """Zhang-Suen thinning of a boolean foreground mask."""
    img = np.pad(np.asarray(mask, dtype=bool), 1).astype(np.uint8)
    while True:
        changed = False
        for first in (True, False):
            p2 = img[:-2, 1:-1]
            p3 = img[:-2, 2:]
            p4 = img[1:-1, 2:]
            p5 = img[2:, 2:]
            p6 = img[2:, 1:-1]
            p7 = img[2:, :-2]
            p8 = img[1:-1, :-2]
            p9 = img[:-2, :-2]
            ring = (p2, p3, p4, p5, p6, p7, p8, p9, p2)
            b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
            a = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.uint8) for i in range(8))
            if first:
                c = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                c = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            remove = (img[1:-1, 1:-1] == 1) & (b >= 2) & (b <= 6) & (a == 1) & c
            if remove.any():
                img[1:-1, 1:-1][remove] = 0
                changed = True
        if not changed:
            return img[1:-1, 1:-1].astype(bool)
