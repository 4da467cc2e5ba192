"""Synthetic paired document corpora, netpbm I/O, patch sampling.

Images are float32 arrays in [0, 1] laid out planar, (C, H, W). Conversion
to the interleaved byte layout happens only inside `load_image` and
`save_image`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GLYPHS",
    "DegradationSpec",
    "PNMError",
    "render_text_patch",
    "ink_coverage",
    "sample_degradation",
    "degrade",
    "gaussian_kernel1d",
    "motion_kernel",
    "convolve2d_replicate",
    "gaussian_blur",
    "load_image",
    "save_image",
    "write_corpus",
    "load_corpus",
    "sample_training_pair",
    "sample_batch",
    "augment",
]

# 5x7 bitmap font, one byte per column, bit 0 is the top row.
_FONT = {
    "A": (0x7E, 0x11, 0x11, 0x11, 0x7E), "B": (0x7F, 0x49, 0x49, 0x49, 0x36),
    "C": (0x3E, 0x41, 0x41, 0x41, 0x22), "D": (0x7F, 0x41, 0x41, 0x22, 0x1C),
    "E": (0x7F, 0x49, 0x49, 0x49, 0x41), "F": (0x7F, 0x09, 0x09, 0x09, 0x01),
    "G": (0x3E, 0x41, 0x49, 0x49, 0x7A), "H": (0x7F, 0x08, 0x08, 0x08, 0x7F),
    "I": (0x00, 0x41, 0x7F, 0x41, 0x00), "J": (0x20, 0x40, 0x41, 0x3F, 0x01),
    "K": (0x7F, 0x08, 0x14, 0x22, 0x41), "L": (0x7F, 0x40, 0x40, 0x40, 0x40),
    "M": (0x7F, 0x02, 0x0C, 0x02, 0x7F), "N": (0x7F, 0x04, 0x08, 0x10, 0x7F),
    "O": (0x3E, 0x41, 0x41, 0x41, 0x3E), "P": (0x7F, 0x09, 0x09, 0x09, 0x06),
    "Q": (0x3E, 0x41, 0x51, 0x21, 0x5E), "R": (0x7F, 0x09, 0x19, 0x29, 0x46),
    "S": (0x46, 0x49, 0x49, 0x49, 0x31), "T": (0x01, 0x01, 0x7F, 0x01, 0x01),
    "U": (0x3F, 0x40, 0x40, 0x40, 0x3F), "V": (0x1F, 0x20, 0x40, 0x20, 0x1F),
    "W": (0x3F, 0x40, 0x38, 0x40, 0x3F), "X": (0x63, 0x14, 0x08, 0x14, 0x63),
    "Y": (0x07, 0x08, 0x70, 0x08, 0x07), "Z": (0x61, 0x51, 0x49, 0x45, 0x43),
    "0": (0x3E, 0x51, 0x49, 0x45, 0x3E), "1": (0x00, 0x42, 0x7F, 0x40, 0x00),
    "2": (0x42, 0x61, 0x51, 0x49, 0x46), "3": (0x21, 0x41, 0x45, 0x4B, 0x31),
    "4": (0x18, 0x14, 0x12, 0x7F, 0x10), "5": (0x27, 0x45, 0x45, 0x45, 0x39),
    "6": (0x3C, 0x4A, 0x49, 0x49, 0x30), "7": (0x01, 0x71, 0x09, 0x05, 0x03),
    "8": (0x36, 0x49, 0x49, 0x49, 0x36), "9": (0x06, 0x49, 0x49, 0x29, 0x1E),
}


def _glyph_bitmap(cols: Sequence[int]) -> np.ndarray:
    return np.array([[(c >> row) & 1 for c in cols] for row in range(7)], dtype=bool)


GLYPHS: dict[str, np.ndarray] = {ch: _glyph_bitmap(cols) for ch, cols in _FONT.items()}
_ALPHABET = tuple(GLYPHS)

KINDS = ("blur", "inknoise", "bleedthrough", "watermark", "seal")


# ---------------------------------------------------------------------------
# clean text

def _text_mask(rng: np.random.Generator, height: int, width: int, scale: int,
               line_gap: int, char_gap: int) -> np.ndarray:
    """Boolean ink mask of text lines; lines start at a random phase so the
    patch looks like a crop out of a larger page."""
    mask = np.zeros((height, width), dtype=bool)
    gh, gw = 7 * scale, 5 * scale
    pitch_y, pitch_x = gh + line_gap, gw + char_gap
    y = -int(rng.integers(0, pitch_y))
    while y < height:
        x = -int(rng.integers(0, pitch_x))
        while x < width:
            if rng.random() < 0.15:  # word space
                x += pitch_x
                continue
            glyph = GLYPHS[_ALPHABET[rng.integers(len(_ALPHABET))]]
            big = np.kron(glyph, np.ones((scale, scale), dtype=bool))
            y0, x0 = max(y, 0), max(x, 0)
            y1, x1 = min(y + gh, height), min(x + gw, width)
            if y1 > y0 and x1 > x0:
                mask[y0:y1, x0:x1] |= big[y0 - y:y1 - y, x0 - x:x1 - x]
            x += pitch_x
        y += pitch_y
    return mask


def ink_coverage(img: np.ndarray) -> float:
    return float(np.mean(np.asarray(img) < 0.5))


def render_text_patch(rng: np.random.Generator, size: int) -> np.ndarray:
    """A bilevel 1 x size x size page crop: black glyphs on white.

    Redraws until the ink coverage lies in [0.10, 0.60].
    """
    if size < 32:
        raise ValueError(f"patch size must be >= 32, got {size}")
    while True:
        scale = int(rng.choice([2, 3]))
        mask = _text_mask(rng, size, size, scale,
                          line_gap=int(rng.integers(scale, 3 * scale + 1)),
                          char_gap=scale)
        cover = mask.mean()
        if 0.10 <= cover <= 0.60:
            return np.where(mask, 0.0, 1.0).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# degradations

@dataclass
class DegradationSpec:
    """Parameters of one synthetic corruption.

    Only the fields relevant to `kind` are read. `opacity` is the weight the
    document keeps under a watermark or seal: out = o * doc + (1 - o) * mark.
    """

    kind: str
    # blur
    blur_type: str = "gaussian"
    kernel_size: int = 5
    sigma: float = 1.5
    motion_length: int = 5
    motion_angle: float = 0.0
    # inknoise
    blob_count: int = 6
    radius_range: tuple[float, float] = (1.5, 5.0)
    polarity: str = "dark"
    blob_alpha: tuple[float, float] = (0.3, 0.8)
    # bleedthrough, watermark, seal
    opacity: float = 0.8
    mark_color: tuple[float, ...] = (0.5,)
    rotation: float = 0.0
    glyph_scale: int = 2
    text: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")


def sample_degradation(kind: str, rng: np.random.Generator, channels: int = 1) -> DegradationSpec:
    """Draw random parameters for `kind` within the documented ranges."""
    if kind == "blur":
        if rng.random() < 0.5:
            return DegradationSpec("blur", blur_type="gaussian",
                                   kernel_size=int(rng.choice([3, 5, 7, 9])),
                                   sigma=float(rng.uniform(0.8, 2.5)))
        return DegradationSpec("blur", blur_type="motion",
                               motion_length=int(rng.integers(3, 10)),
                               motion_angle=float(rng.uniform(0.0, 180.0)))
    if kind == "inknoise":
        return DegradationSpec("inknoise", blob_count=int(rng.integers(3, 12)),
                               radius_range=(1.5, float(rng.uniform(3.0, 8.0))),
                               polarity=str(rng.choice(["dark", "light"])))
    if kind == "bleedthrough":
        return DegradationSpec("bleedthrough", opacity=float(rng.uniform(0.1, 0.4)))
    text = "".join(rng.choice(_ALPHABET, size=int(rng.integers(3, 7))))
    opacity = float(rng.uniform(0.7, 0.95))
    if kind == "watermark":
        color = tuple(float(c) for c in rng.uniform(0.2, 0.7, size=channels))
        return DegradationSpec("watermark", opacity=opacity, mark_color=color,
                               rotation=float(rng.uniform(-45.0, 45.0)),
                               glyph_scale=int(rng.choice([2, 3])), text=text)
    if kind == "seal":
        if channels == 3:
            color = (float(rng.uniform(0.75, 0.95)), float(rng.uniform(0.1, 0.35)), float(rng.uniform(0.1, 0.35)))
        else:
            color = (float(rng.uniform(0.3, 0.6)),)
        return DegradationSpec("seal", opacity=opacity, mark_color=color,
                               rotation=float(rng.uniform(-45.0, 45.0)), glyph_scale=1, text=text)
    raise ValueError(f"unknown degradation kind {kind!r}")


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Straight-line motion blur kernel, rasterised by dense sampling."""
    size = length if length % 2 else length + 1
    k = np.zeros((size, size), dtype=np.float64)
    c = size // 2
    theta = np.deg2rad(angle_deg)
    for s in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        yy = int(round(c - s * np.sin(theta)))
        xx = int(round(c + s * np.cos(theta)))
        k[yy, xx] = 1.0
    return k / k.sum()


def convolve2d_replicate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size correlation of each channel with `kernel`, edge padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    img64 = np.asarray(img, dtype=np.float64)
    padded = np.pad(img64, ((0, 0), (ph, ph), (pw, pw)), mode="edge")
    h, w = img64.shape[1:]
    out = np.zeros_like(img64)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j]:
                out += kernel[i, j] * padded[:, i:i + h, j:j + w]
    return out


def gaussian_blur(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge padding."""
    k = gaussian_kernel1d(size, sigma)
    r = size // 2
    img64 = np.asarray(img, dtype=np.float64)
    h, w = img64.shape[1:]
    p = np.pad(img64, ((0, 0), (0, 0), (r, r)), mode="edge")
    tmp = sum(k[j] * p[:, :, j:j + w] for j in range(size))
    p = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="edge")
    return sum(k[i] * p[:, i:i + h, :] for i in range(size))


def _rotate_mask(mask: np.ndarray, angle_deg: float, out_shape: tuple[int, int],
                 center: tuple[float, float]) -> np.ndarray:
    """Nearest-neighbour rotation of a boolean mask about its own centre,
    pasted so that centre lands on `center` of the output grid."""
    h, w = out_shape
    mh, mw = mask.shape
    theta = np.deg2rad(angle_deg)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    sy = np.cos(theta) * dy - np.sin(theta) * dx + (mh - 1) / 2
    sx = np.sin(theta) * dy + np.cos(theta) * dx + (mw - 1) / 2
    iy, ix = np.rint(sy).astype(int), np.rint(sx).astype(int)
    ok = (iy >= 0) & (iy < mh) & (ix >= 0) & (ix < mw)
    out = np.zeros(out_shape, dtype=bool)
    out[ok] = mask[iy[ok], ix[ok]]
    return out


def _word_mask(text: str, scale: int) -> np.ndarray:
    cols = []
    for ch in text:
        cols.append(GLYPHS[ch])
        cols.append(np.zeros((7, 1), dtype=bool))
    word = np.concatenate(cols[:-1], axis=1)
    return np.kron(word, np.ones((scale, scale), dtype=bool))


def overlay_mask(spec: DegradationSpec, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Where a watermark or seal covers the page."""
    h, w = shape
    if spec.kind == "watermark":
        word = _word_mask(spec.text or "DRAFT", spec.glyph_scale)
        mask = np.zeros(shape, dtype=bool)
        # tile the rotated word across the page, dense-watermark style
        step_y = word.shape[0] * 3
        step_x = word.shape[1] + 4 * spec.glyph_scale
        off_y, off_x = rng.integers(0, step_y), rng.integers(0, step_x)
        for cy in range(-int(off_y), h + step_y, step_y):
            for cx in range(-int(off_x), w + step_x, step_x):
                mask |= _rotate_mask(word, spec.rotation, shape, (cy, cx))
        return mask
    if spec.kind == "seal":
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        ry, rx = rng.uniform(0.25, 0.45) * h, rng.uniform(0.25, 0.45) * w
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        thick = max(1.5 / min(ry, rx), 0.08)
        ring = np.abs(r - 1.0) <= thick
        word = _word_mask(spec.text or "SEAL", max(spec.glyph_scale, 1))
        inner = _rotate_mask(word, spec.rotation, shape, (cy, cx))
        return ring | (inner & (r < 1.0 - thick))
    raise ValueError(f"{spec.kind!r} has no overlay mask")


def degrade(clean: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt `clean` (C, H, W) according to `spec`; `clean` is untouched."""
    clean = np.asarray(clean, dtype=np.float32)
    if clean.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got {clean.shape}")
    c, h, w = clean.shape

    if spec.kind == "blur":
        if spec.blur_type == "gaussian":
            out = gaussian_blur(clean, spec.kernel_size, spec.sigma)
        elif spec.blur_type == "motion":
            out = convolve2d_replicate(clean, motion_kernel(spec.motion_length, spec.motion_angle))
        elif spec.blur_type == "kernel":
            out = convolve2d_replicate(clean, np.asarray(spec.params["kernel"], dtype=np.float64))
        else:
            raise ValueError(f"unknown blur type {spec.blur_type!r}")
    elif spec.kind == "inknoise":
        out = clean.astype(np.float64)
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(spec.blob_count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(*spec.radius_range)
            alpha = rng.uniform(*spec.blob_alpha)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            a = alpha * np.clip(1.5 - d / rad, 0.0, 1.0)  # soft edge
            target = 0.0 if spec.polarity == "dark" else 1.0
            out = (1.0 - a) * out + a * target
    elif spec.kind == "bleedthrough":
        back = render_text_patch(rng, max(h, w, 32))[:, :h, :w][:, :, ::-1]
        back = gaussian_blur(back, 3, 0.8)
        ink = 1.0 - back
        out = clean.astype(np.float64) * (1.0 - spec.opacity * ink)
    elif spec.kind in ("watermark", "seal"):
        if not 0.0 <= spec.opacity <= 1.0:
            raise ValueError(f"opacity must be in [0, 1], got {spec.opacity}")
        mask = overlay_mask(spec, (h, w), rng)
        color = np.asarray(spec.mark_color, dtype=np.float64)
        if color.size == 1:
            color = np.repeat(color, c)
        if color.size != c:
            raise ValueError(f"mark colour has {color.size} channels, image has {c}")
        out = clean.astype(np.float64).copy()
        blended = spec.opacity * out + (1.0 - spec.opacity) * color[:, None, None]
        out[:, mask] = blended[:, mask]
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    else:
        raise ValueError(f"unknown degradation kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# netpbm I/O

class PNMError(ValueError):
    """Malformed PGM/PPM data; `offset` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next header token, skipping whitespace and comments: (token, start, end)."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError("unexpected end of header", start)
    return buf[start:pos], start, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    if buf[:2] not in (b"P5", b"P6"):
        raise PNMError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit() or int(tok) <= 0:
            raise PNMError(f"invalid {label} {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise PNMError(f"only maxval 255 is supported, got {maxval}", start)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PNMError("missing whitespace after header", pos)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise PNMError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width, channels).transpose(2, 0, 1)


def load_image(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) into a (C, H, W) float32 array."""
    data = decode_pnm(Path(path).read_bytes())
    return data.astype(np.float32) / np.float32(255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PGM/PPM need 1 or 3 channels, got {c}")
    u8 = img if img.dtype == np.uint8 else to_bytes(img)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes()


def save_image(img: np.ndarray, path) -> None:
    """Write (C, H, W) values in [0, 1] as 8-bit P5/P6, rounding half up."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_pnm(img))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# corpora

def image_suffix(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def make_pair(kind: str, seed: int, index: int, size: int) -> tuple[np.ndarray, np.ndarray, str]:
    """One (degraded, clean, actual_kind) pair from its own RNG stream.

    `kind` may be "denoise", which picks ink noise or bleed-through per pair.
    """
    rng = np.random.default_rng([seed, index])
    actual = kind
    if kind == "denoise":
        actual = str(rng.choice(["inknoise", "bleedthrough"]))
    channels = 3 if actual in ("watermark", "seal") else 1
    clean = render_text_patch(rng, size)
    if channels == 3:
        clean = np.repeat(clean, 3, axis=0)
    spec = sample_degradation(actual, rng, channels)
    return degrade(clean, spec, rng), clean, actual


def write_corpus(root, count: int, kind: str, size: int = 64, seed: int = 0, split: str = "train") -> Path:
    """Generate `count` pairs under root/split with a manifest.

    Files are NNNNNN.pgm/.ppm (degraded) and NNNNNN_gt.pgm/.ppm (clean);
    manifest.txt holds one "index kind seed" line per pair.
    """
    if kind not in ("blur", "denoise", "inknoise", "bleedthrough", "watermark", "seal"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        y, gt, actual = make_pair(kind, seed, i, size)
        suffix = image_suffix(y.shape[0])
        save_image(y, out / f"{i:06d}{suffix}")
        save_image(gt, out / f"{i:06d}_gt{suffix}")
        lines.append(f"{i} {actual} {seed}\n")
    (out / "manifest.txt").write_text("".join(lines), encoding="utf-8")
    return out


def load_corpus(directory) -> list[tuple[np.ndarray, np.ndarray]]:
    """All (degraded, clean) pairs in a directory using the `_gt` suffix rule.

    Works for generated corpora and for any folder of paired PGM/PPM files.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    pairs = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in (".pgm", ".ppm", ".pnm") or p.stem.endswith("_gt"):
            continue
        gt = p.with_name(f"{p.stem}_gt{p.suffix}")
        if not gt.exists():
            raise FileNotFoundError(f"missing ground truth {gt.name} for {p.name}")
        pairs.append((load_image(p), load_image(gt)))
    return pairs


def augment(y: np.ndarray, gt: np.ndarray, rotation: int, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    """Apply the same 90-degree rotation and horizontal flip to both images."""
    def tf(a):
        a = np.rot90(a, k=rotation, axes=(1, 2))
        if flip:
            a = a[:, :, ::-1]
        return np.ascontiguousarray(a)
    return tf(y), tf(gt)


def sample_training_pair(corpus: Sequence[tuple[np.ndarray, np.ndarray]], rng: np.random.Generator,
                         crop: int, augmentation: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Aligned random crop of a random pair, optionally rotated and flipped.

    Rotation (by 90, 180 or 270 degrees) and flipping each happen with
    probability 0.5.
    """
    if not len(corpus):
        raise ValueError("corpus is empty")
    y, gt = corpus[int(rng.integers(len(corpus)))]
    h, w = y.shape[1:]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    y = y[:, top:top + crop, left:left + crop]
    gt = gt[:, top:top + crop, left:left + crop]
    if augmentation:
        rotation = int(rng.integers(1, 4)) if rng.random() < 0.5 else 0
        flip = bool(rng.random() < 0.5)
        return augment(y, gt, rotation, flip)
    return y.copy(), gt.copy()


def sample_batch(corpus, rng: np.random.Generator, batch: int, crop: int,
                 augmentation: bool = True) -> tuple[np.ndarray, np.ndarray]:
    pairs = [sample_training_pair(corpus, rng, crop, augmentation) for _ in range(batch)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
