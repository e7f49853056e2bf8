"""Grayscale I/O, normalization, and the training augmentation suite.

Images are float64 arrays in [0, 1] of shape (H, W); masks are uint8 arrays
of {0, 1}.  Geometric transforms act on (image, mask) pairs with bilinear
sampling for the image and nearest-neighbour for the mask, so masks stay
binary.  Photometric transforms touch the image only.
"""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels

N_BINS = 256


class ImageFormatError(ValueError):
    pass


# ------------------------------------------------------------------------ I/O


def read_image(path):
    """Load an 8-bit grayscale PNG or PGM as float64 in [0, 1]."""
    from PIL import Image

    path = Path(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P"):
            raise ImageFormatError(f"{path}: expected grayscale, got mode {im.mode}")
        if im.mode == "P":
            rgb = np.asarray(im.convert("RGB"))
            if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])):
                raise ImageFormatError(f"{path}: palette image is not grayscale")
            arr = rgb[..., 0]
        else:
            arr = np.asarray(im.convert("L"))
    return arr.astype(np.float64) / 255.0


def read_mask(path):
    """Load a mask stored as {0, 255}; any nonzero pixel counts as foreground."""
    arr = read_image(path)
    return (arr > 0).astype(np.uint8)


def to_uint8(image):
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image):
    """Write a [0, 1] image as 8-bit PNG, or binary PGM (P5) for ``.pgm``."""
    from PIL import Image

    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    Image.fromarray(to_uint8(image), mode="L").save(path, format=fmt)


def write_mask(path, mask):
    write_image(path, np.asarray(mask, dtype=np.float64))


# ------------------------------------------------------------ photometric ops


def normalize(image, mean, std):
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return (np.asarray(image, dtype=np.float64) - mean) / std


def gamma_correct(image, gamma):
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.asarray(image, dtype=np.float64), gamma)


def quantize(image):
    """Map [0, 1] intensities onto the 256 histogram levels."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * (N_BINS - 1)), 0, N_BINS - 1).astype(np.int64)


def tile_bounds(size, tiles):
    """Tile start offsets; the last tile absorbs the remainder."""
    step = size // tiles
    starts = np.arange(tiles, dtype=np.int64) * step
    ends = np.append(starts[1:], size)
    return starts, ends


def clip_histogram(hist, limit):
    """Clip at ``limit`` and hand the excess back to bins still below it.

    Bins never exceed ``max(1, floor(limit))`` unless the total count cannot
    fit under that cap, in which case the leftover is spread one count per bin.
    """
    hist = np.asarray(hist, dtype=np.int64).copy()
    if not np.isfinite(limit):
        return hist
    cap = max(1, int(math.floor(limit)))
    excess = int(np.maximum(hist - cap, 0).sum())
    np.minimum(hist, cap, out=hist)
    while excess > 0:
        room = np.flatnonzero(hist < cap)
        if len(room) == 0:
            break
        share = excess // len(room)
        if share == 0:
            # fewer counts than open bins: spread them evenly over the open bins
            pick = room[np.linspace(0, len(room) - 1, excess).astype(np.int64)]
            hist[pick] += 1
            excess = 0
            break
        add = np.minimum(share, cap - hist[room])
        hist[room] += add
        excess -= int(add.sum())
    if excess > 0:
        hist += excess // N_BINS
        rest = excess % N_BINS
        if rest:
            hist[np.linspace(0, N_BINS - 1, rest).astype(np.int64)] += 1
    return hist


def clahe_histograms(image, clip=2.0, tiles=8):
    """Clipped per-tile histograms, shape (tiles, tiles, 256), plus tile pixel counts."""
    levels = quantize(image)
    h, w = levels.shape
    if tiles < 1 or tiles > h or tiles > w:
        raise ValueError(f"tiles={tiles} invalid for a {h}x{w} image")
    rs, re = tile_bounds(h, tiles)
    cs, ce = tile_bounds(w, tiles)
    hists = np.empty((tiles, tiles, N_BINS), dtype=np.int64)
    counts = np.empty((tiles, tiles), dtype=np.int64)
    for i in range(tiles):
        for j in range(tiles):
            block = levels[rs[i]:re[i], cs[j]:ce[j]]
            n = block.size
            raw = np.bincount(block.ravel(), minlength=N_BINS)
            hists[i, j] = clip_histogram(raw, clip * n / N_BINS)
            counts[i, j] = n
    return hists, counts


def _blend_axis(starts, ends, size):
    # Per-pixel neighbouring tile indices and weight toward the second one.
    centers = (starts + ends - 1) / 2.0
    pos = np.arange(size, dtype=np.float64)
    i1 = np.searchsorted(centers, pos, side="right")
    i0 = np.clip(i1 - 1, 0, len(centers) - 1)
    i1 = np.clip(i1, 0, len(centers) - 1)
    span = centers[i1] - centers[i0]
    with np.errstate(invalid="ignore", divide="ignore"):
        wgt = np.where(span > 0, (pos - centers[i0]) / span, 0.0)
    return i0.astype(np.int64), i1.astype(np.int64), wgt


def clahe(image, clip=2.0, tiles=8):
    """Contrast-limited adaptive histogram equalization.

    Each tile's clipped histogram gives a lookup table ``cdf(level) / n``;
    pixels blend the tables of the four nearest tile centres bilinearly.
    ``clip=inf`` disables clipping; ``tiles=1`` gives global equalization.
    """
    image = np.asarray(image, dtype=np.float64)
    hists, counts = clahe_histograms(image, clip, tiles)
    maps = np.cumsum(hists, axis=2) / counts[..., None]
    h, w = image.shape
    ri0, ri1, rw = _blend_axis(*tile_bounds(h, tiles), h)
    ci0, ci1, cw = _blend_axis(*tile_bounds(w, tiles), w)
    out = kernels.clahe_blend(quantize(image), maps, ri0, ri1, rw, ci0, ci1, cw)
    return np.clip(out, 0.0, 1.0)


# -------------------------------------------------------------- geometric ops


def _check_pair(image, mask):
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in size")
    return image, mask


def sample_bilinear(image, rows, cols):
    """Sample at fractional coordinates; neighbours outside the grid read as 0."""
    h, w = image.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    padded = np.pad(image, 1)
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = np.clip(r0 + dr + 1, 0, h + 1)
            cc = np.clip(c0 + dc + 1, 0, w + 1)
            out += wr * wc * padded[rr, cc]
    return out


def sample_nearest(grid, rows, cols):
    h, w = grid.shape
    rr = np.rint(rows).astype(np.int64)
    cc = np.rint(cols).astype(np.int64)
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    out = np.zeros(rows.shape, dtype=grid.dtype)
    out[inside] = grid[rr[inside], cc[inside]]
    return out


def flip_pair(image, mask, horizontal=False, vertical=False):
    image, mask = _check_pair(image, mask)
    if horizontal:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if vertical:
        image, mask = image[::-1, :], mask[::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def rotate_pair(image, mask, angle_deg):
    """Rotate about the grid centre, counter-clockwise as displayed; zero fill."""
    image, mask = _check_pair(image, mask)
    if angle_deg == 0:
        return image.copy(), mask.copy()
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = rr - cy
    x = cc - cx
    # inverse map; rows grow downward so a CCW display rotation uses these signs
    src_x = cos_t * x - sin_t * y
    src_y = sin_t * x + cos_t * y
    src_r = src_y + cy
    src_c = src_x + cx
    return sample_bilinear(image, src_r, src_c), sample_nearest(mask, src_r, src_c)


def displacement_field(shape, alpha, sigma, rng):
    """Two smoothed uniform-noise fields scaled by alpha; each |component| <= alpha."""
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dy = rng.uniform(-1.0, 1.0, size=shape)
    dx = rng.uniform(-1.0, 1.0, size=shape)
    dy = alpha * gaussian_filter(dy, sigma, mode="reflect")
    dx = alpha * gaussian_filter(dx, sigma, mode="reflect")
    return dy, dx


def elastic_deform(image, mask, alpha, sigma, seed):
    image, mask = _check_pair(image, mask)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dy, dx = displacement_field(image.shape, alpha, sigma, rng)
    if alpha == 0:
        return image.copy(), mask.copy()
    h, w = image.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_r = rr + dy
    src_c = cc + dx
    return sample_bilinear(image, src_r, src_c), sample_nearest(mask, src_r, src_c)


# --------------------------------------------------------------- the pipeline


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range_deg: float = 15.0
    gamma_range: tuple = (0.8, 1.2)
    elastic_prob: float = 0.3
    # reference values for a 512-pixel image; rescaled by size/512
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    # None means "use the training split's statistics" (resolved by fit)
    norm_mean: float | None = None
    norm_std: float | None = None

    def validate(self):
        for name in ("flip_prob", "elastic_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.gamma_range
        if not (0 < lo <= hi):
            raise ValueError(f"gamma_range must satisfy 0 < lower <= upper, got {self.gamma_range}")
        if self.rotation_range_deg < 0:
            raise ValueError("rotation_range_deg must be nonnegative")
        if self.clahe_tiles < 1:
            raise ValueError("clahe_tiles must be >= 1")
        if self.norm_std is not None and not self.norm_std > 0:
            raise ValueError("norm_std must be positive")
        if self.elastic_alpha < 0 or not self.elastic_sigma > 0:
            raise ValueError("elastic_alpha must be >= 0 and elastic_sigma > 0")
        return self


def elastic_params_for_size(config, size):
    """Rescale the 512-pixel reference (alpha, sigma) to a ``size``-pixel image.

    Smoothing shrinks the field amplitude roughly by 1/sigma, so keeping the
    deformation geometrically similar (displacements and correlation length
    both shrink by ``s = size/512``) needs ``sigma * s`` and ``alpha * s**2``.
    """
    s = size / 512.0
    return config.elastic_alpha * s * s, config.elastic_sigma * s


def _norm_stats(config):
    if config.norm_mean is None or config.norm_std is None:
        raise ValueError("normalization statistics unresolved; call dataset_stats first")
    return config.norm_mean, config.norm_std


def dataset_stats(images, config):
    """Mean and std of the CLAHE-equalized images, pooled over all pixels."""
    eq = np.stack([clahe(im, config.clahe_clip, config.clahe_tiles) for im in images])
    std = float(eq.std())
    return float(eq.mean()), std if std > 0 else 1.0


def preprocess(image, config):
    """Deterministic part of the pipeline: CLAHE then normalization."""
    out = clahe(image, config.clahe_clip, config.clahe_tiles)
    return normalize(out, *_norm_stats(config))


def apply_augmentations(image, mask, config, seed):
    """Flips, rotation, CLAHE, gamma, elastic warp, normalization, in that order.

    All draws come from one generator seeded by ``seed``.  Random draws are
    made unconditionally so the stream layout does not depend on outcomes.
    """
    config.validate()
    mean, std = _norm_stats(config)
    image, mask = _check_pair(image, mask)
    rng = np.random.default_rng(seed)
    flip_h = rng.random() < config.flip_prob
    flip_v = rng.random() < config.flip_prob
    angle = rng.uniform(-config.rotation_range_deg, config.rotation_range_deg)
    gamma = rng.uniform(*config.gamma_range)
    do_elastic = rng.random() < config.elastic_prob
    elastic_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))

    image, mask = flip_pair(image, mask, flip_h, flip_v)
    if angle != 0.0:
        image, mask = rotate_pair(image, mask, angle)
    image = clahe(image, config.clahe_clip, config.clahe_tiles)
    image = gamma_correct(image, gamma)
    if do_elastic:
        alpha, sigma = elastic_params_for_size(config, image.shape[0])
        image, mask = elastic_deform(image, mask, alpha, sigma, elastic_rng)
    image = normalize(image, mean, std)
    return image, mask.astype(np.uint8)
