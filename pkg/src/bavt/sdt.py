"""Signed Euclidean distance maps and the distance-weighted boundary loss."""
from pathlib import Path

import numpy as np

from . import kernels

SIGNED = "signed"
ABSOLUTE = "absolute"
BOUNDARY_MODES = (SIGNED, ABSOLUTE)

GRID_MAGIC = b"BAVTGRID 1\n"


class DegenerateMaskError(ValueError):
    """Mask lacks one of the two classes, so the distance map is undefined."""


def _as_binary(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    return mask.astype(bool)


def edt_squared(target):
    """Exact squared distance from every pixel to the nearest ``True`` pixel.

    Separable lower-envelope transform (columns, then rows) on int64, so the
    result is an exact integer.  Pixels get :data:`kernels.EDT_INF` when
    ``target`` is empty.
    """
    target = np.asarray(target, dtype=bool)
    f = np.where(target, np.int64(0), kernels.EDT_INF).astype(np.int64)
    f = kernels.edt_sq_rows(np.ascontiguousarray(f.T)).T
    return kernels.edt_sq_rows(np.ascontiguousarray(f))


def signed_distance_map(mask):
    """phi(x): +distance to foreground outside, -distance to background inside."""
    fg = _as_binary(mask)
    n_fg = int(fg.sum())
    if n_fg == 0 or n_fg == fg.size:
        raise DegenerateMaskError("signed distance map undefined for a single-class mask")
    out_d = np.sqrt(edt_squared(fg).astype(np.float64))
    in_d = np.sqrt(edt_squared(~fg).astype(np.float64))
    return np.where(fg, -in_d, out_d)


def brute_force_edt_squared(mask, target_class=1):
    """Exhaustive-search squared distance to the nearest ``target_class`` pixel."""
    mask = np.asarray(mask)
    sites = np.argwhere(mask == target_class)
    if len(sites) == 0:
        raise ValueError(f"target class {target_class} absent from mask")
    h, w = mask.shape
    out = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            dr = sites[:, 0] - r
            dc = sites[:, 1] - c
            out[r, c] = int((dr * dr + dc * dc).min())
    return out


def brute_force_edt(mask, target_class=1):
    return np.sqrt(brute_force_edt_squared(mask, target_class).astype(np.float64))


def _check_pair(pred, sdm):
    pred = np.asarray(pred, dtype=np.float64)
    sdm = np.asarray(sdm, dtype=np.float64)
    if pred.shape[-2:] != sdm.shape[-2:]:
        raise ValueError(f"prediction {pred.shape} and distance map {sdm.shape} differ in size")
    return pred, sdm


def _check_mode(mode):
    if mode not in BOUNDARY_MODES:
        raise ValueError(f"boundary mode must be one of {BOUNDARY_MODES}, got {mode!r}")


def boundary_loss(pred, sdm, mode=SIGNED):
    """Mean over pixels of ``phi * pred`` (signed) or ``|phi * pred|`` (absolute).

    A leading batch axis is averaged over.
    """
    _check_mode(mode)
    pred, sdm = _check_pair(pred, sdm)
    prod = sdm * pred
    if mode == ABSOLUTE:
        prod = np.abs(prod)
    return float(prod.mean())


def boundary_loss_grad(pred, sdm, mode=SIGNED):
    """d boundary_loss / d pred; the subgradient at ``phi * pred == 0`` is 0."""
    _check_mode(mode)
    pred, sdm = _check_pair(pred, sdm)
    n = pred.size
    if mode == SIGNED:
        return np.broadcast_to(sdm, pred.shape) / n
    return sdm * np.sign(sdm * pred) / n


# ---------------------------------------------------------------- file output


def write_grid(path, grid):
    """Float grid file: magic line, ``"<rows> <cols>\\n"``, then little-endian f64 values."""
    grid = np.asarray(grid, dtype="<f8")
    if grid.ndim != 2:
        raise ValueError("grid must be 2-D")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(f"{grid.shape[0]} {grid.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(grid).tobytes())


def read_grid(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: not a float grid file (bad magic)")
        dims = fh.readline().decode("ascii").split()
        rows, cols = int(dims[0]), int(dims[1])
        data = fh.read()
    if len(data) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(data) // 8}")
    return np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)


def sdm_to_rgb(sdm):
    """8-bit RGB visualization: red inside (phi < 0), blue outside, brightness = |phi|/max."""
    sdm = np.asarray(sdm, dtype=np.float64)
    scale = np.abs(sdm).max() or 1.0
    mag = np.round(255.0 * np.abs(sdm) / scale).astype(np.uint8)
    rgb = np.zeros(sdm.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.where(sdm < 0, mag, 0)
    rgb[..., 2] = np.where(sdm > 0, mag, 0)
    return rgb


def write_sdm_png(path, sdm):
    from PIL import Image

    Image.fromarray(sdm_to_rgb(sdm), mode="RGB").save(path)


__all__ = [
    "SIGNED", "ABSOLUTE", "BOUNDARY_MODES", "DegenerateMaskError",
    "edt_squared", "signed_distance_map", "brute_force_edt", "brute_force_edt_squared",
    "boundary_loss", "boundary_loss_grad", "write_grid", "read_grid", "write_sdm_png",
]
