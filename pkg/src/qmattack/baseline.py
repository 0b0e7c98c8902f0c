"""Classical enhancement baselines and their score-gain sweeps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .autodiff import correlate_valid
from .errors import ConfigError, DatasetError, ShapeError
from .fusion import DEFAULT_MODEL, FusionModel, score
from .image import Dataset, as_plane
from .metrics import gaussian_window, psnr

UNSHARP_SIZE = 5
UNSHARP_SIGMA = 1.0


class Method(str, Enum):
    UNSHARP = "unsharp"
    CLAHE = "clahe"
    GAMMA = "gamma"


def _blur_replicate(img: np.ndarray) -> np.ndarray:
    r = UNSHARP_SIZE // 2
    padded = np.pad(img, r, mode="edge")
    return correlate_valid(padded, gaussian_window(UNSHARP_SIZE, UNSHARP_SIGMA))


def unsharp_mask(img, amount: float) -> np.ndarray:
    img = as_plane(img)
    if min(img.shape) < UNSHARP_SIZE:
        raise ShapeError(f"unsharp mask needs at least 5x5, got {img.shape[::-1]}")
    if amount < 0:
        raise ConfigError(f"amount must be >= 0, got {amount}")
    return img + amount * (img - _blur_replicate(img))


def gamma_correct(img, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    img = as_plane(img)
    return 255.0 * (np.clip(img, 0.0, 255.0) / 255.0) ** gamma


def tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry lookup table of one contrast-limited equalized tile."""
    bins = np.clip(np.floor(tile.ravel() + 0.5), 0, 255).astype(int)
    hist = np.bincount(bins, minlength=256).astype(np.float64)
    if math.isfinite(clip_limit):
        limit = clip_limit * hist.sum() / 256.0
        excess = np.maximum(hist - limit, 0.0).sum()
        # one redistribution pass; whatever overflows again is dropped
        hist = np.minimum(np.minimum(hist, limit) + excess / 256.0, limit)
    return 255.0 * np.cumsum(hist) / hist.sum()


def clahe(img, tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    ``tiles`` is (tiles across, tiles down).  Tile mappings are bilinearly
    blended between tile centres; outside the outermost centres the
    nearest tiles are used.
    """
    img = as_plane(img)
    tx, ty = (int(t) for t in tiles)
    h, w = img.shape
    if tx < 1 or ty < 1 or h < ty or w < tx:
        raise ShapeError(f"image {w}x{h} cannot be split into {tx}x{ty} tiles")
    if not clip_limit >= 1:
        raise ConfigError(f"clip_limit must be >= 1, got {clip_limit}")
    rb = np.linspace(0, h, ty + 1).round().astype(int)
    cb = np.linspace(0, w, tx + 1).round().astype(int)
    maps = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            maps[i, j] = tile_mapping(img[rb[i]:rb[i + 1], cb[j]:cb[j + 1]], clip_limit)

    def coords(bounds, n, size):
        centres = (bounds[:-1] + bounds[1:] - 1) / 2.0
        pos = np.arange(size, dtype=np.float64)
        i0 = np.clip(np.searchsorted(centres, pos, side="right") - 1, 0, n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        span = np.where(i1 > i0, centres[i1] - centres[i0], 1.0)
        t = np.clip((pos - centres[i0]) / span, 0.0, 1.0)
        t = np.where(i1 > i0, t, 0.0)
        return i0, i1, t

    r0, r1, fy = coords(rb, ty, h)
    c0, c1, fx = coords(cb, tx, w)
    v = np.clip(np.floor(img + 0.5), 0, 255).astype(int)
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    FY, FX = fy[:, None], fx[None, :]
    top = (1 - FX) * maps[R0, C0, v] + FX * maps[R0, C1, v]
    bot = (1 - FX) * maps[R1, C0, v] + FX * maps[R1, C1, v]
    return (1 - FY) * top + FY * bot


def apply_method(method, img, param: float) -> np.ndarray:
    method = Method(method)
    if method is Method.UNSHARP:
        return unsharp_mask(img, param)
    if method is Method.CLAHE:
        return clahe(img, clip_limit=param)
    return gamma_correct(img, param)


@dataclass
class BaselineResult:
    method: Method
    params: dict
    psnr: float
    gain: float


@dataclass
class SweepRow:
    method: Method
    param: float
    mean_psnr: float
    mean_gain: float
    n_images: int
    in_window: bool = True


@dataclass
class BaselineSweep:
    rows: list[SweepRow]
    per_image: list[tuple[str, BaselineResult]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["method,param,mean_psnr,mean_gain,n_images"]
        lines += [f"{r.method.value},{r.param!r},{r.mean_psnr!r},{r.mean_gain!r},{r.n_images}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"


def _evaluate(args) -> BaselineResult:
    method, param, ref, model = args
    out = np.clip(apply_method(method, ref, param), 0.0, 255.0)
    gain = score(ref, out, model) - score(ref, ref, model)
    return BaselineResult(Method(method), {"param": param}, psnr(ref, out), gain)


def baseline_sweep(data: Dataset, model: FusionModel = DEFAULT_MODEL, method=Method.UNSHARP,
                   param_grid: Sequence[float] = (0.25, 0.5, 1.0), psnr_window=None,
                   map_fn: Callable = map) -> BaselineSweep:
    """Mean PSNR and fused-score gain per parameter value.

    Processed images are clamped to [0, 255] before scoring.  Rows whose
    mean PSNR falls outside ``psnr_window`` are flagged, not dropped.
    """
    if len(data) == 0:
        raise DatasetError("empty dataset")
    grid = [float(p) for p in param_grid]
    if not grid:
        raise ConfigError("empty parameter grid")
    method = Method(method)
    jobs = [(method, p, ref, model) for p in grid for _, ref in data]
    results = list(map_fn(_evaluate, jobs))
    ids = data.ids
    rows, per_image = [], []
    for gi, p in enumerate(grid):
        chunk = results[gi * len(ids):(gi + 1) * len(ids)]
        per_image += list(zip(ids, chunk))
        ps = [r.psnr for r in chunk]
        mean_psnr = math.inf if all(math.isinf(x) for x in ps) else float(np.mean(ps))
        row = SweepRow(method, p, mean_psnr, float(np.mean([r.gain for r in chunk])), len(chunk))
        if psnr_window is not None:
            lo, hi = psnr_window
            row.in_window = lo <= mean_psnr <= hi
        rows.append(row)
    return BaselineSweep(rows, per_image)
