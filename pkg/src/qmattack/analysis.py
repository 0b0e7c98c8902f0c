"""Perturbation statistics: radial power spectra, Laplacian edges, brightness curves."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import correlate_valid
from .errors import ShapeError
from .image import as_plane, check_same_shape

log = logging.getLogger(__name__)

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


# --------------------------------------------------------------------------
# FFT
# --------------------------------------------------------------------------

def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def fft1d(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized radix-2 DFT along ``axis`` (iterative, vectorized over other axes)."""
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ShapeError(f"FFT length must be a power of two, got {n}")
    bits = n.bit_length() - 1
    # bit-reversal permutation
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    a = x[..., rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half].copy()
        odd = a[..., half:] * tw
        a[..., :half] = even + odd
        a[..., half:] = even - odd
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    return np.moveaxis(a, -1, axis)


def fft2d(plane) -> np.ndarray:
    """Forward 2-D DFT (no normalization) of a square power-of-two grid."""
    a = np.asarray(plane)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not _is_pow2(a.shape[0]):
        raise ShapeError(f"fft2d needs a square power-of-two grid, got {a.shape}")
    return fft1d(fft1d(a, axis=1), axis=0)


# --------------------------------------------------------------------------
# radial spectrum
# --------------------------------------------------------------------------

@dataclass
class SpectrumCurve:
    freq: np.ndarray      # cycles/pixel
    power: np.ndarray
    n_patches: int
    patch_size: int

    def to_csv(self) -> str:
        lines = ["freq,power"] + [f"{float(f)!r},{float(p)!r}" for f, p in zip(self.freq, self.power)]
        return "\n".join(lines) + "\n"


def radial_average(power2d: np.ndarray):
    """Mean of a centred-or-not NxN power grid over integer-rounded radii 1..N/2."""
    n = power2d.shape[0]
    k = np.fft.fftfreq(n) * n
    r = np.rint(np.hypot(k[:, None], k[None, :])).astype(int)
    nb = n // 2
    sel = (r >= 1) & (r <= nb)
    sums = np.bincount(r[sel], weights=power2d[sel], minlength=nb + 1)[1:]
    counts = np.bincount(r[sel], minlength=nb + 1)[1:]
    return np.arange(1, nb + 1) / n, sums / counts


def patch_power(patch: np.ndarray) -> np.ndarray:
    p = np.asarray(patch, dtype=np.float64)
    f = fft2d(p - p.mean())
    return f.real ** 2 + f.imag ** 2


def power_spectrum_1d(img, n_patches: int = 100, patch: int = 256, seed: int = 0) -> SpectrumCurve:
    img = as_plane(img)
    h, w = img.shape
    if not _is_pow2(patch):
        raise ShapeError(f"patch size must be a power of two, got {patch}")
    if patch > min(h, w):
        smaller = 1 << (min(h, w).bit_length() - 1)
        log.warning("image %dx%d smaller than patch %d; using %d", w, h, patch, smaller)
        patch = smaller
    if patch < 4:
        raise ShapeError(f"image {w}x{h} too small for a spectrum")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - patch + 1, size=n_patches)
    cols = rng.integers(0, w - patch + 1, size=n_patches)
    acc = np.zeros((patch, patch))
    for r, c in zip(rows, cols):   # fixed summation order
        acc += patch_power(img[r:r + patch, c:c + patch])
    freq, power = radial_average(acc / n_patches)
    return SpectrumCurve(freq, power, int(n_patches), int(patch))


def spectral_slope(curve: SpectrumCurve, band=(0.02, 0.4)) -> float:
    lo, hi = band
    sel = (curve.freq >= lo) & (curve.freq <= hi)
    if sel.sum() < 3:
        raise ValueError(f"need >= 3 bins in band {band}, got {int(sel.sum())}")
    f, p = curve.freq[sel], curve.power[sel]
    if np.any(p <= 0):
        raise ValueError("non-positive power inside band")
    return float(np.polyfit(np.log(f), np.log(p), 1)[0])


# --------------------------------------------------------------------------
# edges and brightness dependence
# --------------------------------------------------------------------------

def laplacian(img) -> np.ndarray:
    img = as_plane(img)
    if min(img.shape) < 3:
        raise ShapeError(f"laplacian needs at least 3x3, got {img.shape[::-1]}")
    return correlate_valid(img, LAPLACIAN)


def edge_mask(img, k: float = 1.0) -> np.ndarray:
    """Pixels (in the valid Laplacian region) with |laplacian| > k * std(img)."""
    img = as_plane(img)
    return np.abs(laplacian(img)) > k * float(np.std(img))


@dataclass
class BrightnessCurve:
    intensity: np.ndarray   # 0..255
    mean_delta: np.ndarray  # NaN where count == 0
    mean_abs_delta: np.ndarray
    std_delta: np.ndarray
    count: np.ndarray

    def present(self) -> np.ndarray:
        return self.count > 0

    def to_csv(self) -> str:
        lines = ["intensity,mean,meanabs,std,count"]
        for i in np.flatnonzero(self.present()):
            lines.append(f"{int(self.intensity[i])},{float(self.mean_delta[i])!r},"
                         f"{float(self.mean_abs_delta[i])!r},{float(self.std_delta[i])!r},{int(self.count[i])}")
        return "\n".join(lines) + "\n"

    def slope(self, series: str = "mean_abs_delta", weighted: bool = False) -> float:
        """Least-squares slope of a series against intensity over populated bins.

        ``weighted`` weights each bin by its pixel count, which equals a
        per-pixel regression on the binned intensities.
        """
        m = self.present()
        if m.sum() < 2:
            raise ValueError("need at least two populated bins")
        y = getattr(self, series)[m]
        x = self.intensity[m].astype(float)
        w = self.count[m].astype(float) if weighted else np.ones_like(x)
        xm = np.average(x, weights=w)
        ym = np.average(y, weights=w)
        return float(np.sum(w * (x - xm) * (y - ym)) / np.sum(w * (x - xm) ** 2))


def brightness_delta_curve(ref, delta, mask=None) -> BrightnessCurve:
    """Per-intensity statistics of ``delta`` grouped by ``round(ref)``.

    A ``mask`` is expected on the valid Laplacian grid (two pixels smaller
    in each direction); ``ref`` and ``delta`` are then cropped to match.
    """
    ref, delta = as_plane(ref), as_plane(delta)
    check_same_shape(ref, delta)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == (ref.shape[0] - 2, ref.shape[1] - 2):
            ref, delta = ref[1:-1, 1:-1], delta[1:-1, 1:-1]
        elif mask.shape != ref.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match image {ref.shape}")
        ref, delta = ref[mask], delta[mask]
    else:
        ref, delta = ref.ravel(), delta.ravel()
    bins = np.clip(np.floor(ref + 0.5), 0, 255).astype(int)
    count = np.bincount(bins, minlength=256)
    s = np.bincount(bins, weights=delta, minlength=256)
    sa = np.bincount(bins, weights=np.abs(delta), minlength=256)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / count
        mean_abs = sa / count
        dev = delta - mean[bins]
        var = np.bincount(bins, weights=dev * dev, minlength=256) / count
    nan = count == 0
    mean[nan] = mean_abs[nan] = var[nan] = np.nan
    return BrightnessCurve(np.arange(256), mean, mean_abs, np.sqrt(var), count)
