"""Differentiable full-reference features: MSE/PSNR, pixel VIF, ADM, motion.

Every metric is written once as a graph builder taking the reference as a
plain array and the distorted image as an autodiff node.  The float-valued
wrappers evaluate the same graph on a constant node, so forward values and
gradients always come from one definition.
"""
from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import astuple, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ShapeError
from .image import as_plane, check_same_shape

PEAK = 255.0
MSE_FLOOR = 1e-20
ADM_ZERO = 1e-12
ADM_LEVELS = 4
MINKOWSKI_P = 3.0
VIF_SCALES = (0, 1, 2, 3)
MOTION_TAPS = 5


@dataclass(frozen=True)
class VifGuards:
    sigma_floor: float = 1e-10
    noise_var: float = 2.0

    def __post_init__(self):
        if not (self.sigma_floor > 0 and self.noise_var > 0):
            raise ValueError("VIF guards must be strictly positive")


@dataclass(frozen=True)
class FeatureVector:
    vif0: float
    vif1: float
    vif2: float
    vif3: float
    adm: float
    motion: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, astuple(self)))


FEATURE_NAMES = ("vif0", "vif1", "vif2", "vif3", "adm", "motion")


def gaussian_window(n: int, sigma: float | None = None) -> np.ndarray:
    """Normalized ``n x n`` Gaussian window (default sigma = n/5)."""
    sigma = n / 5.0 if sigma is None else sigma
    r = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def vif_window_size(scale: int) -> int:
    return 2 ** (4 - scale) + 1


# --------------------------------------------------------------------------
# MSE / PSNR
# --------------------------------------------------------------------------

def mse_node(ref: np.ndarray, dist: Node) -> Node:
    return ad.mean(ad.square(ad.sub(dist, ref)))


def psnr_node(ref: np.ndarray, dist: Node) -> Node:
    """PSNR in dB; the MSE is floored at ``MSE_FLOOR`` so the log is guarded."""
    m = ad.clamp(mse_node(ref, dist), MSE_FLOOR, None)
    c = 10.0 / math.log(10.0)
    return ad.scale(ad.log(m), -c) + c * math.log(PEAK * PEAK)


def mse(ref, dist) -> float:
    ref, dist = as_plane(ref), as_plane(dist)
    check_same_shape(ref, dist)
    d = ref - dist
    return float(np.mean(d * d))


def psnr(ref, dist) -> float:
    m = mse(ref, dist)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / m)


# --------------------------------------------------------------------------
# VIF
# --------------------------------------------------------------------------

def _scale_sizes(h: int, w: int, scale: int):
    """Plane size entering the statistics stage at ``scale``."""
    for k in range(1, scale + 1):
        n = vif_window_size(k)
        h, w = h - n + 1, w - n + 1
        if h < 1 or w < 1:
            return 0, 0
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


def vif_min_size(scale: int) -> int:
    """Smallest square side for which ``scale`` is computable."""
    n = vif_window_size(scale)
    side = n
    while min(_scale_sizes(side, side, scale)) < n:
        side += 1
    return side


def _pyramid(x: Node, scale: int) -> Node:
    for k in range(1, scale + 1):
        x = ad.downsample2(ad.correlate(x, gaussian_window(vif_window_size(k))))
    return x


_REF_CACHE: OrderedDict = OrderedDict()
_REF_CACHE_SIZE = 64


def _reference_stats(ref: np.ndarray, scale: int):
    """Pyramid level, local mean and clamped local variance of the reference.

    These are constant across optimisation steps, so they are memoised on
    a digest of the reference pixels.
    """
    key = (hashlib.sha1(np.ascontiguousarray(ref).tobytes()).hexdigest(), ref.shape, scale)
    hit = _REF_CACHE.get(key)
    if hit is not None:
        _REF_CACHE.move_to_end(key)
        return hit
    win = gaussian_window(vif_window_size(scale))
    x = _pyramid(ad.constant(ref), scale).value
    mu1 = ad.correlate_valid(x, win)
    s1 = np.maximum(ad.correlate_valid(x * x, win) - mu1 * mu1, 0.0)
    xc = x - x.mean()
    _REF_CACHE[key] = (x, mu1, s1, xc)
    if len(_REF_CACHE) > _REF_CACHE_SIZE:
        _REF_CACHE.popitem(last=False)
    return x, mu1, s1, xc


def vif_num_den(ref: np.ndarray, dist: Node, scale: int, guards: VifGuards = VifGuards()):
    """Summed numerator and denominator (nodes) of VIF at one scale."""
    h, w = ref.shape
    n = vif_window_size(scale)
    if min(_scale_sizes(h, w, scale)) < n:
        raise ShapeError(
            f"image {w}x{h} too small for VIF scale {scale} (needs at least "
            f"{vif_min_size(scale)}x{vif_min_size(scale)})"
        )
    floor, nv = guards.sigma_floor, guards.noise_var
    win = gaussian_window(n)

    xv, mu1v, s1v, xc = _reference_stats(ref, scale)
    y = _pyramid(dist, scale)

    # Distorted-side moments are expanded around the reference,
    #   s12 = s1 + cov(x, e),  s2 = s1 + 2 cov(x, e) + var(e),  e = y - x,
    # with x shifted by its global mean inside cov.  Same quantities as
    # E[y^2] - E[y]^2 etc., but the reference parts are cached constants
    # and the remaining terms do not cancel catastrophically.
    e = ad.sub(y, xv)
    mu_e = ad.correlate(e, win)
    cov_xe = ad.correlate(ad.mul(e, xc), win) - ad.mul(mu_e, mu1v - xv.mean())
    var_e = ad.correlate(ad.square(e), win) - ad.square(mu_e)
    s12 = cov_xe + s1v
    s2 = ad.clamp(ad.scale(cov_xe, 2.0) + var_e + s1v, 0.0, None)

    low1 = s1v < floor
    low2 = s2.value < floor
    ad.record_branch(low2)
    # windows flagged low1 get gain 0 below, so the plain sigma1^2 division
    # is only ever used where it is bounded away from zero
    gain = ad.div(s12, np.where(low1, 1.0, s1v))
    sv = s2 - ad.mul(gain, s12)

    neg = gain.value < 0
    ad.record_branch(neg)
    keep = ~low1 & ~low2 & ~neg          # regular windows
    use_s2 = ~low2 & (low1 | neg)        # gain forced to 0, sv = s2
    # remaining windows (low2): gain 0, sv 0

    gain = ad.mul(gain, keep.astype(float))
    sv = ad.mul(sv, keep.astype(float)) + ad.mul(s2, use_s2.astype(float))
    sv = ad.clamp(sv, 0.0, None)

    num_terms = ad.log(ad.div(ad.mul(ad.square(gain), s1v), sv + nv) + 1.0)
    den_terms = ad.log(ad.constant(s1v / nv + 1.0))
    return ad.sum_(num_terms), ad.sum_(den_terms)


def vif_scale_node(ref: np.ndarray, dist: Node, scale: int, guards: VifGuards = VifGuards()) -> Node:
    num, den = vif_num_den(ref, dist, scale, guards)
    if float(den.value) <= 0.0:
        # flat reference: no information to preserve
        return ad.add(ad.scale(num, 0.0), 1.0)
    return ad.div(num, np.asarray(den.value))


def vif_scale(ref, dist, scale: int, guards: VifGuards = VifGuards()) -> float:
    ref, dist = as_plane(ref), as_plane(dist)
    check_same_shape(ref, dist)
    return float(vif_scale_node(ref, ad.constant(dist), scale, guards).value)


# --------------------------------------------------------------------------
# ADM (simplified detail-loss measure on a Haar pyramid)
# --------------------------------------------------------------------------

def _adm_crop(shape):
    h, w = shape
    if h < 16 or w < 16:
        raise ShapeError(f"image {w}x{h} too small for ADM (needs at least 16x16)")
    h16, w16 = h - h % 16, w - w % 16
    r0, c0 = (h - h16) // 2, (w - w16) // 2
    return slice(r0, r0 + h16), slice(c0, c0 + w16)


def _adm_band(d: Node, o: np.ndarray) -> Node:
    nz = np.abs(o) >= ADM_ZERO
    o_safe = np.where(nz, o, 1.0)
    # t = clamp(d/o, 0, 1) * o, and 0 where o vanishes
    ratio = ad.clamp(ad.div(d, o_safe), 0.0, 1.0)
    t = ad.mul(ratio, np.where(nz, o, 0.0))
    pooled = ad.sum_(ad.power(ad.absolute(t), MINKOWSKI_P))
    return ad.power(pooled, 1.0 / MINKOWSKI_P)


def adm_node(ref: np.ndarray, dist: Node) -> Node:
    rows, cols = _adm_crop(ref.shape)
    o_ll = ref[rows, cols]
    d_ll = ad.crop(dist, rows, cols)
    restored = []
    reference = []
    for _ in range(ADM_LEVELS):
        o_bands = ad.haar_forward(o_ll)
        d_bands = ad.haar2(d_ll)
        o_ll, d_ll = o_bands[0], d_bands[0]
        for o, d in zip(o_bands[1:], d_bands[1:]):
            restored.append(_adm_band(d, o))
            # same expression on the reference so identity gives exactly 1
            reference.append(float(_adm_band(ad.constant(o), o).value))
    den = 0.0
    for r in reference:
        den += r
    num = restored[0]
    for r in restored[1:]:
        num = num + r
    if den < ADM_ZERO:
        return ad.add(ad.scale(num, 0.0), 1.0)
    return ad.div(num, np.asarray(den))


def adm(ref, dist) -> float:
    ref, dist = as_plane(ref), as_plane(dist)
    check_same_shape(ref, dist)
    return float(adm_node(ref, ad.constant(dist)).value)


# --------------------------------------------------------------------------
# motion
# --------------------------------------------------------------------------

def motion(prev_ref, ref) -> float:
    """Mean absolute difference of blurred consecutive reference frames.

    Depends on reference frames only, so it carries no gradient with
    respect to the distorted image; 0 for a single frame.
    """
    if prev_ref is None:
        return 0.0
    prev_ref, ref = as_plane(prev_ref), as_plane(ref)
    check_same_shape(prev_ref, ref, "frames")
    win = gaussian_window(MOTION_TAPS, 1.0)
    a = ad.correlate_valid(prev_ref, win)
    b = ad.correlate_valid(ref, win)
    return float(np.mean(np.abs(a - b)))


# --------------------------------------------------------------------------
# feature vector
# --------------------------------------------------------------------------

def feature_nodes(ref: np.ndarray, dist: Node, guards: VifGuards = VifGuards()) -> list[Node]:
    """VIF0..VIF3 and ADM as nodes, in fusion order."""
    nodes = [vif_scale_node(ref, dist, s, guards) for s in VIF_SCALES]
    nodes.append(adm_node(ref, dist))
    return nodes


def extract_features(ref, dist, prev_ref=None, guards: VifGuards = VifGuards()) -> FeatureVector:
    ref, dist = as_plane(ref), as_plane(dist)
    check_same_shape(ref, dist)
    vals = [float(n.value) for n in feature_nodes(ref, ad.constant(dist), guards)]
    return FeatureVector(*vals, motion=motion(prev_ref, ref))
