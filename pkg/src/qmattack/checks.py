"""Finite-difference gradient audit of every differentiable metric."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .fusion import DEFAULT_MODEL, score_node
from .metrics import adm_node, vif_min_size, vif_scale_node

GRAD_TOL = 1e-4
BASE_SIZE = 32
PAIR_NOISE = 5.0

METRICS = ("vif0", "vif1", "vif2", "vif3", "adm", "fused")


def metric_builder(name: str, ref: np.ndarray) -> Callable:
    if name == "adm":
        return lambda d: adm_node(ref, d)
    if name == "fused":
        return lambda d: score_node(ref, d, DEFAULT_MODEL)
    s = int(name[-1])
    return lambda d: vif_scale_node(ref, d, s)


def check_size(name: str) -> int:
    """Smallest square at or above 32 on which the metric is defined."""
    if name in ("vif2", "vif3"):
        return max(BASE_SIZE, vif_min_size(int(name[-1])))
    if name == "fused":
        return max(BASE_SIZE, vif_min_size(3))
    return BASE_SIZE


def synthetic_source(size: int = 256, seed: int = 0) -> np.ndarray:
    """Smooth random texture in [0, 255], used when no images are supplied."""
    rng = np.random.default_rng(seed)
    f = np.fft.fftfreq(size)
    r = np.hypot(f[:, None], f[None, :])
    r[0, 0] = 1.0
    coeffs = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) / r
    x = np.fft.ifft2(coeffs).real
    x = (x - x.min()) / (x.max() - x.min())
    return 20.0 + 215.0 * x


def make_pairs(sources: Sequence[np.ndarray], n_pairs: int, size: int, seed: int):
    """Seeded (reference crop, noisy distorted copy) pairs."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n_pairs):
        src = sources[k % len(sources)]
        h, w = src.shape
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        ref = np.array(src[r:r + size, c:c + size], dtype=np.float64)
        dist = np.clip(ref + rng.normal(0.0, PAIR_NOISE, ref.shape), 0.0, 255.0)
        pairs.append((ref, dist))
    return pairs


@dataclass
class GradcheckRow:
    metric: str
    pair: int
    size: int
    n_coords: int
    max_rel_error: float
    n_kinks: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < GRAD_TOL


def run_gradcheck(sources: Sequence[np.ndarray], n_pairs: int = 5, coords: int | None = 128,
                  seed: int = 0, metrics: Sequence[str] = METRICS, h: float = 1e-3) -> list[GradcheckRow]:
    """Analytic vs central-difference gradients for each metric on seeded pairs.

    ``coords`` limits each check to that many seeded pixel positions (None
    checks every pixel).  Differences are taken in extended precision.
    """
    rows = []
    for mi, name in enumerate(metrics):
        size = check_size(name)
        pairs = make_pairs(sources, n_pairs, size, seed + 1000 * mi)
        rng = np.random.default_rng(seed + 7919 * (mi + 1))
        for k, (ref, dist) in enumerate(pairs):
            idx = None
            if coords is not None and coords < ref.size:
                idx = np.sort(rng.choice(ref.size, size=coords, replace=False))
            rep = ad.finite_diff_check(metric_builder(name, ref), dist, h=h, indices=idx, extended=True)
            rows.append(GradcheckRow(name, k, size, len(rep.indices), rep.max_rel_error, rep.n_kinks))
    return rows


def gradcheck_csv(rows: Sequence[GradcheckRow]) -> str:
    lines = ["metric,pair,size,n_coords,n_kinks,max_rel_error,ok"]
    lines += [f"{r.metric},{r.pair},{r.size},{r.n_coords},{r.n_kinks},{r.max_rel_error!r},{int(r.ok)}"
              for r in rows]
    return "\n".join(lines) + "\n"
