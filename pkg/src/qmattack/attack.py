"""Norm-bounded score-inflating perturbations via projected gradient ascent."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DatasetError, NumericError
from .fusion import DEFAULT_MODEL, FusionModel, score, score_node
from .image import Dataset, as_plane
from .metrics import PEAK, psnr

log = logging.getLogger(__name__)

PIXEL_BOX = (0.0, PEAK)
STEP_RULES = ("normalized", "raw")


class NormKind(str, Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class NormBall:
    kind: NormKind
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ConfigError(f"epsilon must be finite and positive, got {self.epsilon}")

    def norm(self, delta) -> float:
        d = np.asarray(delta, dtype=np.float64)
        if self.kind is NormKind.LINF:
            return float(np.max(np.abs(d))) if d.size else 0.0
        return float(np.linalg.norm(d.ravel()))


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.1
    steps: int = 100
    box_constrain: bool = True
    seed: int = 0
    # "normalized": sign step for Linf, RMS-normalized step for L2
    # "raw": alpha * gradient for both
    step_rule: str = "normalized"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if int(self.steps) < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")


@dataclass
class AttackReport:
    score_before: float
    score_after: float
    gain: float
    psnr_after: float
    final_norm: float
    score_trace: list[float] = field(default_factory=list)


def epsilon_for_psnr(target_psnr: float, m: int, n: int) -> float:
    """L2 radius whose boundary sits exactly at ``target_psnr`` dB for an m x n image."""
    if m < 1 or n < 1:
        raise ValueError("image dimensions must be >= 1")
    return PEAK * math.sqrt(m * n) * 10.0 ** (-target_psnr / 20.0)


def project(delta, ball: NormBall) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64)
    if ball.kind is NormKind.LINF:
        return np.clip(d, -ball.epsilon, ball.epsilon)
    nrm = float(np.linalg.norm(d.ravel()))
    if nrm <= ball.epsilon:
        return d.copy()
    return d * (ball.epsilon / nrm)


def box_project(ref, delta, lo: float = PIXEL_BOX[0], hi: float = PIXEL_BOX[1]) -> np.ndarray:
    """Shrink ``delta`` so that ``ref + delta`` stays in [lo, hi]."""
    ref = np.asarray(ref, dtype=np.float64)
    return np.clip(ref + delta, lo, hi) - ref


def _ascent_step(g: np.ndarray, ball: NormBall, cfg: AttackConfig) -> np.ndarray:
    if cfg.step_rule == "raw":
        return cfg.alpha * g
    if ball.kind is NormKind.LINF:
        return cfg.alpha * np.sign(g)
    gn = float(np.linalg.norm(g.ravel()))
    if gn == 0.0:
        return np.zeros_like(g)
    # per-pixel RMS of the step equals alpha
    return cfg.alpha * math.sqrt(g.size) * g / gn


def pgd(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    ball: NormBall,
    cfg: AttackConfig = AttackConfig(),
    box: tuple[float, float] | None = PIXEL_BOX,
):
    """Maximize ``value_and_grad`` over ``x0 + delta`` with ``delta`` in ``ball``.

    Starts from ``delta = 0`` and returns ``(best_delta, value_at_start,
    best_value, trace)`` where ``trace[k]`` is the objective after step k+1.
    ``box`` (or None) bounds ``x0 + delta`` coordinatewise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    delta = np.zeros_like(x0)
    value, grad = value_and_grad(x0)
    start = value
    trace: list[float] = []
    best_value, best_delta = -math.inf, delta
    for k in range(int(cfg.steps)):
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient at step {k}")
        delta = project(delta + _ascent_step(grad, ball, cfg), ball)
        if box is not None:
            delta = box_project(x0, delta, *box)
        value, grad = value_and_grad(x0 + delta)
        if not math.isfinite(value):
            raise NumericError(f"non-finite objective at step {k + 1}")
        trace.append(value)
        if value > best_value:
            best_value, best_delta = value, delta
    return best_delta, start, best_value, trace


def _score_value_and_grad(ref: np.ndarray, model: FusionModel):
    def f(d):
        return ad.value_and_grad(lambda x: score_node(ref, x, model), d)
    return f


def pgd_attack(ref, model: FusionModel = DEFAULT_MODEL, ball: NormBall | None = None,
               cfg: AttackConfig = AttackConfig()):
    """PGD on the unclipped fused score; returns ``(delta, AttackReport)``."""
    if ball is None:
        raise ConfigError("a norm ball is required")
    if model.clip_enabled:
        raise ConfigError("attacks run on the unclipped score; disable clipping in the model")
    ref = as_plane(ref)
    box = PIXEL_BOX if cfg.box_constrain else None
    delta, before, after, trace = pgd(_score_value_and_grad(ref, model), ref, ball, cfg, box)
    report = AttackReport(
        score_before=before,
        score_after=after,
        gain=after - before,
        psnr_after=psnr(ref, ref + delta),
        final_norm=ball.norm(delta),
        score_trace=trace,
    )
    return delta, report


def psnr_bounded_attack(ref, model: FusionModel = DEFAULT_MODEL, target_psnr: float = 40.0,
                        cfg: AttackConfig = AttackConfig()):
    if not target_psnr > 0:
        raise ConfigError(f"target PSNR must be positive, got {target_psnr}")
    ref = as_plane(ref)
    m, n = ref.shape
    ball = NormBall(NormKind.L2, epsilon_for_psnr(target_psnr, m, n))
    return pgd_attack(ref, model, ball, cfg)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    image: str
    epsilon: float
    score_before: float
    score_after: float
    gain: float
    psnr_after: float


@dataclass
class GainTable:
    epsilons: list[float]
    mean_gain: list[float]
    n_images: list[int]
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epsilon,mean_gain,n_images"]
        lines += [f"{e!r},{g!r},{n}" for e, g, n in zip(self.epsilons, self.mean_gain, self.n_images)]
        return "\n".join(lines) + "\n"

    def long_csv(self) -> str:
        lines = ["image,epsilon,score_before,score_after,gain,psnr_after"]
        lines += [f"{r.image},{r.epsilon!r},{r.score_before!r},{r.score_after!r},{r.gain!r},{r.psnr_after!r}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"


def _attack_one(args):
    ident, ref, model, kind, eps, cfg = args
    _, rep = pgd_attack(ref, model, NormBall(kind, eps), cfg)
    return SweepRow(ident, eps, rep.score_before, rep.score_after, rep.gain, rep.psnr_after)


def sweep_epsilon(data: Dataset, model: FusionModel = DEFAULT_MODEL, kind=NormKind.LINF,
                  eps_list: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
                  cfg: AttackConfig = AttackConfig(), map_fn: Callable = map) -> GainTable:
    """Mean gain per radius over a dataset.

    ``map_fn`` lets callers plug in a process pool; results are re-keyed by
    (epsilon, identifier) so worker scheduling cannot change the output.
    """
    if len(data) == 0:
        raise DatasetError("empty dataset")
    eps_list = [float(e) for e in eps_list]
    if not eps_list or any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("epsilon list must be non-empty and strictly increasing")
    jobs = [(ident, ref, model, NormKind(kind), e, cfg) for e in eps_list for ident, ref in data]
    rows = sorted(map_fn(_attack_one, jobs), key=lambda r: (r.epsilon, r.image))
    means, counts = [], []
    for e in eps_list:
        gains = [r.gain for r in rows if r.epsilon == e]
        means.append(float(np.mean(gains)))
        counts.append(len(gains))
    return GainTable(eps_list, means, counts, rows)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    amplitude: float
    r2: float


def fit_power_law(epsilons: Iterable[float], gains: Iterable[float]) -> PowerLawFit:
    """Least-squares line through (log eps, log gain); rows with gain <= 0 are skipped."""
    pts = []
    for e, g in zip(epsilons, gains):
        if g > 0 and e > 0:
            pts.append((math.log(e), math.log(g)))
        else:
            log.warning("dropping non-positive row (epsilon=%g, gain=%g) from power-law fit", e, g)
    if len(pts) < 3:
        raise ValueError(f"power-law fit needs >= 3 positive rows, got {len(pts)}")
    x, y = np.array(pts).T
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(float(slope), float(math.exp(icpt)), r2)


def check_gain(ref, delta, report: AttackReport, model: FusionModel = DEFAULT_MODEL) -> float:
    """Re-score (ref, ref + delta) from scratch; returns |recomputed - reported| gain."""
    ref = as_plane(ref)
    g = score(ref, ref + delta, model) - score(ref, ref, model)
    return abs(g - report.gain)
