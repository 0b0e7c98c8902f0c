"""Reference recovery by direct metric maximization with Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import correlate_valid
from .errors import ConfigError, NumericError
from .fusion import DEFAULT_MODEL, FusionModel, score_node
from .image import as_plane, check_same_shape
from .metrics import adm_node, gaussian_window, psnr_node, vif_scale_node

PROXY_SIGMA = 1.5
PROXY_LEVELS = 16


class Target(str, Enum):
    PSNR = "psnr"
    VIF0 = "vif0"
    VIF1 = "vif1"
    VIF2 = "vif2"
    VIF3 = "vif3"
    ADM = "adm"
    FUSED = "fused"


class StopMode(str, Enum):
    THRESHOLD = "threshold"
    CONVERGENCE = "convergence"


def default_threshold(target: Target) -> float:
    if target is Target.FUSED:
        return 100.0
    if target is Target.PSNR:
        return math.inf
    return 1.0


@dataclass(frozen=True)
class RestoreConfig:
    target: Target = Target.FUSED
    lr: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    stop_mode: StopMode = StopMode.THRESHOLD
    threshold: float | None = None   # None: per-target default
    conv_tol: float = 1e-4
    conv_window: int = 50
    max_steps: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "target", Target(self.target))
        object.__setattr__(self, "stop_mode", StopMode(self.stop_mode))
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ConfigError("need 0 < beta1 < beta2 < 1")
        if self.max_steps < 1 or self.conv_window < 1:
            raise ConfigError("max_steps and conv_window must be >= 1")

    @property
    def resolved_threshold(self) -> float:
        return default_threshold(self.target) if self.threshold is None else float(self.threshold)


@dataclass
class RestoreTrace:
    steps: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    reached_threshold: bool = False
    hit_max_steps: bool = False

    def append(self, step: int, value: float) -> None:
        self.steps.append(step)
        self.scores.append(value)

    def __len__(self) -> int:
        return len(self.steps)

    def to_csv(self) -> str:
        lines = ["step,score"] + [f"{s},{v!r}" for s, v in zip(self.steps, self.scores)]
        return "\n".join(lines) + "\n"


def init_noise(m: int, n: int, seed: int = 0) -> np.ndarray:
    """m x n plane (rows x cols) of i.i.d. uniform [0, 255] values."""
    if m < 1 or n < 1:
        raise ValueError("dimensions must be >= 1")
    return np.random.default_rng(seed).uniform(0.0, 255.0, size=(m, n))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(x: np.ndarray, state: AdamState, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam ascent step; updates ``state`` in place."""
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in Adam step")
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} != iterate shape {x.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    return x + lr * mhat / (np.sqrt(vhat) + eps)


def objective(target: Target, ref: np.ndarray, model: FusionModel = DEFAULT_MODEL):
    target = Target(target)
    if target is Target.PSNR:
        return lambda d: psnr_node(ref, d)
    if target is Target.ADM:
        return lambda d: adm_node(ref, d)
    if target is Target.FUSED:
        return lambda d: score_node(ref, d, model)
    s = int(target.value[-1])
    return lambda d: vif_scale_node(ref, d, s)


def restore(ref, init, cfg: RestoreConfig = RestoreConfig(), model: FusionModel = DEFAULT_MODEL):
    """Maximize the target metric over the image starting from ``init``.

    ``trace`` step k holds the score of the iterate after k updates (step 0
    is the initialization).  The returned image is the final iterate,
    unclamped and unquantized.
    """
    ref, x = as_plane(ref), as_plane(init).copy()
    check_same_shape(ref, x)
    f = objective(cfg.target, ref, model)
    thr = cfg.resolved_threshold
    state = AdamState(np.zeros_like(x), np.zeros_like(x))
    trace = RestoreTrace()
    for k in range(cfg.max_steps + 1):
        value, grad = ad.value_and_grad(f, x)
        if not math.isfinite(value):
            raise NumericError(f"non-finite score at step {k}")
        trace.append(k, value)
        if cfg.stop_mode is StopMode.THRESHOLD and value >= thr:
            trace.reached_threshold = True
            break
        if cfg.stop_mode is StopMode.CONVERGENCE and k >= cfg.conv_window:
            old = trace.scores[k - cfg.conv_window]
            if abs(value - old) < cfg.conv_tol * max(abs(old), 1e-12):
                break
        if k == cfg.max_steps:
            trace.hit_max_steps = True
            break
        x = adam_step(x, state, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    return x, trace


def compressed_proxy(ref) -> np.ndarray:
    """Deterministic degraded copy: Gaussian blur then 16-level quantization."""
    ref = as_plane(ref)
    n = 2 * int(math.ceil(3 * PROXY_SIGMA)) + 1
    blurred = correlate_valid(np.pad(ref, n // 2, mode="edge"), gaussian_window(n, PROXY_SIGMA))
    step = 255.0 / (PROXY_LEVELS - 1)
    return np.clip(np.floor(blurred / step + 0.5) * step, 0.0, 255.0)


def restore_from_compressed(ref, cfg: RestoreConfig = RestoreConfig(),
                            model: FusionModel = DEFAULT_MODEL, proxy=compressed_proxy):
    return restore(ref, proxy(ref), cfg, model)
