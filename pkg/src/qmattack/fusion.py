"""Linear fusion of the feature vector into a 0-100-scale quality score."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import FormatError
from .image import as_plane, check_same_shape
from .metrics import FEATURE_NAMES, FeatureVector, VifGuards, extract_features, feature_nodes

WEIGHT_KEYS = tuple(f"w_{name}" for name in FEATURE_NAMES)


@dataclass(frozen=True)
class FusionModel:
    weights: tuple[float, ...]
    intercept: float = 0.0
    clip_enabled: bool = False

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} weights, got {len(w)}")
        if not all(math.isfinite(x) for x in w) or not math.isfinite(self.intercept):
            raise ValueError("fusion weights must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "intercept", float(self.intercept))

    def scaled(self, factor: float) -> "FusionModel":
        return replace(self, weights=tuple(factor * w for w in self.weights),
                       intercept=factor * self.intercept)


def replace_clip(model: FusionModel, clip_enabled: bool) -> FusionModel:
    return replace(model, clip_enabled=clip_enabled)


# Four equal VIF weights plus ADM at four times one VIF weight; the identity
# features (1, 1, 1, 1, 1, 0) then score 8 * 12.175 = 97.4.
DEFAULT_MODEL = FusionModel(weights=(12.175, 12.175, 12.175, 12.175, 48.7, 10.0))


def fused_score(features: FeatureVector, model: FusionModel = DEFAULT_MODEL) -> float:
    s = float(np.dot(model.weights, features.as_array())) + model.intercept
    if model.clip_enabled:
        s = min(max(s, 0.0), 100.0)
    return s


def score_node(ref: np.ndarray, dist: Node, model: FusionModel = DEFAULT_MODEL,
               guards: VifGuards = VifGuards()) -> Node:
    """Unclipped fused score as a node (motion is a constant 0 for stills)."""
    out = None
    for w, f in zip(model.weights, feature_nodes(ref, dist, guards)):
        term = ad.scale(f, w)
        out = term if out is None else out + term
    return out + model.intercept


def score(ref, dist, model: FusionModel = DEFAULT_MODEL) -> float:
    return fused_score(extract_features(ref, dist), model)


def score_gradient(ref, dist, model: FusionModel = DEFAULT_MODEL) -> np.ndarray:
    ref, dist = as_plane(ref), as_plane(dist)
    check_same_shape(ref, dist)
    value, grad = ad.value_and_grad(lambda d: score_node(ref, d, model), dist)
    if model.clip_enabled and not 0.0 < value < 100.0:
        raise ValueError(f"score {value:.3f} is clipped; gradient undefined with clipping on")
    return grad


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

def save_fusion_model(model: FusionModel) -> str:
    lines = [f"{k} = {w!r}" for k, w in zip(WEIGHT_KEYS, model.weights)]
    lines.append(f"intercept = {model.intercept!r}")
    lines.append(f"clip = {'true' if model.clip_enabled else 'false'}")
    return "\n".join(lines) + "\n"


def load_fusion_model(text: str) -> FusionModel:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in WEIGHT_KEYS + ("intercept", "clip"):
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    missing = [k for k in WEIGHT_KEYS + ("intercept", "clip") if k not in values]
    if missing:
        raise FormatError(f"missing field(s): {', '.join(missing)}")
    nums = {}
    for k in WEIGHT_KEYS + ("intercept",):
        try:
            nums[k] = float(values[k])
        except ValueError:
            raise FormatError(f"non-numeric value for {k}: {values[k]!r}") from None
        if not math.isfinite(nums[k]):
            raise FormatError(f"non-finite value for {k}")
    clip = values["clip"].lower()
    if clip not in ("true", "false"):
        raise FormatError(f"clip must be true or false, got {values['clip']!r}")
    return FusionModel(
        weights=tuple(nums[k] for k in WEIGHT_KEYS),
        intercept=nums["intercept"],
        clip_enabled=clip == "true",
    )
