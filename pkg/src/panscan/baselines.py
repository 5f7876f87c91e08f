"""Classical pan-sharpening references: bicubic, IHS, Brovey and SFIM."""
from __future__ import annotations

import enum
import warnings

import numpy as np

from .data import gaussian_blur
from .nn import upsample
from .numerics import no_grad

RATIO = 4
EPS = 1e-4
FLOOR_FRACTION = 0.01


class BaselineKind(str, enum.Enum):
    BICUBIC = "bicubic"
    IHS = "ihs"
    BROVEY = "brovey"
    SFIM = "sfim"


class FloorBreachWarning(RuntimeWarning):
    """More than 1% of the denominators were clamped to the epsilon floor."""


def _floor(den: np.ndarray, kind: str) -> np.ndarray:
    hit = den < EPS
    if hit.mean() > FLOOR_FRACTION:
        warnings.warn(f"{kind}: {hit.mean():.1%} of pixels hit the {EPS:g} denominator floor",
                      FloorBreachWarning, stacklevel=3)
    return np.maximum(den, EPS)


def run_baseline(kind, lms: np.ndarray, pan: np.ndarray | None = None) -> np.ndarray:
    """Fuse ``lms`` [bands, h, w] with ``pan`` [1, 4h, 4w] (or [4h, 4w]).

    Output is [bands, 4h, 4w], clamped to [0, 1].
    """
    kind = BaselineKind(kind)
    lms = np.asarray(lms)
    # keep float32 inputs in float32 so bicubic matches a model's residual path bit for bit
    lms = lms.astype(np.result_type(lms.dtype, np.float32), copy=False)
    up = upsample(lms, RATIO, "bicubic")
    if kind is BaselineKind.BICUBIC:
        return np.clip(up, 0.0, 1.0)
    if pan is None:
        raise ValueError(f"{kind.value} needs a PAN image")
    up = up.astype(np.float64)
    p = np.asarray(pan, dtype=np.float64).reshape(up.shape[1:])
    intensity = up.mean(axis=0)
    if kind is BaselineKind.IHS:
        fused = up + (p - intensity)[None]
    elif kind is BaselineKind.BROVEY:
        fused = up * (p / _floor(intensity, "brovey"))[None]
    else:
        fused = up * (p / _floor(gaussian_blur(p), "sfim"))[None]
    return np.clip(fused, 0.0, 1.0)


def adapted_single_input(model, lms: np.ndarray) -> np.ndarray:
    """Run a dual-input model with a pseudo-PAN made from the band mean of the
    bicubic-upsampled MS image.  ``lms`` is [B, bands, h, w]."""
    lms = np.asarray(lms)
    pseudo = upsample(lms, RATIO, "bicubic").mean(axis=1, keepdims=True)
    with no_grad():
        return model.forward(lms, pseudo, modality="dual").data
