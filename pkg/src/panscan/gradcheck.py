"""Central finite-difference checks for analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numerics import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h at the flat ``indices`` of ``x`` (all by default)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out[k] = (fp - fm) / (2 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error of analytic vs numeric gradients for each input tensor.

    ``fn`` must rebuild the scalar loss from the current input values.  With
    ``max_entries`` only that many randomly chosen entries per tensor are
    probed.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.zero_grad()
    backward(fn())
    errors = {}
    for k, t in enumerate(inputs):
        n = t.data.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        analytic = t.grad.reshape(-1)[idx]
        numeric = numeric_grad(fn, t, h, list(idx))
        errors[t.name or f"input{k}"] = relative_error(analytic, numeric)
    return errors
