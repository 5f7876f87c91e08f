"""Full-reference (PSNR, SSIM, SAM, ERGAS) and no-reference (D_lambda, D_S,
QNR) quality metrics.  Images are [bands, H, W] arrays with values in [0, 1]."""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

from .data import blur_decimate

RATIO = 4
Q_BLOCK = 32


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all bands and pixels; inf when identical."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    full = ndimage.correlate(img, win, mode="constant")
    lo = k // 2
    return full[lo:img.shape[0] - (k - 1 - lo), lo:img.shape[1] - (k - 1 - lo)]


def ssim(x, y, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (valid region only),
    averaged over pixels and then over bands."""
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.shape[-1] < win_size or x.shape[-2] < win_size:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {win_size}x{win_size} window")
    win = _gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for a, b in zip(x, y):
        mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
        saa = _filter_valid(a * a, win) - mu_a ** 2
        sbb = _filter_valid(b * b, win) - mu_b ** 2
        sab = _filter_valid(a * b, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def sam(x, y) -> float:
    """Mean spectral angle in radians over pixels where neither vector is zero.

    The angle is 2 atan2(|u - v|, |u + v|) on unit vectors, which stays
    accurate near 0 where arccos of the cosine does not.
    """
    x, y = _pair(x, y)
    nx_ = np.sqrt((x * x).sum(axis=0))
    ny_ = np.sqrt((y * y).sum(axis=0))
    valid = (nx_ > 0) & (ny_ > 0)
    if not valid.any():
        raise ValueError("SAM undefined: every pixel has a zero spectral vector")
    u = x[:, valid] / nx_[valid]
    v = y[:, valid] / ny_[valid]
    ang = 2 * np.arctan2(np.sqrt(((u - v) ** 2).sum(axis=0)), np.sqrt(((u + v) ** 2).sum(axis=0)))
    return float(ang.mean())


def ergas(x, y, ratio: int = RATIO) -> float:
    """100 / ratio * sqrt(mean_b (RMSE_b / mean_b(reference))^2); ``y`` is the reference."""
    x, y = _pair(x, y)
    means = y.reshape(y.shape[0], -1).mean(axis=1)
    if np.any(means == 0):
        raise ValueError("ERGAS undefined: reference band with zero mean")
    rmse = np.sqrt(((x - y) ** 2).reshape(x.shape[0], -1).mean(axis=1))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / means) ** 2)))


# --------------------------------------------------------------- no-reference

def q_index(a: np.ndarray, b: np.ndarray, block: int = Q_BLOCK) -> float:
    """Universal image quality index averaged over non-overlapping blocks,
    clamped to [-1, 1]."""
    a, b = _pair(a, b)
    h, w = a.shape
    if h < block or w < block:
        raise ValueError(f"image {a.shape} smaller than Q block {block}")
    vals = []
    for i in range(0, h - block + 1, block):
        for j in range(0, w - block + 1, block):
            vals.append(_q_block(a[i:i + block, j:j + block], b[i:i + block, j:j + block]))
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def _q_block(a: np.ndarray, b: np.ndarray, tiny: float = 1e-12) -> float:
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    lum = ma * ma + mb * mb
    con = va + vb
    if con < tiny and lum < tiny:
        return 1.0
    if con < tiny:
        return 2 * ma * mb / lum
    if lum < tiny:
        return 2 * cov / con
    return float(np.clip(4 * cov * ma * mb / (con * lum), -1.0, 1.0))


def d_lambda(fused, lms, block: int = Q_BLOCK, ratio: int = RATIO) -> float:
    fused, lms = np.asarray(fused, np.float64), np.asarray(lms, np.float64)
    nb = fused.shape[0]
    if nb < 2:
        return 0.0
    low_block = max(block // ratio, 2)
    diffs = []
    for i in range(nb):
        for j in range(nb):
            if i != j:
                diffs.append(abs(q_index(fused[i], fused[j], block) - q_index(lms[i], lms[j], low_block)))
    return float(np.clip(np.mean(diffs), 0.0, 1.0))


def d_s(fused, lms, pan, block: int = Q_BLOCK, ratio: int = RATIO) -> float:
    fused, lms = np.asarray(fused, np.float64), np.asarray(lms, np.float64)
    pan = np.asarray(pan, np.float64).reshape(fused.shape[1:])
    pan_low = blur_decimate(pan, ratio)
    low_block = max(block // ratio, 2)
    diffs = [abs(q_index(fused[b], pan, block) - q_index(lms[b], pan_low, low_block))
             for b in range(fused.shape[0])]
    return float(np.clip(np.mean(diffs), 0.0, 1.0))


def qnr(fused, lms, pan, ratio: int = RATIO, block: int = Q_BLOCK) -> tuple[float, float, float]:
    """(D_lambda, D_S, QNR) with unit exponents."""
    fused = np.asarray(fused)
    lms = np.asarray(lms)
    pan = np.asarray(pan)
    if lms.shape[0] != fused.shape[0] or lms.shape[1] * ratio != fused.shape[1] \
            or lms.shape[2] * ratio != fused.shape[2]:
        raise ValueError(f"LRMS {lms.shape} is not 1/{ratio} of fused {fused.shape}")
    if pan.reshape(-1).size != fused.shape[1] * fused.shape[2]:
        raise ValueError(f"PAN {pan.shape} does not match fused extent {fused.shape[1:]}")
    dl = d_lambda(fused, lms, block, ratio)
    ds = d_s(fused, lms, pan, block, ratio)
    return dl, ds, (1 - dl) * (1 - ds)


# -------------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    psnr: float | None = None
    ssim: float | None = None
    sam: float | None = None
    ergas: float | None = None
    d_lambda: float | None = None
    d_s: float | None = None
    qnr: float | None = None

    COLUMNS = ("psnr", "ssim", "sam", "ergas", "d_lambda", "d_s", "qnr")
    HEADERS = {"psnr": "PSNR", "ssim": "SSIM", "sam": "SAM", "ergas": "ERGAS",
               "d_lambda": "D_lambda", "d_s": "D_S", "qnr": "QNR"}

    def present(self) -> list[str]:
        return [c for c in self.COLUMNS if getattr(self, c) is not None]

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def full_reference(fused, gt, ratio: int = RATIO) -> MetricsReport:
    return MetricsReport(psnr=psnr(fused, gt), ssim=ssim(fused, gt), sam=sam(fused, gt),
                         ergas=ergas(fused, gt, ratio))


def no_reference(fused, lms, pan, ratio: int = RATIO) -> MetricsReport:
    dl, ds, q = qnr(fused, lms, pan, ratio)
    return MetricsReport(d_lambda=dl, d_s=ds, qnr=q)


def mean_report(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Per-metric mean over images (psnr averages finite values only)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    out = MetricsReport()
    for col in reports[0].present():
        vals = [getattr(r, col) for r in reports]
        setattr(out, col, float(np.mean(vals)))
    return out


def format_csv(rows: list[tuple[str, MetricsReport]]) -> str:
    cols = rows[0][1].present()
    buf = io.StringIO()
    buf.write(",".join(["name"] + [MetricsReport.HEADERS[c] for c in cols]) + "\n")
    for name, r in rows:
        buf.write(",".join([name] + [repr(float(getattr(r, c))) for c in cols]) + "\n")
    return buf.getvalue()


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    cols = rows[0][1].present()
    head = ["name"] + [MetricsReport.HEADERS[c] for c in cols]
    body = [[name] + [f"{getattr(r, c):.4f}" for c in cols] for name, r in rows]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in [head] + body]
    return "\n".join(lines) + "\n"
