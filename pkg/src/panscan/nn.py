"""Neural layers on :class:`~panscan.numerics.Tensor`: convolution, layer norm,
channel-wise linear projection, plus non-differentiable image resampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, Tensor, make_node


@dataclass
class ConvParams:
    weight: Tensor  # [C_out, C_in // groups, k, k]
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("layer norm epsilon must be positive")


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-D cross-correlation.

    Computed as a sum over kernel taps of batched channel matmuls on shifted
    views of the padded input, which keeps the backward pass symmetric.
    """
    w = p.weight
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    b_, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    g, s, pad = p.groups, p.stride, p.padding
    if g < 1 or cin % g or cout % g:
        raise ShapeError(f"groups={g} must divide C_in={cin} and C_out={cout}")
    if cin_g != cin // g:
        raise ShapeError(f"weight expects {cin_g * g} input channels, input has {cin}")
    if p.bias is not None and p.bias.shape != (cout,):
        raise ShapeError(f"bias shape {p.bias.shape} != ({cout},)")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw or s < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    cout_g = cout // g

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wg = w.data.reshape(g, cout_g, cin_g, kh, kw)

    def tap(arr, i, j):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    out = np.zeros((b_, g, cout_g, ho * wo), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kw):
            xs = tap(xp, i, j).reshape(b_, g, cin_g, ho * wo)
            out += np.matmul(wg[None, :, :, :, i, j], xs)
    out = out.reshape(b_, cout, ho, wo)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def back(gout):
        gg = gout.reshape(b_, g, cout_g, ho * wo)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(wg) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if dw is not None:
                    xs = tap(xp, i, j).reshape(b_, g, cin_g, ho * wo)
                    dw[:, :, :, i, j] = np.einsum("bgoh,bgch->goc", gg, xs)
                if dxp is not None:
                    d = np.matmul(wg[None, :, :, :, i, j].transpose(0, 1, 3, 2), gg)
                    tap(dxp, i, j)[...] += d.reshape(b_, cin, ho, wo)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
            dx = np.ascontiguousarray(dx)
        grads = [dx, None if dw is None else dw.reshape(w.shape)]
        if p.bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    return make_node(out, parents, back, "conv2d")


def dwconv(x: Tensor, p: ConvParams) -> Tensor:
    """Depth-wise convolution with same padding (one kernel per channel)."""
    c = x.shape[1]
    k = p.weight.shape[-1]
    if p.weight.shape != (c, 1, k, k) or k % 2 == 0:
        raise ShapeError(f"dwconv expects odd-size weight [{c},1,k,k], got {p.weight.shape}")
    return conv2d(x, ConvParams(p.weight, p.bias, stride=1, padding=k // 2, groups=c))


def layer_norm(x: Tensor, p: LayerNormParams, axis: int = 1) -> Tensor:
    """Normalize over ``axis`` (the channel axis) at every other position, then
    apply the per-channel affine map."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ShapeError(f"layer_norm: channel extent {c} vs gamma {p.gamma.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    gamma = p.gamma.data.reshape(bshape)
    beta = p.beta.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = xc * rstd
    out = xhat * gamma + beta
    other = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        dxhat = g * gamma
        dx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return dx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return make_node(out, (x, p.gamma, p.beta), back, "layer_norm")


def linear_channels(x: Tensor, w: Tensor, b: Tensor | None = None, axis: int = -1) -> Tensor:
    """Apply ``w`` ([C_in, C_out]) to the channel vector at every position."""
    axis = axis % x.ndim
    cin, cout = w.shape
    if x.shape[axis] != cin:
        raise ShapeError(f"linear_channels: channel extent {x.shape[axis]} != {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"linear_channels: bias shape {b.shape} != ({cout},)")
    xm = np.moveaxis(x.data, axis, -1)
    out = xm @ w.data
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(np.moveaxis(out, -1, axis))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        dx = np.ascontiguousarray(np.moveaxis(gm @ w.data.T, -1, axis)) if x.requires_grad else None
        dw = xm.reshape(-1, cin).T @ gm.reshape(-1, cout)
        grads = [dx, dw]
        if b is not None:
            grads.append(gm.reshape(-1, cout).sum(axis=0))
        return grads

    return make_node(out, parents, back, "linear")


# ----------------------------------------------------------------- resampling

def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0),
    )


def _taps(n_in: int, factor: int, mode: str):
    """Source indices [n_out, taps], weights [n_out, taps] and the index of the
    reference tap (the one nearest the sample point) for 1-D resampling."""
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = (dst + 0.5) / factor - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    if mode == "bilinear":
        offs = np.array([0, 1])
        w = np.stack([1 - frac, frac], axis=1)
        ref = (frac >= 0.5).astype(np.int64)
    else:
        offs = np.array([-1, 0, 1, 2])
        w = _cubic_weight(frac[:, None] - offs[None, :])
        ref = 1 + (frac >= 0.5).astype(np.int64)
    idx = np.clip(base[:, None] + offs[None, :], 0, n_in - 1)
    return idx, w, ref


def _resample_axis(x: np.ndarray, axis: int, factor: int, mode: str) -> np.ndarray:
    idx, w, ref = _taps(x.shape[axis], factor, mode)
    xm = np.moveaxis(x, axis, -1)
    gathered = xm[..., idx]  # [..., n_out, taps]
    refv = xm[..., idx[np.arange(idx.shape[0]), ref]]
    # interpolate offsets from the reference tap so flat regions stay exact
    out = refv + ((gathered - refv[..., None]) * w.astype(x.dtype)).sum(axis=-1)
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def upsample(x: np.ndarray, factor: int, mode: str = "bicubic") -> np.ndarray:
    """Resample the two trailing (spatial) axes by an integer factor.

    Half-pixel-centred sampling with edge clamping; bicubic uses Catmull-Rom
    weights (a = -0.5).
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    if mode not in ("nearest", "bilinear", "bicubic"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    x = np.asarray(x)
    if factor == 1:
        return x.copy()
    if mode == "nearest":
        return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)
    out = _resample_axis(x, x.ndim - 2, factor, mode)
    return _resample_axis(out, x.ndim - 1, factor, mode)
