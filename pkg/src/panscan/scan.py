"""Selective state-space scan.

The recurrence is ``h_t = a_t * h_{t-1} + b_t`` with ``h_0 = 0`` and readout
``y_t = <c_t, h_t> + D * x_t``.  Coefficients come from input-dependent
discretization: ``a = exp(delta * A)`` (zero-order hold) and
``b = delta * B(x) * x`` (Euler).

Time is always the last axis.  Two evaluators of the recurrence are provided:
a step-by-step loop and a work-efficient up-sweep/down-sweep prefix scan over
the associative operator ``(a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .nn import linear_channels
from .numerics import NonFiniteError, Tensor, exp, make_node, scale, softplus


@dataclass
class SsmParams:
    """One direction's scan parameters.  Fields hold Tensors (or arrays)."""

    a_log: Tensor   # [C, N]; A = -exp(a_log)
    d_skip: Tensor  # [C]
    delta_w: Tensor  # [C, C]
    delta_b: Tensor  # [C]
    b_w: Tensor     # [C, N]
    c_w: Tensor     # [C, N]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.a_log, self.d_skip, self.delta_w, self.delta_b, self.b_w, self.c_w]


@dataclass
class ScanSteps:
    """Discretized coefficients for a whole sequence."""

    a: np.ndarray  # [..., C, N, L], each in (0, 1]
    b: np.ndarray  # [..., C, N, L]
    c: np.ndarray  # [..., N, L]

    @property
    def length(self) -> int:
        return self.a.shape[-1]


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def init_ssm_arrays(rng: np.random.Generator, channels: int, state_dim: int,
                    dt_min: float = 1e-3, dt_max: float = 1e-1, dtype=np.float32) -> dict[str, np.ndarray]:
    """S4D-real style initial values for one direction."""
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
    delta_b = dt + np.log(-np.expm1(-dt))  # softplus^-1(dt)
    bound = 1.0 / np.sqrt(channels)
    arrays = {
        "a_log": a_log,
        "d_skip": np.ones(channels),
        "delta_w": rng.uniform(-bound, bound, size=(channels, channels)) * 0.1,
        "delta_b": delta_b,
        "b_w": rng.uniform(-bound, bound, size=(channels, state_dim)),
        "c_w": rng.uniform(-bound, bound, size=(channels, state_dim)),
    }
    return {k: v.astype(dtype) for k, v in arrays.items()}


# ---------------------------------------------------------------- discretize

def project(x: np.ndarray, p: SsmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Token-dependent (delta, B, C) for x of shape [..., C, L]."""
    xm = np.moveaxis(x, -2, -1)  # [..., L, C]
    z = xm @ _data(p.delta_w) + _data(p.delta_b)
    delta = np.logaddexp(z, 0).astype(x.dtype)
    bm = xm @ _data(p.b_w)
    cm = xm @ _data(p.c_w)
    return (np.moveaxis(delta, -1, -2), np.moveaxis(bm, -1, -2), np.moveaxis(cm, -1, -2))


def discretize_coeffs(x: np.ndarray, delta: np.ndarray, a_mat: np.ndarray,
                      bm: np.ndarray, cm: np.ndarray) -> ScanSteps:
    """a = exp(delta*A), b = delta*B*x, c = C.

    x, delta: [..., C, L]; a_mat: [C, N]; bm, cm: [..., N, L].
    """
    if not np.isfinite(delta).all():
        raise NonFiniteError("discretize: non-finite step size")
    d4 = delta[..., :, None, :]
    a = np.exp(d4 * a_mat[:, :, None])
    b = d4 * bm[..., None, :, :] * x[..., :, None, :]
    return ScanSteps(a, b, cm)


def discretize(x: np.ndarray, p: SsmParams) -> ScanSteps:
    """Discretize every token of ``x`` ([..., C, L]) under ``p``."""
    delta, bm, cm = project(x, p)
    a_mat = -np.exp(_data(p.a_log)).astype(x.dtype)
    return discretize_coeffs(x, delta, a_mat, bm, cm)


# --------------------------------------------------------------- recurrences

def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """States of ``h_t = a_t h_{t-1} + b_t`` by stepping through time
    (compiled loop, one pass per lane)."""
    dtype = np.result_type(a.dtype, b.dtype)
    a2 = np.ascontiguousarray(np.broadcast_to(a, b.shape), dtype=dtype).reshape(-1, b.shape[-1])
    b2 = np.ascontiguousarray(b, dtype=dtype).reshape(-1, b.shape[-1])
    h = np.empty_like(b2)
    _kernels.recurrence_loop(a2, b2, h)
    return h.reshape(b.shape)


def combine(a1, b1, a2, b2):
    """Compose step 1 followed by step 2."""
    return a1 * a2, a2 * b1 + b2


def recurrence_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """States of the same recurrence via a Blelloch prefix scan.

    The sequence is padded to a power of two with identity steps (1, 0).  The
    up-sweep builds the reduction tree in place, the down-sweep turns it into
    exclusive prefixes, and one final composition makes them inclusive.  Each
    tree level is a single vectorized numpy operation.
    """
    n = b.shape[-1]
    size = 1 << max(0, (n - 1).bit_length())
    lead = b.shape[:-1]
    ta = np.ones(lead + (size,), dtype=b.dtype)
    tb = np.zeros(lead + (size,), dtype=b.dtype)
    ta[..., :n] = a
    tb[..., :n] = b

    d = 1
    while d < size:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        al, bl, ar = ta[..., left], tb[..., left], ta[..., right]
        tb[..., right] = ar * bl + tb[..., right]
        ta[..., right] = al * ar
        d *= 2

    ta[..., size - 1] = 1
    tb[..., size - 1] = 0
    d = size // 2
    while d >= 1:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        la, lb = ta[..., left].copy(), tb[..., left].copy()
        pa, pb = ta[..., right].copy(), tb[..., right]
        ta[..., left] = pa
        tb[..., left] = pb
        tb[..., right] = la * pb + lb
        ta[..., right] = pa * la
        d //= 2

    # exclusive prefix composed with the element itself; h_0 = 0 so only b matters
    return a * tb[..., :n] + b


def reverse_recurrence(a: np.ndarray, g: np.ndarray, method: str = "parallel") -> np.ndarray:
    """Solve ``r_t = g_t + a_{t+1} r_{t+1}`` backwards in time (r_L = g_L)."""
    shifted = np.empty_like(a)
    shifted[..., :-1] = a[..., 1:]
    shifted[..., -1] = 0
    run = recurrence_parallel if method == "parallel" else recurrence_sequential
    return run(shifted[..., ::-1], g[..., ::-1])[..., ::-1]


def readout(c: np.ndarray, h: np.ndarray, x: np.ndarray | None = None,
            d_skip: np.ndarray | None = None) -> np.ndarray:
    """y = <c, h> over the state axis, plus the skip term when given."""
    y = np.einsum("...nl,...cnl->...cl", c, h)
    if x is not None and d_skip is not None:
        y = y + d_skip[:, None] * x
    return y


def scan_sequential(steps: ScanSteps, x: np.ndarray | None = None,
                    d_skip: np.ndarray | None = None, return_states: bool = False):
    """Outputs [..., C, L] by the step-by-step recurrence."""
    h = recurrence_sequential(steps.a, steps.b)
    y = readout(steps.c, h, x, d_skip)
    return (y, h) if return_states else y


def scan_parallel(steps: ScanSteps, x: np.ndarray | None = None,
                  d_skip: np.ndarray | None = None, return_states: bool = False):
    """Outputs [..., C, L] by the prefix-scan recurrence."""
    h = recurrence_parallel(steps.a, steps.b)
    y = readout(steps.c, h, x, d_skip)
    return (y, h) if return_states else y


def scan_backward(steps: ScanSteps, h: np.ndarray, dy: np.ndarray, method: str = "parallel"):
    """Gradients of the readout ``sum <c_t, h_t>`` w.r.t. (a, b, c).

    ``dh_t = c_t dy_t + a_{t+1} dh_{t+1}`` runs backwards in time; then
    ``da_t = dh_t h_{t-1}``, ``db_t = dh_t`` and ``dc_t = sum_C dy_t h_t``.
    The skip term is handled by the caller.
    """
    direct = steps.c[..., None, :, :] * dy[..., :, None, :]
    dh = reverse_recurrence(steps.a, direct, method)
    h_prev = np.zeros_like(h)
    h_prev[..., 1:] = h[..., :-1]
    da = dh * h_prev
    dc = np.einsum("...cl,...cnl->...nl", dy, h)
    return da, dh, dc


# ------------------------------------------------------- differentiable op

METHODS = ("fused", "sequential", "parallel")


def _fused_scan(x, delta, a_mat, bm, cm, d_skip) -> Tensor:
    arrs = [np.ascontiguousarray(t.data) for t in (x, delta, a_mat, bm, cm, d_skip)]
    xd, dd, ad, bd, cd, sd = arrs
    nb, nc, length = xd.shape
    y = np.empty_like(xd)
    h = np.empty((nb, nc, ad.shape[1], length), dtype=xd.dtype)
    _kernels.fused_scan_fwd(xd, dd, ad, bd, cd, sd, y, h)

    def back(dy):
        dy = np.ascontiguousarray(dy, dtype=xd.dtype)
        dx, ddelta = np.zeros_like(xd), np.zeros_like(dd)
        dbm, dcm = np.zeros_like(bd), np.zeros_like(cd)
        da = np.zeros(ad.shape, dtype=np.float64)
        dskip = np.zeros(sd.shape, dtype=np.float64)
        _kernels.fused_scan_bwd(xd, dd, ad, bd, cd, sd, h, dy, dx, ddelta, da, dbm, dcm, dskip)
        return dx, ddelta, da.astype(ad.dtype), dbm, dcm, dskip.astype(sd.dtype)

    return make_node(y, (x, delta, a_mat, bm, cm, d_skip), back, "selective_scan")


def selective_scan(x: Tensor, delta: Tensor, a_mat: Tensor, bm: Tensor, cm: Tensor,
                   d_skip: Tensor, method: str = "fused") -> Tensor:
    """Differentiable selective scan.

    x, delta: [B, C, L]; a_mat: [C, N] (negative); bm, cm: [B, N, L];
    d_skip: [C].  Returns y: [B, C, L].  ``fused`` runs the compiled kernels;
    ``sequential`` and ``parallel`` materialize the coefficients and use the
    corresponding recurrence evaluator in both passes.
    """
    if method not in METHODS:
        raise ValueError(f"unknown scan method {method!r}")
    if x.dtype != delta.dtype or x.dtype != a_mat.dtype:
        raise TypeError("selective_scan operands must share a dtype")
    if method == "fused":
        return _fused_scan(x, delta, a_mat, bm, cm, d_skip)
    steps = discretize_coeffs(x.data, delta.data, a_mat.data, bm.data, cm.data)
    run = scan_parallel if method == "parallel" else scan_sequential
    y, h = run(steps, x.data, d_skip.data, return_states=True)

    def back(dy):
        da, db, dc = scan_backward(steps, h, dy, method)
        xd, dd = x.data, delta.data
        da_a = da * steps.a  # d/d(delta*A)
        # b = delta * B * x
        db_bx = np.einsum("bcnl,bnl->bcl", db, bm.data)
        d_delta = np.einsum("bcnl,cn->bcl", da_a, a_mat.data) + db_bx * xd
        d_amat = np.einsum("bcnl,bcl->cn", da_a, dd)
        d_bm = np.einsum("bcnl,bcl->bnl", db, dd * xd)
        d_x = db_bx * dd + d_skip.data[:, None] * dy
        d_d = (dy * xd).sum(axis=(0, 2))
        return d_x, d_delta, d_amat, d_bm, dc, d_d

    return make_node(y, (x, delta, a_mat, bm, cm, d_skip), back, "selective_scan")


def ssm_forward(x: Tensor, p: SsmParams, method: str = "fused") -> Tensor:
    """Project a [B, C, L] sequence to (delta, B, C) and run the selective scan."""
    delta = softplus(linear_channels(x, p.delta_w, p.delta_b, axis=1))
    bm = linear_channels(x, p.b_w, None, axis=1)
    cm = linear_channels(x, p.c_w, None, axis=1)
    a_mat = scale(exp(p.a_log), -1.0)
    return selective_scan(x, delta, a_mat, bm, cm, p.d_skip, method)
