import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panscan import numerics as nx
from panscan.gradcheck import check_gradients
from panscan.numerics import NonFiniteError, Tensor
from panscan.scan import (METHODS, ScanSteps, SsmParams, combine, discretize, discretize_coeffs,
                          init_ssm_arrays, recurrence_parallel, recurrence_sequential, scan_backward,
                          scan_parallel, scan_sequential, selective_scan, ssm_forward)

from conftest import param


def random_steps(r, c, n, length, dtype=np.float64, lead=()):
    a = r.uniform(0.0, 1.0, size=lead + (c, n, length)).astype(dtype)
    b = r.standard_normal(lead + (c, n, length)).astype(dtype)
    cm = r.standard_normal(lead + (n, length)).astype(dtype)
    return ScanSteps(a, b, cm)


def unrolled(steps, x=None, d=None):
    """Plain Python double loop over time and (channel, state)."""
    c, n, length = steps.a.shape
    h = np.zeros((c, n))
    hs = np.zeros((c, n, length))
    y = np.zeros((c, length))
    for t in range(length):
        h = steps.a[:, :, t] * h + steps.b[:, :, t]
        hs[:, :, t] = h
        y[:, t] = h @ steps.c[:, t]
        if d is not None:
            y[:, t] += d * x[:, t]
    return y, hs


# ---------------------------------------------------------------- discretize

def _params(c, n, a_log=None, delta_b=0.0, delta_w=None, b_w=None, c_w=None):
    return SsmParams(
        a_log=np.zeros((c, n)) if a_log is None else a_log,
        d_skip=np.ones(c),
        delta_w=np.zeros((c, c)) if delta_w is None else delta_w,
        delta_b=np.full(c, delta_b),
        b_w=np.ones((c, n)) if b_w is None else b_w,
        c_w=np.ones((c, n)) if c_w is None else c_w,
    )


def test_small_delta_freezes_state(rng):
    x = rng.standard_normal((3, 5))
    steps = discretize(x, _params(3, 2, delta_b=-40.0))  # softplus(-40) ~ 4e-18
    assert np.abs(steps.a - 1).max() < 1e-15
    assert np.abs(steps.b).max() < 1e-15


def test_unit_delta_closed_form():
    x = np.ones((1, 1))
    delta_b = np.log(np.e - 1)  # softplus^-1(1)
    steps = discretize(x, _params(1, 1, delta_b=delta_b))
    assert steps.a[0, 0, 0] == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert steps.a[0, 0, 0] == pytest.approx(0.367879, abs=1e-6)


def test_discretize_against_scalar_oracle(rng):
    c, n, length = 3, 4, 5
    p = _params(c, n, a_log=rng.standard_normal((c, n)), delta_b=0.2,
                delta_w=rng.standard_normal((c, c)) * 0.3, b_w=rng.standard_normal((c, n)),
                c_w=rng.standard_normal((c, n)))
    x = rng.standard_normal((c, length))
    steps = discretize(x, p)
    for t in range(length):
        z = x[:, t] @ p.delta_w + p.delta_b
        delta = np.log1p(np.exp(z))
        bvec = x[:, t] @ p.b_w
        for ch in range(c):
            for s in range(n):
                a = np.exp(-delta[ch] * np.exp(p.a_log[ch, s]))
                assert steps.a[ch, s, t] == pytest.approx(a, rel=1e-13)
                assert steps.b[ch, s, t] == pytest.approx(delta[ch] * bvec[s] * x[ch, t], rel=1e-13, abs=1e-15)
        np.testing.assert_allclose(steps.c[:, t], x[:, t] @ p.c_w, rtol=1e-13)


def test_discretize_rejects_non_finite_delta():
    with pytest.raises(NonFiniteError):
        discretize_coeffs(np.ones((1, 2)), np.array([[1.0, np.inf]]), -np.ones((1, 1)),
                          np.ones((1, 2)), np.ones((1, 2)))


def test_init_arrays_follow_s4d_real(rng):
    arr = init_ssm_arrays(rng, 6, 5, dtype=np.float64)
    np.testing.assert_allclose(np.exp(arr["a_log"][2]), np.arange(1, 6), rtol=1e-14)
    dt = np.log1p(np.exp(arr["delta_b"]))
    assert (dt >= 1e-3 - 1e-12).all() and (dt <= 1e-1 + 1e-12).all()
    assert (-np.exp(arr["a_log"]) < 0).all()


# ---------------------------------------------------------------- recurrences

@pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
def test_zero_decay_is_memoryless(scan, rng):
    steps = random_steps(rng, 2, 3, 6)
    steps.a[:] = 0
    y = scan(steps)
    np.testing.assert_allclose(y, np.einsum("nl,cnl->cl", steps.c, steps.b), rtol=1e-14)


@pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
def test_unit_decay_is_running_sum(scan):
    length = 9
    steps = ScanSteps(np.ones((1, 1, length)), np.full((1, 1, length), 0.25), np.ones((1, length)))
    np.testing.assert_array_equal(scan(steps)[0], 0.25 * np.arange(1, length + 1))


def test_sequential_matches_unrolled_oracle(rng):
    steps = random_steps(rng, 3, 4, 6)
    x, d = rng.standard_normal((3, 6)), rng.standard_normal(3)
    y, h = scan_sequential(steps, x, d, return_states=True)
    y_ref, h_ref = unrolled(steps, x, d)
    np.testing.assert_array_equal(h, h_ref)
    # the readout contraction may sum in a different order than the oracle's dot
    np.testing.assert_allclose(y, y_ref, rtol=1e-14, atol=1e-15)


def test_parallel_length_one_is_bit_exact(rng):
    steps = random_steps(rng, 3, 4, 1)
    np.testing.assert_array_equal(scan_parallel(steps), scan_sequential(steps))


def test_parallel_length_two_closed_form(rng):
    steps = random_steps(rng, 2, 2, 2)
    h = recurrence_parallel(steps.a, steps.b)
    a1, b1, a2, b2 = steps.a[..., 0], steps.b[..., 0], steps.a[..., 1], steps.b[..., 1]
    np.testing.assert_allclose(h[..., 1], combine(a1, b1, a2, b2)[1], rtol=1e-15)
    np.testing.assert_allclose(h[..., 1], a2 * b1 + b2, rtol=1e-15)


@pytest.mark.parametrize("length", [1, 2, 3, 5, 17, 256, 4096])
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_parallel_equals_sequential(length, dtype, tol):
    worst = 0.0
    for seed in range(5):
        steps = random_steps(np.random.default_rng(seed), 4, 4, length, dtype)
        worst = max(worst, np.abs(scan_parallel(steps) - scan_sequential(steps)).max())
    assert worst < tol


@given(st.integers(0, 2**31 - 1))
def test_combine_is_associative(seed):
    r = np.random.default_rng(seed)
    s = [(r.uniform(0, 1, 8), r.standard_normal(8)) for _ in range(3)]
    left = combine(*combine(*s[0], *s[1]), *s[2])
    right = combine(*s[0], *combine(*s[1], *s[2]))
    assert np.abs(left[0] - right[0]).max() < 1e-12
    assert np.abs(left[1] - right[1]).max() < 1e-12


@given(st.integers(1, 300), st.integers(0, 2**31 - 1))
def test_recurrences_agree_on_random_lengths(length, seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(0, 1, (3, length)), r.standard_normal((3, length))
    assert np.abs(recurrence_parallel(a, b) - recurrence_sequential(a, b)).max() < 1e-12


def test_bounded_inputs_give_finite_outputs():
    r = np.random.default_rng(0)
    lanes, length = 10_000, 64
    a = r.uniform(0, 1, (lanes, length))
    a[:, ::7] = 1.0  # include the closed end of (0, 1]
    b = r.uniform(-1, 1, (lanes, length))
    for run in (recurrence_sequential, recurrence_parallel):
        h = run(a, b)
        assert np.isfinite(h).all()
        assert np.abs(h).max() <= length  # |h_t| <= sum |b|


# ------------------------------------------------------------------ backward

def test_backward_of_constant_loss_is_zero(rng):
    steps = random_steps(rng, 2, 3, 5)
    _, h = scan_sequential(steps, return_states=True)
    for g in scan_backward(steps, h, np.zeros((2, 5))):
        np.testing.assert_array_equal(g, 0.0)


def test_backward_single_step_by_hand(rng):
    steps = random_steps(rng, 2, 3, 1)
    _, h = scan_sequential(steps, return_states=True)
    dy = rng.standard_normal((2, 1))
    da, db, dc = scan_backward(steps, h, dy)
    np.testing.assert_array_equal(da, 0.0)  # h_0 = 0
    np.testing.assert_allclose(db, steps.c[None] * dy[:, None, :], rtol=1e-15)
    np.testing.assert_allclose(dc[:, 0], (dy[:, 0, None] * steps.b[:, :, 0]).sum(axis=0), rtol=1e-14)


@pytest.mark.parametrize("method", METHODS)
def test_selective_scan_gradients(method):
    r = np.random.default_rng(11)
    bsz, c, n, length = 2, 3, 4, 9
    x = param(r, bsz, c, length, name="x")
    delta = param(r, bsz, c, length, lo=0.1, hi=1.0, name="delta")
    a_mat = param(r, c, n, lo=-2.0, hi=-0.2, name="a")
    bm, cm = param(r, bsz, n, length, name="B"), param(r, bsz, n, length, name="C")
    d = param(r, c, name="D")
    w = Tensor(r.standard_normal((bsz, c, length)))
    errs = check_gradients(lambda: nx.sum_(nx.mul(selective_scan(x, delta, a_mat, bm, cm, d, method), w)),
                           [x, delta, a_mat, bm, cm, d])
    assert max(errs.values()) < 1e-4, errs


def test_methods_agree_forward_and_backward():
    r = np.random.default_rng(5)
    bsz, c, n, length = 2, 4, 3, 33
    arrays = [r.standard_normal((bsz, c, length)), r.uniform(0.05, 1, (bsz, c, length)),
              -r.uniform(0.2, 3, (c, n)), r.standard_normal((bsz, n, length)),
              r.standard_normal((bsz, n, length)), r.standard_normal(c)]
    w = Tensor(r.standard_normal((bsz, c, length)))
    results = {}
    for m in METHODS:
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        y = selective_scan(*leaves, method=m)
        nx.backward(nx.sum_(nx.mul(y, w)))
        results[m] = (y.data, [t.grad for t in leaves])
    ref_y, ref_g = results["sequential"]
    for m in ("fused", "parallel"):
        np.testing.assert_allclose(results[m][0], ref_y, rtol=1e-12, atol=1e-13)
        for g, gr in zip(results[m][1], ref_g):
            np.testing.assert_allclose(g, gr, rtol=1e-10, atol=1e-12)


def test_unknown_method_rejected(rng):
    t = Tensor(np.ones((1, 1, 2)))
    with pytest.raises(ValueError):
        selective_scan(t, t, Tensor(-np.ones((1, 1))), t, t, Tensor(np.ones(1)), method="magic")


def test_ssm_forward_parameter_gradients():
    r = np.random.default_rng(2)
    c, n = 4, 3
    arr = init_ssm_arrays(r, c, n, dt_min=0.1, dt_max=1.0, dtype=np.float64)
    arr["b_w"] *= 3
    arr["c_w"] *= 3
    p = SsmParams(**{k: Tensor(v, requires_grad=True, name=k) for k, v in arr.items()})
    x = param(r, 2, c, 12, name="x")
    w = Tensor(r.standard_normal((2, c, 12)))
    errs = check_gradients(lambda: nx.sum_(nx.mul(ssm_forward(x, p), w)), [x] + p.tensors())
    assert max(errs.values()) < 1e-5, errs
