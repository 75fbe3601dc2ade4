"""Kernel-level checks of the autodiff engine against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchreg import gradcore as gc
from patchreg.gradcore import (
    ContractError,
    DimensionError,
    ParamSet,
    Tensor,
    backward,
    gelu,
    grad_check,
    layer_norm,
    linear,
    matmul,
    softmax,
)


def fd_check(build, arrays, n_probes=30, step=1e-5, seed=0):
    """Central finite differences of a scalar graph vs analytic grads.

    ``build`` maps a list of Tensors (one per array) to a scalar Tensor.
    Returns the max relative error over random coordinates of every input.
    """
    tensors = [Tensor(a.astype(np.float64)) for a in arrays]
    out = build(tensors)
    backward(out)
    analytic = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        ti = int(rng.integers(len(tensors)))
        if tensors[ti].size == 0:
            continue
        idx = int(rng.integers(tensors[ti].size))
        orig = tensors[ti].data.flat[idx]
        tensors[ti].data.flat[idx] = orig + step
        fp = build(tensors).item()
        tensors[ti].data.flat[idx] = orig - step
        fm = build(tensors).item()
        tensors[ti].data.flat[idx] = orig
        fd = (fp - fm) / (2 * step)
        an = float(analytic[ti].flat[idx])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-5))
    return worst


def scalar_readout(t, seed=0):
    """Project a tensor to a scalar with a fixed random weighting."""
    rng = np.random.default_rng(seed)
    r = rng.normal(size=t.shape)
    return gc.sum_all(gc.mul(t, Tensor(r.astype(np.float64))))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(matmul(a, b).data, b.data)


def test_matmul_hand_dot():
    out = matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_finite_difference():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    err = fd_check(lambda ts: scalar_readout(matmul(ts[0], ts[1])), [a, b])
    assert err < 1e-6


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=(4, 5, 2))
    out = matmul(Tensor(a), Tensor(b))
    for i in range(4):
        assert np.allclose(out.data[i], a[i] @ b[i])
    err = fd_check(lambda ts: scalar_readout(matmul(ts[0], ts[1])), [a, b])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# linear


def test_linear_identity():
    x = np.random.default_rng(2).normal(size=(3, 4))
    out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, x)


def test_linear_hand_value():
    out = linear(Tensor([[1.0, 1.0]]), Tensor([[1.0], [2.0]]), Tensor([3.0]))
    assert out.data.tolist() == [[6.0]]


def test_linear_finite_difference_all_inputs():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 2)), rng.normal(size=2)
    err = fd_check(lambda ts: scalar_readout(linear(*ts)), [x, w, b], n_probes=40)
    assert err < 1e-6


def test_linear_shape_errors():
    with pytest.raises(DimensionError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))
    with pytest.raises(DimensionError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row_maps_to_zero():
    out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_already_normalized():
    out = layer_norm(
        Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12
    )
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_finite_difference():
    rng = np.random.default_rng(4)
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    err = fd_check(lambda ts: scalar_readout(layer_norm(*ts)), [x, g, b], n_probes=40)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# gelu


def test_gelu_at_zero_and_asymptotes():
    out = gelu(Tensor([0.0, 10.0, -10.0]))
    assert out.data[0] == 0.0
    assert abs(out.data[1] - 10.0) < 1e-4
    assert abs(out.data[2]) < 1e-4


def test_gelu_finite_difference():
    x = np.random.default_rng(5).normal(size=(4, 5))
    err = fd_check(lambda ts: scalar_readout(gelu(ts[0])), [x])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_row():
    for c in (-3.0, 0.0, 100.0):
        out = softmax(Tensor([[c, c, c]]))
        assert np.allclose(out.data, 1.0 / 3.0)


def test_softmax_hand_value():
    out = softmax(Tensor([[0.0, np.log(3.0)]]))
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_sum_to_one_and_gradient():
    x = np.random.default_rng(6).normal(size=(4, 9))
    out = softmax(Tensor(x))
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    err = fd_check(lambda ts: scalar_readout(softmax(ts[0])), [x])
    assert err < 1e-5


def test_softmax_with_minus_inf_mask():
    x = np.array([[1.0, -np.inf, 2.0]])
    out = softmax(Tensor(x))
    assert out.data[0, 1] == 0.0
    assert np.allclose(out.data.sum(), 1.0)


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    backward(gc.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_hand_quadratic():
    x = Tensor([1.0, 2.0])
    backward(gc.sum_all(gc.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_fanout_sums_both_paths():
    x = Tensor(np.random.default_rng(8).normal(size=5))
    loss = gc.add(gc.sum_all(x), gc.sum_all(gc.cmul(x, 2.0)))
    backward(loss)
    assert np.allclose(x.grad, 3.0)


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        backward(gc.mul(x, x))


def test_backward_accumulates_on_repeat():
    x = Tensor([1.0, 2.0])
    loss = gc.sum_all(gc.mul(x, x))
    backward(loss)
    backward(loss)
    assert x.grad.tolist() == [4.0, 8.0]


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0])
    y = x
    for _ in range(5000):
        y = gc.cmul(y, 1.0)
    backward(gc.sum_all(y))
    assert x.grad.tolist() == [1.0]


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_mul_gradient_is_other_operand(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=4))
    b = Tensor(rng.normal(size=4))
    backward(gc.sum_all(gc.mul(a, b)))
    assert np.allclose(a.grad, b.data)
    assert np.allclose(b.grad, a.data)


def test_broadcast_add_sums_gradient():
    a = Tensor(np.zeros((3, 4)))
    b = Tensor(np.zeros(4))
    backward(gc.sum_all(gc.add(a, b)))
    assert np.allclose(b.grad, 3.0)


# ---------------------------------------------------------------------------
# multi-shape finite-difference property (module invariant)


@pytest.mark.parametrize("shape", [(2, 3), (5, 4), (7, 7)])
def test_kernels_pass_fd_on_multiple_shapes(shape):
    rng = np.random.default_rng(hash(shape) % (2**32))
    n, d = shape
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, d))
    b = rng.normal(size=d)

    def build(ts):
        t = linear(ts[0], ts[1], ts[2])
        t = layer_norm(t, ts[3], ts[4])
        t = gelu(t)
        t = softmax(t)
        return scalar_readout(t)

    err = fd_check(build, [x, w, b, np.ones(d), np.zeros(d)], n_probes=40)
    assert err < 1e-5


def test_forward_backward_bit_identical_rerun():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(6, 6)))
        w = Tensor(rng.normal(size=(6, 6)))
        out = gc.sum_all(gelu(matmul(x, w)))
        backward(out)
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# ParamSet


def test_paramset_same_seed_bit_identical():
    def build(seed):
        ps = ParamSet(seed, dtype=np.float32)
        ps.add("a", (4, 4))
        ps.add("b", (4,), init="zeros")
        ps.add("c", (3, 2))
        return {n: t.data.copy() for n, t in ps.items()}

    first, second = build(123), build(123)
    for name in first:
        assert np.array_equal(first[name], second[name])
    assert not np.array_equal(build(124)["a"], first["a"])


def test_paramset_rejects_duplicates():
    ps = ParamSet(0)
    ps.add("a", (2,))
    with pytest.raises(ContractError):
        ps.add("a", (2,))


def test_trunc_normal_bounded():
    ps = ParamSet(0, dtype=np.float64)
    t = ps.add("w", (1000,), std=0.02)
    assert np.abs(t.data).max() <= 0.04


# ---------------------------------------------------------------------------
# grad_check harness


def _quadratic(params):
    # 0.5 * p.Ap + b.p with known curvature, gradient O(1)
    p = params["p"]
    return gc.add(gc.cmul(gc.sum_all(gc.mul(p, p)), 0.5), gc.sum_all(gc.cmul(p, 2.0)))


def test_grad_check_quadratic_nearly_exact():
    ps = ParamSet(0, dtype=np.float64)
    ps.add("p", (10,))
    report = grad_check(_quadratic, ps, n_probes=10, step=1e-5, seed=0)
    assert report.max_rel_err < 1e-8


def test_grad_check_gelu_composite():
    ps = ParamSet(1, dtype=np.float64)
    ps.add("w", (6, 6), std=0.5)

    def f(params):
        return gc.sum_all(gelu(gc.mul(params["w"], params["w"])))

    report = grad_check(f, ps, n_probes=12, step=1e-5, seed=0)
    assert report.max_rel_err < 1e-5


def test_grad_check_detects_corrupted_backward():
    ps = ParamSet(2, dtype=np.float64)
    ps.add("w", (6, 6), std=0.5)

    def f(params):
        return gc.sum_all(gelu(params["w"]))

    gc.set_grad_fault(True)
    try:
        report = grad_check(f, ps, n_probes=12, step=1e-5, seed=0)
    finally:
        gc.set_grad_fault(False)
    assert report.max_rel_err > 1e-2


def test_grad_check_rejects_float32_params():
    ps = ParamSet(4, dtype=np.float32)
    ps.add("p", (4,))
    with pytest.raises(ContractError, match="float64"):
        grad_check(_quadratic, ps, n_probes=2)


def test_grad_check_deterministic():
    ps = ParamSet(3, dtype=np.float64)
    ps.add("p", (8,))
    r1 = grad_check(_quadratic, ps, n_probes=5, seed=42)
    r2 = grad_check(_quadratic, ps, n_probes=5, seed=42)
    assert [p.index for p in r1.probes] == [p.index for p in r2.probes]
    assert r1.max_rel_err == r2.max_rel_err
