"""Tape autodiff: forward values, gradients vs finite differences, Adam,
archive round-trips. Expected values are either worked by hand or checked
against an independent numpy computation, never against the module itself.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ref_log_softmax, ref_softmax
from iotrl import autodiff as ad
from iotrl.autodiff import (
    Adam,
    Graph,
    Tensor,
    backward,
    clip_grad_norm,
    gradcheck,
    load_archive,
    load_params,
    save_archive,
    save_params,
)
from iotrl.errors import DomainError, ShapeError, UsageError
from iotrl.rng import Rng


def _rand(rng: Rng, *shape: int) -> np.ndarray:
    out = np.empty(shape)
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = rng.uniform(-1.0, 1.0)
    return out


finite_matrices = arrays(
    np.float64,
    st.tuples(st.integers(1, 5), st.integers(1, 5)),
    elements=st.floats(-50.0, 50.0),
)


# -- forward values ----------------------------------------------------------


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity_and_zero():
    x = Tensor(_rand(Rng(1), 3, 3))
    np.testing.assert_array_equal(ad.matmul(x, Tensor(np.eye(3))).data, x.data)
    np.testing.assert_array_equal(
        ad.matmul(x, Tensor(np.zeros((3, 3)))).data, np.zeros((3, 3))
    )


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_add_sub_mul_elementwise():
    a = np.array([[1.0, -2.0], [0.5, 4.0]])
    b = np.array([[3.0, 3.0], [-1.0, 0.25]])
    np.testing.assert_array_equal(ad.add(Tensor(a), Tensor(b)).data, a + b)
    np.testing.assert_array_equal(ad.sub(Tensor(a), Tensor(b)).data, a - b)
    np.testing.assert_array_equal(ad.mul(Tensor(a), Tensor(b)).data, a * b)
    with pytest.raises(ShapeError):
        ad.add(Tensor(a), Tensor(np.zeros(3)))


def test_relu_example():
    np.testing.assert_array_equal(
        ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0]
    )


def test_sum_mean_examples():
    assert ad.sum_all(Tensor(np.ones((3, 3)))).item() == 9.0
    assert ad.mean_all(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5


def test_softmax_uniform_row():
    y = ad.softmax(Tensor([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(y, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_shift_invariance():
    x = _rand(Rng(2), 4, 5)
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + 123.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_scalar_oracle():
    x = np.array([[1.0, 2.0, 3.0]])
    expected = np.exp(x[0]) / np.exp(x[0]).sum()
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data[0], expected, rtol=1e-12)


@settings(max_examples=40)
@given(finite_matrices)
def test_softmax_rows_are_distributions(x):
    y = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(y >= 0.0)
    np.testing.assert_allclose(y, ref_softmax(x), atol=1e-12)


@settings(max_examples=40)
@given(finite_matrices)
def test_log_softmax_matches_reference(x):
    np.testing.assert_allclose(
        ad.log_softmax(Tensor(x)).data, ref_log_softmax(x), atol=1e-9
    )


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))


def test_layer_norm_constant_row_gives_bias():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    y = ad.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias).data
    np.testing.assert_allclose(y, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_two_point_row():
    y = ad.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # (x - mu)/sigma with sigma = 1; eps pulls it very slightly inward
    np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_zero_gain_returns_bias():
    bias = np.array([0.5, -0.25, 2.0])
    y = ad.layer_norm(
        Tensor(_rand(Rng(3), 2, 3)), Tensor(np.zeros(3)), Tensor(bias)
    ).data
    np.testing.assert_array_equal(y, np.tile(bias, (2, 1)))


def test_layer_norm_standardizes_rows():
    x = _rand(Rng(4), 5, 8) * 3.0
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_minimum_ties_to_first():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 5.0], requires_grad=True)
    with Graph() as g:
        y = ad.sum_all(ad.minimum(a, b))
    backward(g, y)
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_clip_values_and_flat_gradient_outside():
    x = Tensor([-2.0, 0.3, 2.0], requires_grad=True)
    with Graph() as g:
        y = ad.clip(x, -1.0, 1.0)
        s = ad.sum_all(y)
    np.testing.assert_array_equal(y.data, [-1.0, 0.3, 1.0])
    backward(g, s)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_concat_slice_round_trip():
    a = _rand(Rng(5), 3, 2)
    b = _rand(Rng(6), 3, 4)
    cat = ad.concat_cols([Tensor(a), Tensor(b)])
    np.testing.assert_array_equal(ad.slice_cols(cat, 0, 2).data, a)
    np.testing.assert_array_equal(ad.slice_cols(cat, 2, 6).data, b)
    rows = ad.concat_rows([Tensor(a), Tensor(a)])
    assert rows.shape == (6, 2)


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(_rand(Rng(7), 3, 4), requires_grad=True)
    with Graph() as g:
        y = ad.sum_all(x)
    backward(g, y)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_mean_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = ad.mean_all(ad.mul(x, x))
    backward(g, y)
    # d/dx_i mean(x^2) = 2 x_i / n = x_i here (n = 2)
    np.testing.assert_allclose(x.grad, [1.0, 2.0], atol=1e-12)


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 1.0], requires_grad=True)
    for _ in range(2):
        with Graph() as g:
            y = ad.sum_all(x)
        backward(g, y)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_reused_input_fans_in():
    x = Tensor([3.0], requires_grad=True)
    with Graph() as g:
        y = ad.sum_all(ad.add(ad.mul(x, x), x))  # x^2 + x
    backward(g, y)
    np.testing.assert_allclose(x.grad, [7.0])  # 2*3 + 1


def test_backward_requires_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Graph() as g:
        y = ad.mul(x, x)
    with pytest.raises(UsageError):
        backward(g, y)


def test_backward_root_from_other_graph_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Graph():
        y = ad.sum_all(x)
    with Graph() as g2:
        ad.sum_all(x)
    with pytest.raises(UsageError):
        backward(g2, y)


def test_backward_deterministic():
    def run():
        x = Tensor(_rand(Rng(8), 4, 4), requires_grad=True)
        w = Tensor(_rand(Rng(9), 4, 4), requires_grad=True)
        with Graph() as g:
            y = ad.sum_all(ad.mul(ad.softmax(ad.matmul(x, w)), Tensor(_rand(Rng(10), 4, 4))))
        backward(g, y)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_ops_do_not_mutate_inputs():
    a = _rand(Rng(11), 3, 3)
    b = _rand(Rng(12), 3, 3) + 1.5
    ta, tb = Tensor(a), Tensor(b)
    ad.matmul(ta, tb)
    ad.softmax(ta)
    ad.log(tb)
    ad.layer_norm(ta, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    ad.relu(ta)
    np.testing.assert_array_equal(ta.data, a)
    np.testing.assert_array_equal(tb.data, b)


@pytest.mark.filterwarnings("ignore:overflow encountered in exp")
def test_debug_checks_flag_catches_nonfinite(monkeypatch):
    monkeypatch.setattr(ad, "DEBUG_CHECKS", True)
    with pytest.raises(AssertionError):
        ad.exp(Tensor([1000.0]))  # overflow to inf


# -- gradcheck ---------------------------------------------------------------


def test_gradcheck_linear_is_exact():
    err = gradcheck(lambda x: ad.sum_all(x), Tensor(_rand(Rng(13), 3, 3)))
    assert err < 1e-10


def test_gradcheck_softmax_square_composite():
    err = gradcheck(
        lambda x: ad.sum_all(ad.mul(ad.softmax(x), ad.softmax(x))),
        Tensor(_rand(Rng(14), 3, 4)),
    )
    assert err < 1e-4


def test_gradcheck_rejects_vector_output():
    with pytest.raises(UsageError):
        gradcheck(lambda x: ad.relu(x), Tensor(np.ones(3)))


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_primitives_many_seeds(seed):
    rng = Rng(seed, "prims")
    a = _rand(rng.split("a"), 3, 4)
    pos = _rand(rng.split("p"), 3, 4) + 2.0  # interior for log and clip
    b = Tensor(_rand(rng.split("b"), 4, 3))
    row = Tensor(_rand(rng.split("r"), 4))
    cases = [
        (lambda x: ad.sum_all(ad.matmul(x, b)), a),
        (lambda x: ad.sum_all(ad.mul(x, Tensor(_rand(rng.split("m"), 3, 4)))), a),
        (lambda x: ad.sum_all(ad.exp(ad.add_row(x, row))), a),
        (lambda x: ad.sum_all(ad.tanh(x)), a),
        (lambda x: ad.sum_all(ad.log(x)), pos),
        (lambda x: ad.sum_all(ad.mul(ad.softmax(x), Tensor(_rand(rng.split("s"), 3, 4)))), a),
        (lambda x: ad.sum_all(ad.mul(ad.log_softmax(x), Tensor(_rand(rng.split("l"), 3, 4)))), a),
        (lambda x: ad.sum_all(ad.mul(ad.layer_norm(x, row, row), Tensor(_rand(rng.split("n"), 3, 4)))), a),
        # keep probes away from the relu kink so central differences are clean
        (lambda x: ad.mean_all(ad.relu(x)), a + np.sign(a) * 0.5),
        (lambda x: ad.sum_all(ad.exp(ad.rowsum(x))), a),
        (lambda x: ad.sum_all(ad.exp(ad.transpose(x))), a),
        (lambda x: ad.sum_all(ad.exp(ad.slice_cols(x, 1, 3))), a),
        (lambda x: ad.sum_all(ad.minimum(x, Tensor(_rand(rng.split("min"), 3, 4) + 3.0))), a),
        (lambda x: ad.sum_all(ad.clip(x, -0.9, 0.9)), a * 0.4),
    ]
    for f, x in cases:
        assert gradcheck(f, Tensor(x)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_composites_many_seeds(seed):
    rng = Rng(seed, "comps")
    a = _rand(rng.split("a"), 3, 4)
    row = Tensor(_rand(rng.split("r"), 4))
    w = Tensor(_rand(rng.split("w"), 4, 4))
    probe = Tensor(_rand(rng.split("pr"), 3, 4))

    def mlp_like(x):
        h = ad.tanh(ad.add_row(ad.matmul(x, w), row))
        return ad.mean_all(ad.mul(h, h))

    def attention_like(x):
        scores = ad.scale(ad.matmul(x, ad.transpose(x)), 0.5)
        return ad.sum_all(ad.mul(ad.matmul(ad.softmax(scores), x), probe))

    def norm_chain(x):
        return ad.mean_all(ad.tanh(ad.layer_norm(x, row, row)))

    for f in (mlp_like, attention_like, norm_chain):
        assert gradcheck(f, Tensor(a)) < 1e-4


# -- optimizer ---------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1
    assert p.grad is None  # cleared after stepping


def test_adam_first_step_magnitude():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    # bias correction makes the first step ~= -lr * sign(grad)
    np.testing.assert_allclose(p.data, [-0.1], rtol=1e-6)


def test_adam_missing_gradient_rejected():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam({"p": p})
    with pytest.raises(UsageError):
        opt.step()


def test_adam_descends_quadratic():
    p = Tensor([5.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(500):
        with Graph() as g:
            loss = ad.mul(p, p)
            s = ad.sum_all(loss)
        backward(g, s)
        opt.step()
    assert abs(float(p.data[0])) < 0.1


def test_adam_state_round_trip():
    rng = Rng(15)
    p = Tensor(_rand(rng, 2, 2), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    for _ in range(3):
        p.grad = _rand(rng, 2, 2)
        opt.step()
    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    fresh = Adam({"p": p}, lr=0.01)
    fresh.load_state_arrays(arrays, opt.step_count)
    assert fresh.step_count == 3
    np.testing.assert_array_equal(fresh.m["p"], opt.m["p"])
    np.testing.assert_array_equal(fresh.v["p"], opt.v["p"])


def test_clip_grad_norm_scales_down_only():
    a = Tensor(np.zeros(3), requires_grad=True)
    a.grad = np.array([3.0, 4.0, 0.0])  # norm 5
    norm = clip_grad_norm({"a": a}, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8, 0.0])
    b = Tensor(np.zeros(2), requires_grad=True)
    b.grad = np.array([0.3, 0.4])
    norm = clip_grad_norm({"b": b}, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(b.grad, [0.3, 0.4])


# -- parameter archive -------------------------------------------------------


def test_archive_round_trip_bit_exact(tmp_path):
    rng = Rng(16)
    arrays = {
        "w": _rand(rng, 3, 5) * 1e-7,
        "b": _rand(rng, 4),
        "scalar": np.array(3.141592653589793),
    }
    path = tmp_path / "params.bin"
    save_archive(path, arrays)
    loaded = load_archive(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].shape == arrays[k].shape
        assert np.array_equal(
            loaded[k].view(np.uint64), np.asarray(arrays[k]).view(np.uint64)
        )


def test_archive_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b'{"something": "else"}\nnot data')
    with pytest.raises(UsageError):
        load_archive(path)


def test_params_round_trip(tmp_path):
    src = {"x": Tensor(_rand(Rng(17), 2, 3), requires_grad=True)}
    dst = {"x": Tensor(np.zeros((2, 3)), requires_grad=True)}
    save_params(tmp_path / "p.bin", src)
    load_params(tmp_path / "p.bin", dst)
    np.testing.assert_array_equal(dst["x"].data, src["x"].data)
    bad = {"x": Tensor(np.zeros((3, 2)), requires_grad=True)}
    with pytest.raises(ShapeError):
        load_params(tmp_path / "p.bin", bad)
