"""Op-level checks: hand cases, contracts, finite-difference oracles."""

import numpy as np
import pytest

from condlab import Tensor, backward, no_grad
from condlab.autograd import (
    ShapeError,
    add,
    concat_cols,
    concat_rows,
    cond_softmax,
    current_tape,
    embedding_lookup,
    gelu,
    im2col,
    layernorm,
    masked_cross_entropy,
    matmul,
    mean_all,
    mul,
    reshape,
    slice_cols,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
)

from conftest import check_grads, fd_grad


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(a), Tensor(np.eye(2, dtype=np.float32)))
    assert np.allclose(out.data, a)


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, np.array([[3.0], [7.0]], dtype=np.float32))


def test_matmul_gradient_matches_finite_differences(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    check_grads(lambda t: sum_all(mul(matmul(t["a"], t["b"]), t["w"])), {"a": a, "b": b, "w": rng.normal(size=(3, 2))}, rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


# ---------------------------------------------------------------------------
# layernorm


def test_layernorm_constant_row_is_zero():
    x = Tensor([[5.0, 5.0, 5.0, 5.0]])
    out = layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0)


def test_layernorm_zero_gain_yields_bias():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    bias = np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32)
    out = layernorm(x, Tensor(np.zeros(4, dtype=np.float32)), Tensor(bias))
    assert np.allclose(out.data, np.broadcast_to(bias, (3, 4)))


def test_layernorm_shape_error():
    with pytest.raises(ShapeError):
        layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_layernorm_gradient_matches_finite_differences(rng):
    leaves = {"x": rng.normal(size=(2, 8)), "g": rng.normal(size=8), "b": rng.normal(size=8), "w": rng.normal(size=(2, 8))}
    check_grads(lambda t: sum_all(mul(layernorm(t["x"], t["g"], t["b"]), t["w"])), leaves)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_row():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 1.0 / 3.0)


def test_softmax_rows_sum_to_one_double():
    x = Tensor(np.random.default_rng(3).normal(scale=5.0, size=(10, 7)), dtype=np.float64)
    out = softmax_rows(x)
    assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(out.data >= 0)


def test_softmax_gradient_of_sum_is_zero():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 5)), requires_grad=True, dtype=np.float64)
    backward(sum_all(softmax_rows(x)))
    assert np.allclose(x.grad, 0.0, atol=1e-15)


def test_softmax_large_inputs_do_not_overflow():
    out = softmax_rows(Tensor([[1000.0, 0.0]], dtype=np.float64))
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] > 1.0 - 1e-12
    assert out.data[0, 1] < 1e-12


def test_softmax_gradient_matches_finite_differences(rng):
    leaves = {"x": rng.normal(size=(3, 5)), "w": rng.normal(size=(3, 5))}
    check_grads(lambda t: sum_all(mul(softmax_rows(t["x"]), t["w"])), leaves)


# ---------------------------------------------------------------------------
# gelu


def test_gelu_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_asymptotes():
    out = gelu(Tensor([8.0, -8.0], dtype=np.float64))
    assert abs(out.data[0] - 8.0) < 1e-6
    assert abs(out.data[1]) < 1e-6


def test_gelu_gradient_matches_finite_differences(rng):
    leaves = {"x": rng.normal(size=12), "w": rng.normal(size=12)}
    check_grads(lambda t: sum_all(mul(gelu(t["x"]), t["w"])), leaves)


# ---------------------------------------------------------------------------
# embedding lookup


def test_embedding_empty_ids():
    out = embedding_lookup(Tensor(np.zeros((5, 3))), [])
    assert out.data.shape == (0, 3)


def test_embedding_repeated_id_scatter_adds():
    table = Tensor(np.random.default_rng(0).normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
    backward(sum_all(embedding_lookup(table, [3, 3])))
    expected = np.zeros((5, 3))
    expected[3] = 2.0
    assert np.array_equal(table.grad, expected)


def test_embedding_gradient_matches_finite_differences(rng):
    leaves = {"t": rng.normal(size=(6, 4)), "w": rng.normal(size=(3, 4))}
    check_grads(lambda t: sum_all(mul(embedding_lookup(t["t"], [0, 2, 2]), t["w"])), leaves)


def test_embedding_out_of_range_names_id():
    with pytest.raises(IndexError, match="7"):
        embedding_lookup(Tensor(np.zeros((5, 3))), [1, 7])


# ---------------------------------------------------------------------------
# masked cross entropy


def test_cross_entropy_uniform_logits_is_log_v():
    logits = Tensor(np.zeros((4, 11), dtype=np.float64))
    loss = masked_cross_entropy(logits, [1, 5, 2, 9], [1, 1, 1, 1])
    assert abs(loss.item() - np.log(11)) < 1e-12


def test_cross_entropy_masked_targets_do_not_matter(rng):
    logits_data = rng.normal(size=(5, 7))
    mask = [1, 0, 1, 0, 1]
    a = masked_cross_entropy(Tensor(logits_data.copy()), [1, 2, 3, 4, 5], mask)
    b = masked_cross_entropy(Tensor(logits_data.copy()), [1, 6, 3, 0, 5], mask)
    assert a.data.tobytes() == b.data.tobytes()


def test_cross_entropy_matches_hand_summed_nll(rng):
    # independent oracle: per-position log-softmax summed by hand
    logits_data = rng.normal(size=(4, 7))
    targets = [3, 1, 6, 0]
    mask = [1, 1, 0, 1]
    expected = 0.0
    for i in range(4):
        if not mask[i]:
            continue
        row = logits_data[i]
        p = np.exp(row) / np.exp(row).sum()
        expected += -np.log(p[targets[i]])
    expected /= 3
    loss = masked_cross_entropy(Tensor(logits_data, dtype=np.float64), targets, mask)
    assert abs(loss.item() - expected) < 1e-12


def test_cross_entropy_gradient_matches_finite_differences(rng):
    leaves = {"x": rng.normal(size=(4, 7))}
    check_grads(lambda t: masked_cross_entropy(t["x"], [3, 1, 6, 0], [1, 0, 1, 1]), leaves)


def test_cross_entropy_all_masked_raises():
    with pytest.raises(ValueError, match="empty loss"):
        masked_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [0, 0])


# ---------------------------------------------------------------------------
# backward contracts


def test_backward_sum_gives_ones():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    backward(sum_all(a))
    assert np.array_equal(a.grad, np.ones((3, 2), dtype=np.float32))


def test_backward_composite_matches_finite_differences(rng):
    leaves = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}
    check_grads(lambda t: sum_all(mul(t["a"], t["b"])), leaves, rtol=1e-6)


def test_backward_off_path_leaf_has_zero_grad():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    backward(sum_all(mul(a, 2.0)))
    assert np.array_equal(b.grad, np.zeros((2, 2), dtype=np.float32))


def test_backward_non_scalar_root_raises():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(add(a, a))


def test_backward_twice_on_same_tape_raises():
    a = Tensor(np.ones(3), requires_grad=True)
    loss = sum_all(a)
    backward(loss)
    with pytest.raises((RuntimeError, ValueError)):
        backward(loss)


def test_forward_backward_bit_identical_across_runs():
    def run():
        r = np.random.default_rng(42)
        a = Tensor(r.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(r.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        loss = sum_all(gelu(matmul(a, softmax_rows(b))))
        backward(loss)
        return a.grad.tobytes(), b.grad.tobytes(), loss.data.tobytes()

    assert run() == run()


def test_no_grad_suppresses_recording():
    before = len(current_tape().entries)
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        out = matmul(a, a)
    assert not out.requires_grad
    assert len(current_tape().entries) == before


# ---------------------------------------------------------------------------
# structural ops and the conditioning softmax


def test_structural_ops_gradients(rng):
    leaves = {"x": rng.normal(size=(4, 6)), "w": rng.normal(size=(6, 4))}

    def build(t):
        y = transpose(t["x"])
        y = reshape(y, (4, 6))
        y = concat_rows([slice_rows(y, 0, 2), slice_rows(y, 2, 4)])
        y = concat_cols([slice_cols(y, 0, 3), slice_cols(y, 3, 6)])
        return sum_all(mul(y, transpose(t["w"])))

    check_grads(build, leaves)


def test_cond_softmax_text_part_matches_plain_softmax(rng):
    s = Tensor(rng.normal(size=(3, 5)))
    c = Tensor(rng.normal(size=(3, 2)))
    joint = cond_softmax(s, c)
    plain = softmax_rows(Tensor(s.data.copy()))
    assert joint.data[:, :5].tobytes() == plain.data.tobytes()
    assert np.all(joint.data[:, 5:] > 0)


def test_cond_softmax_gradient_matches_finite_differences(rng):
    leaves = {"s": rng.normal(size=(3, 5)), "c": rng.normal(size=(3, 2)), "w": rng.normal(size=(3, 7))}
    check_grads(lambda t: sum_all(mul(cond_softmax(t["s"], t["c"]), t["w"])), leaves)


def test_im2col_matches_naive_patches(rng):
    x = rng.normal(size=(2, 6, 6))
    out = im2col(Tensor(x), 3, 2)
    # oracle: explicit loops over output positions and kernel offsets
    rows = []
    for oy in range(2):
        for ox in range(2):
            patch = []
            for ci in range(2):
                for ky in range(3):
                    for kx in range(3):
                        patch.append(x[ci, oy * 2 + ky, ox * 2 + kx])
            rows.append(patch)
    assert np.allclose(out.data, np.array(rows))


def test_im2col_gradient_matches_finite_differences(rng):
    leaves = {"x": rng.normal(size=(2, 6, 6)), "w": rng.normal(size=(4, 18))}
    check_grads(lambda t: sum_all(mul(im2col(t["x"], 3, 2), t["w"])), leaves)


def test_add_broadcast_bias_gradient(rng):
    leaves = {"x": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    check_grads(lambda t: mean_all(add(t["x"], t["b"])), leaves)
