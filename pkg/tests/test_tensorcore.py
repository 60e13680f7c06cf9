import math

import numpy as np
import pytest

from merlearn.errors import DimensionError, LabelError, NonFiniteError
from merlearn.tensorcore import (
    AdamState,
    ParamSet,
    Tensor,
    adam_step,
    backward,
    conv2d,
    finite_difference_check,
    grad,
    l2_distance,
    lstm_cell,
    ops,
    pairwise_distances,
    sgd_step,
    softmax_cross_entropy,
)

# -- independent oracles ----------------------------------------------------


def conv_oracle(x, w, stride, pad):
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, F, oh, ow))
    for b in range(B):
        for f in range(F):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                s += xp[b, c, i * stride + u, j * stride + v] * w[f, c, u, v]
                    out[b, f, i, j] = s
    return out


def lstm_oracle(x, h, c, w_ih, w_hh, b):
    B, H = h.shape
    h_new, c_new = np.zeros((B, H)), np.zeros((B, H))
    for r in range(B):
        for u in range(H):
            pre = []
            for gate in range(4):
                col = gate * H + u
                s = b[col]
                for i in range(x.shape[1]):
                    s += x[r, i] * w_ih[i, col]
                for j in range(H):
                    s += h[r, j] * w_hh[j, col]
                pre.append(s)
            sig = lambda z: 1.0 / (1.0 + math.exp(-z))
            ig, fg, gg, og = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
            c_new[r, u] = fg * c[r, u] + ig * gg
            h_new[r, u] = og * math.tanh(c_new[r, u])
    return h_new, c_new


def xent_oracle(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[int(np.argmax(lab))]
    return total / len(logits)


def one_hot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


# -- conv2d -----------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_sum_kernel():
    out = conv2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, 2, 1), atol=1e-12, rtol=0)


def test_conv2d_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# -- lstm -------------------------------------------------------------------


def _lstm_weights(I, H, rng=None, scale=1.0):
    if rng is None:
        return {"w_ih": Tensor(np.zeros((I, 4 * H))), "w_hh": Tensor(np.zeros((H, 4 * H))), "bias": Tensor(np.zeros(4 * H))}
    return {
        "w_ih": Tensor(scale * rng.normal(size=(I, 4 * H))),
        "w_hh": Tensor(scale * rng.normal(size=(H, 4 * H))),
        "bias": Tensor(scale * rng.normal(size=4 * H)),
    }


def test_lstm_all_zero():
    h, c = lstm_cell(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), _lstm_weights(3, 4))
    assert not h.data.any() and not c.data.any()


def test_lstm_forget_gate_half():
    v = np.array([[0.3, -1.2, 2.0, 0.0]])
    h, c = lstm_cell(np.zeros((1, 3)), np.zeros((1, 4)), v, _lstm_weights(3, 4))
    np.testing.assert_allclose(c.data, 0.5 * v, rtol=0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * v), rtol=0, atol=1e-15)


def test_lstm_matches_scalar_loop():
    rng = np.random.default_rng(2)
    w = _lstm_weights(3, 4, rng)
    x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    h, c = lstm_cell(x, h0, c0, w)
    ho, co = lstm_oracle(x, h0, c0, w["w_ih"].data, w["w_hh"].data, w["bias"].data)
    np.testing.assert_allclose(h.data, ho, atol=1e-12, rtol=0)
    np.testing.assert_allclose(c.data, co, atol=1e-12, rtol=0)


def test_lstm_hidden_mismatch():
    with pytest.raises(DimensionError):
        lstm_cell(np.zeros((2, 3)), np.zeros((2, 5)), np.zeros((2, 5)), _lstm_weights(3, 4))


# -- softmax cross-entropy --------------------------------------------------


def test_xent_uniform():
    loss = softmax_cross_entropy(Tensor(np.zeros((1, 5))), one_hot([3], 5))
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)


def test_xent_saturated():
    loss = softmax_cross_entropy(Tensor([[1000.0, 0, 0, 0, 0]]), one_hot([0], 5))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_xent_matches_lse_oracle():
    rng = np.random.default_rng(3)
    logits, labels = rng.normal(size=(4, 5)), one_hot(rng.integers(0, 5, 4), 5)
    loss = softmax_cross_entropy(Tensor(logits), labels)
    assert loss.item() == pytest.approx(xent_oracle(logits, labels), abs=1e-10)
    assert loss.item() > 0


def test_xent_rejects_bad_labels():
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.5, 0.0]]))


# -- l2 distance ------------------------------------------------------------


def test_l2_identical_is_zero_with_zero_grad():
    a = Tensor(np.array([1.0, 2.0]), tracked=True)
    d = l2_distance(a, a)
    assert d.item() == 0.0
    (g,) = grad(d, [a])
    assert not g.data.any()


def test_l2_pythagorean():
    assert l2_distance(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 5.0


def test_l2_matches_loop():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=100), rng.normal(size=100)
    s = 0.0
    for u, v in zip(a, b):
        s += (u - v) ** 2
    assert l2_distance(Tensor(a), Tensor(b)).item() == pytest.approx(math.sqrt(s), abs=1e-12)


def test_l2_length_mismatch():
    with pytest.raises(DimensionError, match="length"):
        l2_distance(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_pairwise_matches_l2():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 7))
    d = pairwise_distances(Tensor(x)).data
    for i in range(5):
        for j in range(5):
            assert d[i, j] == pytest.approx(np.sqrt(((x[i] - x[j]) ** 2).sum()), abs=1e-12)


# -- backward ---------------------------------------------------------------


def test_backward_square():
    p = ParamSet.leaves({"x": np.array(3.0)})
    g = backward(ops.square(p["x"]), p)
    assert g["x"].item() == 6.0


def test_backward_quadratic_distance():
    rng = np.random.default_rng(6)
    a0, eps = rng.normal(size=6), 1e-3 * rng.normal(size=6)
    p = ParamSet.leaves({"a": a0})
    loss = ops.square(l2_distance(p["a"], Tensor(a0 + eps)))
    np.testing.assert_allclose(backward(loss, p)["a"].data, -2 * eps, atol=1e-15)


def test_backward_rejects_non_scalar():
    p = ParamSet.leaves({"a": np.ones(3)})
    with pytest.raises(DimensionError):
        backward(ops.mul(p["a"], 2.0), p)


def test_unreached_gradient_is_exact_zero():
    p = ParamSet.leaves({"a": np.ones(3), "b": np.ones((2, 2))})
    g = backward(ops.sum(ops.square(p["a"])), p)
    assert g["b"].shape == (2, 2)
    assert np.array_equal(g["b"].data, np.zeros((2, 2)))


def test_non_finite_surfaces_as_error():
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor(np.array([1000.0])))


def _primitive_cases(rng):
    """(name, f(params) -> scalar, params) on small random shapes."""
    w_lstm = lambda p: {"w_ih": p["w_ih"], "w_hh": p["w_hh"], "bias": p["bias"]}
    lab = one_hot(rng.integers(0, 4, 3), 4)
    cases = [
        ("conv2d", lambda p: ops.sum(ops.square(conv2d(p["x"], p["w"], stride=2, padding=1))),
         {"x": rng.normal(size=(2, 2, 5, 5)), "w": rng.normal(size=(3, 2, 3, 3))}),
        ("lstm_cell", lambda p: ops.sum(ops.mul(lstm_cell(p["x"], p["h"], p["c"], w_lstm(p))[0], Tensor(lab[:, :3]))),
         {"x": rng.normal(size=(3, 2)), "h": rng.normal(size=(3, 3)), "c": rng.normal(size=(3, 3)),
          "w_ih": rng.normal(size=(2, 12)), "w_hh": rng.normal(size=(3, 12)), "bias": rng.normal(size=12)}),
        ("softmax_cross_entropy", lambda p: softmax_cross_entropy(p["z"], lab), {"z": rng.normal(size=(3, 4))}),
        ("l2_distance", lambda p: l2_distance(p["a"], p["b"]), {"a": rng.normal(size=5), "b": rng.normal(size=5)}),
        ("pairwise_distances", lambda p: ops.sum(pairwise_distances(p["x"])), {"x": rng.normal(size=(4, 3))}),
        ("div/abs/clamp", lambda p: ops.sum(ops.abs_(ops.div(p["a"], ops.clamp_min(ops.abs_(p["b"]), 0.1)))),
         {"a": rng.normal(size=4), "b": rng.normal(size=4)}),
        ("matmul/relu/sigmoid", lambda p: ops.sum(ops.sigmoid(ops.relu(ops.matmul(p["a"], p["b"])))),
         {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}),
    ]
    return cases


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    for name, f, arrays in _primitive_cases(rng):
        err = finite_difference_check(f, ParamSet.leaves(arrays), step=1e-5)
        assert err < 1e-4, name


def test_fd_check_sum_of_squares():
    p = ParamSet.leaves({"a": np.random.default_rng(7).normal(size=10)})
    assert finite_difference_check(lambda q: ops.sum(ops.square(q["a"])), p) < 1e-8


# -- second order -----------------------------------------------------------


def test_second_order_through_inner_step_on_quadratic():
    """d/dθ of ½‖φ − c‖² with φ = θ − α(Aθ + b) equals (I − αA)ᵀ(φ − c)."""
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    b, c, alpha = np.array([0.3, -0.2]), np.array([1.0, 2.0]), 0.1
    theta0 = np.array([0.7, -0.4])

    def meta_loss(p):
        t = p["t"]
        inner = ops.add(ops.mul(0.5, ops.sum(ops.mul(t, ops.reshape(ops.matmul(Tensor(A), ops.reshape(t, (2, 1))), (2,))))),
                        ops.sum(ops.mul(Tensor(b), t)))
        (g,) = grad(inner, [t], create_graph=True)
        phi = ops.sub(t, ops.mul(g, alpha))
        return ops.mul(0.5, ops.sum(ops.square(ops.sub(phi, Tensor(c)))))

    p = ParamSet.leaves({"t": theta0})
    analytic = backward(meta_loss(p), p)["t"].data
    phi = theta0 - alpha * (A @ theta0 + b)
    expected = (np.eye(2) - alpha * A).T @ (phi - c)
    np.testing.assert_allclose(analytic, expected, atol=1e-12)
    assert finite_difference_check(meta_loss, p) < 1e-6


# -- optimizers -------------------------------------------------------------


def test_sgd_lr_zero_is_identity():
    p = ParamSet.leaves({"a": np.ones(3)})
    out = sgd_step(p, p, 0.0)
    assert np.array_equal(out["a"].data, p["a"].data)


def test_sgd_arithmetic():
    p = ParamSet.leaves({"a": np.array(1.0)})
    g = ParamSet({"a": Tensor(np.array(2.0))})
    assert sgd_step(p, g, 0.04)["a"].item() == pytest.approx(0.92, abs=1e-15)


def test_sgd_jacobian_is_identity_minus_lr_hessian():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    lr = 0.1
    p = ParamSet.leaves({"t": np.array([0.5, -1.0])})
    loss = ops.mul(0.5, ops.sum(ops.mul(p["t"], ops.reshape(ops.matmul(Tensor(A), ops.reshape(p["t"], (2, 1))), (2,)))))
    g = backward(loss, p, create_graph=True)
    out = sgd_step(p, g, lr)["t"]
    J = np.stack([grad(ops.sum(ops.take(out, 0, i, i + 1)), [p["t"]])[0].data for i in range(2)])
    np.testing.assert_allclose(J, np.eye(2) - lr * A, atol=1e-8)


def test_sgd_shape_mismatch():
    p = ParamSet.leaves({"a": np.ones(3)})
    with pytest.raises(DimensionError):
        sgd_step(p, ParamSet({"a": Tensor(np.ones(2))}), 0.1)


def test_adam_zero_grad_leaves_params():
    p = ParamSet.leaves({"a": np.array([1.0, -2.0])})
    _, out = adam_step(None, p, ParamSet({"a": Tensor(np.zeros(2))}), lr=0.001)
    assert np.array_equal(out["a"].data, p["a"].data)


def test_adam_first_step_is_lr_sign():
    p = ParamSet.leaves({"a": np.array([1.0, -2.0, 0.5])})
    g = ParamSet({"a": Tensor(np.array([0.3, -5.0, 1e-2]))})
    _, out = adam_step(None, p, g, lr=0.001)
    np.testing.assert_allclose(p["a"].data - out["a"].data, 0.001 * np.sign(g["a"].data), rtol=1e-5)


def test_adam_trajectory_matches_scalar_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    ref = []
    for t in range(1, 11):
        gx = 2 * x
        m = b1 * m + (1 - b1) * gx
        v = b2 * v + (1 - b2) * gx * gx
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        ref.append(x)
    p, state = ParamSet.leaves({"x": np.array(1.0)}), AdamState()
    for t in range(10):
        g = backward(ops.square(p["x"]), p)
        state, p = adam_step(state, p, g, lr)
        assert p["x"].item() == pytest.approx(ref[t], abs=1e-10)


# -- ParamSet ---------------------------------------------------------------


def test_paramset_flatten_round_trip_bit_exact():
    rng = np.random.default_rng(8)
    p = ParamSet.leaves({"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}, {"w": "encoder", "b": "solver"})
    q = p.unflatten(p.flatten())
    for k in p:
        assert q[k].data.tobytes() == p[k].data.tobytes()
    assert q.segments == p.segments


def test_paramset_select_segment():
    p = ParamSet.leaves({"w": np.ones(2), "b": np.ones(1)}, {"w": "encoder", "b": "solver"})
    assert list(p.select("encoder")) == ["w"]
    assert p.flat_tensor("solver").shape == (1,)
