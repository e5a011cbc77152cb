import numpy as np
import pytest

from widemeta.autodiff import (ConfigurationError, ContractError, DegenerateBatchError, DimensionError,
                               Tape, Tensor, affine, backward, batchnorm2d, conv2d, finite_diff_grad,
                               mul, relu, scale, sgd_step, softmax_cross_entropy, tsum)


def conv_oracle(x, w, b, stride, padding):
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[f]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += w[f, c, u, v] * xp[n, c, i * stride + u, j * stride + v]
                    out[n, f, i, j] = acc
    return out


def leaf(a, name="p"):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


# -- affine ------------------------------------------------------------------

def test_affine_identity():
    out = affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_affine_hand_expansion():
    out = affine(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([1.0, -1.0]))
    np.testing.assert_allclose(out.data, [[4, 1]])


def test_affine_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)|\(2, 2\).*\(1, 3\)"):
        affine(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


# -- conv2d --------------------------------------------------------------------

def test_conv_identity_1x1(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_allclose(out.data, x, atol=1e-7)


def test_conv_delta_kernel(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), 1, 1)
    np.testing.assert_allclose(out.data, x, atol=1e-7)


def test_conv_example_stride2_pad1(rng):
    x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
    w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
    b = np.zeros(1, np.float32)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, 2, 1), atol=1e-6)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
def test_conv_matches_nested_loops(stride, padding):
    r = np.random.default_rng(stride * 10 + padding)
    x = r.standard_normal((2, 3, 8, 8))
    w = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    ref = conv_oracle(x, w, b, stride, padding)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, ref, atol=1e-6)
    # float32 storage: one rounding of the accumulated value
    x32, w32, b32 = (a.astype(np.float32) for a in (x, w, b))
    out32 = conv2d(Tensor(x32), Tensor(w32), Tensor(b32), stride, padding)
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32.data, conv_oracle(x32, w32, b32, stride, padding), rtol=1e-6, atol=1e-6)


def test_conv_collapse_is_configuration_error():
    with pytest.raises(ConfigurationError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), Tensor(np.zeros(1)), 1, 0)


# -- relu / batchnorm ------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(relu(Tensor(x)).data, x)


def test_relu_gradient():
    p = leaf([-1.0, 2.0])
    with Tape():
        loss = tsum(relu(p))
    np.testing.assert_array_equal(backward(loss)["p"], [0, 1])


def test_batchnorm_constant_channel_is_zero():
    out = batchnorm2d(Tensor(np.full((2, 1, 3, 3), 4.0)), Tensor([1.0]), Tensor([0.0]))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_batchnorm_gamma_zero_gives_beta(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = batchnorm2d(Tensor(x), Tensor(np.zeros(3)), Tensor([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(out.data, np.array([1.0, -2.0, 0.5])[None, :, None, None] * np.ones_like(x))


def test_batchnorm_moments(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 3 + 1
    gamma, beta = np.array([2.0, -0.5, 1.0]), np.array([0.1, 0.2, -0.3])
    out = batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), np.abs(gamma), atol=1e-4)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# -- softmax cross-entropy ---------------------------------------------------------

def test_cross_entropy_uniform():
    loss = softmax_cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4])
    assert abs(loss.item() - np.log(5)) < 1e-6


def test_cross_entropy_large_margin():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1e4
    assert softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-8


def test_cross_entropy_matches_explicit_formula(rng):
    z = rng.standard_normal((2, 3))
    y = np.array([2, 0])
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    ref = -np.mean(np.log(p[np.arange(2), y]))
    assert abs(softmax_cross_entropy(Tensor(z), y).item() - ref) < 1e-6


def test_cross_entropy_shift_invariant(rng):
    z = rng.standard_normal((4, 5))
    y = [0, 1, 2, 3]
    a = softmax_cross_entropy(Tensor(z), y).item()
    b = softmax_cross_entropy(Tensor(z + rng.uniform(-50, 50, size=(4, 1))), y).item()
    assert abs(a - b) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


# -- backward -------------------------------------------------------------------

def test_backward_outer_product_structure(rng):
    x = rng.standard_normal((1, 3))
    W = rng.standard_normal((2, 3))
    p = leaf(W, "W")
    with Tape():
        loss = tsum(affine(Tensor(x), p, Tensor(np.zeros(2))))
    g = backward(loss)["W"]
    fd = finite_diff_grad(lambda w: affine(Tensor(x), Tensor(w), Tensor(np.zeros(2))).data.sum(), W)
    np.testing.assert_allclose(g, fd, atol=1e-6)
    np.testing.assert_allclose(g, np.ones((2, 1)) * x, atol=1e-12)


def test_backward_skips_frozen_and_zeroes_unreachable():
    a = leaf([1.0, 2.0], "a")
    frozen = Tensor([3.0, 4.0], requires_grad=False, name="frozen")
    unused = leaf([5.0], "unused")
    with Tape():
        loss = tsum(mul(a, frozen))
    g = backward(loss, {"a": a, "frozen": frozen, "unused": unused})
    assert "frozen" not in g
    np.testing.assert_array_equal(g["unused"], [0.0])
    np.testing.assert_array_equal(g["a"], [3.0, 4.0])


def test_backward_zero_multiplied_subtree():
    a, b = leaf([1.0, -2.0], "a"), leaf([0.5, 0.7], "b")
    with Tape():
        loss = tsum(add_(scale(tsum(mul(a, a)), 0.0), tsum(b)))
    g = backward(loss, {"a": a, "b": b})
    assert np.all(g["a"] == 0)


def add_(x, y):
    from widemeta.autodiff import add
    return add(x, y)


def test_backward_contract_errors():
    a = leaf([1.0, 2.0], "a")
    with Tape():
        vec = mul(a, a)
        loss = tsum(vec)
    with pytest.raises(ContractError):
        backward(vec)
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


# -- sgd_step -----------------------------------------------------------------------

def test_sgd_masked_coordinate():
    p = {"p": Tensor(np.array([1.0, 1.0]), requires_grad=True, name="p")}
    out = sgd_step(p, {"p": np.array([1.0, 2.0])}, 0.5, {"p": np.array([1, 0], np.uint8)})
    np.testing.assert_array_equal(out["p"].data, [0.5, 1.0])


def test_sgd_zero_lr_and_zero_mask_bit_identical(rng):
    p = {"p": Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True, name="p")}
    g = {"p": rng.standard_normal(5).astype(np.float32)}
    assert sgd_step(p, g, 0.0)["p"].data.tobytes() == p["p"].data.tobytes()
    assert sgd_step(p, g, 0.3, {"p": np.zeros(5, np.uint8)})["p"].data.tobytes() == p["p"].data.tobytes()


def test_sgd_full_mask_equals_unmasked(rng):
    p = {"p": Tensor(rng.standard_normal(4), requires_grad=True, name="p")}
    g = {"p": rng.standard_normal(4)}
    a = sgd_step(p, g, 0.1)["p"].data
    b = sgd_step(p, g, 0.1, {"p": np.ones(4, np.uint8)})["p"].data
    np.testing.assert_array_equal(a, b)


def test_sgd_missing_grad_untouched_and_shape_error():
    p = {"p": Tensor(np.ones(2)), "q": Tensor(np.ones(3))}
    out = sgd_step(p, {"p": np.ones(2)}, 1.0)
    assert out["q"] is p["q"]
    with pytest.raises(DimensionError):
        sgd_step(p, {"q": np.ones(2)}, 1.0)


# -- finite differences -----------------------------------------------------------------

def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda p: (p ** 2).sum(), np.array([1.0, -2.0])),
                               [2, -4], atol=1e-6)
    assert np.all(np.abs(finite_diff_grad(lambda p: 3.0, np.array([0.3, 0.1]))) < 1e-8)
