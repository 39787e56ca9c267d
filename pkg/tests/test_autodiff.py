import zlib

import numpy as np
import pytest

from gradcheck import LAYER_CASES, check_case
from layerrisk import autodiff as ad
from layerrisk.autodiff import Variable
from layerrisk.errors import ContractError, DimensionError


@pytest.mark.parametrize("layer", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(layer):
    gen = np.random.default_rng(zlib.crc32(layer.encode()))
    for _ in range(20):
        assert check_case(*LAYER_CASES[layer](gen), gen) < 1e-4


def test_sum_gives_ones_and_square_gives_double():
    x = Variable(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.vsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Variable(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ad.vsum(y * y).backward()
    np.testing.assert_array_equal(y.grad, 2 * y.value)


def test_shared_subexpression_accumulates():
    x = Variable(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()          # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [2 * 2 + 3 * 4])


def test_node_ids_are_creation_ordered():
    a = Variable(1.0, requires_grad=True)
    b = a * 2.0
    c = b + a
    assert a.node_id < b.node_id < c.node_id


def test_backward_requires_scalar_or_seed():
    x = Variable(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()
    with pytest.raises(DimensionError):
        (x * 2.0).backward(np.ones(4))


def test_vector_jacobian_product_and_batched_seed():
    gen = np.random.default_rng(1)
    w = gen.standard_normal((4, 3))
    x = Variable(gen.standard_normal((2, 4)), requires_grad=True)
    out = ad.relu(ad.matmul(x, w))
    seeds = gen.standard_normal((5, 2, 3))
    out.backward(seeds, batched=True)
    stacked = x.grad.copy()
    assert stacked.shape == (5, 2, 4)
    for j in range(5):
        x.grad = None
        out.backward(seeds[j])
        np.testing.assert_allclose(stacked[j], x.grad, rtol=1e-12, atol=1e-12)


def test_leaves_only_mode_skips_intermediate_grads():
    x = Variable(np.ones(3), requires_grad=True)
    h = x * 3.0
    ad.vsum(h).backward(retain_intermediate=False)
    assert h.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 3.0, 3.0])


def test_constants_receive_no_gradient():
    c = Variable(np.ones(2))
    x = Variable(np.ones(2), requires_grad=True)
    ad.vsum(c * x).backward()
    assert c.grad is None and not c.requires_grad


def test_conv_matches_hand_computed_cross_correlation():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
    out = ad.conv2d(Variable(x), Variable(w), Variable(np.array([0.5]))).value
    # out[i, j] = x[i, j] - x[i+1, j+1] + 0.5 = -4 + 0.5
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), -3.5))


def test_conv_stride_padding_shape_and_errors():
    x = Variable(np.zeros((2, 3, 32, 32)))
    w = Variable(np.zeros((4, 3, 11, 11)))
    assert ad.conv2d(x, w, stride=2, padding=5).shape == (2, 4, 16, 16)
    with pytest.raises(DimensionError):
        ad.conv2d(x, Variable(np.zeros((4, 2, 3, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d(Variable(np.zeros((1, 1, 2, 2))), Variable(np.zeros((1, 1, 3, 3))))


def test_maxpool_routes_ties_to_first_element():
    x = Variable(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.vsum(ad.maxpool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_drops_incomplete_windows():
    x = Variable(np.arange(25.0).reshape(1, 1, 5, 5))
    np.testing.assert_array_equal(ad.maxpool2d(x, 2).value[0, 0], [[6, 8], [16, 18]])


def test_softmax_cross_entropy_value_and_label_check():
    z = Variable(np.zeros((2, 4)))
    assert ad.softmax_cross_entropy(z, [0, 3]).value == pytest.approx(np.log(4))
    with pytest.raises(DimensionError):
        ad.softmax_cross_entropy(z, [0, 1, 2])


def test_sigmoid_is_stable_for_large_inputs():
    s = ad.sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])
    loss = ad.sigmoid_binary_cross_entropy(Variable(np.array([800.0, -800.0])), [1, 0])
    assert loss.value == pytest.approx(0.0)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        ad.matmul(Variable(np.ones((2, 3))), Variable(np.ones((2, 3))))
