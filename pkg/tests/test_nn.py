import numpy as np
import pytest

from layerrisk import autodiff as ad
from layerrisk.autodiff import Variable
from layerrisk.errors import ConfigError, ContractError, DimensionError, FormatError
from layerrisk.nn import (ALEXNET_FULL_WIDTHS, OptimizerState, alexnet_widths, build_model, load_checkpoint,
                          optimizer_step, save_checkpoint)


def conv_params(c_in, c_out, k):
    return c_in * c_out * k * k + c_out


def test_parameter_counts_per_probe_layer():
    lenet = build_model("lenet", 10)
    assert lenet.probe_points == ["Conv2d_1", "Conv2d_2", "Conv2d_3"]
    assert [lenet.parameter_count(p) for p in lenet.probe_points] == [912, 3612, 3612]
    cnn = build_model("cnn_mnist", 10)
    assert cnn.probe_points == ["Conv2d_1"]
    assert cnn.parameter_count("Conv2d_1") == 312


def test_alexnet_scaled_counts_follow_the_conv_formula():
    full = [conv_params(3, 64, 11), conv_params(64, 192, 5), conv_params(192, 384, 3),
            conv_params(384, 256, 3), conv_params(256, 256, 3)]
    assert full == [23296, 307392, 663936, 884992, 590080]
    w = alexnet_widths()
    assert w == tuple(x // 4 for x in ALEXNET_FULL_WIDTHS)
    scaled = [conv_params(3, w[0], 11), conv_params(w[0], w[1], 5), conv_params(w[1], w[2], 3),
              conv_params(w[2], w[3], 3), conv_params(w[3], w[4], 3)]
    model = build_model("alexnet_scaled", 100)
    assert [model.parameter_count(p) for p in model.probe_points] == scaled
    # layers 2-5 shrink by ~16x (both channel counts scaled); ratios between them are kept
    for i in range(1, 4):
        assert scaled[i + 1] / scaled[i] == pytest.approx(full[i + 1] / full[i], rel=0.01)
    # the first layer keeps its 3 input channels, so it only shrinks 4x
    assert scaled[0] * 4 == full[0]


def test_build_model_errors():
    with pytest.raises(ConfigError):
        build_model("resnet", 10)
    with pytest.raises(ConfigError):
        build_model("lenet", 7)
    with pytest.raises(ConfigError):
        build_model("lenet", 10).activation_dim("Conv2d_9")


def test_activation_shapes_and_dims():
    lenet = build_model("lenet", 10)
    assert [lenet.activation_dim(p) for p in lenet.probe_points] == [12288, 3072, 768]
    x = np.random.default_rng(0).random((3, 3, 32, 32))
    fp = lenet.forward(x)
    for p in lenet.probe_points:
        assert fp.activations[p].shape == (3,) + lenet.activation_shape(p)
    assert fp.logits.shape == (3, 10)


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(DimensionError):
        build_model("cnn_mnist", 10).forward(np.zeros((2, 3, 28, 28)))


def test_zero_weight_model_gives_bias_activations():
    model = build_model("lenet", 10)
    for key, var in model.params.items():
        var.value = np.zeros_like(var.value)
    model.params["Conv2d_1.bias"].value = np.arange(12.0) - 3.0
    x = np.random.default_rng(1).random((2, 3, 32, 32))
    act = model.forward(x).activations["Conv2d_1"].value
    expected = np.maximum(np.arange(12.0) - 3.0, 0)[None, :, None, None]
    np.testing.assert_array_equal(act, np.broadcast_to(expected, act.shape))
    model.params["Conv2d_1.bias"].value = np.zeros(12)
    assert not model.forward(x).activations["Conv2d_1"].value.any()


def test_duplicated_sample_matches_single_sample():
    model = build_model("cnn_mnist", 10, seed=3)
    x = np.random.default_rng(2).random((1, 1, 28, 28))
    single = model.forward(x, [4])
    single.loss.backward()
    g1 = {k: v.grad.copy() for k, v in model.params.items()}
    model.zero_grad()
    dup = model.forward(np.repeat(x, 4, axis=0), [4, 4, 4, 4])
    dup.loss.backward()
    assert dup.loss.value == pytest.approx(single.loss.value, rel=1e-12)
    acts = dup.activations["Conv2d_1"].value
    assert all(np.array_equal(acts[0], acts[i]) for i in range(4))
    for k, v in model.params.items():
        np.testing.assert_allclose(v.grad, g1[k], rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("name, shape", [("cnn_mnist", (1, 28, 28)), ("lenet", (3, 32, 32))])
def test_network_loss_gradient_matches_finite_differences(name, shape):
    model = build_model(name, 10, seed=5)
    gen = np.random.default_rng(6)
    x = gen.random((3,) + shape)
    y = gen.integers(0, 10, 3)
    model.forward(x, y).loss.backward()
    step = 1e-5
    for key, var in model.params.items():
        idx = [tuple(gen.integers(0, s) for s in var.shape) for _ in range(5)]
        analytic = np.array([var.grad[i] for i in idx])
        numeric = []
        for i in idx:
            orig = var.value[i]
            var.value[i] = orig + step
            up = model.forward(x, y, track_params=False).loss.value
            var.value[i] = orig - step
            down = model.forward(x, y, track_params=False).loss.value
            var.value[i] = orig
            numeric.append((up - down) / (2 * step))
        numeric = np.array(numeric)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert err < 1e-4, key


def test_probe_activation_has_nonzero_input_gradient():
    model = build_model("lenet", 10, seed=1)
    x = Variable(np.random.default_rng(3).random((2, 3, 32, 32)), requires_grad=True)
    h = model.forward(x, stop_at="Conv2d_3", track_params=False).activations["Conv2d_3"]
    v = np.random.default_rng(4).standard_normal(h.shape)
    ad.vsum(ad.mul(h, v)).backward()
    assert np.abs(x.grad).max() > 0


def test_shared_offset_gradient_is_batch_sum_of_input_gradients():
    model = build_model("lenet", 10, seed=2)
    gen = np.random.default_rng(5)
    x = gen.random((3, 3, 32, 32))
    v = gen.standard_normal((3,) + model.activation_shape("Conv2d_2"))
    xv = Variable(x, requires_grad=True)
    h = model.forward(xv, stop_at="Conv2d_2", track_params=False).activations["Conv2d_2"]
    ad.vsum(ad.mul(h, v)).backward()
    offset = Variable(np.zeros((1, 3, 32, 32)), requires_grad=True)
    h2 = model.forward(x, stop_at="Conv2d_2", track_params=False, shared_offset=offset).activations["Conv2d_2"]
    np.testing.assert_allclose(h2.value, h.value, rtol=1e-12, atol=1e-12)
    ad.vsum(ad.mul(h2, v)).backward()
    np.testing.assert_allclose(offset.grad[0], xv.grad.sum(axis=0), rtol=1e-10, atol=1e-12)


def test_sgd_momentum_single_step_on_quadratic():
    # f(p) = p^2 at p = 3: grad 6, buffer 6, p <- 3 - 0.1 * 6 = 2.4; second step buffer 0.9*6 + 4.8
    model = build_model("cnn_mnist", 10)
    model.params = {"p": Variable(np.array([3.0]), requires_grad=True)}
    state = OptimizerState("sgd-momentum", learning_rate=0.1, momentum=0.9)
    p = model.params["p"]
    ad.vsum(p * p).backward()
    optimizer_step(state, model)
    assert p.value[0] == pytest.approx(2.4)
    assert p.grad is None
    ad.vsum(p * p).backward()
    optimizer_step(state, model)
    assert p.value[0] == pytest.approx(2.4 - 0.1 * (0.9 * 6.0 + 4.8))


def test_adam_first_step_and_zero_gradient():
    model = build_model("cnn_mnist", 10)
    model.params = {"p": Variable(np.array([1.0, -2.0]), requires_grad=True)}
    state = OptimizerState("adam", learning_rate=0.01)
    model.params["p"].grad = np.array([0.5, -4.0])
    optimizer_step(state, model)
    # bias-corrected first step moves each coordinate by ~lr * sign(g)
    np.testing.assert_allclose(model.params["p"].value, [0.99, -1.99], atol=1e-7)
    before = model.params["p"].value.copy()
    fresh = OptimizerState("adam", learning_rate=0.01)
    model.params["p"].grad = np.zeros(2)
    optimizer_step(fresh, model)
    np.testing.assert_array_equal(model.params["p"].value, before)


def test_optimizer_requires_gradients_and_known_kind():
    model = build_model("cnn_mnist", 10)
    with pytest.raises(ContractError):
        optimizer_step(OptimizerState("adam", 0.01), model)
    with pytest.raises(ConfigError):
        OptimizerState("rmsprop", 0.01)


def _train_steps(seed, steps=5):
    model = build_model("cnn_mnist", 10, seed=seed)
    state = OptimizerState("adam", 0.01)
    gen = np.random.default_rng(9)
    for _ in range(steps):
        x, y = gen.random((8, 1, 28, 28)), gen.integers(0, 10, 8)
        model.forward(x, y).loss.backward()
        optimizer_step(state, model)
    return model


def test_training_is_bit_deterministic():
    a, b = _train_steps(1), _train_steps(1)
    for k in a.params:
        assert np.array_equal(a.params[k].value, b.params[k].value)
    c = _train_steps(2)
    assert not np.array_equal(a.params["Dense_1.weight"].value, c.params["Dense_1.weight"].value)


def test_checkpoint_round_trip(tmp_path):
    model = _train_steps(4, steps=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.name == "cnn_mnist" and loaded.num_classes == 10
    for k, v in model.params.items():
        assert np.array_equal(loaded.params[k].value, v.value)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model("cnn_mnist", 10), path)
    blob = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + blob[8:])
    (tmp_path / "short").write_bytes(blob[:-9])
    (tmp_path / "long").write_bytes(blob + b"\0")
    for name, where in (("bad_magic", "offset 0"), ("short", "offset"), ("long", "trailing")):
        with pytest.raises(FormatError, match=where):
            load_checkpoint(tmp_path / name)
