import numpy as np
import pytest
from hypothesis import given, strategies as st

from fmgan import nn
from fmgan import tensor as T
from fmgan.tensor import ShapeError, Tensor


def _count(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def test_toy_mlp_parameter_count():
    net = nn.build_mlp(nn.mlp_spec(2, (32, 64, 64), 2), rng=0)
    # sum of in*out+out over the four dense layers
    assert net.num_parameters() == _count([2, 32, 64, 64, 2]) == 6498


@given(st.lists(st.integers(1, 20), min_size=2, max_size=5))
def test_parameter_count_is_pure_function_of_spec(widths):
    spec = nn.mlp_spec(widths[0], widths[1:-1], widths[-1])
    a = nn.build_mlp(spec, rng=1).num_parameters()
    b = nn.build_mlp(spec, rng=2).num_parameters()
    assert a == b == _count(widths)


def test_empty_spec_rejected():
    with pytest.raises(ValueError, match="empty"):
        nn.build_mlp([], rng=0)


def test_incompatible_chain_names_layer():
    spec = [nn.dense(2, 4), nn.activation("relu"), nn.dense(5, 1)]
    with pytest.raises(ShapeError, match="layer 2"):
        nn.build_mlp(spec, rng=0)


def test_same_seed_same_init():
    spec = nn.mlp_spec(3, (8,), 2)
    a, b = nn.build_mlp(spec, 5), nn.build_mlp(spec, 5)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_init_bounds_and_zero_bias():
    net = nn.build_mlp([nn.dense(16, 4)], rng=0)
    W, b = net.parameters()
    assert np.all(np.abs(W.data) <= np.sqrt(1 / 16))
    assert np.all(b.data == 0)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        nn.LayerSpec("dense", 0, 3)
    with pytest.raises(ValueError):
        nn.activation("gelu")


def test_conv_stack_shapes():
    spec = [nn.conv(3, 8, stride=2), nn.batchnorm(8), nn.activation("relu"), nn.flatten(), nn.dense(128, 5)]
    net = nn.build_network(spec, (8, 8, 3), rng=0)
    assert net.output_shape == (5,)
    assert net(Tensor(np.zeros((2, 8, 8, 3)))).shape == (2, 5)


# ---------------------------------------------------------------------------
# batch norm


def _bn(ch=3):
    return nn.BatchNorm(ch, np.float64)


def test_bn_constant_batch_gives_zeros():
    bn = _bn()
    out = nn.batchnorm_forward(Tensor(np.full((4, 3), 7.0)), bn, "train")
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_bn_train_output_mean_is_zero(rng):
    out = nn.batchnorm_forward(Tensor(5 + 3 * rng.standard_normal((16, 4, 4, 3))), _bn(), "train")
    assert np.all(np.abs(out.data.mean(axis=(0, 1, 2))) < 1e-5)


def test_bn_eval_is_pure(rng):
    bn = _bn()
    nn.batchnorm_forward(Tensor(rng.standard_normal((8, 3))), bn, "train")
    before = (bn.running_mean.copy(), bn.running_var.copy())
    x = Tensor(rng.standard_normal((5, 3)))
    a = nn.batchnorm_forward(x, bn, "eval").data
    b = nn.batchnorm_forward(x, bn, "eval").data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(before[0], bn.running_mean)
    np.testing.assert_array_equal(before[1], bn.running_var)


def test_bn_eval_is_affine(rng):
    bn = _bn()
    nn.batchnorm_forward(Tensor(rng.standard_normal((8, 3))), bn, "train")
    f = lambda x: nn.batchnorm_forward(Tensor(x), bn, "eval").data
    x, y = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    np.testing.assert_allclose(f(0.3 * x + 0.7 * y), 0.3 * f(x) + 0.7 * f(y), rtol=1e-12)


def test_bn_running_stats_update(rng):
    bn = _bn(2)
    x = rng.standard_normal((10, 2))
    nn.batchnorm_forward(Tensor(x), bn, "train")
    np.testing.assert_allclose(bn.running_mean, 0.01 * x.mean(0))
    np.testing.assert_allclose(bn.running_var, 0.99 + 0.01 * x.var(0))


def test_bn_single_sample_train_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        nn.batchnorm_forward(Tensor(np.zeros((1, 3))), _bn(), "train")


# ---------------------------------------------------------------------------
# optimizers


def _state(lr=0.1, kind="rmsprop"):
    return nn.OptimizerState(kind, lr, dict(nn._DEFAULT_HYPER[kind]))


def test_rmsprop_single_step_hand_value():
    p = np.array([1.0])
    st_ = _state(0.1)
    nn.rmsprop_step([p], [np.array([1.0])], st_)
    assert st_.slots["square_avg"][0][0] == pytest.approx(0.1)
    assert p[0] == pytest.approx(1 - 0.1 / np.sqrt(0.1 + 1e-8), abs=1e-12)
    assert p[0] == pytest.approx(0.68377, abs=1e-5)
    assert st_.step == 1


def test_rmsprop_zero_gradient_no_change():
    p = np.array([1.0, -2.0])
    nn.rmsprop_step([p], [np.zeros(2)], _state())
    np.testing.assert_array_equal(p, [1.0, -2.0])


@pytest.mark.parametrize("kind", ["rmsprop", "adam", "sgd"])
def test_zero_lr_is_bit_identical(kind, rng):
    p = rng.standard_normal(5).astype(np.float32)
    before = p.copy()
    nn._STEPS[kind]([p], [rng.standard_normal(5).astype(np.float32)], _state(0.0, kind))
    assert p.tobytes() == before.tobytes()


def test_non_finite_gradient_names_parameter():
    p = np.zeros(2)
    with pytest.raises(FloatingPointError, match="G.0.W"):
        nn.rmsprop_step([p], [np.array([np.nan, 0.0])], _state(), names=["G.0.W"])


def test_rmsprop_descends_quadratic():
    w = np.random.default_rng(3).standard_normal(10)
    st_ = _state(0.01)
    f = [float(w @ w)]
    for _ in range(200):
        nn.rmsprop_step([w], [2 * w], st_)
        f.append(float(w @ w))
    decreasing = np.mean(np.diff(f) < 0)
    assert decreasing >= 0.95


def test_identical_runs_identical_trajectories():
    def run():
        w = np.random.default_rng(0).standard_normal(4)
        st_ = _state(0.05)
        for _ in range(20):
            nn.rmsprop_step([w], [np.sin(w)], st_)
        return w.tobytes()
    assert run() == run()


def test_optimizer_state_roundtrip(rng):
    net = nn.build_mlp(nn.mlp_spec(2, (4,), 1), 0)
    opt = nn.Adam(net.named_parameters("G."))
    opt.step([rng.standard_normal(p.shape).astype(p.dtype) for p in opt.params])
    arrays = opt.state_arrays()
    other = nn.Adam(net.named_parameters("G."))
    other.load_state_arrays(arrays, opt.state.step)
    for k, v in other.state_arrays().items():
        np.testing.assert_array_equal(v, arrays[k])
    assert other.state.step == 1


def test_optimizer_rejects_negative_lr():
    with pytest.raises(ValueError):
        nn.OptimizerState("rmsprop", -1.0)


def test_dense_layer_gradient():
    net = nn.build_mlp(nn.mlp_spec(3, (4,), 2, "tanh"), 0)
    x = np.random.default_rng(1).standard_normal((5, 3))
    W = net.parameters()[0]
    with T.default_dtype(np.float64):
        w0 = W.data.astype(np.float64)

        def f(t):
            saved = W.data
            W.data = t.data
            try:
                h = T.matmul(Tensor(x), t)
                return T.reduce_sum(T.tanh(h))
            finally:
                W.data = saved

        assert T.finite_diff_check(f, w0) < 1e-4
