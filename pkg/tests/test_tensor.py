import numpy as np
import pytest

from latentdistill import nn
from latentdistill import tensor as T
from latentdistill.rng import substream
from latentdistill.tensorfile import TensorFileError, load_tensors, save_tensors


def grad_of(f, x):
    leaf = T.Tensor(x, requires_grad=True)
    return T.backward(f(leaf), [leaf])[0]


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_square_and_sum():
    assert grad_of(lambda x: T.sum(T.mul(x, x)), np.array(3.0)) == pytest.approx(6.0)
    g = grad_of(T.sum, np.ones((3, 4)) * 2.5)
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_finite_diff_examples():
    assert T.finite_diff_grad(lambda x: T.sum(T.mul(x, x)), np.array(2.0), 1e-6) == pytest.approx(4.0, abs=1e-9)
    np.testing.assert_array_equal(T.finite_diff_grad(lambda x: 3.0, np.ones(4), 1e-6), np.zeros(4))
    assert T.finite_diff_grad(lambda x: T.sum(T.exp(x)), np.array(0.0), 1e-6) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(T.ContractError):
        T.finite_diff_grad(lambda x: 0.0, np.ones(2), 0.0)


W2 = np.linspace(-1, 1, 12).reshape(4, 3)

# each primitive wrapped to a scalar with a fixed random projection
PRIMITIVES = {
    "matmul": (lambda x: T.matmul(x, T.Tensor(W2)), (5, 4)),
    "matmul_rhs": (lambda x: T.matmul(T.Tensor(np.ones((2, 5)) * 0.3), x), (5, 4)),
    "add_bias": (lambda x: T.add(T.Tensor(np.ones((3, 4))), x), (4,)),
    "mul": (lambda x: T.mul(x, x), (3, 4)),
    "scale": (lambda x: T.scale(x, -2.5), (3, 4)),
    "relu": (T.relu, (3, 4)),
    "softplus": (T.softplus, (3, 4)),
    "exp": (T.exp, (3, 4)),
    "log": (lambda x: T.log(T.add(T.mul(x, x), T.Tensor(np.ones((3, 4))))), (3, 4)),
    "sum_axis": (lambda x: T.sum(x, axis=0), (3, 4)),
    "mean": (lambda x: T.mean(x, axis=1), (3, 4)),
    "norm": (T.norm, (3, 4)),
    "softmax": (T.softmax, (3, 4)),
    "concat": (lambda x: T.concat([x, T.scale(x, 2.0)], axis=1), (3, 4)),
    "slice": (lambda x: x[np.array([0, 2, 2])], (3, 4)),
    "embedding": (lambda x: T.embedding(x, [1, 1, 0]), (3, 4)),
    "transpose": (T.transpose, (3, 4)),
    "reshape": (lambda x: T.reshape(x, (4, 3)), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    f, shape = PRIMITIVES[name]
    rng = substream(7, f"prim-{name}")
    for trial in range(20):
        x = rng.normal(size=shape)
        if name == "relu":
            x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        proj = substream(trial, f"proj-{name}").normal(size=f(T.Tensor(x)).shape)

        def scalar(t):
            return T.sum(T.mul(f(t), T.Tensor(proj)))

        ad = grad_of(scalar, x)
        fd = T.finite_diff_grad(scalar, x, 1e-6)
        assert rel_err(ad, fd) < 1e-5, (name, trial)


def two_layer(params):
    net = nn.MLP(params, "net", (6, 8, 3), substream(1, "init"))
    return net


def test_two_layer_net_against_finite_differences():
    params = nn.ParamSet()
    net = two_layer(params)
    x = substream(2, "x").normal(size=(5, 6))
    grads = T.backward(T.sum(T.softplus(net(T.Tensor(x)))), params.trainable())
    for name in params:
        base = params[name].data

        def f(w, name=name):
            p2 = params.copy()
            p2.assign(name, w.data)
            return T.sum(T.softplus(nn.MLP(p2, "net", (6, 8, 3))(T.Tensor(x))))

        fd = T.finite_diff_grad(f, base, 1e-6)
        assert rel_err(grads[name], fd) < 1e-5, name


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_backward_contract_errors():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ContractError):
        T.backward(T.scale(x, 2.0), [x])
    bad = T.log(T.scale(x, 0.0))
    with pytest.raises(T.NumericError, match="log"):
        T.backward(T.sum(bad), [x])


def test_unreachable_parameter_gets_zero():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.Tensor(np.ones((2, 2)), requires_grad=True)
    g = T.backward(T.sum(x), {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))


def test_backward_deterministic():
    params = nn.ParamSet()
    net = two_layer(params)
    x = T.Tensor(substream(3, "x").normal(size=(4, 6)))
    a = T.backward(T.sum(net(x)), params.trainable())
    b = T.backward(T.sum(net(x)), params.trainable())
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def _pipeline(checkpoint, nested=False):
    params = nn.ParamSet()
    net = nn.MLP(params, "g", (4, 16, 16, 5), substream(4, "g"))
    params.freeze()
    z = T.Tensor(substream(5, "z").normal(size=(3, 4)), requires_grad=True)

    def inner(h):
        return T.softplus(net(h))

    def outer(h):
        if nested:
            return T.checkpointed_apply(lambda u: T.scale(u, 1.5), T.checkpointed_apply(inner, h))
        return T.scale(inner(h), 1.5)

    out = T.checkpointed_apply(outer, z, debug=True) if checkpoint else outer(z)
    loss = T.norm(T.add(out, T.Tensor(-np.ones(out.shape))))
    g = T.backward(loss, [z])[0]
    return g, T.last_backward_stats


@pytest.mark.parametrize("nested", [False, True])
def test_checkpoint_bitwise_equal(nested):
    g_plain, s_plain = _pipeline(False)
    g_ckpt, s_ckpt = _pipeline(True, nested=nested)
    assert g_plain.tobytes() == g_ckpt.tobytes()
    assert s_ckpt.peak_saved < s_plain.peak_saved


def test_checkpoint_reaches_captured_parameters():
    params = nn.ParamSet()
    net = nn.MLP(params, "g", (3, 4, 2), substream(6, "g"))
    x = T.Tensor(np.ones((2, 3)))
    plain = T.backward(T.sum(net(x)), params.trainable())
    ck = T.backward(T.sum(T.checkpointed_apply(net, x)), params.trainable())
    for k in plain:
        assert plain[k].tobytes() == ck[k].tobytes()


def test_checkpoint_detects_impure_function():
    calls = []

    def impure(h):
        calls.append(1)
        return T.scale(h, float(len(calls)))

    z = T.Tensor(np.ones(2), requires_grad=True)
    out = T.checkpointed_apply(impure, z, debug=True)
    with pytest.raises(T.ContractError):
        T.backward(T.sum(out), [z])


def test_frozen_group_untouched_by_optimizer():
    params = nn.ParamSet()
    nn.MLP(params, "frozen", (3, 3), substream(0, "a"))
    nn.MLP(params, "live", (3, 3), substream(0, "b"))
    params.freeze("frozen")
    before = params.digest({"frozen"})
    opt = nn.SGD(params, 0.1)
    grads = {k: np.ones(params[k].shape) for k in params}
    opt.step(grads)
    assert params.digest({"frozen"}) == before
    assert params.digest({"live"}) != nn.ParamSet().digest()


def test_tensorfile_roundtrip(tmp_path):
    data = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(2.5), "émoji": np.zeros((0, 4))}
    path = tmp_path / "t.bin"
    save_tensors(path, data)
    raw = path.read_bytes()
    assert raw[:8] == b"LDTL0001"
    assert int.from_bytes(raw[8:16], "little") == 1
    back = load_tensors(path)
    assert list(back) == list(data)
    for k in data:
        np.testing.assert_array_equal(back[k], data[k])
    path.write_bytes(b"XXXX0001" + raw[8:])
    with pytest.raises(TensorFileError):
        load_tensors(path)


def test_substreams_are_reproducible_and_distinct():
    a = substream(11, "alpha").normal(size=5)
    assert a.tobytes() == substream(11, "alpha").normal(size=5).tobytes()
    assert a.tobytes() != substream(11, "beta").normal(size=5).tobytes()
