import numpy as np
import pytest

from tellseg import tensorcore as tc
from tellseg.errors import CompatibilityError, ConstructionError, ContractError, FormatError, ShapeError

FD_TOL = 1e-4


def rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_check(build, x0, seed=0, h=1e-5):
    """Compare backward() against central finite differences on all coordinates of x0."""
    proj = np.random.default_rng(seed + 1000).standard_normal(build(tc.Tensor(x0)).shape)

    def scalar(arr):
        out = build(tc.Tensor(arr))
        return float((out.data * proj).sum())

    x = tc.Tensor(x0.copy(), requires_grad=True)
    out = build(x)
    loss = tc.tsum(tc.mul(out, tc.Tensor(proj)))
    tc.backward(loss)
    numeric = tc.numeric_gradient(scalar, x0)
    return rel_err(x.grad, numeric)


# ---------------------------------------------------------------------------
# basic forward semantics


def test_swish_zero_fixed_point():
    assert tc.swish(tc.Tensor([0.0])).data[0] == 0.0


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = tc.Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = tc.conv2d(x, tc.Tensor(w), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_output_dims():
    x = tc.Tensor(np.zeros((1, 2, 9, 9)))
    w = tc.Tensor(np.zeros((4, 2, 3, 3)))
    assert tc.conv2d(x, w, stride=2, padding=1).shape == (1, 4, 5, 5)


def test_conv2d_shape_error_names_op():
    with pytest.raises(ShapeError, match="conv2d"):
        tc.conv2d(tc.Tensor(np.zeros((1, 2, 4, 4))), tc.Tensor(np.zeros((4, 3, 3, 3))))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = tc.Tensor(rng.standard_normal((7, 11)) * 10)
    out = tc.softmax(x, axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_backward_sum_gives_ones():
    x = tc.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    tc.backward(tc.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = tc.Tensor(np.arange(5.0), requires_grad=True)
    tc.backward(tc.tsum(tc.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * np.arange(5.0), atol=1e-12)


def test_backward_rejects_nonscalar():
    x = tc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        tc.backward(tc.add(x, x))


def test_forward_no_nan_inf_on_huge_inputs():
    rng = np.random.default_rng(2)
    x = tc.Tensor(rng.uniform(-1e6, 1e6, size=(2, 3, 8, 8)))
    w = tc.Tensor(rng.uniform(-1e6, 1e6, size=(4, 3, 3, 3)) / 1e6)
    gamma = tc.Tensor(np.ones(3))
    beta = tc.Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    outputs = [
        tc.add(x, x),
        tc.mul(x, x),
        tc.conv2d(x, w, stride=1, padding=1),
        tc.batchnorm2d(x, gamma, beta, rm, rv, training=True),
        tc.swish(x),
        tc.sigmoid(x),
        tc.softmax(x, axis=1),
        tc.global_avg_pool(x),
        tc.bilinear_upsample(x, 16, 16),
        tc.concat([x, x], axis=1),
        tc.reshape(x, (2, 3, 64)),
        tc.matmul(tc.reshape(x, (6, 64)), tc.Tensor(rng.uniform(-1, 1, size=(64, 5)))),
    ]
    for out in outputs:
        assert np.all(np.isfinite(out.data))


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = tc.conv2d(tc.Tensor(x), tc.Tensor(w), stride=1, padding=1).data
    b = tc.conv2d(tc.Tensor(x), tc.Tensor(w), stride=1, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(7)
    x = tc.Tensor(rng.standard_normal((8, 4, 6, 6)) * 3 + 2)
    gamma = tc.Tensor(np.ones(4))
    beta = tc.Tensor(np.zeros(4))
    rm, rv = np.zeros(4), np.ones(4)
    out = tc.batchnorm2d(x, gamma, beta, rm, rv, training=True, eps=1e-12)
    mu = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.all(np.abs(mu) < 1e-6)
    assert np.all(np.abs(var - 1) < 1e-6)
    assert not np.allclose(rm, 0)  # running stats moved


def test_batchnorm_eval_uses_running_stats():
    x = tc.Tensor(np.full((1, 2, 2, 2), 3.0))
    gamma = tc.Tensor(np.ones(2))
    beta = tc.Tensor(np.zeros(2))
    rm = np.array([1.0, 2.0])
    rv = np.array([4.0, 1.0])
    out = tc.batchnorm2d(x, gamma, beta, rm, rv, training=False, eps=0.0)
    np.testing.assert_allclose(out.data[0, 0], (3 - 1) / 2, atol=1e-12)
    np.testing.assert_allclose(out.data[0, 1], (3 - 2) / 1, atol=1e-12)


def test_bilinear_upsample_checkerboard():
    checker = ((np.add.outer(np.arange(4), np.arange(4))) % 2).astype(float)
    x = tc.Tensor(checker[None, None])
    out = tc.bilinear_upsample(x, 2, 2)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-12)


# ---------------------------------------------------------------------------
# finite-difference oracle for every kernel, 5 seeds each


def _cases(rng):
    other = tc.Tensor(rng.standard_normal((3, 4)))
    w = tc.Tensor(rng.standard_normal((5, 3, 3, 3)) * 0.4)
    m = tc.Tensor(rng.standard_normal((4, 6)))
    conv_in = tc.Tensor(rng.standard_normal((2, 3, 6, 6)))
    gamma = tc.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = tc.Tensor(rng.standard_normal(3), requires_grad=True)
    return [
        ("add", (3, 4), lambda x: tc.add(x, other)),
        ("sub", (3, 4), lambda x: tc.sub(other, x)),
        ("mul", (3, 4), lambda x: tc.mul(x, other)),
        ("div", (3, 4), lambda x: tc.div(other, tc.add(tc.mul(x, x), tc.Tensor(1.0)))),
        ("log", (3, 4), lambda x: tc.log(tc.add(tc.mul(x, x), tc.Tensor(0.5)))),
        ("sqrt", (3, 4), lambda x: tc.sqrt(tc.add(tc.mul(x, x), tc.Tensor(0.5)))),
        ("sum", (3, 4), lambda x: tc.reshape(tc.tsum(x, axis=1), (3, 1))),
        ("mean", (3, 4), lambda x: tc.tmean(x, axis=0, keepdims=True)),
        ("sigmoid", (3, 4), lambda x: tc.sigmoid(x)),
        ("swish", (3, 4), lambda x: tc.swish(x)),
        ("softmax", (3, 4), lambda x: tc.softmax(x, axis=1)),
        ("reshape", (3, 4), lambda x: tc.reshape(x, (2, 6))),
        ("transpose", (2, 3, 4), lambda x: tc.transpose(x, (2, 0, 1))),
        ("concat", (3, 4), lambda x: tc.concat([x, other, x], axis=0)),
        ("matmul", (6, 4), lambda x: tc.matmul(m, x)),
        ("conv2d_s1", (2, 3, 6, 6), lambda x: tc.conv2d(x, w, stride=1, padding=1)),
        ("conv2d_s2", (2, 3, 7, 7), lambda x: tc.conv2d(x, w, stride=2, padding=1)),
        ("conv2d_weight", (5, 3, 3, 3), lambda wv: tc.conv2d(conv_in, wv, stride=1, padding=0)),
        ("gap", (2, 3, 4, 4), lambda x: tc.global_avg_pool(x)),
        ("upsample", (2, 3, 4, 4), lambda x: tc.bilinear_upsample(x, 7, 9)),
        ("batchnorm_train", (4, 3, 4, 4), lambda x: tc.batchnorm2d(
            x, gamma, beta, np.zeros(3), np.ones(3), training=True
        )),
        ("batchnorm_eval", (4, 3, 4, 4), lambda x: tc.batchnorm2d(
            x, gamma, beta, np.full(3, 0.3), np.full(3, 1.7), training=False
        )),
        ("clip", (3, 4), lambda x: tc.clip(x, -0.35, 0.35)),
    ]


@pytest.mark.parametrize("seed", range(5))
def test_every_kernel_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, shape, build in _cases(rng):
        x0 = np.random.default_rng(seed * 31 + 7).standard_normal(shape) * 0.5
        err = fd_check(build, x0, seed=seed)
        assert err < FD_TOL, f"{name}: finite-difference mismatch {err:.3e}"


def test_batchnorm_param_grads_match_fd():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 3, 4, 4))
    proj = rng.standard_normal((4, 3, 4, 4))

    def run(gamma_arr, beta_arr, want_graph=False):
        g = tc.Tensor(gamma_arr, requires_grad=True)
        b = tc.Tensor(beta_arr, requires_grad=True)
        out = tc.batchnorm2d(tc.Tensor(x0), g, b, np.zeros(3), np.ones(3), training=True)
        loss = tc.tsum(tc.mul(out, tc.Tensor(proj)))
        if want_graph:
            return loss, g, b
        return float(loss.data)

    g0 = rng.uniform(0.5, 1.5, 3)
    b0 = rng.standard_normal(3)
    loss, g, b = run(g0.copy(), b0.copy(), want_graph=True)
    tc.backward(loss)
    num_g = tc.numeric_gradient(lambda arr: run(arr, b0), g0)
    num_b = tc.numeric_gradient(lambda arr: run(g0, arr), b0)
    assert rel_err(g.grad, num_g) < FD_TOL
    assert rel_err(b.grad, num_b) < FD_TOL


# ---------------------------------------------------------------------------
# registry + checkpoint


class Leaf(tc.Block):
    def __init__(self, rng, with_buffer=False):
        self.weight = tc.parameter(rng.standard_normal((2, 2)))
        self.bias = tc.parameter(np.zeros(2))
        self._buf = np.zeros(2) if with_buffer else None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self._buf} if self._buf is not None else {}


class Net(tc.Block):
    def __init__(self, rng):
        self.a = Leaf(rng, with_buffer=True)
        self.b = Leaf(rng)

    def children(self):
        return {"enc.stage1": self.a, "head": self.b}


def test_registry_names_stable_across_builds():
    n1 = Net(np.random.default_rng(0))
    n2 = Net(np.random.default_rng(99))
    assert list(tc.param_registry(n1)) == list(tc.param_registry(n2))
    assert "enc.stage1.weight" in tc.param_registry(n1)
    assert "enc.stage1.running_mean" in tc.buffer_registry(n1)


def test_registry_duplicate_tensor_rejected():
    net = Net(np.random.default_rng(1))
    net.b.weight = net.a.weight  # alias
    with pytest.raises(ConstructionError):
        tc.param_registry(net)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {
        "enc.w": rng.standard_normal((3, 4, 5)),
        "enc.running_var": rng.uniform(0.5, 2.0, 7),
        "gamma": np.array(0.0),
    }
    path = tmp_path / "model.ckpt"
    tc.write_checkpoint(path, "arch=demo\nseed=3\n", arrays)
    cfg, back = tc.read_checkpoint(path)
    assert cfg == "arch=demo\nseed=3\n"
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].tobytes() == np.asarray(arrays[k]).tobytes()
        assert back[k].shape == np.asarray(arrays[k]).shape


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE!" + b"\x00" * 32)
    with pytest.raises(FormatError):
        tc.read_checkpoint(p)


def test_checkpoint_bad_version(tmp_path):
    p = tmp_path / "v9.ckpt"
    p.write_bytes(tc.CHECKPOINT_MAGIC + bytes([9]) + b"\x00" * 8)
    with pytest.raises(CompatibilityError):
        tc.read_checkpoint(p)
