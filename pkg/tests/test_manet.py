import zlib

import numpy as np
import pytest

from tellseg import manet as mn
from tellseg import tensorcore as tc
from tellseg.errors import ConfigError, ShapeError

FD_TOL = 1e-4


def rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def tiny_config():
    return mn.ManetConfig(
        input_resolution=16,
        encoder_widths=(4, 6),
        downsample_factors=(2, 2),
        pab_reduction=2,
        mfab_reduction=2,
    )


# ---------------------------------------------------------------------------
# config


def test_reference_config_bottleneck_arithmetic():
    cfg = mn.reference_config()
    assert cfg.input_resolution == 512
    assert cfg.bottleneck_channels == 384
    assert cfg.bottleneck_resolution == 16


def test_config_rejects_misaligned_resolution():
    with pytest.raises(ConfigError):
        mn.ManetConfig(input_resolution=50, encoder_widths=(4, 8), downsample_factors=(2, 4))


def test_config_rejects_bad_mfab_count():
    with pytest.raises(ConfigError):
        mn.ManetConfig(mfab_count=7)


def test_config_text_round_trip():
    cfg = mn.desk_config()
    text = mn.config_to_text(cfg)
    assert mn.config_from_text(text) == cfg


def test_config_text_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        mn.config_from_text("in_channels=3\nfancy_knob=1\n")


# ---------------------------------------------------------------------------
# encoder / shapes


def test_desk_encode_bottleneck_dims():
    model = mn.Manet(mn.desk_config(), seed=1)
    pyramid = model.encode(np.zeros((3, 64, 64)))
    assert pyramid[-1].shape == (1, 96, 4, 4)
    assert [p.shape[2] for p in pyramid] == [32, 16, 8, 4]


def test_reference_shape_contract():
    model = mn.Manet(mn.reference_config(), seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(1, 3, 512, 512))
    pyramid = model.encode(x)
    assert pyramid[-1].shape == (1, 384, 16, 16)
    out = model.forward(x)
    assert out.shape == (1, 512, 512)


def test_zero_input_finite_outputs():
    model = mn.Manet(mn.desk_config(), seed=2)
    model.train_mode = False
    out = model.segment(np.zeros((3, 64, 64)))
    assert np.all(np.isfinite(out))
    assert np.all((out > 0) & (out < 1))


def test_shape_contracts_random_configs():
    rng = np.random.default_rng(3)
    for _ in range(8):
        stages = int(rng.integers(2, 5))
        widths = tuple(int(rng.integers(2, 9)) for _ in range(stages))
        bres = int(rng.integers(2, 5))
        n = bres * 2**stages
        cfg = mn.ManetConfig(
            input_resolution=n,
            encoder_widths=widths,
            downsample_factors=(2,) * stages,
            pab_reduction=2,
            mfab_reduction=2,
        )
        model = mn.Manet(cfg, seed=4)
        x = rng.uniform(0, 1, size=(2, 3, n, n))
        pyramid = model.encode(x)
        assert pyramid[-1].shape == (2, widths[-1], bres, bres)
        assert len(model.mfabs) == stages - 1
        feat = model.decode(pyramid)
        assert feat.shape == (2, widths[0], n // 2, n // 2)
        out = model.forward(x)
        assert out.shape == (2, n, n)
        assert np.all((out.data > 0) & (out.data < 1))


def test_encode_dim_mismatch():
    model = mn.Manet(mn.desk_config(), seed=0)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((3, 32, 32)))


def test_decode_level_count_mismatch():
    model = mn.Manet(mn.desk_config(), seed=0)
    pyramid = model.encode(np.zeros((3, 64, 64)))
    with pytest.raises(ConfigError):
        model.decode(pyramid[:-1])


def test_same_seed_same_outputs():
    x = np.random.default_rng(5).uniform(0, 1, size=(3, 64, 64))
    a = mn.Manet(mn.desk_config(), seed=11).segment(x)
    b = mn.Manet(mn.desk_config(), seed=11).segment(x)
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# PAB


def test_pab_residual_identity_at_init():
    rng = np.random.default_rng(6)
    pab = mn.PAB(rng, channels=8, reduction=2)
    feat = tc.Tensor(rng.standard_normal((2, 8, 4, 4)))
    out, _ = pab(feat)
    np.testing.assert_array_equal(out.data, feat.data)


def test_pab_attention_rows_sum_to_one():
    rng = np.random.default_rng(7)
    pab = mn.PAB(rng, channels=8, reduction=4)
    feat = tc.Tensor(rng.standard_normal((3, 8, 4, 4)))
    _, attn = pab(feat)
    assert attn.shape == (3, 16, 16)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


def test_pab_uniform_feature_gives_uniform_attention():
    rng = np.random.default_rng(8)
    pab = mn.PAB(rng, channels=6, reduction=2)
    feat = tc.Tensor(np.full((1, 6, 4, 4), 0.37))
    _, attn = pab(feat)
    np.testing.assert_allclose(attn.data, 1.0 / 16.0, atol=1e-12)


# ---------------------------------------------------------------------------
# MFAB


def test_mfab_gate_identity_with_bias_override():
    rng = np.random.default_rng(9)
    mfab = mn.MFAB(rng, decoder_ch=6, skip_ch=4, out_ch=4, reduction=2)
    mfab.gate_fc2.weight.data[:] = 0.0
    mfab.gate_fc2.bias.data[:] = 1000.0  # sigmoid saturates to exactly 1.0
    d = tc.Tensor(rng.standard_normal((2, 6, 4, 4)))
    s = tc.Tensor(rng.standard_normal((2, 4, 8, 8)))
    gated = mfab(d, s, training=False)
    up = tc.bilinear_upsample(d, 8, 8)
    fused = mfab.fuse(tc.concat([up, s], axis=1), False)
    np.testing.assert_array_equal(gated.data, fused.data)


def test_mfab_output_dims_match_skip():
    rng = np.random.default_rng(10)
    mfab = mn.MFAB(rng, decoder_ch=5, skip_ch=3, out_ch=3, reduction=2)
    d = tc.Tensor(rng.standard_normal((1, 5, 4, 4)))
    s = tc.Tensor(rng.standard_normal((1, 3, 8, 8)))
    assert mfab(d, s, training=False).shape == (1, 3, 8, 8)


def test_mfab_level_mismatch():
    rng = np.random.default_rng(11)
    mfab = mn.MFAB(rng, decoder_ch=5, skip_ch=3, out_ch=3, reduction=2)
    d = tc.Tensor(np.zeros((1, 5, 4, 4)))
    with pytest.raises(ShapeError):
        mfab(d, tc.Tensor(np.zeros((1, 3, 4, 4))), training=False)


# ---------------------------------------------------------------------------
# finite differences through blocks


@pytest.mark.parametrize("seed", range(5))
def test_encoder_stage_matches_fd(seed):
    rng = np.random.default_rng(seed)
    stage = mn.ConvBnSwish(rng, 3, 4, stride=2)
    x0 = rng.standard_normal((2, 3, 8, 8)) * 0.7
    proj = rng.standard_normal((2, 4, 4, 4))

    def run(x_arr):
        out = stage(tc.Tensor(x_arr), True)
        return float((out.data * proj).sum())

    x = tc.Tensor(x0.copy(), requires_grad=True)
    tc.backward(tc.tsum(tc.mul(stage(x, True), tc.Tensor(proj))))
    numeric = tc.numeric_gradient(run, x0)
    assert rel_err(x.grad, numeric) < FD_TOL
    # and the stage's own weights
    w = stage.conv.weight

    def run_w(w_arr):
        saved = w.data.copy()
        np.copyto(w.data, w_arr)
        val = float((stage(tc.Tensor(x0), True).data * proj).sum())
        np.copyto(w.data, saved)
        return val

    numeric_w = tc.numeric_gradient(run_w, w.data.copy())
    assert rel_err(w.grad, numeric_w) < FD_TOL


@pytest.mark.parametrize("seed", range(5))
def test_pab_matches_fd(seed):
    rng = np.random.default_rng(seed)
    pab = mn.PAB(rng, channels=6, reduction=2)
    pab.gate.data[...] = 0.35  # move off the zero init so the value path is live
    x0 = rng.standard_normal((2, 6, 4, 4)) * 0.6
    proj = rng.standard_normal((2, 6, 4, 4))

    def value():
        return float((pab(tc.Tensor(x0))[0].data * proj).sum())

    x = tc.Tensor(x0.copy(), requires_grad=True)
    tc.backward(tc.tsum(tc.mul(pab(x)[0], tc.Tensor(proj))))
    numeric = tc.numeric_gradient(lambda arr: _with(x0, arr, value), x0)
    assert rel_err(x.grad, numeric) < FD_TOL
    for name, t in (("query.weight", pab.query.weight), ("gate", pab.gate)):
        numeric_t = tc.numeric_gradient(lambda arr, t=t: _with(t.data, arr, value), t.data.copy())
        assert rel_err(t.grad, numeric_t) < FD_TOL, name


def _with(target, arr, fn):
    saved = target.copy()
    np.copyto(target, arr)
    out = fn()
    np.copyto(target, saved)
    return out


@pytest.mark.parametrize("seed", range(5))
def test_mfab_gate_weights_match_fd(seed):
    rng = np.random.default_rng(seed)
    mfab = mn.MFAB(rng, decoder_ch=4, skip_ch=3, out_ch=3, reduction=2)
    d0 = rng.standard_normal((2, 4, 4, 4)) * 0.5
    s0 = rng.standard_normal((2, 3, 8, 8)) * 0.5
    proj = rng.standard_normal((2, 3, 8, 8))

    def value():
        return float((mfab(tc.Tensor(d0), tc.Tensor(s0), True).data * proj).sum())

    d = tc.Tensor(d0.copy(), requires_grad=True)
    tc.backward(tc.tsum(tc.mul(mfab(d, tc.Tensor(s0), True), tc.Tensor(proj))))
    for name, t in (
        ("gate_fc1.weight", mfab.gate_fc1.weight),
        ("gate_fc2.weight", mfab.gate_fc2.weight),
        ("gate_fc1.bias", mfab.gate_fc1.bias),
    ):
        numeric = tc.numeric_gradient(lambda arr, t=t: _with(t.data, arr, value), t.data.copy())
        assert rel_err(t.grad, numeric) < FD_TOL, name
    numeric_d = tc.numeric_gradient(lambda arr: _with(d0, arr, value), d0)
    assert rel_err(d.grad, numeric_d) < FD_TOL


@pytest.mark.parametrize("seed", range(3))
def test_segment_end_to_end_input_gradient_fd(seed):
    model = mn.Manet(tiny_config(), seed=seed)
    model.train_mode = True
    rng = np.random.default_rng(seed + 50)
    x0 = rng.uniform(0.2, 0.8, size=(1, 3, 16, 16))
    proj = rng.standard_normal((1, 16, 16))

    def value():
        return float((model.forward(x0).data * proj).sum())

    x = tc.Tensor(x0.copy(), requires_grad=True)
    tc.backward(tc.tsum(tc.mul(model.forward(x), tc.Tensor(proj))))
    numeric = tc.numeric_gradient(lambda arr: _with(x0, arr, value), x0)
    assert rel_err(x.grad, numeric) < FD_TOL


def test_segment_end_to_end_param_gradients_fd():
    model = mn.Manet(tiny_config(), seed=7)
    model.train_mode = True
    rng = np.random.default_rng(70)
    x0 = rng.uniform(0.2, 0.8, size=(2, 3, 16, 16))
    proj = rng.standard_normal((2, 16, 16))
    registry = tc.param_registry(model)

    def value():
        return float((model.forward(x0).data * proj).sum())

    tc.zero_grads(registry.values())
    tc.backward(tc.tsum(tc.mul(model.forward(tc.Tensor(x0, requires_grad=True)), tc.Tensor(proj))))
    for name, t in registry.items():
        flat = t.data.reshape(-1)
        coords = np.random.default_rng(zlib.crc32(name.encode())).permutation(flat.size)[:12]
        numeric = tc.numeric_gradient(lambda arr, t=t: _with(t.data, arr, value), t.data.copy(), coords=coords)
        sel = ~np.isnan(numeric.reshape(-1))
        grad = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        err = rel_err(grad[sel], numeric.reshape(-1)[sel])
        assert err < FD_TOL, f"{name}: {err:.3e}"


def test_forced_zero_logits_give_half():
    model = mn.Manet(mn.desk_config(), seed=3)
    model.head.weight.data[:] = 0.0
    model.head.bias.data[:] = 0.0
    out = model.segment(np.random.default_rng(0).uniform(0, 1, size=(3, 64, 64)))
    np.testing.assert_allclose(out, 0.5, atol=1e-15)
