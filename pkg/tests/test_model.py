import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from melle.autograd import no_grad
from melle.gradcheck import grad_check
from melle.gradsuite import model_checks
from melle.model import LOGVAR_MIN, ModelConfig
from melle.rng import RngState

from .helpers import tiny_model

TOKENS = np.array([3, 5, 4, 7, 1])


def _zero(model, prefix):
    for name, p in model.params.items():
        if name.startswith(prefix):
            p.data[...] = 0.0


# -- config ----------------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_mels=64)
    with pytest.raises(ValueError):
        ModelConfig(reduction_factor=0)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_model": 16, "bogus": 1})
    c = ModelConfig(d_model=32, n_heads=2)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_state_dict_roundtrip_and_mismatch():
    a, b = tiny_model(seed=0), tiny_model(seed=1)
    b.load_state_dict(a.state_dict())
    for n in a.parameter_names():
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    other = tiny_model(d_model=32)
    with pytest.raises(ValueError):
        other.load_state_dict(a.state_dict())


# -- prenet ----------------------------------------------------------------------------------

def test_prenet_zero_input_is_bias_path():
    m = tiny_model()
    out = m.prenet_forward(np.zeros((1, 80)), RngState(0)).data
    with no_grad():
        from melle import autograd as ag

        r = RngState(0)
        h = ag.dropout(ag.relu(m.params["prenet.0.bias"].reshape(1, -1)), 0.5, r)
        h = ag.dropout(ag.relu(m.linear("prenet.1", h)), 0.5, r)
        ref = m.linear("prenet.2", h).data
    np.testing.assert_array_equal(out, ref)


def test_prenet_dropout_active_at_inference():
    m = tiny_model()
    x = np.random.default_rng(0).standard_normal((4, 80))
    with no_grad():
        a = m.prenet_forward(x, RngState(1)).data
        b = m.prenet_forward(x, RngState(1)).data
        c = m.prenet_forward(x, RngState(2)).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


# -- decoder ----------------------------------------------------------------------------------

# A constant shift across all d_model channels is erased by layer norm, so
# perturbations use a fixed random direction.
KICK = np.random.default_rng(99).standard_normal(64)


def _decode(m, text, mel):
    with no_grad():
        return m.decoder_forward(text, mel, RngState(0)).data


def test_decoder_single_acoustic_depends_on_all_text():
    m = tiny_model()
    g = np.random.default_rng(0)
    text, mel = g.standard_normal((5, 64)), g.standard_normal((1, 64))
    base = _decode(m, text, mel)
    assert base.shape == (1, 64)
    for i in range(5):
        t2 = text.copy()
        t2[i] += KICK
        assert not np.allclose(_decode(m, t2, mel), base)
    m2 = mel + KICK
    assert not np.allclose(_decode(m, text, m2), base)


@given(st.integers(1, 6), st.integers(2, 7), st.data())
def test_decoder_causality(l, n, data):
    m = tiny_model()
    g = np.random.default_rng(l * 10 + n)
    text, mel = g.standard_normal((l, 64)), g.standard_normal((n, 64))
    j = data.draw(st.integers(0, n - 1))
    base = _decode(m, text, mel)
    pert = mel.copy()
    pert[j] += KICK
    out = _decode(m, text, pert)
    np.testing.assert_array_equal(out[:j], base[:j])
    assert not np.allclose(out[j:], base[j:])
    t2 = text.copy()
    t2[data.draw(st.integers(0, l - 1))] -= KICK
    assert np.all(np.abs(_decode(m, t2, mel) - base).max(axis=1) > 0)


def test_decoder_rejects_overlong():
    m = tiny_model(max_frames=4, max_text_len=2)
    with pytest.raises(ValueError):
        _decode(m, np.zeros((3, 64)), np.zeros((10, 64)))


# -- latent sampling -----------------------------------------------------------------------------

def test_latent_mean_mode():
    m = tiny_model()
    e = np.random.default_rng(0).standard_normal((3, 64))
    lat = m.latent_sample(e, RngState(0), "mean")
    assert lat.z is lat.mu
    assert lat.mu.shape == lat.logvar.shape == (3, 80)


def test_latent_reparameterisation_identity():
    m = tiny_model()
    e = np.random.default_rng(1).standard_normal((2, 64))
    lat = m.latent_sample(e, RngState(4), "sample")
    np.testing.assert_allclose(lat.z.data, lat.mu.data + np.exp(lat.logvar.data / 2) * lat.eps, rtol=1e-6)


def test_latent_clamp_floor_collapses_to_mean():
    m = tiny_model()
    m.params["latent.proj.bias"].data[80:] = -1e3
    _zero(m, "latent.proj.weight")
    e = np.random.default_rng(2).standard_normal((2, 64))
    lat = m.latent_sample(e, RngState(0), "sample")
    assert np.all(lat.logvar.data == LOGVAR_MIN)
    sigma = math.exp(LOGVAR_MIN / 2)
    assert np.all(np.abs(lat.z.data - lat.mu.data) <= 6 * sigma)


def test_latent_monte_carlo_moments():
    m = tiny_model(seed=3)
    m.params["latent.proj.bias"].data[80:] += 0.5
    e = np.random.default_rng(3).standard_normal(64)
    n = 100_000
    with no_grad():
        lat = m.latent_sample(np.broadcast_to(e, (n, 64)), RngState(9), "sample")
    mu, sigma = lat.mu.data[0].astype(np.float64), np.exp(lat.logvar.data[0].astype(np.float64) / 2)
    std = (lat.z.data - mu) / sigma
    assert abs(std.mean()) < 0.01
    assert abs(std.var() - 1.0) < 0.01
    np.testing.assert_allclose(lat.z.data.mean(0), mu, atol=0.02 * sigma.max())


def test_no_latent_sampling_head_is_linear():
    m = tiny_model(latent_sampling=False)
    assert m.params["latent.proj.weight"].shape == (64, 80)
    lat = m.latent_sample(np.ones((2, 64)), RngState(0), "sample")
    assert lat.logvar is None and lat.z is lat.mu


# -- frame head, stop, postnet ----------------------------------------------------------------

@pytest.mark.parametrize("r", [1, 2, 4])
def test_latent_to_frame_shape(r):
    m = tiny_model(reduction_factor=r)
    assert m.latent_to_frame(np.zeros((3, r * 80))).shape == (3, r, 80)


def test_latent_mlp_zero_is_identity():
    m = tiny_model(reduction_factor=2)
    _zero(m, "latent.mlp.2")
    z = np.random.default_rng(0).standard_normal((3, 160)).astype(np.float32)
    np.testing.assert_array_equal(m.latent_to_frame(z).data, z.reshape(3, 2, 80))


def test_stop_zero_weights_gives_bias():
    m = tiny_model()
    _zero(m, "stop.weight")
    m.params["stop.bias"].data[...] = 0.25
    np.testing.assert_allclose(m.stop_logit(np.ones((4, 64))).data, 0.25)


@given(st.floats(-3, 3), st.floats(0.01, 2))
def test_stop_monotone_along_weight(a, step):
    m = tiny_model()
    w = m.params["stop.weight"].data[:, 0].astype(np.float64)
    e0 = np.random.default_rng(0).standard_normal(64)
    lo = float(m.stop_logit(e0 + a * w).data)
    hi = float(m.stop_logit(e0 + (a + step) * w).data)
    assert hi > lo


@pytest.mark.parametrize("t", [1, 7, 100])
def test_postnet_shape(t):
    m = tiny_model()
    assert m.postnet(np.zeros((t, 80))).shape == (t, 80)


def test_postnet_zero_is_identity():
    m = tiny_model()
    _zero(m, "postnet.")
    y = np.random.default_rng(0).standard_normal((9, 80)).astype(np.float32)
    np.testing.assert_array_equal(m.postnet(y).data, y)


@pytest.mark.parametrize("name,fn,inputs", model_checks(0), ids=lambda v: v if isinstance(v, str) else "")
def test_block_gradcheck(name, fn, inputs):
    assert grad_check(fn, inputs) < 1e-6


# -- teacher forcing ------------------------------------------------------------------------------

@pytest.mark.parametrize("r", [1, 2, 4])
def test_single_group_is_one_step(r):
    m = tiny_model(reduction_factor=r)
    out = m.forward_teacher_forced(TOKENS, np.zeros((r, 80)), RngState(0))
    assert out.stop_logits.shape == (1,)
    assert out.y_prime.shape == out.y_double_prime.shape == (r, 80)


@pytest.mark.parametrize("r,t", [(1, 6), (2, 6), (4, 8)])
def test_stop_logit_count(r, t):
    m = tiny_model(reduction_factor=r)
    out = m.forward_teacher_forced(TOKENS, np.zeros((t, 80)), RngState(0))
    assert out.stop_logits.shape == (math.ceil(t / r),)
    assert out.latents.mu.shape == (t // r, r * 80)


def test_teacher_forced_requires_multiple_of_r():
    with pytest.raises(ValueError):
        tiny_model(reduction_factor=2).forward_teacher_forced(TOKENS, np.zeros((5, 80)), RngState(0))


def test_teacher_forced_determinism():
    m = tiny_model(dropout=0.1)
    y = np.random.default_rng(0).standard_normal((6, 80))
    a = m.forward_teacher_forced(TOKENS, y, RngState(3), mode="mean")
    b = m.forward_teacher_forced(TOKENS, y, RngState(3), mode="mean")
    c = m.forward_teacher_forced(TOKENS, y, RngState(4), mode="mean")
    assert a.y_double_prime.data.tobytes() == b.y_double_prime.data.tobytes()
    assert not np.array_equal(a.y_prime.data, c.y_prime.data)


@pytest.mark.parametrize("r", [1, 2])
def test_teacher_forcing_shift_causality(r):
    m = tiny_model(reduction_factor=r)
    y = np.random.default_rng(1).standard_normal((4 * r, 80))
    j = 2
    base = m.forward_teacher_forced(TOKENS, y, RngState(0), mode="mean").y_prime.data
    y2 = y.copy()
    y2[j * r:(j + 1) * r] += np.random.default_rng(5).standard_normal((r, 80))
    out = m.forward_teacher_forced(TOKENS, y2, RngState(0), mode="mean").y_prime.data
    np.testing.assert_array_equal(out[: (j + 1) * r], base[: (j + 1) * r])
    assert not np.allclose(out[(j + 1) * r:], base[(j + 1) * r:])


def test_postnet_residual_identity_in_forward():
    m = tiny_model()
    out = m.forward_teacher_forced(TOKENS, np.zeros((3, 80)), RngState(0))
    delta = m.postnet(out.y_prime.data).data - out.y_prime.data
    np.testing.assert_allclose(out.y_double_prime.data - out.y_prime.data, delta, atol=1e-5)
