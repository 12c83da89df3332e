import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, max_rel_error
from fedser.errors import ConfigError, FingerprintMismatch
from fedser.model import (
    ArchConfig, adam_init, adam_step, backward, cross_entropy, forward, init_params,
    l2_penalty, serialize, softmax_t, stc_attention_backward, stc_attention_forward, zeros_like,
)
from fedser.model import layers


# ---------------------------------------------------------------- softmax

def _softmax_direct(z, T):
    e = [math.exp(v / T) for v in z]
    return [v / sum(e) for v in e]


@pytest.mark.parametrize("T", [0.5, 1.0, 3.0])
def test_softmax_uniform(T):
    np.testing.assert_allclose(softmax_t(np.zeros(3), T), [1 / 3] * 3, atol=1e-12)


@pytest.mark.parametrize("T,expected", [(1.0, [0.6652, 0.2447, 0.0900]), (2.0, [0.5063, 0.3071, 0.1866])])
def test_softmax_known_values(T, expected):
    got = softmax_t(np.array([2.0, 1.0, 0.0]), T)
    np.testing.assert_allclose(got, _softmax_direct([2, 1, 0], T), atol=1e-12)
    # the quoted values are rounded loosely; the direct oracle above is exact
    np.testing.assert_allclose(got, expected, atol=5e-4)
    assert got.argmax() == 0


def test_softmax_rejects_bad_temperature():
    for T in (0.0, -1.0):
        with pytest.raises(ValueError):
            softmax_t(np.zeros(3), T)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(0.05, 20))
def test_softmax_argmax_temperature_invariant(z, T):
    z = np.array(z)
    p = softmax_t(z, T)
    assert abs(p.sum() - 1) < 1e-9
    assert p.argmax() == softmax_t(z, 1.0).argmax() or np.isclose(p.max(), p[softmax_t(z, 1.0).argmax()])


def test_softmax_stable_for_large_logits():
    p = softmax_t(np.array([1000.0, 0.0, -1000.0]), 1.0)
    assert np.isfinite(p).all() and p[0] == 1.0


# ---------------------------------------------------------------- architecture

def test_default_parameter_count_is_pinned():
    p = init_params(ArchConfig(), 4, 0)
    # block i: 2 * (c * c_in * 7 + c) + (2c * c + c) + 2c ; attention + head
    assert p.size == 90482


def test_fingerprint_stable_and_sensitive():
    a = init_params(ArchConfig(), 4, 0)
    b = init_params(ArchConfig(), 4, 1)
    assert a.fingerprint == b.fingerprint
    assert init_params(ArchConfig(), 5, 0).fingerprint != a.fingerprint
    assert init_params(ArchConfig(channels=(8, 16, 16, 32)), 4, 0).fingerprint != a.fingerprint


def test_arch_validation():
    with pytest.raises(ConfigError):
        ArchConfig(channels=(10, 16), groups=8)
    with pytest.raises(ConfigError):
        ArchConfig(temporal_kernel=4)


def test_shape_mismatch_is_config_error():
    p = init_params(ArchConfig(), 4, 0)
    with pytest.raises(ConfigError):
        forward(p, np.zeros((2, 4, 4)))
    with pytest.raises(ConfigError):
        forward(p, np.zeros((2, 32)))


def test_eval_mode_is_deterministic():
    p = init_params(ArchConfig(), 4, 0)
    x = np.random.default_rng(0).normal(size=(3, 32, 32))
    a, _ = forward(p, x, "eval")
    b, _ = forward(p, x, "eval")
    np.testing.assert_array_equal(a, b)


def test_train_mode_seeded_dropout():
    p = init_params(ArchConfig(dropout=0.5), 4, 0)
    x = np.random.default_rng(0).normal(size=(3, 32, 32))
    a, _ = forward(p, x, "train", 11)
    b, _ = forward(p, x, "train", 11)
    c, _ = forward(p, x, "train", 12)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ConfigError):
        forward(p, x, "train")


def test_zero_params_give_uniform_output():
    p = zeros_like(init_params(ArchConfig(), 4, 0))
    z, _ = forward(p, np.random.default_rng(0).normal(size=(2, 32, 32)))
    np.testing.assert_array_equal(z, 0.0)
    np.testing.assert_allclose(softmax_t(z), 0.25)


def test_finite_inputs_give_finite_logits():
    p = init_params(ArchConfig(), 4, 0)
    x = np.random.default_rng(0).normal(scale=1e3, size=(2, 24, 40))
    z, _ = forward(p, x, "train", 0)
    assert np.isfinite(z).all()


def test_group_norm_statistics():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(2, 6, 5, 8))
    out, _ = layers.group_norm_forward(x, np.ones(8), np.zeros(8), groups=4)
    g = out.reshape(2, 6, 5, 4, 2)
    assert np.abs(g.mean(axis=(1, 2, 4))).max() < 1e-5
    assert np.abs(g.var(axis=(1, 2, 4)) - 1).max() < 1e-4


def test_spatial_dropout_drops_whole_channels():
    x = np.ones((4, 5, 5, 16))
    out, keep = layers.spatial_dropout_forward(x, 0.5, np.random.default_rng(0))
    per_channel = out.reshape(4, 25, 16)
    assert (per_channel.min(axis=1) == per_channel.max(axis=1)).all()
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_max_pool_halves_and_drops_odd_edge():
    x = np.random.default_rng(0).normal(size=(1, 5, 7, 2))
    out, ctx = layers.max_pool_forward(x)
    assert out.shape == (1, 2, 3, 2)
    assert out[0, 1, 2, 0] == x[0, 2:4, 4:6, 0].max()


# ---------------------------------------------------------------- attention

def _attn_params(c, rng, hidden=2, k=3):
    return {
        "mlp1.weight": rng.normal(size=(hidden, c)), "mlp1.bias": rng.normal(size=hidden),
        "mlp2.weight": rng.normal(size=(c, hidden)), "mlp2.bias": rng.normal(size=c),
        "temporal.weight": rng.normal(size=(1, 2, k)), "temporal.bias": rng.normal(size=1),
        "spectral.weight": rng.normal(size=(1, 2, k)), "spectral.bias": rng.normal(size=1),
    }


def test_attention_constant_input_uniform_weights():
    rng = np.random.default_rng(0)
    x = np.full((2, 4, 6, 3), 1.7)
    out, ctx = stc_attention_forward(x, _attn_params(3, rng))
    np.testing.assert_allclose(ctx[1], 1 / 24, atol=1e-12)
    np.testing.assert_allclose(out, x / 24, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), st.integers(1, 6))
def test_attention_preserves_shape(n, t, f, c):
    rng = np.random.default_rng(n * 100 + t * 10 + f)
    x = rng.normal(size=(n, t, f, c))
    out, _ = stc_attention_forward(x, _attn_params(c, rng))
    assert out.shape == x.shape


def test_attention_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 4, 4, 2))
    p = _attn_params(2, rng)
    upstream = rng.normal(size=x.shape)

    def loss(arrs):
        out, _ = stc_attention_forward(arrs["x"], {k: arrs[k] for k in p})
        return float((out * upstream).sum())

    out, ctx = stc_attention_forward(x, p)
    dx, grads = stc_attention_backward(ctx, upstream)
    arrays = {"x": x.copy(), **{k: v.copy() for k, v in p.items()}}
    numeric = central_difference(loss, arrays)
    assert max_rel_error({"x": dx, **grads}, numeric) < 1e-4


# ---------------------------------------------------------------- full backward

def _total_loss(params, x, y, w, seed):
    z, _ = forward(params, x, "train", seed)
    return cross_entropy(z, y, w)[0] + l2_penalty(params)


@pytest.mark.parametrize("seed", range(5))
def test_full_gradient_check(mini_arch, seed):
    rng = np.random.default_rng(seed)
    p = init_params(mini_arch, 3, seed)
    x = rng.normal(size=(2, 8, 6))
    y = rng.integers(0, 3, 2)
    w = np.full(2, 0.5)
    z, cache = forward(p, x, "train", 100 + seed)
    _, dz = cross_entropy(z, y, w)
    g = backward(cache, dz)
    arrays = {k: v.copy() for k, v in p.items()}
    numeric = central_difference(lambda a: _total_loss(p.replace(a), x, y, w, 100 + seed), arrays)
    assert max_rel_error(dict(g.items()), numeric) < 1e-4


def test_zero_upstream_gives_pure_l2(mini_arch):
    p = init_params(mini_arch, 3, 0)
    z, cache = forward(p, np.ones((2, 8, 8)), "train", 0)
    g = backward(cache, np.zeros_like(z))
    for name, v in g.items():
        if name.endswith(".weight"):
            np.testing.assert_allclose(v, mini_arch.l2_rate * p[name], atol=1e-15)
        else:
            np.testing.assert_array_equal(v, 0.0)


def test_backward_linear_in_upstream(mini_arch):
    p = init_params(mini_arch, 3, 0)
    x = np.random.default_rng(0).normal(size=(2, 8, 8))
    up = np.random.default_rng(1).normal(size=(2, 3))
    _, c1 = forward(p, x, "train", 4)
    _, c2 = forward(p, x, "train", 4)
    g1, g2 = backward(c1, up), backward(c2, 2 * up)
    for name, v in p.items():
        l2 = mini_arch.l2_rate * v if name.endswith(".weight") else 0.0
        np.testing.assert_allclose(g2[name] - l2, 2 * (g1[name] - l2), rtol=1e-10, atol=1e-14)


def test_cache_is_single_use(mini_arch):
    p = init_params(mini_arch, 3, 0)
    z, cache = forward(p, np.ones((1, 8, 8)), "train", 0)
    backward(cache, np.ones_like(z))
    with pytest.raises(RuntimeError):
        backward(cache, np.ones_like(z))


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_params():
    p = init_params(ArchConfig(channels=(8, 8)), 4, 0)
    state = adam_init(p)
    new_p, new_state = adam_step(p, zeros_like(p), state)
    for name in p:
        np.testing.assert_array_equal(new_p[name], p[name])
    assert new_state.step == 1

    fresh = adam_init(p)
    new_p, _ = adam_step(p, zeros_like(p), fresh)
    for name in p:
        np.testing.assert_array_equal(new_p[name], p[name])


def test_adam_first_step_moves_lr_against_gradient():
    arch = ArchConfig(channels=(8, 8), dtype="float64")
    p = init_params(arch, 4, 0)
    rng = np.random.default_rng(0)
    g = p.map(lambda a: rng.choice([-1, 1], a.shape) * rng.uniform(0.01, 1.0, a.shape))
    new_p, state = adam_step(p, g, adam_init(p, lr=1e-3))
    for name in p:
        gi = g[name]
        expected = -1e-3 * gi / (np.abs(gi) + 1e-8)  # bias-corrected t=1 update
        np.testing.assert_allclose(new_p[name] - p[name], expected, rtol=1e-9, atol=1e-15)
        assert (np.sign(new_p[name] - p[name]) == -np.sign(gi)).all()


def test_adam_deterministic_and_rejects_nan():
    p = init_params(ArchConfig(channels=(8, 8)), 4, 0)
    g = p.map(lambda a: np.full_like(a, 0.1))
    a1, _ = adam_step(p, g, adam_init(p))
    a2, _ = adam_step(p, g, adam_init(p))
    for k in p:
        np.testing.assert_array_equal(a1[k], a2[k])
    bad = dict(g.items())
    bad["head.bias"] = bad["head.bias"].copy()
    bad["head.bias"][0] = np.nan
    with pytest.raises(FloatingPointError, match="head.bias"):
        adam_step(p, g.replace(bad), adam_init(p))


# ---------------------------------------------------------------- serialization

def test_serialization_roundtrip(tmp_path):
    p = init_params(ArchConfig(), 4, 0)
    serialize.save(p, tmp_path / "m.params")
    q = serialize.load(tmp_path / "m.params", expect_fingerprint=p.fingerprint)
    assert q.fingerprint == p.fingerprint
    for k in p:
        np.testing.assert_array_equal(q[k], p[k])


def test_serialization_refuses_foreign_fingerprint(tmp_path):
    p = init_params(ArchConfig(), 4, 0)
    serialize.save(p, tmp_path / "m.params")
    other = init_params(ArchConfig(), 5, 0)
    with pytest.raises(FingerprintMismatch):
        serialize.load(tmp_path / "m.params", expect_fingerprint=other.fingerprint)
    raw = bytearray((tmp_path / "m.params").read_bytes())
    raw[12] ^= 0x01  # corrupt a fingerprint character
    with pytest.raises(FingerprintMismatch):
        serialize.loads(bytes(raw))
