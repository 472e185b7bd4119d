import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlsynth import numerics as nx
from ctrlsynth.diffusion import make_schedule, training_loss
from ctrlsynth.model import (MODEL_MAGIC, DenoiserConfig, build_denoiser, load_model,
                             model_from_bytes, model_to_bytes, save_model, time_embedding)

TINY = DenoiserConfig(resolution=8, base_channels=8, levels=1, time_dim=8, text_dim=4,
                      vocab_size=8)


def expected_params(cfg):
    """Closed-form parameter count of the architecture."""
    D, w = cfg.time_dim, cfg.widths()

    def res(a, b):
        n = 2 * a + 9 * a * b + b + D * b + b + 2 * b + 9 * b * b + b
        return n + (a * b + b if a != b else 0)

    conv3 = lambda a, b: 9 * a * b + b
    n = 2 * (D * D + D) + cfg.text_dim * cfg.vocab_size + cfg.text_dim * D + D
    n += conv3(cfg.latent_channels, w[0]) + conv3(w[0], cfg.latent_channels) + 2 * w[0]
    enc = sum(res(w[i], w[i]) + conv3(w[i], w[i + 1]) for i in range(cfg.levels)) + res(w[-1], w[-1])
    n += enc + sum(conv3(w[i + 1], w[i]) + res(2 * w[i], w[i]) for i in range(cfg.levels))
    n += conv3(cfg.latent_cond_channels, w[0]) + enc
    n += sum(w[i] * w[i] + w[i] for i in range(cfg.levels + 1))
    return n


@pytest.mark.parametrize("cfg", [DenoiserConfig(), TINY,
                                 DenoiserConfig(base_channels=16, levels=3)])
def test_param_count(cfg):
    assert build_denoiser(cfg).n_params() == expected_params(cfg)


def test_default_param_count():
    assert build_denoiser().n_params() == 961516


def test_time_embedding_hand_values():
    e = time_embedding(3, 4)
    np.testing.assert_allclose(e, [np.sin(3), np.cos(3), np.sin(0.03), np.cos(0.03)], rtol=1e-6)


def test_time_embedding_distinct_over_T():
    e = time_embedding(np.arange(1, 201), 64)
    assert np.abs(e).max() <= 1.0
    assert len({r.tobytes() for r in e}) == 200


def test_shape_preservation_and_init_identity():
    m = build_denoiser(TINY, seed=1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 12, 4, 4)).astype(np.float32)
    cond = rng.uniform(0, 1, (2, 24, 4, 4)).astype(np.float32)
    a = m.denoise(x, [5, 9], [[1, 2], []], cond).data
    b = m.denoise(x, [5, 9], [[1, 2], []], None).data
    z = m.denoise(x, [5, 9], [[1, 2], []], np.zeros_like(cond)).data
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(z, b)


def test_control_feature_shapes():
    cfg = DenoiserConfig(resolution=16, base_channels=8, levels=2, time_dim=8, text_dim=4)
    m = build_denoiser(cfg)
    feats = m.control_encode(np.zeros((1, 24, 8, 8), np.float32))
    assert [f.shape for f in feats] == [(1, 8, 8, 8), (1, 16, 4, 4), (1, 24, 2, 2)]


def test_rejects_bad_inputs():
    m = build_denoiser(TINY)
    x = np.zeros((1, 12, 4, 4), np.float32)
    with pytest.raises(ValueError):
        m.denoise(x, 1, [[99]])
    with pytest.raises(nx.ShapeError):
        m.denoise(x, 1, [[1]], np.zeros((1, 20, 4, 4), np.float32))
    with pytest.raises(nx.ShapeError):
        m.denoise(np.zeros((1, 5, 4, 4), np.float32), 1, [[1]])
    with pytest.raises(ValueError):
        DenoiserConfig(base_channels=6).validate()


def test_null_prompt_deterministic():
    m = build_denoiser(TINY)
    x = np.ones((1, 12, 4, 4), np.float32)
    np.testing.assert_array_equal(m.denoise(x, 3, [[]]).data, m.denoise(x, 3, [[0]]).data)


def _loss_fn(m, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, (2, 12, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    cond = rng.uniform(0, 1, (2, 24, 4, 4)).astype(np.float32)
    s = make_schedule(20)
    return lambda: training_loss(m, x0, np.array([4, 15]), [[1, 3], [2]], cond, eps, s)


def test_full_denoiser_grad_check():
    m = build_denoiser(TINY, seed=2)
    # move the zero projections off zero so every path carries gradient
    rng = np.random.default_rng(9)
    for k, p in m.params.items():
        if k.startswith("zero."):
            p.data = (rng.standard_normal(p.shape) * 0.2).astype(np.float32)
    errs = nx.grad_check(_loss_fn(m), m.params, max_entries=6)
    assert len(errs) == len(m.params)
    assert max(errs.values()) < 1e-3, sorted(errs.items(), key=lambda kv: -kv[1])[:3]


def test_one_step_makes_condition_matter():
    m = build_denoiser(TINY, seed=3)
    f = _loss_fn(m)
    loss = f()
    nx.backward(loss)
    nx.adamw_step(m.params, {k: p.grad for k, p in m.params.items()},
                  nx.OptimState(lr=1e-3))
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 12, 4, 4)).astype(np.float32)
    c1 = rng.uniform(0, 1, (1, 24, 4, 4)).astype(np.float32)
    c2 = c1.copy()
    c2[:, :4, 1:3, 1:3] += 0.5  # differ only in a small "masked" patch of the R channel
    f1 = m.control_encode(c1)
    f2 = m.control_encode(c2)
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(f1, f2))


def test_overfit_single_triple():
    m = build_denoiser(TINY, seed=5)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (1, 12, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    cond = rng.uniform(0, 1, (1, 24, 4, 4)).astype(np.float32)
    s = make_schedule(20)
    opt = nx.OptimState(lr=3e-3)
    for _ in range(2000):
        nx.zero_grad(m.params.values())
        loss = training_loss(m, x0, 10, [[1, 2]], cond, eps, s)
        nx.backward(loss)
        nx.adamw_step(m.params, {k: p.grad for k, p in m.params.items()}, opt)
    assert loss.item() < 0.01


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = build_denoiser(TINY, seed=6)
    path = tmp_path / "m.bin"
    save_model(path, m)
    m2 = load_model(path)
    assert m2.config == m.config and list(m2.params) == list(m.params)
    for k in m.params:
        assert m2.params[k].data.tobytes() == m.params[k].data.tobytes()
    data = path.read_bytes()
    assert data.startswith(MODEL_MAGIC)
    assert model_to_bytes(m2) == data


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        model_from_bytes(b"NOTAMODEL" + bytes(20))
    data = model_to_bytes(build_denoiser(TINY))
    with pytest.raises((ValueError, EOFError)):
        model_from_bytes(data[:-7])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 3))
def test_build_deterministic(seed, n):
    a, b = build_denoiser(TINY, seed), build_denoiser(TINY, seed)
    assert model_to_bytes(a) == model_to_bytes(b)
    x = np.random.default_rng(seed).standard_normal((n, 12, 4, 4)).astype(np.float32)
    assert a.denoise(x, 7, [[1]] * n).shape == x.shape
