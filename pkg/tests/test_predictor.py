"""Attention regressor: encodings, forward pass, gradients, training, inference.

Groups: positional encodings, forward-pass properties and the fast
last-position path, gradient checks, training fixtures (constant, sine,
zero step size, divergence), data handling, checkpoints and per-link
forecasts with fallback and clamping.
"""

from __future__ import annotations

import numpy as np
import pytest

from decarbsim.network import StateHistory, grid_network
from decarbsim.predictor import (
    ChannelModel,
    Forecaster,
    Normalizer,
    PredictorConfig,
    SeriesDataset,
    TrainingError,
    attention_weights,
    backward_last,
    chronological_split,
    forward,
    forward_last,
    gradient_check,
    init_params,
    load_checkpoint,
    positional_encode,
    predict_link_state,
    save_checkpoint,
    train,
    windows_from_history,
    windows_from_series,
)

SMALL = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, seed=3)


def _x(n=4, w=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, w))


# -- positional encodings -----------------------------------------------------------------------

def test_pe_first_row():
    pe = positional_encode(250, 250)
    assert np.all(pe[0, 0::2] == 0.0) and np.all(pe[0, 1::2] == 1.0)


def test_pe_range_and_value():
    pe = positional_encode(250, 250)
    assert np.abs(pe).max() <= 1.0
    assert pe[1, 0] == pytest.approx(np.sin(1.0), abs=1e-12)
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    i, pos, d = 7, 33, 250
    assert pe[pos, 2 * i + 1] == pytest.approx(np.cos(pos / 10000 ** (2 * i / d)), abs=1e-12)


# -- forward -----------------------------------------------------------------------------------------

def test_default_architecture():
    cfg = PredictorConfig()
    assert (cfg.window, cfg.embed_dim, cfg.heads, cfg.encoder_layers, cfg.train_fraction) == (250, 250, 10, 1, 0.8)
    assert cfg.head_dim == 25 and cfg.ffn_dim == 1000
    with pytest.raises(ValueError):
        PredictorConfig(embed_dim=250, heads=12)


def test_zero_decoder_outputs_zero():
    p = init_params(SMALL)
    p["w_d"][:] = 0.0
    np.testing.assert_array_equal(forward(p, _x(), SMALL), 0.0)


def test_attention_rows_sum_to_one():
    cfg = PredictorConfig(seed=1)
    p = init_params(cfg)
    A = attention_weights(p, _x(3, 250, seed=2) * 4.0, cfg)
    assert A.shape == (3, 10, 250, 250)
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-6)


def test_swapping_positions_changes_output_with_pe():
    p = init_params(SMALL)
    x = _x(1)
    y = x.copy()
    y[0, [2, 9]] = y[0, [9, 2]]
    assert forward(p, x, SMALL)[0] != pytest.approx(forward(p, y, SMALL)[0], abs=1e-9)


def test_mean_pool_without_pe_is_permutation_invariant():
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, pooling="mean", use_pe=False)
    p = init_params(cfg)
    x = _x(1)
    perm = np.random.default_rng(9).permutation(16)
    np.testing.assert_allclose(forward(p, x[:, perm], cfg), forward(p, x, cfg), rtol=1e-12, atol=1e-12)


def test_fast_path_matches_reference():
    cfg = PredictorConfig(seed=4)
    p = init_params(cfg)
    x = _x(5, 250, seed=5)
    np.testing.assert_allclose(forward_last(p, x, cfg), forward(p, x, cfg), rtol=1e-10, atol=1e-12)


def test_forward_deterministic_and_rejects_nan():
    p = init_params(SMALL)
    x = _x()
    assert np.array_equal(forward(p, x, SMALL), forward(p, x, SMALL))
    x[1, 3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forward(p, x, SMALL)


# -- gradients -----------------------------------------------------------------------------------------

def test_gradient_check_fresh_model():
    cfg = PredictorConfig(seed=0)
    p = init_params(cfg)
    x = _x(2, 250, seed=1)
    y = np.array([0.3, -0.7])
    assert gradient_check(p, x, y, cfg, n_params=120) < 1e-4


def test_gradient_check_reference_path():
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, pooling="mean")
    p = init_params(cfg)
    assert gradient_check(p, _x(3), np.array([0.1, 0.2, -0.4]), cfg, n_params=150) < 1e-4


def test_gradient_check_after_ten_steps():
    cfg = PredictorConfig(epochs=1, batch_size=8, seed=2)
    series = np.sin(np.arange(400) / 7.0)
    res = train(windows_from_series(series, 250), cfg, max_steps=10)
    assert res.steps == 10
    x = res.normalizer.normalize(series[None, 100:350])
    y = res.normalizer.normalize(np.array([series[350]]))
    assert gradient_check(res.params, x, y, cfg, n_params=120) < 1e-4


def test_decoder_gradient_closed_form():
    cfg = PredictorConfig(seed=6)
    p = init_params(cfg)
    x = _x(1, 250, seed=7)
    target = 0.25
    yhat, cache = forward_last(p, x, cfg, return_cache=True)
    g = backward_last(p, cache, 2.0 * (yhat - target), cfg)
    np.testing.assert_allclose(g["w_d"], 2.0 * (yhat[0] - target) * cache["H2"][0], rtol=1e-8, atol=1e-12)


def test_zero_loss_has_zero_gradients():
    cfg = PredictorConfig(seed=8)
    p = init_params(cfg)
    x = _x(1, 250, seed=8)
    yhat, cache = forward_last(p, x, cfg, return_cache=True)
    g = backward_last(p, cache, 2.0 * (yhat - yhat), cfg)
    assert max(np.abs(v).max() for v in g.values()) <= 1e-10


# -- training --------------------------------------------------------------------------------------------

def test_constant_series_fit():
    res = train(windows_from_series(np.full(400, 5.0), 250), PredictorConfig(epochs=2))
    model = ChannelModel("speed", res.params, res.config, res.normalizer)
    pred = model.predict(np.full((1, 250), 5.0))[0]
    assert abs(pred - 5.0) <= 0.01 * 5.0


def test_sine_fixture_learnable():
    amp = 3.0
    s = amp * np.sin(2 * np.pi * np.arange(1000) / 50)
    res = train(windows_from_series(s, 250), PredictorConfig(epochs=3))
    assert res.test_rmse < 0.1 * amp
    assert res.test_rmse < res.persistence_rmse


def test_zero_learning_rate_leaves_parameters():
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, lr=0.0, epochs=3)
    p0 = init_params(cfg)
    p = {k: v.copy() for k, v in p0.items()}
    res = train(windows_from_series(np.sin(np.arange(200) / 5.0), 16), cfg, params=p)
    for k in p0:
        np.testing.assert_array_equal(res.params[k], p0[k])
    assert np.ptp(res.loss_history) == 0.0


def test_training_deterministic():
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, epochs=2, seed=5)
    ds = windows_from_series(np.cos(np.arange(300) / 4.0), 16)
    a, b = train(ds, cfg), train(ds, cfg)
    assert a.loss_history == b.loss_history
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_divergence_raises_with_epoch():
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, lr=1e300, clip_norm=0.0, epochs=3)
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="epoch"):
        train(windows_from_series(np.sin(np.arange(200) / 3.0) * 1e3, 16), cfg)


def test_convex_fixture_loss_decreases():
    # a purely linear trend is fitted by the decoder bias and weights alone
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, epochs=6, lr=1e-3)
    res = train(windows_from_series(np.linspace(0, 1, 300), 16), cfg)
    assert all(b <= a for a, b in zip(res.loss_history, res.loss_history[1:]))


# -- data handling ------------------------------------------------------------------------------------

def test_chronological_split_has_no_leakage():
    ds = windows_from_series(np.arange(500.0), 250)
    tr, te = chronological_split(ds, 0.8)
    assert len(tr) + len(te) == len(ds)
    assert tr.times.max() < te.times.min()
    assert len(tr) == pytest.approx(0.8 * len(ds), abs=1)


def test_history_windows_split_by_interval():
    mat = np.arange(60.0).reshape(20, 3)
    ds = windows_from_history(mat, 8, np.zeros(3))
    tr, te = chronological_split(ds)
    assert tr.times.max() < te.times.min()
    assert ds.targets[0] == 3.0 and np.all(ds.inputs[0] == 0.0)


def test_split_needs_two_samples():
    with pytest.raises(ValueError):
        chronological_split(SeriesDataset(np.zeros((1, 4)), np.zeros(1), np.zeros(1)))


def test_normalization_round_trip():
    x = np.random.default_rng(1).normal(5, 3, 1000)
    n = Normalizer.fit(windows_from_series(x, 10))
    np.testing.assert_allclose(n.denormalize(n.normalize(x)), x, rtol=0, atol=1e-9)
    assert n.std > 0


# -- checkpoints and forecasts ---------------------------------------------------------------------------

def _model(channel="speed"):
    p = init_params(SMALL)
    return ChannelModel(channel, p, SMALL, Normalizer(4.0, 2.0), {"test_rmse": 0.1})


def test_checkpoint_round_trip(tmp_path):
    m = _model()
    save_checkpoint(m, tmp_path / "speed.npz")
    back = load_checkpoint(tmp_path / "speed.npz")
    x = _x(3) + 4.0
    np.testing.assert_array_equal(back.predict(x), m.predict(x))
    assert back.config == m.config and back.metrics == m.metrics


def test_bad_checkpoint(tmp_path):
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(ValueError, match="not a predictor checkpoint"):
        load_checkpoint(tmp_path / "junk.npz")


def _hist(g, speed):
    h = StateHistory(g, window=16)
    for v in speed:
        row = np.full(g.n_links, float(v))
        h.append(row, row, row, row * 0.5, row * 0.01)
    return h


def test_persistence_fallback():
    g = grid_network(2)
    f = predict_link_state({}, 0, 2, _hist(g, [6.0, 7.0, 8.0]))
    assert f.speed == 8.0 and set(f.fallback) == {"speed", "ghg_er", "nox_er"}


def test_negative_output_clamped():
    g = grid_network(2)
    m = _model("ghg_er")
    m.params["w_d"][:] = 0.0
    m.params["b_d"][:] = -0.3 / m.normalizer.std - m.normalizer.mean / m.normalizer.std  # raw output -0.3
    f = predict_link_state({"ghg_er": m}, 0, 2, _hist(g, [6.0, 7.0, 8.0]))
    assert f.ghg_er == 0.0 and "ghg_er" in f.clamped


def test_speed_capped_at_free_flow_margin():
    g = grid_network(2, ffs=10.0)
    m = _model("speed")
    m.params["w_d"][:] = 0.0
    m.params["b_d"][:] = (50.0 - m.normalizer.mean) / m.normalizer.std
    f = predict_link_state({"speed": m}, 1, 1, _hist(g, [6.0, 7.0]))
    assert f.speed == pytest.approx(10.5) and "speed" in f.clamped


def test_trained_link_forecast_within_fixture_bound():
    g = grid_network(2)
    s = 8.0 + 2.0 * np.sin(2 * np.pi * np.arange(400) / 20)
    cfg = PredictorConfig(window=16, embed_dim=20, heads=4, ffn_dim=24, epochs=20, lr=3e-3, seed=1)
    res = train(windows_from_series(s, 16), cfg)
    m = ChannelModel("speed", res.params, cfg, res.normalizer)
    h = _hist(g, s[:300])
    f = predict_link_state({"speed": m}, 0, 299, h)
    assert abs(f.speed - s[300]) <= 3.0 * res.test_rmse + 1e-9
    assert res.test_rmse < res.persistence_rmse


def test_forecaster_keeps_constant_windows():
    g = grid_network(2)
    m = _model("ghg_er")
    h = _hist(g, [3.0] * 5)
    out = Forecaster({"ghg_er": m}).forecast(h)
    np.testing.assert_array_equal(out["ghg_er"], 1.5)
    assert Forecaster({}).forecast(h) is None


def test_short_window_model_on_long_history():
    g = grid_network(2)
    h = StateHistory(g, window=40)
    for v in np.linspace(2.0, 9.0, 50):
        row = np.full(g.n_links, float(v))
        h.append(row, row, row, row, row)
    m = _model("speed")  # window 16 < 40 kept
    tail = h.series_batch("speed", None)[:, -16:]
    out = Forecaster({"speed": m}).forecast(h)
    np.testing.assert_allclose(out["speed"], np.minimum(np.maximum(m.predict(tail), 0), 1.05 * g.ffs))
    f = predict_link_state({"speed": m}, 0, 49, h)
    assert f.speed == pytest.approx(out["speed"][0])


def test_model_window_longer_than_history_rejected():
    g = grid_network(2)
    m = ChannelModel("speed", init_params(SMALL), SMALL, Normalizer(4.0, 2.0))
    h = StateHistory(g, window=8)
    row = np.full(g.n_links, 3.0)
    h.append(row, row, row, row, row)
    with pytest.raises(ValueError, match="exceeds"):
        predict_link_state({"speed": m}, 0, 0, h)
