import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nicaimpute import autodiff as ad, kernels, nica
from nicaimpute.errors import ConfigError, DivergenceError, ShapeError, TrainingError
from nicaimpute.nica import AdamState, NicaConfig, NicaModel

SMALL = NicaConfig(K=3, v=2, iterations=5, seed=1)


def problem(n=12, d=3, seed=0, miss=0.3):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, d))
    m = r.random((n, d)) >= miss
    m[np.arange(n), np.arange(n) % d] = True
    m[:2] = True
    return np.where(m, x, 0.0), m


def random_model(d, cfg=SMALL, seed=0):
    model = NicaModel.initialize(d, cfg, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 1)
    model.W2 = r.normal(scale=0.3, size=model.W2.shape)
    model.b2 = r.normal(scale=0.3, size=model.b2.shape)
    return model


def test_config_defaults_and_validation():
    cfg = NicaConfig()
    assert (cfg.K, cfg.v, cfg.corruption_rate, cfg.iterations, cfg.batch_rows) == (10, 8, 0.2, 1000, 1024)
    assert (cfg.hidden_multiplier, cfg.fnn_dropout, cfg.row_skip_rate) == (5, 0.5, 0.1)
    assert (cfg.alpha1, cfg.alpha2, cfg.learning_rate) == (10.0, 10.0, 0.001)
    for bad in ({"K": 0}, {"v": 0}, {"fnn_dropout": 1.0}, {"learning_rate": 0.0}, {"alpha1": -1.0}):
        with pytest.raises(ConfigError):
            NicaConfig(**bad)
    assert NicaConfig.from_dict({"K": "4", "learning_rate": "0.01"}) == NicaConfig(K=4, learning_rate=0.01)
    with pytest.raises(ConfigError):
        NicaConfig.from_dict({"layers": 3})


def test_initialization_shapes_and_zero_head():
    model = NicaModel.initialize(4, NicaConfig(), np.random.default_rng(0))
    assert model.W1.shape == (8, 20) and model.W2.shape == (20, 4)
    assert not model.W2.any() and not model.b2.any() and not model.b1.any()
    assert np.abs(model.W1).max() <= np.sqrt(6.0 / 28)


def test_zero_head_identity():
    x0, m = problem()
    model = NicaModel.initialize(3, SMALL, np.random.default_rng(0))
    grown, _ = nica.grow(x0, model, training=True)
    assert grown.tobytes() == x0.tobytes()
    tape = ad.Tape()
    breakdown, _ = nica.losses(tape.constant(x0), x0, m, np.zeros_like(m), 10.0, 10.0)
    assert breakdown.as_tuple() == (0.0, 0.0, 0.0, 0.0)


def test_all_rows_skipped_is_identity():
    x0, _ = problem()
    model = random_model(3)
    tape = ad.Tape()
    params = nica.param_nodes(tape, model)
    out = nica.growth_step(tape.constant(x0), params, np.zeros(x0.shape[0]), training=True,
                           rng=np.random.default_rng(0), dropout_rate=0.5)
    np.testing.assert_array_equal(out.value, x0)


def test_losses_examples():
    x0, m = problem()
    xk = x0.copy()
    i, j = np.argwhere(~m)[0]
    xk[i, j] += 0.5
    tape = ad.Tape()
    b, _ = nica.losses(tape.constant(xk), x0, m, np.zeros_like(m), 10.0, 10.0)
    missing_count = (~m).sum()
    assert b.recovering == 0.0 and b.observed == 0.0
    np.testing.assert_allclose(b.missing, -0.25 / missing_count, rtol=1e-15)
    np.testing.assert_allclose(b.total, b.missing, rtol=1e-15)
    mc = np.zeros_like(m)
    mc[0, 0] = True
    with pytest.raises(ValueError):
        nica.losses(tape.constant(xk), x0, m, ~m, 10.0, 10.0)
    b, _ = nica.losses(tape.constant(xk), x0, m, mc, 10.0, 10.0)
    assert b.total == 10 * b.recovering + 10 * b.observed + b.missing


def test_adam_first_step():
    model = NicaModel.initialize(1, NicaConfig(), np.random.default_rng(0))
    before = model.copy()
    grads = {name: np.ones_like(v) for name, v in model.params().items()}
    nica.adam_step(model, grads, AdamState(), 1e-3)
    np.testing.assert_allclose(model.b2 - before.b2, -1e-3 / (1 + 1e-8), rtol=1e-12)
    zeros = {name: np.zeros_like(v) for name, v in model.params().items()}
    after = model.copy()
    nica.adam_step(model, zeros, AdamState(), 1e-3)
    for name in nica.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(model, name), getattr(after, name))
    with pytest.raises(TrainingError):
        nica.adam_step(model, {"W1": np.full_like(model.W1, np.nan)}, AdamState(), 1e-3)


def test_train_zero_iterations_and_determinism():
    x0, m = problem()
    model, history = nica.train(x0, m, SMALL.replace(iterations=0))
    assert history == []
    assert not model.W2.any()
    a, ha = nica.train(x0, m, SMALL)
    b, hb = nica.train(x0, m, SMALL)
    assert ha == hb and len(ha) == SMALL.iterations
    for name in nica.PARAM_NAMES:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c, _ = nica.train(x0, m, SMALL.replace(seed=2))
    assert c.W1.tobytes() != a.W1.tobytes()


def test_train_rejects_bad_input():
    x0, m = problem()
    with pytest.raises(ShapeError):
        nica.train(x0, m[:-1], SMALL)
    with pytest.raises(ValueError):
        nica.train(np.where(m, x0, np.nan), m, SMALL)


def test_training_reduces_loss():
    x0, m = problem(n=40, d=4)
    _, history = nica.train(x0, m, NicaConfig(K=3, v=4, iterations=150, learning_rate=0.01, seed=0))
    assert np.mean(history[-20:]) < np.mean(history[:20])


def test_divergence_is_reported():
    x0, m = problem()
    model = random_model(3)
    model.W2 = np.full_like(model.W2, 1e300)
    with pytest.raises(DivergenceError) as info:
        nica.grow(x0 + 1.0, model)
    assert info.value.step is not None


def test_impute_zero_model_and_full_mask():
    x0, m = problem()
    zero = NicaModel.initialize(3, SMALL, np.random.default_rng(0))
    out = nica.impute(zero, x0, m)
    np.testing.assert_array_equal(out[~m], 0.0)
    full = np.ones_like(m)
    assert nica.impute(random_model(3), x0, full).tobytes() == x0.tobytes()
    with pytest.raises(ShapeError):
        nica.impute(zero, x0[:, :2], m[:, :2])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(1, 6), st.integers(0, 10**6))
def test_splice_keeps_observed_cells(n, d, seed):
    r = np.random.default_rng(seed)
    x0 = r.normal(size=(n, d))
    m = r.random((n, d)) > 0.4
    x0 = np.where(m, x0, 0.0)
    model = random_model(d, NicaConfig(K=2), seed)
    out = nica.impute(model, x0, m)
    assert out[m].tobytes() == x0[m].tobytes()
    assert np.all(np.isfinite(out))


def test_chunked_inference_matches_per_chunk_growth(monkeypatch):
    x0, m = problem(n=30)
    model = random_model(3)
    monkeypatch.setattr(nica, "CHUNK_THRESHOLD", 10)
    monkeypatch.setattr(nica, "CHUNK_ROWS", 8)
    out, trace = nica.impute(model, x0, m, capture_trace=True)
    parts = [nica.grow(x0[s:s + 8], model)[0] for s in range(0, 30, 8)]
    np.testing.assert_array_equal(out, np.where(m, x0, np.concatenate(parts)))
    assert len(trace) == SMALL.K + 1 and trace.states[0].shape == x0.shape


def test_fused_and_unfused_growth_agree():
    x0, m = problem(n=9, d=3)
    model = random_model(3)
    cfg = model.config
    seeds = np.stack([x0, x0 * 0.5])
    mc = np.zeros((2, *m.shape), bool)
    mc[0, 0, 0] = mc[1, 1, 1] = True
    out = {}
    for fused in (True, False):
        tape = ad.Tape(11)
        params = nica.param_nodes(tape, model)
        _, loss = nica.iteration_loss(tape, params, seeds, x0, m, mc, cfg, fused=fused)
        ad.backward(loss)
        out[fused] = (float(loss.value), {k: v.grad.copy() for k, v in params.items()})
    np.testing.assert_allclose(out[True][0], out[False][0], rtol=1e-12)
    for name in nica.PARAM_NAMES:
        np.testing.assert_allclose(out[True][1][name], out[False][1][name], rtol=1e-9, atol=1e-12)


def test_backends_train_alike():
    x0, m = problem(n=20, d=3)
    before = kernels.BACKEND
    results = {}
    try:
        for name in kernels.available_backends():
            kernels.use(name)
            results[name] = nica.train(x0, m, SMALL)[1]
    finally:
        kernels.use(before)
    ref = results["python"]
    for hist in results.values():
        np.testing.assert_allclose(hist, ref, rtol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    model = random_model(3)
    model.save(tmp_path / "m.json")
    back = NicaModel.load(tmp_path / "m.json")
    assert back.config == model.config
    for name in nica.PARAM_NAMES:
        assert getattr(back, name).tobytes() == getattr(model, name).tobytes()
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        NicaModel.load(tmp_path / "bad.json")


def test_trace_export_has_k_plus_one_states(tmp_path):
    x0, m = problem()
    model = random_model(3, NicaConfig(K=10))
    _, trace = nica.impute(model, x0, m, capture_trace=True)
    files = nica.export_trace(trace, tmp_path / "trace")
    assert len(files) == 11
    back = nica.read_trace(tmp_path / "trace")
    for a, b in zip(back.states, trace.states):
        assert a.tobytes() == b.tobytes()


def test_gradient_check_passes_and_detects_faults():
    worst, per_param = nica.gradient_check(seed=3)
    assert worst < 1e-4 and set(per_param) == set(nica.PARAM_NAMES)
    assert nica.gradient_check(seed=3)[0] == worst
    for op in ("attention", "mlp"):
        with ad.inject_backward_fault(op):
            assert nica.gradient_check(seed=3)[0] > 1e-4
