import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesdesign.config import PipelineConfig
from cesdesign.core import DesignSpace, build_prior, enumerate_designs, restrict, restrict_cov
from cesdesign.design import fit_emulator, prepare_design_data
from cesdesign.forward import AnalyticAquaplanet, derive_seed
from cesdesign.gp import (
    Decorrelator,
    GPEmulator,
    ScalarGP,
    fit_decorrelator,
    fit_scalar_gp,
    log_marginal_likelihood,
    train,
)

# -- decorrelation ----------------------------------------------------------


def test_identity_decorrelator_is_signed_permutation():
    dec = fit_decorrelator(np.eye(4))
    M = dec.matrix
    np.testing.assert_allclose(np.abs(M), np.abs(M).round(), atol=1e-12)
    np.testing.assert_allclose(M @ M.T, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(dec.scale, 1.0)


def test_diagonal_scales_and_whitening():
    dec = fit_decorrelator(np.diag([4.0, 1.0]))
    np.testing.assert_allclose(dec.scale, [2.0, 1.0], rtol=1e-14)
    x = np.random.default_rng(0).standard_normal((10_000, 2)) * [2.0, 1.0]
    var = dec.transform(x).var(axis=0, ddof=1)
    assert np.all(np.abs(var - 1.0) < 0.1)


def test_rank_one_truncation():
    v = np.array([1.0, 2.0, -1.0])
    dec = fit_decorrelator(np.outer(v, v))
    assert dec.n_out == 1
    np.testing.assert_allclose(dec.scale[0] ** 2, v @ v, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_decorrelator_orthonormal_and_whitening(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    S = A @ A.T + 1e-3 * np.eye(d)
    dec = fit_decorrelator(S)
    np.testing.assert_allclose(dec.basis @ dec.basis.T, np.eye(dec.n_out), atol=1e-10)
    np.testing.assert_allclose(dec.transform_cov(S), np.eye(dec.n_out), atol=1e-8)


def test_decorrelator_round_trip():
    dec = fit_decorrelator(np.array([[2.0, 0.3], [0.3, 1.0]]))
    back = Decorrelator.from_dict(dec.to_dict())
    np.testing.assert_array_equal(back.matrix, dec.matrix)


def test_whitened_control_run_variance():
    model = AnalyticAquaplanet()
    theta = build_prior().mean
    w = enumerate_designs(DesignSpace("stationary", stencil=3))[15]
    sigma = np.cov(model.run_control(theta, 650, 50, derive_seed(0, 1)).T)
    fresh = model.run_control(theta, 650, 50, derive_seed(1, 1))
    dec = fit_decorrelator(restrict_cov(w, sigma))
    var = dec.transform(restrict(w, fresh)).var(axis=0, ddof=1)
    assert np.all((var >= 0.8) & (var <= 1.2))


# -- scalar GP -------------------------------------------------------------


def sine_data(seed, n=40):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, n)
    return x, np.sin(x) + rng.normal(0.0, 0.1, n)


def test_sine_held_out_rmse():
    x, y = sine_data(0)
    gp = fit_scalar_gp(x, y, seed=1)
    xs = np.linspace(-3.0, 3.0, 200)
    mean, var = gp.predict(xs)
    assert np.sqrt(np.mean((mean - np.sin(xs)) ** 2)) < 0.05
    assert np.all(var > 0)


def test_constant_outputs():
    X = np.random.default_rng(2).uniform(-1, 1, (20, 2))
    gp = fit_scalar_gp(X, np.full(20, 3.5), seed=0)
    mean, _ = gp.predict(np.array([[0.2, -0.4], [5.0, 5.0]]))
    np.testing.assert_allclose(mean, 3.5, atol=1e-10)
    assert gp.signal_var <= 1e-6


def test_noise_recovery():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 2, (150, 2))
        y = np.sin(X[:, 0]) + 0.5 * np.cos(2 * X[:, 1]) + rng.normal(0, 0.1, 150)
        gp = fit_scalar_gp(X, y, seed=seed)
        assert 0.005 <= gp.nugget <= 0.02


def test_interpolates_with_tiny_nugget():
    x = np.linspace(0, 1, 12)
    y = np.cos(3 * x)
    gp = ScalarGP(x, y, [0.3], 1.0, 1e-8)
    np.testing.assert_allclose(gp.predict(x)[0], y, atol=1e-3)


def test_prior_reversion_far_away():
    X = np.random.default_rng(0).uniform(-1, 1, (30, 2))
    gp = ScalarGP(X, np.sin(X[:, 0]), [0.5, 0.5], 2.0, 0.01)
    _, var = gp.predict(np.array([[10.0, 10.0]]))
    assert var[0] == pytest.approx(2.01, rel=0.01)


def test_mean_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    X = rng.uniform(-2, 2, (60, 2))
    gp = ScalarGP(X, np.sin(X[:, 0]) * np.cos(X[:, 1]), [0.8, 1.1], 1.0, 1e-3)
    h = 1e-6
    for x in rng.uniform(-1.5, 1.5, (20, 2)):
        g = gp.mean_grad(x)
        fd = np.array([(gp.predict(x + e)[0][0] - gp.predict(x - e)[0][0]) / (2 * h)
                       for e in np.eye(2) * h])
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-3)


def test_low_rank_variance_matches_exact():
    rng = np.random.default_rng(8)
    X = rng.uniform(-2, 2, (300, 2))
    gp = ScalarGP(X, np.sin(X.sum(1)), [0.7, 0.9], 1.3, 1e-4)
    Xs = rng.uniform(-3, 3, (50, 2))
    np.testing.assert_allclose(gp.predict(Xs)[1], gp.predict(Xs, exact=True)[1], rtol=0,
                               atol=1e-7 * gp.signal_var)


def test_optimum_beats_every_start():
    rng = np.random.default_rng(3)
    X = rng.uniform(-2, 2, (60, 2))
    y = np.tanh(X[:, 0]) + rng.normal(0, 0.05, 60)
    gp = fit_scalar_gp(X, y, seed=4)
    assert gp.starts.shape == (5, 4)
    best = log_marginal_likelihood(X, y, gp.lengthscales, gp.signal_var, gp.nugget)
    assert best == pytest.approx(gp.log_marginal, rel=1e-9)
    for s in gp.starts:
        assert best >= log_marginal_likelihood(X, y, s[:2], s[2], s[3])


def test_fit_requires_ten_finite_points():
    with pytest.raises(ValueError):
        fit_scalar_gp(np.zeros((9, 2)), np.zeros(9))
    y = np.zeros(12)
    y[3] = np.nan
    with pytest.raises(ValueError):
        fit_scalar_gp(np.random.default_rng(0).normal(size=(12, 2)), y)


def test_hyperparameters_positive():
    with pytest.raises(ValueError):
        ScalarGP(np.zeros((3, 1)), np.zeros(3), [1.0], 1.0, 0.0)


def test_non_spd_kernel_raises_nugget(monkeypatch):
    import scipy.linalg

    real = scipy.linalg.cholesky
    calls = []

    def failing_once(K, lower=False):
        calls.append(K[0, 0])
        if len(calls) == 1:
            raise np.linalg.LinAlgError("not positive definite")
        return real(K, lower=lower)

    monkeypatch.setattr(scipy.linalg, "cholesky", failing_once)
    X = np.repeat(np.linspace(0, 1, 5), 3)[:, None]
    gp = ScalarGP(X, np.sin(X[:, 0]), [0.2], 2.0, 1e-30)
    assert gp.nugget == pytest.approx(2e-8)
    assert len(calls) == 2


def test_non_spd_kernel_fails_after_retry(monkeypatch):
    import scipy.linalg

    def always_fail(K, lower=False):
        raise np.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(scipy.linalg, "cholesky", always_fail)
    with pytest.raises(np.linalg.LinAlgError):
        ScalarGP(np.linspace(0, 1, 5), np.zeros(5), [0.2], 1.0, 1e-30)


# -- multi-output emulator --------------------------------------------------


def toy_emulator(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (80, 2))
    Y = np.column_stack([np.sin(X[:, 0]), X[:, 1] ** 2, X.sum(1)]) + rng.normal(0, 0.05, (80, 3))
    return train(X, Y, n_starts=2, seed=seed, design_id="toy")


def test_emulator_predict_agrees_with_scalar_gps():
    em = toy_emulator()
    theta = np.array([0.3, -0.7])
    mean, var = em.predict(theta)
    for i, gp in enumerate(em.gps):
        m, v = gp.predict(theta[None], exact=True)
        assert mean[i] == pytest.approx(m[0], rel=1e-8, abs=1e-10)
        assert var[i] == pytest.approx(v[0], abs=1e-7 * gp.signal_var)
    bm, bv = em.predict_batch(np.array([theta, theta]))
    np.testing.assert_allclose(bm[0], mean, rtol=1e-8, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_emulator_variance_positive(a, b):
    _, var = _TOY.predict(np.array([a, b]))
    assert np.all(var > 0)


_TOY = toy_emulator(1)


def test_emulator_serialisation():
    em = toy_emulator()
    em.decorrelator = fit_decorrelator(np.diag([1.0, 2.0, 3.0]))
    back = GPEmulator.from_dict(em.to_dict())
    theta = np.array([0.1, 0.2])
    np.testing.assert_allclose(back.predict(theta)[0], em.predict(theta)[0], rtol=1e-12)
    np.testing.assert_array_equal(back.decorrelator.matrix, em.decorrelator.matrix)
    assert back.design_id == "toy"


@pytest.fixture(scope="module")
def equatorial_emulator():
    model = AnalyticAquaplanet()
    prior = build_prior()
    cfg = PipelineConfig().resolved()
    data = prepare_design_data(model, prior, cfg, 0)
    w = enumerate_designs(DesignSpace("stationary", stencil=3))[15]
    dec = fit_decorrelator(restrict_cov(w, data.sigma))
    em = fit_emulator(data.training.restricted(w), dec, cfg, derive_seed(0, 3, 15, 0), w.design_id)
    return model, prior, w, dec, em


def test_emulator_fidelity_on_analytic_model(equatorial_emulator):
    model, prior, w, dec, em = equatorial_emulator
    rng = np.random.default_rng(12)
    thetas = []
    while len(thetas) < 50:
        t = prior.sample(rng, 1)[0]
        z = (t - prior.mean) / np.sqrt(np.diag(prior.cov))
        if np.all(np.abs(z) <= 1.645):
            thetas.append(t)
    hits = total = 0
    for t in thetas:
        mean, var = em.predict(t)
        truth = dec.transform(restrict(w, model.eval_mean(t)))
        hits += int(np.sum(np.abs(mean - truth) <= 3 * np.sqrt(var)))
        total += mean.size
    assert hits / total >= 0.95
