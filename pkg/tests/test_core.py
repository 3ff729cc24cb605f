import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesdesign.core import (
    DesignSpace,
    DomainError,
    PhysicalParams,
    PriorConfig,
    build_obs_noise,
    build_prior,
    enumerate_designs,
    estimate_covariance,
    expand_bounds,
    full_restriction,
    is_covariance,
    latitude_grid,
    loaded_covariance,
    restrict,
    restrict_cov,
    transform_forward,
    transform_inverse,
)


def random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + 0.1 * np.eye(d)


# -- transforms ------------------------------------------------------------


def test_transform_unit_point():
    np.testing.assert_array_equal(transform_forward(PhysicalParams(0.5, 1.0)), [0.0, 0.0])


def test_transform_truth_parameters():
    theta = transform_forward(PhysicalParams(0.7, 7200.0))
    assert theta[0] == pytest.approx(math.log(0.7 / 0.3), rel=1e-14)
    assert theta[1] == pytest.approx(math.log(7200.0), rel=1e-14)


def test_inverse_of_prior_mean():
    p = transform_inverse([0.0, math.log(43200.0)])
    assert p.rh == 0.5
    assert p.tau == pytest.approx(43200.0, rel=1e-14)
    q = transform_inverse([0.0, 0.0])
    assert (q.rh, q.tau) == (0.5, 1.0)


def test_inverse_large_logit_no_overflow():
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        p = transform_inverse([40.0, 0.0])
    # 1 - logistic(40) = exp(-40) / (1 + exp(-40)) ~ 4.2e-18
    assert abs(p.rh - 1.0) < 1e-12
    assert p.rh < 1.0


@pytest.mark.parametrize("rh,tau", [(0.0, 1.0), (1.0, 1.0), (-0.1, 1.0), (0.5, 0.0), (0.5, -3.0)])
def test_physical_domain_errors(rh, tau):
    with pytest.raises(DomainError):
        PhysicalParams(rh, tau)


def test_round_trip_100_random_points():
    rng = np.random.default_rng(7)
    for rh, tau in zip(rng.uniform(0.01, 0.99, 100), np.exp(rng.uniform(0.0, 14.0, 100))):
        p = transform_inverse(transform_forward(PhysicalParams(rh, tau)))
        assert abs(p.rh - rh) <= 1e-12 * rh
        assert abs(p.tau - tau) <= 1e-12 * tau


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-3, 1e8))
def test_round_trip_property(rh, tau):
    p = transform_inverse(transform_forward(PhysicalParams(rh, tau)))
    assert p.rh == pytest.approx(rh, rel=1e-12, abs=0)
    assert p.tau == pytest.approx(tau, rel=1e-12, abs=0)


# -- prior -----------------------------------------------------------------


def test_default_prior():
    prior = build_prior()
    np.testing.assert_allclose(prior.mean, [0.0, math.log(43200.0)], rtol=1e-15)
    np.testing.assert_allclose(prior.cov, np.diag([1.0, math.log(2.0)]), rtol=1e-15)
    p = transform_inverse(prior.mean)
    assert p.rh == 0.5 and p.tau == pytest.approx(43200.0, rel=1e-12)
    assert np.count_nonzero(prior.cov - np.diag(np.diag(prior.cov))) == 0
    assert np.all(np.linalg.eigvalsh(prior.cov) > 0)


def test_prior_timescale_median():
    draws = build_prior().sample(np.random.default_rng(0), 100_000)
    assert np.median(np.exp(draws[:, 1])) == pytest.approx(43200.0, rel=0.02)


def test_prior_config_is_exposed():
    prior = build_prior(PriorConfig(tau_median_s=3600.0, tau_log_var=0.5))
    assert prior.mean[1] == pytest.approx(math.log(3600.0))
    assert prior.cov[1, 1] == 0.5


# -- design spaces ---------------------------------------------------------


def test_stationary_stencil_three():
    designs = enumerate_designs(DesignSpace("stationary", stencil=3))
    assert len(designs) == 30
    assert all(w.size == 9 for w in designs)
    assert [w.design_id for w in designs[:2]] == ["1", "2"]
    # design k covers latitudes k, k+1, k+2 (1-based) of every statistic
    w = designs[4]
    lat0 = 4
    expected = sorted(s * 32 + lat0 + j for s in range(3) for j in range(3))
    assert list(w.rows) == expected


def test_stationary_full_stencil_is_identity():
    designs = enumerate_designs(DesignSpace("stationary", stencil=32))
    assert len(designs) == 1
    assert list(designs[0].rows) == list(range(96))


def test_seasonal_single_latitude():
    designs = enumerate_designs(DesignSpace("seasonal", stencil=1))
    assert len(designs) == 128
    assert designs[0].design_id == "0:1" and designs[-1].design_id == "3:32"
    for w in designs:
        assert w.size == 3
        block = {r // 96 for r in w.rows}
        assert block == {w.season}


@pytest.mark.parametrize("stencil", range(1, 33))
def test_design_counts_closed_form(stencil):
    assert len(enumerate_designs(DesignSpace("stationary", stencil=stencil))) == 32 - (stencil - 1)
    assert len(enumerate_designs(DesignSpace("seasonal", stencil=stencil))) == 4 * (32 - (stencil - 1))


@pytest.mark.parametrize("stencil", [0, 33])
def test_invalid_stencil(stencil):
    with pytest.raises(ValueError):
        DesignSpace("stationary", stencil=stencil)


def test_latitude_grid_symmetric():
    lats = latitude_grid()
    assert lats.size == 32 and np.all(np.diff(lats) > 0)
    np.testing.assert_allclose(lats, -lats[::-1], atol=1e-12)


# -- restriction -----------------------------------------------------------


def test_restrict_identity_and_selection():
    v = np.arange(96.0)
    np.testing.assert_array_equal(restrict(full_restriction(96), v), v)
    w = enumerate_designs(DesignSpace("stationary", stencil=1))[0]
    np.testing.assert_array_equal(restrict(w, v), [0.0, 32.0, 64.0])


def test_restrict_dimension_mismatch():
    w = enumerate_designs(DesignSpace("stationary", stencil=1))[0]
    with pytest.raises(ValueError):
        restrict(w, np.zeros(95))
    with pytest.raises(ValueError):
        restrict_cov(w, np.eye(95))


def test_restriction_algebra():
    for w in enumerate_designs(DesignSpace("seasonal", stencil=2))[::17]:
        W = w.matrix()
        np.testing.assert_array_equal(W @ W.T, np.eye(w.size))


def test_restrict_cov_matches_restricted_samples():
    rng = np.random.default_rng(3)
    Y = rng.standard_normal((600, 96)) @ rng.standard_normal((96, 96))
    S = estimate_covariance(Y)
    for w in enumerate_designs(DesignSpace("stationary", stencil=3))[::7]:
        np.testing.assert_allclose(estimate_covariance(restrict(w, Y)), restrict_cov(w, S), atol=1e-10, rtol=0)


def test_restrict_cov_full_and_hand_case():
    S = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]])
    full = full_restriction(3)
    np.testing.assert_array_equal(restrict_cov(full, S), S)
    from cesdesign.core import Restriction

    w = Restriction(index=0, latitude=0, season=None, rows=(0, 2), full_dim=3)
    np.testing.assert_array_equal(restrict_cov(w, S), [[4.0, 0.5], [0.5, 2.0]])


def test_principal_submatrix_spd():
    rng = np.random.default_rng(11)
    w = enumerate_designs(DesignSpace("stationary", n_lat=4, stencil=2, n_stats=2))[1]
    for _ in range(50):
        sub = restrict_cov(w, random_spd(rng, 8))
        assert np.linalg.eigvalsh(sub).min() > 0


# -- covariance estimation -------------------------------------------------


def test_identical_rows_zero_covariance():
    np.testing.assert_array_equal(estimate_covariance(np.ones((2, 5))), np.zeros((5, 5)))


def test_covariance_needs_two_rows():
    with pytest.raises(ValueError):
        estimate_covariance(np.ones((1, 3)))


def test_covariance_unbiased_divisor():
    X = np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 1.0]])
    np.testing.assert_allclose(estimate_covariance(X), np.cov(X.T, ddof=1), rtol=1e-14)


def test_covariance_monte_carlo_accuracy():
    rng = np.random.default_rng(0)
    truth = random_spd(rng, 4)
    X = rng.multivariate_normal(np.zeros(4), truth, size=600)
    err = np.linalg.norm(estimate_covariance(X) - truth) / np.linalg.norm(truth)
    assert err < 0.15


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_covariance_symmetric_psd(n, d, seed):
    X = np.random.default_rng(seed).standard_normal((n, d)) * 10.0
    S = estimate_covariance(X)
    assert np.abs(S - S.T).max() <= 1e-10 * max(1.0, np.abs(S).max())
    assert is_covariance(S)


def test_loaded_covariance_only_when_rank_deficient():
    S = np.diag([2.0, 1.0])
    np.testing.assert_array_equal(loaded_covariance(S, 10), S)
    np.testing.assert_allclose(loaded_covariance(S, 2), np.diag([2.1, 1.05]))


# -- observation noise -----------------------------------------------------


def test_obs_noise_hand_case():
    nm = build_obs_noise(np.array([0.95]), np.array([[0.0004]]), [(0.0, 1.0)])
    # min(0.2 * min(0.01, 0.09), 0.1 * 0.95) = 0.002
    assert nm.d[0] == pytest.approx(0.002, rel=1e-12)
    assert nm.delta[0, 0] == pytest.approx(4e-6, rel=1e-12)


def test_obs_noise_unbounded_uses_cap():
    nm = build_obs_noise(np.array([3.0, 7.0]), np.diag([1.0, 4.0]), [(-np.inf, np.inf)] * 2)
    np.testing.assert_allclose(nm.d, [0.3, 0.7], rtol=1e-15)


def test_obs_noise_one_sided_interval():
    # [0, inf): the only finite endpoint is 0; mu - 2 s = 4 is nearest at distance 4
    nm = build_obs_noise(np.array([5.0]), np.array([[0.25]]), [(0.0, np.inf)], C=0.05, C_max=1.0)
    assert nm.d[0] == pytest.approx(0.05 * 4.0, rel=1e-14)


def test_obs_noise_mean_outside_interval():
    with pytest.raises(DomainError):
        build_obs_noise(np.array([1.5]), np.array([[0.01]]), [(0.0, 1.0)])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.05, 0.95), st.floats(0.0, 0.05)), min_size=1, max_size=10),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_obs_noise_cap_property(rows, C, C_max):
    mu = np.array([r[0] for r in rows])
    S = np.diag([r[1] ** 2 for r in rows])
    nm = build_obs_noise(mu, S, [(0.0, 1.0)] * len(rows), C=C, C_max=C_max)
    assert np.all(nm.d > 0)
    assert np.all(nm.d <= C_max * mu * (1 + 1e-15))


def test_expand_bounds_layout():
    b = expand_bounds([(0, 1), (0, np.inf), (0, 1)], n_lat=2, n_seasons=2)
    assert len(b) == 12
    assert b[2] == (0, np.inf) and b[8] == (0, np.inf) and b[5] == (0, 1)
