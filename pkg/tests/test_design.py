import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesdesign.config import config_from_dict
from cesdesign.core import (
    DesignSpace,
    PhysicalParams,
    build_prior,
    enumerate_designs,
    full_restriction,
    restrict,
    transform_forward,
)
from cesdesign.design import (
    DesignData,
    DesignResult,
    UQ_CONTROL_STREAM,
    UtilityTable,
    control_data,
    d_utility,
    design_stage,
    evaluate_design,
    in_hdr,
    log_det_posterior,
    prepare_design_data,
    uq_stage,
)
from cesdesign.eki import TrainingSet
from cesdesign.forward import AnalyticAquaplanet, AnalyticConfig, derive_seed
from cesdesign.mcmc import PosteriorSampleSet, posterior_cov
from cesdesign.oracle import grid_posterior

# Small settings so the orchestration runs in seconds.
CHEAP = {
    "control": {"n_windows": 120, "n_spinup": 20},
    "eki": {"ensemble_size": 30, "n_iter": 3},
    "gp": {"n_starts": 2},
    "mcmc": {"n_samples": 4000},
}


def cheap_cfg(**extra):
    data = {k: dict(v) for k, v in CHEAP.items()}
    for key, value in extra.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return config_from_dict(data).resolved()


def sample_set(samples, design_id="x"):
    return PosteriorSampleSet(np.asarray(samples, dtype=float), 0.3, design_id)


def whitened(rng, n=500):
    x = rng.standard_normal((n, 2))
    x -= x.mean(axis=0)
    L = np.linalg.cholesky(np.cov(x.T))
    return np.linalg.solve(L, x.T).T


# -- D-utility ---------------------------------------------------------------


def test_identity_covariance_has_zero_log_utility():
    ps = sample_set(whitened(np.random.default_rng(0)))
    np.testing.assert_allclose(posterior_cov(ps), np.eye(2), atol=1e-12)
    assert d_utility(ps) == pytest.approx(0.0, abs=1e-12)


def test_degenerate_samples():
    ps = sample_set(np.ones((50, 2)))
    assert d_utility(ps) == math.inf
    assert log_det_posterior(ps) == -math.inf


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4).filter(
    lambda b: abs(b[0] * b[3] - b[1] * b[2]) > 1e-2), st.integers(0, 2**32 - 1))
def test_linear_reparameterisation(b, seed):
    B = np.array(b).reshape(2, 2)
    rng = np.random.default_rng(seed)
    sets = [sample_set(rng.standard_normal((300, 2)) * rng.uniform(0.1, 2.0, 2)) for _ in range(4)]
    before = np.array([d_utility(ps) for ps in sets])
    after = np.array([d_utility(sample_set(ps.samples @ B.T)) for ps in sets])
    shift = -2.0 * math.log(abs(np.linalg.det(B)))
    np.testing.assert_allclose(after, before + shift, rtol=1e-9, atol=1e-9)
    assert int(np.argmax(after)) == int(np.argmax(before))


# -- utility tables ----------------------------------------------------------


def row(i, logu, status="ok", season=None):
    return DesignResult(str(i + 1), i, float(i), season, log_utility=logu, log_det_cov=-logu, status=status)


def test_argmax_ties_go_to_lowest_index():
    table = UtilityTable([row(2, 1.0), row(0, 1.0), row(1, 0.5)])
    assert table.argmax.index == 0


def test_argmax_skips_failed_and_degenerate():
    table = UtilityTable([row(0, 9.0, "failed"), row(1, math.inf, "degenerate"), row(2, 1.0)])
    assert table.argmax.index == 2
    with pytest.raises(RuntimeError):
        UtilityTable([row(0, 9.0, "failed")]).argmax


def test_argmax_by_season():
    rows = [row(0, 1.0, season=0), row(1, 3.0, season=0), row(2, 2.0, season=3)]
    best = UtilityTable(rows).argmax_by_season()
    assert best[0].index == 1 and best[3].index == 2


# -- design stage ------------------------------------------------------------


@pytest.fixture(scope="module")
def small_stage():
    cfg = cheap_cfg()
    model = AnalyticAquaplanet()
    prior = build_prior()
    ds = DesignSpace("stationary", stencil=3)
    designs = [enumerate_designs(ds)[i] for i in (0, 15, 29)]
    table, data = design_stage(model, prior, ds, cfg, seed=0, designs=designs, return_data=True)
    return cfg, model, prior, ds, designs, table, data


def test_table_internal_consistency(small_stage):
    *_, table, _ = small_stage
    assert len(table) == 3
    for r in table.rows:
        assert r.status == "ok"
        assert r.log_utility + r.log_det_cov == pytest.approx(0.0, abs=1e-10)
        assert r.log_utility == pytest.approx(d_utility(r.samples), abs=0)
        assert 0.15 <= r.acceptance_rate <= 0.45
    best = table.argmax
    assert best.log_utility == max(table.log_utilities())
    assert best.design_id == "16"


def test_budget_is_control_plus_calibration(small_stage):
    cfg, *_, table, data = small_stage
    assert table.n_evaluations == cfg.control.n_windows + cfg.eki.ensemble_size * cfg.eki.n_iter
    assert len(data.training) == cfg.eki.ensemble_size * cfg.eki.n_iter


def test_data_sample_is_last_control_window(small_stage):
    *_, data = small_stage
    np.testing.assert_array_equal(data.y, data.control[-1])
    assert data.control.shape == (100, 96)


def test_single_design_table():
    cfg = cheap_cfg()
    ds = DesignSpace("stationary", stencil=3)
    w = enumerate_designs(ds)[10]
    table = design_stage(AnalyticAquaplanet(), build_prior(), ds, cfg, seed=1, designs=[w])
    assert len(table) == 1 and table.argmax.design_id == w.design_id


def test_parallel_workers_reproduce_serial(small_stage):
    cfg, model, prior, ds, designs, table, _ = small_stage
    par = design_stage(AnalyticAquaplanet(), prior, ds, cheap_cfg(workers=2), seed=0, designs=designs)
    for a, b in zip(table.rows, par.rows):
        assert a.design_id == b.design_id
        np.testing.assert_array_equal(a.samples.samples, b.samples.samples)


def test_failed_design_is_recorded(small_stage):
    cfg, model, prior, ds, designs, _, data = small_stage
    broken = TrainingSet(data.training.inputs, np.full_like(data.training.outputs, np.nan),
                         data.training.iteration)
    bad = DesignData(data.theta_star, data.control, data.sigma, data.y, broken)
    res = evaluate_design(designs[1], bad, prior, cfg, 0)
    assert res.status == "failed" and not res.eligible
    assert "finite" in res.message


def test_prepare_without_calibration_uses_control_only():
    model = AnalyticAquaplanet()
    data = prepare_design_data(model, build_prior(), cheap_cfg(), 0, calibrate=False)
    assert data.training is None and model.n_evaluations == 120


# -- HDR membership ----------------------------------------------------------


def test_hdr_membership():
    samples = np.random.default_rng(0).standard_normal((5000, 2))
    assert in_hdr(samples, np.zeros(2))
    assert in_hdr(samples, np.array([1.5, -1.5]))
    assert not in_hdr(samples, np.array([4.0, 4.0]))


# -- uncertainty quantification ----------------------------------------------


THETA_DAGGER = transform_forward(PhysicalParams(0.7, 7200.0))


def test_uq_stage_outputs():
    cfg = cheap_cfg()
    w = enumerate_designs(DesignSpace("stationary", stencil=3))[15]
    res = uq_stage(AnalyticAquaplanet(), w, THETA_DAGGER, build_prior(), cfg, seed=0)
    assert res.observation.shape == (9,)
    assert np.all(res.obs_noise_sd > 0)
    assert res.samples.samples.shape[1] == 2
    assert res.log_utility == pytest.approx(-np.linalg.slogdet(res.cov)[1])
    assert np.linalg.norm(res.mean - THETA_DAGGER) < 1.0


def test_uq_noise_capped_by_mean_fraction():
    cfg = cheap_cfg()
    model = AnalyticAquaplanet()
    w = enumerate_designs(DesignSpace("stationary", stencil=3))[3]
    res = uq_stage(model, w, THETA_DAGGER, build_prior(), cfg, seed=2)
    control, _, _ = control_data(model, THETA_DAGGER, cfg, derive_seed(2, UQ_CONTROL_STREAM))
    assert np.all(res.obs_noise_sd <= cfg.noise.C_max * restrict(w, control.mean(axis=0)))


def test_noiseless_full_vector_concentrates():
    model = AnalyticAquaplanet(n_lat=4, config=AnalyticConfig(noise_fraction=0.01))
    prior = build_prior()
    cfg = cheap_cfg(model={"n_lat": 4}, uq={"obs_noise": False}, mcmc={"n_samples": 20000},
                    eki={"ensemble_size": 50, "n_iter": 5})
    w = full_restriction(model.full_dim)
    res = uq_stage(model, w, THETA_DAGGER, prior, cfg, seed=0)
    bound = np.linalg.det(prior.cov) / 1e3
    assert np.linalg.det(res.cov) < bound
    # the exact posterior for the same data satisfies the bound as well
    grid = grid_posterior(model.eval_mean, res.observation, model.noise_cov + 1e-12 * np.eye(12), prior)
    assert np.linalg.det(grid.cov) < bound
