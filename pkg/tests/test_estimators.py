import logging
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synthcace.data import Dataset, MonotonicityWarning, validate
from synthcace.errors import (
    AllStrataDegenerate,
    EmptySubgroup,
    RankDeficient,
    ReferenceFailed,
    RegistryError,
    WeakFirstStage,
    ZeroCompliance,
)
from synthcace.estimators import (
    EstimatorSpec,
    analytic_variances_toy,
    check_registry,
    default_registry,
    est_aps,
    est_at,
    est_iv,
    est_pp,
    est_ps,
    est_stratified,
    est_tsls,
    estimate_all,
    estimate_batch,
    fit_score_model,
    ordered,
    strata_labels,
    _scores,
)
from synthcace.data import StrataCounts
from synthcace.regression import LogisticFit

from conftest import make_data

FLAT = LogisticFit(np.zeros(1), True, 0)  # intercept-only score at 0.5


def test_iv_hand(iv_example):
    assert est_iv(iv_example, validate(iv_example)) == pytest.approx(4.0)


def test_iv_constant_outcome(iv_example):
    d = Dataset(np.full(8, 7.0), iv_example.z, iv_example.s)
    assert est_iv(d, validate(d)) == 0.0


def test_iv_zero_compliance():
    d = Dataset([1.0, 2, 3, 4], [1, 1, 0, 0], [0, 0, 0, 0])
    with pytest.raises(ZeroCompliance):
        est_iv(d, validate(d))


@pytest.mark.parametrize("seed", range(5))
def test_tsls_without_covariates_is_wald(seed):
    d = make_data(n=60, p=0, seed=seed)
    assert est_tsls(d) == pytest.approx(est_iv(d, validate(d)), abs=1e-8)


def test_tsls_perfect_compliance():
    rng = np.random.default_rng(4)
    n = 1000
    x = rng.standard_normal(n)
    z = rng.integers(0, 2, n).astype(float)
    d = Dataset(2 * z + x + rng.standard_normal(n), z, z, x[:, None])
    assert est_tsls(d) == pytest.approx(2.0, abs=0.15)
    assert est_pp(d) == pytest.approx(est_at(d), abs=1e-12)


def test_tsls_zero_first_stage():
    d = Dataset([1.0, 2, 3, 4], [1, 1, 0, 0], [1, 0, 1, 0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        with pytest.raises(WeakFirstStage):
            est_tsls(d)


def test_tsls_logistic_first_stage_runs(data):
    assert np.isfinite(est_tsls(data, "logistic"))


def test_pp_hand(iv_example):
    assert est_pp(iv_example) == pytest.approx(3.0)


def test_pp_empty_subgroup():
    d = Dataset([1.0, 2, 3, 4], [1, 1, 0, 0], [0, 0, 0, 0])
    with pytest.raises(EmptySubgroup):
        est_pp(d)


def test_at_hand(iv_example):
    assert est_at(iv_example) == pytest.approx(8 / 3)


def test_at_constant_treatment():
    d = Dataset([1.0, 2, 3, 4], [1, 1, 0, 0], [0, 0, 0, 0])
    with pytest.raises(RankDeficient):
        est_at(d)


def test_at_null_effect():
    rng = np.random.default_rng(9)
    n = 4000
    z = rng.integers(0, 2, n).astype(float)
    s = z * (rng.random(n) < 0.5)
    assert abs(est_at(Dataset(rng.standard_normal(n), z, s))) < 0.1


def test_ps_constant_score(iv_example):
    c = validate(iv_example)
    assert est_ps(iv_example, c, FLAT) == pytest.approx(3.0)


def test_ps_constant_score_equals_difference(data):
    c = validate(data)
    flat = LogisticFit(np.array([np.log(c.pi_c_hat / (1 - c.pi_c_hat)), 0.0, 0.0]), True, 0)
    y, z, s = data.y, data.z, data.s
    expected = y[(z == 1) & (s == 1)].mean() - y[z == 0].mean()
    assert est_ps(data, c, flat) == pytest.approx(expected, abs=1e-9)


def test_zero_outcome_gives_zero(data):
    d = Dataset(np.zeros(data.n), data.z, data.s, data.x)
    c = validate(d)
    fit = fit_score_model(d)
    assert est_ps(d, c, fit) == 0.0
    assert est_aps(d, c, fit) == pytest.approx(0.0, abs=1e-12)


def test_aps_equal_slopes_is_ps_on_residuals():
    # outcome linear in x with the same slope in both groups and no noise:
    # the regression adjustment removes x exactly, leaving PS on the intercepts
    rng = np.random.default_rng(2)
    n = 300
    x = rng.standard_normal(n)
    z = rng.integers(0, 2, n).astype(float)
    s = z * (rng.random(n) < 0.6)
    d = Dataset(3 * x + 2 * s, z, s, x[:, None])
    c = validate(d)
    fit = fit_score_model(d)
    resid = Dataset(2 * s, z, s, x[:, None])
    assert est_aps(d, c, fit) == pytest.approx(est_ps(resid, validate(resid), fit), abs=1e-10)


def test_aps_needs_covariates(iv_example):
    with pytest.raises(RankDeficient):
        est_aps(iv_example, validate(iv_example), FLAT)


def test_stratified_constant_score_is_base(data):
    flat = LogisticFit(np.zeros(3), True, 0)
    c = validate(data)
    assert est_stratified(data, "IV", flat) == pytest.approx(est_iv(data, c), abs=1e-12)
    assert est_stratified(data, "AT", flat) == pytest.approx(est_at(data), abs=1e-12)


def test_stratified_one_stratum_is_base(data):
    fit = fit_score_model(data)
    assert est_stratified(data, "PP", fit, strata=1) == est_pp(data)
    assert est_stratified(data, "IV", fit, strata=1) == est_iv(data, validate(data))


def test_stratified_two_strata_hand():
    z = [1, 1, 0, 0] * 2
    s = [1, 0, 0, 0] * 2
    y = [3, 1, 1, 1, 5, 1, 1, 1]
    x = [[-1.0]] * 4 + [[1.0]] * 4
    d = Dataset(y, z, s, x)
    fit = LogisticFit(np.array([0.0, 1.0]), True, 0)
    assert est_stratified(d, "IV", fit, strata=2) == pytest.approx(3.0)


def test_stratified_all_degenerate():
    d = Dataset([1.0, 2, 3, 4, 5, 6], [1, 0, 1, 0, 1, 0], [1, 0, 1, 0, 0, 0], [[0.0], [1], [2], [3], [4], [5]])
    fit = LogisticFit(np.array([0.0, 1.0]), True, 0)
    with pytest.raises(AllStrataDegenerate):
        est_stratified(d, "IV", fit, strata=6)


def test_strata_ties_share_a_label():
    e = np.array([0.1, 0.2, 0.2, 0.2, 0.9])
    lab = strata_labels(e[None], np.ones((1, 5)), 5)[0]
    assert lab[1] == lab[2] == lab[3]
    assert lab[0] < lab[1] < lab[4]


def test_registry_rules():
    reg = default_registry()
    check_registry(reg)
    assert ordered(reg)[0].id == "TSLS"
    with pytest.raises(RegistryError):
        check_registry([EstimatorSpec("IV"), EstimatorSpec("AT")])
    with pytest.raises(RegistryError):
        check_registry([EstimatorSpec("TSLS", "reference"), EstimatorSpec("IV", "reference"), EstimatorSpec("AT")])
    with pytest.raises(RegistryError):
        EstimatorSpec("FOO")
    with pytest.raises(RegistryError):
        EstimatorSpec("IV_STRAT", options={"strata": 1})


def test_full_registry(data):
    est = estimate_all(data, default_registry())
    assert est.k == 8 and est.reference == "TSLS"
    assert est.ids == ("IV", "PP", "AT", "PS", "APS", "IV_STRAT", "AT_STRAT", "PP_STRAT")
    assert np.all(np.isfinite(est.theta1))


def test_failing_candidates_are_dropped(caplog):
    # every Z=1 unit complies: the score model is undefined but TSLS is fine
    rng = np.random.default_rng(0)
    n = 50
    z = np.arange(n) % 2
    d = Dataset(rng.standard_normal(n), z, z, rng.standard_normal((n, 1)))
    with caplog.at_level(logging.INFO, logger="synthcace"):
        est = estimate_all(d, default_registry())
    assert est.ids == ("IV", "PP", "AT")
    assert set(est.dropped) == {"PS", "APS", "IV_STRAT", "AT_STRAT", "PP_STRAT"}
    assert "dropping candidate PS" in caplog.text


def test_reference_failure():
    d = Dataset([1.0, 2, 3, 4], [1, 1, 0, 0], [0, 0, 0, 0])
    with pytest.raises(ReferenceFailed):
        estimate_all(d, default_registry())


def test_batch_matches_scalar(data):
    reg = default_registry()
    est = estimate_all(data, reg)
    row = estimate_batch(data, reg, np.ones((1, data.n)))[0]
    np.testing.assert_allclose(row, est.vector, rtol=1e-10, atol=1e-10)


@given(st.integers(0, 2**31 - 1))
def test_batch_weights_equal_resampled_rows(seed):
    data = make_data(n=80, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.integers(0, data.n, data.n))
    w = np.bincount(idx, minlength=data.n).astype(float)
    reg = default_registry()
    row = estimate_batch(data, reg, w[None])[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        try:
            direct = estimate_all(data.take(idx), reg)
        except Exception:
            return
    for j, spec in enumerate(ordered(reg)):
        if spec.id in direct.ids or j == 0:
            value = direct.theta0 if j == 0 else direct.theta1[direct.ids.index(spec.id)]
            assert row[j] == pytest.approx(value, rel=1e-8, abs=1e-8)


@given(st.floats(-50, 50), st.integers(0, 500))
def test_shift_in_outcome(shift, seed):
    # contrasts ignore a constant; the PS-type control term carries mean(e)/pi_c of it
    data = make_data(n=120, seed=seed)
    reg = default_registry()
    base = estimate_all(data, reg)
    moved = estimate_all(Dataset(data.y + shift, data.z, data.s, data.x), reg)
    c = validate(data)
    e = fit_score_model(data)
    e0 = _scores(data, e)[data.z == 0].mean()
    expected = dict(zip(("TSLS",) + base.ids, base.vector))
    for key in ("PS", "APS"):
        expected[key] += shift * (1 - e0 / c.pi_c_hat)
    got = dict(zip(("TSLS",) + moved.ids, moved.vector))
    for key, value in expected.items():
        assert got[key] == pytest.approx(value, abs=1e-7 * (1 + abs(shift)))


@given(st.floats(0.1, 10), st.integers(0, 500))
def test_scale_equivariance(scale, seed):
    data = make_data(n=120, seed=seed)
    reg = default_registry()
    base = estimate_all(data, reg)
    moved = estimate_all(Dataset(scale * data.y, data.z, data.s, data.x), reg)
    np.testing.assert_allclose(moved.vector, scale * base.vector, rtol=1e-7, atol=1e-9)


def _counts(n0, n1, n11):
    return StrataCounts(n0 + n1, {0: n0, 1: n1}, {(0, 0): n0, (0, 1): 0, (1, 0): n1 - n11, (1, 1): n11}, n11 / n1, 0)


def test_analytic_variances_hand():
    var_ps, var_iv = analytic_variances_toy(1.0, _counts(100, 100, 50), np.full(100, 0.5))
    assert var_ps == pytest.approx(0.03)
    assert var_iv == pytest.approx(0.08)


def test_analytic_variances_boundary():
    var_ps, var_iv = analytic_variances_toy(1.0, _counts(40, 30, 30), np.ones(40))
    assert var_ps == pytest.approx(var_iv)


@given(
    st.floats(0.01, 10),
    st.integers(1, 200),
    st.integers(2, 200),
    st.data(),
)
def test_iv_less_efficient_than_ps(sigma2, n0, n1, draw):
    n11 = draw.draw(st.integers(1, n1 - 1))
    e = draw.draw(st.lists(st.floats(1e-3, 1 - 1e-3), min_size=n0, max_size=n0))
    var_ps, var_iv = analytic_variances_toy(sigma2, _counts(n0, n1, n11), e)
    assert var_iv > var_ps
