import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from tndtmle.data import Dataset
from tndtmle.design import BasisConfig, build_effect_design, build_nuisance_basis
from tndtmle.exceptions import SingularMatrixError
from tndtmle.tmle import (TargetedEstimate, clever_covariate, compute_eif, eif_for, estimate_variance,
                          fit_initial, or_at_x, tmle, tmle_update, wald)

from conftest import LOG07, synthetic_dataset


def _fit(ds, terms=("intercept",), cv=5, **kw):
    design = build_effect_design(list(terms), ds.schema)
    basis = build_nuisance_basis(ds, BasisConfig(n_knots=3, degree=2))
    return tmle(ds, design, basis, cv, **kw)


def _eif_oracle(F, delta, a, y, mu1, mu0, pi):
    """Row-by-row evaluation of the influence function."""
    n, b = F.shape
    lam_inv = np.zeros((b, b))
    for i in range(n):
        s1 = mu1[i] * (1 - mu1[i])
        s0 = mu0[i] * (1 - mu0[i])
        c = delta[i] * (1 - pi[i]) * pi[i] * s1 * s0 / ((1 - pi[i]) * s0 + pi[i] * s1)
        lam_inv += np.outer(F[i], F[i]) * c
    lam = np.linalg.inv(lam_inv / n)
    out = np.zeros((n, b))
    for i in range(n):
        s1 = mu1[i] * (1 - mu1[i])
        s0 = mu0[i] * (1 - mu0[i])
        w = pi[i] * s1 / (pi[i] * s1 + (1 - pi[i]) * s0)
        H = y[i] - w
        mu = mu1[i] if y[i] == 1 else mu0[i]
        out[i] = (lam @ F[i]) * delta[i] * H * (delta[i] * a[i] - mu)
    return out, lam


# -- clever covariate -------------------------------------------------------------


def test_clever_covariate_symmetric():
    assert clever_covariate(1, 0.4, 0.4, 0.5) == pytest.approx(0.5)
    assert clever_covariate(0, 0.4, 0.4, 0.5) == pytest.approx(-0.5)


def test_clever_covariate_arithmetic():
    # independent evaluation: weight = 0.2*0.21 / (0.2*0.21 + 0.8*0.24)
    w = (0.2 * 0.3 * 0.7) / (0.2 * 0.3 * 0.7 + 0.8 * 0.6 * 0.4)
    assert w == pytest.approx(0.042 / 0.234, abs=1e-15)
    assert clever_covariate(1, 0.3, 0.6, 0.2) == pytest.approx(1 - w, abs=1e-15)
    assert clever_covariate(1, 0.3, 0.6, 0.2) == pytest.approx(0.82051, abs=1e-5)


@given(mu1=st.floats(1e-6, 1 - 1e-6), mu0=st.floats(1e-6, 1 - 1e-6), pi=st.floats(1e-6, 1 - 1e-6))
def test_clever_covariate_difference_is_one(mu1, mu0, pi):
    d = clever_covariate(1.0, mu1, mu0, pi) - clever_covariate(0.0, mu1, mu0, pi)
    assert d == pytest.approx(1.0, abs=1e-12)


# -- influence function -----------------------------------------------------------


def _random_inputs(n, b, seed):
    rng = np.random.default_rng(seed)
    F = np.column_stack([np.ones(n), rng.normal(size=(n, b - 1))])
    delta = (rng.random(n) < 0.7).astype(float)
    y = (rng.random(n) < 0.4).astype(float)
    a = delta * (rng.random(n) < 0.5)
    mu1, mu0, pi = rng.uniform(0.05, 0.95, size=(3, n))
    return F, delta, a, y, mu1, mu0, pi


def test_eif_matches_row_by_row_oracle():
    args = _random_inputs(20, 3, 0)
    res = compute_eif(*args)
    oracle, lam = _eif_oracle(*args)
    np.testing.assert_allclose(res.eif, oracle, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.lam, lam, atol=1e-10)


def test_eif_zero_for_unobserved_rows():
    F, delta, a, y, mu1, mu0, pi = _random_inputs(50, 2, 1)
    res = compute_eif(F, delta, a, y, mu1, mu0, pi)
    assert np.all(res.eif[delta == 0] == 0.0)


def test_intercept_only_lambda_is_reciprocal():
    F, delta, a, y, mu1, mu0, pi = _random_inputs(40, 1, 2)
    res = compute_eif(F, delta, a, y, mu1, mu0, pi)
    assert res.lam.shape == (1, 1)
    assert res.lam[0, 0] == pytest.approx(1.0 / res.lam_inv[0, 0], rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), b=st.integers(1, 4))
def test_lambda_inverse_identity_and_consistency(seed, b):
    F, delta, a, y, mu1, mu0, pi = _random_inputs(60, b, seed)
    res = compute_eif(F, delta, a, y, mu1, mu0, pi)
    np.testing.assert_allclose(res.lam @ res.lam_inv, np.eye(b), atol=1e-8)
    np.testing.assert_array_equal(res.lam_inv, res.lam_inv.T)
    assert np.all(np.linalg.eigvalsh(res.lam_inv) >= -1e-14)
    # mean EIF is Lambda applied to the mean score
    np.testing.assert_allclose(res.mean, res.lam @ res.score_mean, atol=1e-12)


def test_singular_scaling_matrix():
    F, delta, a, y, mu1, mu0, pi = _random_inputs(30, 2, 3)
    F[:, 1] = 2 * F[:, 0]
    with pytest.raises(SingularMatrixError, match="rank"):
        compute_eif(F, delta, a, y, mu1, mu0, pi)


def test_ill_conditioned_scaling_matrix_warns():
    F, delta, a, y, mu1, mu0, pi = _random_inputs(30, 2, 4)
    F[:, 1] = F[:, 0] + 1e-6 * F[:, 1]
    with pytest.warns(UserWarning, match="ill-conditioned"):
        compute_eif(F, delta, a, y, mu1, mu0, pi)


# -- initial fit and targeting ----------------------------------------------------


def test_saturated_initial_and_targeting(saturated):
    design = build_effect_design(["intercept"], saturated.schema)
    basis = build_nuisance_basis(saturated, BasisConfig(n_knots=0, degree=1))
    nf = fit_initial(saturated, design, basis, cv=5)
    assert nf.beta_init[0] == pytest.approx(math.log(6), abs=1e-8)
    te = tmle_update(nf, saturated)
    assert te.iterations == 1
    assert abs(te.epsilon_trace[0][0]) <= 1e-8
    assert te.beta[0] == pytest.approx(math.log(6), abs=1e-8)
    # intercept-only: the SE is the usual 2x2 log odds ratio SE
    se = math.sqrt(1 / 30 + 1 / 10 + 1 / 20 + 1 / 40)
    assert te.se[0] == pytest.approx(se, rel=1e-6)


def _check_invariants(te: TargetedEstimate, ds: Dataset):
    assert te.converged
    assert np.all(np.abs(te.mean_eif) <= te.tol)
    assert max(te.constraint_error) <= 1e-10
    F = te.design.evaluate(ds.x)
    np.testing.assert_allclose(te.logit_mu1 - te.logit_mu0, F @ te.beta, atol=1e-10)
    np.testing.assert_allclose(te.cov, te.cov.T, atol=0)
    assert np.all(np.linalg.eigvalsh(te.cov) >= -1e-15)
    assert np.all(te.eif[~ds.observed] == 0.0)
    assert np.all((te.pi_tilde >= 1e-6) & (te.pi_tilde <= 1 - 1e-6))
    res = eif_for(te, ds)
    np.testing.assert_allclose(res.eif, te.eif, atol=1e-14)
    np.testing.assert_allclose(res.lam @ res.lam_inv, np.eye(te.beta.size), atol=1e-8)


def test_targeting_invariants_synthetic(synth):
    te = _fit(synth)
    _check_invariants(te, synth)
    assert te.tol == pytest.approx(max(1e-8, te.se.min() / (math.sqrt(synth.n) * math.log(synth.n))))


def test_effect_modification_design(synth):
    te = _fit(synth, terms=("intercept", "x2"))
    _check_invariants(te, synth)
    assert te.beta.shape == (2,)


def test_fixed_tolerance_and_iteration_cap(synth):
    te = _fit(synth, tol=1e-10)
    _check_invariants(te, synth)
    assert te.tol == 1e-10
    capped = _fit(synth, tol=0.0, max_iter=2)
    assert not capped.converged and capped.iterations == 2


def test_cross_fitting_preserves_invariants(synth):
    plain = _fit(synth, terms=("intercept", "x2"))
    cf = _fit(synth, terms=("intercept", "x2"), cross_fit=True)
    _check_invariants(cf, synth)
    assert not np.allclose(plain.beta, cf.beta)
    assert cf.meta["cross_fit"] is True


def test_nuisance_fit_evaluates_raw_inputs(synth):
    design = build_effect_design(["intercept"], synth.schema)
    basis = build_nuisance_basis(synth, BasisConfig(n_knots=3))
    nf = fit_initial(synth, design, basis, cv=5)
    np.testing.assert_allclose(nf.h_at(synth.x), nf.h)
    np.testing.assert_allclose(nf.pi_tilde_at(synth.x), nf.pi_tilde)
    mu = nf.mu_at(synth.y, synth.x)
    np.testing.assert_allclose(mu, np.clip(expit(synth.y * nf.beta_init[0] + nf.h), 1e-6, 1 - 1e-6))


def test_deterministic(synth):
    a, b = _fit(synth), _fit(synth)
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.eif, b.eif)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000), missing=st.floats(0.0, 0.5), beta=st.floats(-1.5, 1.5))
def test_targeting_property(seed, missing, beta):
    ds = synthetic_dataset(n=250, seed=seed, beta=beta, missing=missing)
    _check_invariants(_fit(ds, cv=3), ds)


# -- variance and inference -------------------------------------------------------


def test_zero_eif_column_is_degenerate(synth):
    te = _fit(synth, terms=("intercept", "x2"))
    D = te.eif.copy()
    D[:, 1] = 0.0
    cov = estimate_variance(D)
    assert cov[1, 1] == 0.0
    from dataclasses import replace
    assert replace(te, cov=cov).degenerate.tolist() == [False, True]


def test_duplication_halves_covariance(synth):
    te = _fit(synth)
    np.testing.assert_allclose(estimate_variance(np.vstack([te.eif, te.eif])), te.cov / 2, rtol=1e-12)


def test_or_at_x_null():
    te = _stub_estimate(np.zeros(2), np.diag([0.04, 0.09]))
    est = or_at_x(te, [1.0, 1.0])
    assert est.odds_ratio == 1.0 and est.ve_percent == 0.0
    assert est.ci_low == pytest.approx(-est.ci_high)


def test_or_at_x_quadratic_form():
    te = _stub_estimate(np.array([0.1, -0.2]), np.array([[0.04, 0.0], [0.0, 0.09]]))
    est = or_at_x(te, [1.0, 1.0])
    assert est.se == pytest.approx(math.sqrt(0.13), abs=1e-15)
    assert est.se == pytest.approx(0.36056, abs=1e-5)
    assert est.log_or == pytest.approx(-0.1)
    assert est.ci_low < est.log_or < est.ci_high
    assert est.odds_ratio == pytest.approx(math.exp(-0.1))
    assert est.ve_percent == pytest.approx((1 - math.exp(-0.1)) * 100)
    assert est.ci_high - est.log_or == pytest.approx(1.959963984540054 * math.sqrt(0.13))
    with pytest.raises(ValueError):
        or_at_x(te, [1.0])


def test_or_at_x_intercept_only(saturated):
    te = _fit(saturated)
    est = or_at_x(te, [1.0], level=0.9)
    assert est.se == te.se[0]
    assert est.level == 0.9
    d = est.to_dict()
    assert d["or"] == pytest.approx(6.0, rel=1e-8)
    assert d["ve_ci"][0] < d["ve_percent"] < d["ve_ci"][1]


def test_wald_levels():
    narrow, wide = wald(0.0, 1.0, 0.8), wald(0.0, 1.0, 0.99)
    assert narrow.ci_high < wide.ci_high


def test_report_is_json_serializable(synth):
    import json
    te = _fit(synth)
    d = json.loads(json.dumps(te.to_dict()))
    assert d["converged"] and d["iterations"] == te.iterations
    assert d["cv_selection"] == "min"


def _stub_estimate(beta, cov):
    design = build_effect_design(["intercept", "x"], {"x": "binary"})
    z = np.zeros(1)
    return TargetedEstimate(beta=beta, cov=cov, eif=np.zeros((1, beta.size)), mean_eif=np.zeros(beta.size),
                            epsilon_trace=(), iterations=0, converged=True, tol=1e-8, beta_init=beta,
                            design=design, logit_mu0=z, logit_mu1=z, pi_tilde=z + 0.5,
                            lam=np.eye(beta.size), constraint_error=())


# -- Monte Carlo examples ---------------------------------------------------------


@pytest.mark.montecarlo
def test_initial_estimate_null_effect(mc):
    res = mc(setting="main_effects", beta_f=0.0, design="all", n=3000)
    b = res.estimates("TMLE", "beta_init")
    assert len(b) >= 190
    assert abs(b.mean()) <= 3 * b.std(ddof=1) / math.sqrt(len(b))


@pytest.mark.montecarlo
def test_initial_estimate_near_truth(mc):
    res = mc(setting="main_effects", beta_f=LOG07, design="all", n=3000)
    assert abs(res.estimates("TMLE", "beta_init").mean() - LOG07) <= 0.15


@pytest.mark.montecarlo
def test_tmle_less_biased_than_naive_splines_n2000(mc):
    m = mc(setting="splines", beta_f=LOG07, design="all", n=2000).metrics
    assert abs(m.get("TMLE").bias) < abs(m.get("nMLE").bias)


@pytest.mark.montecarlo
def test_se_calibration_main_effects(mc):
    row = mc(setting="main_effects", beta_f=LOG07, design="all", n=3000).metrics.get("TMLE")
    assert abs(row.mean_se - row.mcsd) <= 0.10 * row.mcsd
