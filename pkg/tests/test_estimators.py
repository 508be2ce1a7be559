import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridgst.errors import RankDeficientDesign, ValidationError
from hybridgst.estimators import (
    FitResult,
    SubjectRecord,
    TrialData,
    estimate_rho,
    fit_ancova,
    fit_anova,
    influence_values,
    read_trial_csv,
    standardized_stat,
    write_trial_csv,
)
from hybridgst.simulation import GeneratorConfig, generate_trial


def make_data(rng, n, p, delta=0.3, gamma=0.8, noise=0.6):
    a = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    a[:2] = (1.0, -1.0)
    x = rng.standard_normal((n, p))
    y = 1.0 + delta * a + x @ np.full(p, gamma) + noise * rng.standard_normal(n)
    return TrialData(y, a, x, np.ones(n, dtype=int))


def textbook_anova(y, a):
    # explicit 2x2 inverse of the normal equations
    n, sa, saa = len(y), a.sum(), (a * a).sum()
    det = n * saa - sa * sa
    sy, say = y.sum(), (a * y).sum()
    theta = (saa * sy - sa * say) / det
    delta = (n * say - sa * sy) / det
    return theta, delta


def pivoted_solve(A, b):
    """Gaussian elimination with partial pivoting, written out by hand."""
    A = A.astype(float).copy()
    b = b.astype(float).copy()
    m = len(b)
    for col in range(m):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        A[[col, piv]], b[[col, piv]] = A[[piv, col]], b[[piv, col]]
        for r in range(col + 1, m):
            f = A[r, col] / A[col, col]
            A[r, col:] -= f * A[col, col:]
            b[r] -= f * b[col]
    out = np.zeros(m)
    for r in range(m - 1, -1, -1):
        out[r] = (b[r] - A[r, r + 1:] @ out[r + 1:]) / A[r, r]
    return out


def test_two_group_example():
    recs = [SubjectRecord(1, 1, (0.0,)), SubjectRecord(3, 1, (1.0,)),
            SubjectRecord(0, -1, (0.5,)), SubjectRecord(2, -1, (2.0,))]
    fit = fit_anova(recs)
    assert fit.delta_hat == 0.5 and fit.theta_hat == 1.5


def test_constant_outcome():
    data = TrialData([2.0] * 6, [1, -1, 1, -1, 1, -1], np.zeros((6, 1)), [1] * 6)
    fit = fit_anova(data)
    assert fit.delta_hat == 0.0 and fit.sigma2_hat == 0.0
    with pytest.raises(ValidationError, match="residual variance"):
        standardized_stat(fit)


def test_anova_matches_textbook_solver(rng):
    data = make_data(rng, 200, 1)
    fit = fit_anova(data)
    theta, delta = textbook_anova(data.y, data.a)
    assert fit.delta_hat == pytest.approx(delta, abs=1e-10)
    assert fit.theta_hat == pytest.approx(theta, abs=1e-10)
    resid = data.y - theta - delta * data.a
    assert fit.sigma2_hat == pytest.approx(resid @ resid / 198, rel=1e-10)


def test_ancova_matches_pivoted_elimination(rng):
    data = make_data(rng, 500, 2)
    fit = fit_ancova(data)
    xc = data.x - data.x.mean(0)
    X = np.column_stack([np.ones(500), data.a, xc])
    coef = pivoted_solve(X.T @ X, X.T @ data.y)
    assert np.allclose([fit.theta_hat, fit.delta_hat, *fit.gamma_hat], coef, atol=1e-9)
    resid = data.y - X @ coef
    assert fit.sigma2_hat == pytest.approx(resid @ resid / (500 - 4), rel=1e-9)


def test_ancova_orthogonal_covariate_leaves_effect_unchanged(rng):
    # within each arm covariates come in +/- pairs, so x is orthogonal to a
    half = rng.standard_normal(50)
    x = np.concatenate([half, -half, half, -half])[:, None]
    a = np.repeat([1.0, -1.0], 100)
    y = 0.2 * a + rng.standard_normal(200)
    data = TrialData(y, a, x, np.ones(200, dtype=int))
    assert fit_ancova(data).delta_hat == pytest.approx(fit_anova(data).delta_hat, abs=1e-12)


def test_nested_rss(rng):
    data = generate_trial(GeneratorConfig(0.1, 0.5, 1, 200, 1, seed=3), rng)
    assert fit_ancova(data).rss <= fit_anova(data).rss


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 60), st.integers(1, 3))
def test_half_difference_and_nested_rss_property(seed, n, p):
    rng = np.random.default_rng(seed)
    if n < p + 4:
        n = p + 4
    data = make_data(rng, n, p, noise=float(rng.uniform(0.1, 2)))
    fit = fit_anova(data)
    pos = data.a > 0
    want = (np.mean(data.y[pos]) - np.mean(data.y[~pos])) / 2
    assert fit.delta_hat == pytest.approx(want, abs=1e-12 * (1 + abs(want)))
    assert fit_ancova(data).rss <= fit.rss * (1 + 1e-12) + 1e-12


def test_single_arm_and_small_n_errors():
    with pytest.raises(ValidationError, match="both arms"):
        fit_anova(TrialData([1.0, 2.0, 3.0], [1, 1, 1], np.zeros((3, 1)), [1, 1, 1]))
    with pytest.raises(ValidationError, match="at least"):
        fit_anova(TrialData([1.0, 2.0], [1, -1], np.zeros((2, 1)), [1, 1]))
    with pytest.raises(ValidationError, match="at least"):
        fit_ancova(TrialData([1.0, 2.0, 3.0, 4.0], [1, -1, 1, -1], np.ones((4, 2)) * [[1], [2], [3], [4]], [1] * 4))


def test_rank_deficient_names_columns(rng):
    x1 = rng.standard_normal(30)
    x = np.column_stack([x1, 2 * x1])
    a = np.tile([1.0, -1.0], 15)
    with pytest.raises(RankDeficientDesign) as info:
        fit_ancova(TrialData(rng.standard_normal(30), a, x, [1] * 30))
    assert "x2" in info.value.details["collinear_columns"]


def test_arm_coding_rejected():
    with pytest.raises(ValidationError):
        TrialData([1.0, 2.0], [1, 0], np.zeros((2, 1)), [1, 1])


def test_rho_estimate_no_prognostic_value():
    cfg = GeneratorConfig(0.0, 1.0, 1, 10_000, 1, seed=5)
    est = estimate_rho(generate_trial(cfg, np.random.default_rng(5)))
    assert abs(est.rho_hat - 1) < 0.02


def test_rho_estimate_generator_value():
    cfg = GeneratorConfig(0.0, 0.5, 1, 10_000, 1, seed=6)
    est = estimate_rho(generate_trial(cfg, np.random.default_rng(6)))
    assert est.rho_hat == pytest.approx(0.5, abs=0.02)
    assert est.rho_hat == pytest.approx(est.sigma_hat / est.sigma_tilde_hat, rel=1e-15)


def test_rho_clamped_at_tiny_n(rng):
    # a covariate orthogonal to (1, a, ANOVA residuals) leaves the RSS unchanged,
    # so the extra degree of freedom alone pushes the raw ratio above one
    y = np.array([0.0, 1.0, 0.5, 1.5, 0.2, 0.9])
    a = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
    resid = y - np.where(a > 0, y[a > 0].mean(), y[a < 0].mean())
    basis, _ = np.linalg.qr(np.column_stack([np.ones(6), a, resid]))
    x = rng.standard_normal(6)
    x -= basis @ (basis.T @ x)
    est = estimate_rho(TrialData(y, a, x[:, None], [1] * 6))
    assert est.sigma_hat > est.sigma_tilde_hat
    assert est.rho_hat == 1.0 and est.clamped


def test_standardized_stat_values():
    fit = fit_anova(TrialData([1.0, 3.0, 0.0, 2.0], [1, 1, -1, -1], np.zeros((4, 1)), [1] * 4))
    assert standardized_stat(fit, fit.delta_hat) == 0.0
    f = FitResult(0.1, 0.0, np.zeros(0), 1.0, 1000, False, 0.0)
    assert standardized_stat(f) == pytest.approx(3.1622777, abs=1e-7)


@pytest.mark.slow
def test_adjusted_statistic_doubles_at_rho_half():
    # a large effect keeps the sampling noise of the ratio near 2%
    cfg = GeneratorConfig(0.3, 0.5, 1, 100_000, 1, seed=9)
    data = generate_trial(cfg, np.random.default_rng(9))
    ratio = standardized_stat(fit_ancova(data)) / standardized_stat(fit_anova(data))
    assert ratio == pytest.approx(2.0, rel=0.05)


def test_influence_values_centered_and_scaled(rng):
    data = make_data(rng, 400, 2)
    for fit in (fit_anova(data), fit_ancova(data)):
        phi = influence_values(data, fit)
        assert abs(phi.mean()) < 1e-10  # normal equation for the arm column
        assert phi @ phi / data.n == pytest.approx(fit.rss / data.n, rel=1e-12)


def test_csv_round_trip_and_zero_one_coding(tmp_path, rng):
    data = make_data(rng, 20, 2)
    path = tmp_path / "d.csv"
    write_trial_csv(data, path)
    back = read_trial_csv(path)
    assert np.array_equal(back.y, data.y) and np.array_equal(back.x, data.x)
    lines = ["y,a,x1,stage", "1.0,1,0.2,1", "2.0,0,0.1,1", "0.5,0,0.3,2"]
    (tmp_path / "z.csv").write_text("\n".join(lines) + "\n")
    coded = read_trial_csv(tmp_path / "z.csv")
    assert coded.a.tolist() == [1, -1, -1]
    assert any("mapped" in n for n in coded.notes)


def test_csv_bad_header(tmp_path):
    (tmp_path / "b.csv").write_text("y,arm,x1,stage\n1,1,0,1\n")
    with pytest.raises(ValidationError, match="header"):
        read_trial_csv(tmp_path / "b.csv")


def test_through_stage_is_cumulative():
    data = TrialData(np.arange(6.0), [1, -1] * 3, np.zeros((6, 1)), [1, 1, 2, 2, 3, 3])
    assert data.through_stage(2).n == 4
    assert data.stage_sizes() == [2, 2, 2]
