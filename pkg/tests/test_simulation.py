import math

import numpy as np
import pytest

from hybridgst import mvn
from hybridgst.boundaries import SpendingFunction
from hybridgst.covariance import AnalysisSchedule, full_joint, mean_shift, select_schedule
from hybridgst.errors import ValidationError
from hybridgst.estimators import fit_ancova
from hybridgst.inference import InferenceResult, Ordering
from hybridgst.simulation import (
    GeneratorConfig,
    ScenarioKind,
    ScenarioSpec,
    TrialOutcome,
    aggregate,
    cell_boundaries,
    generate_trial,
    replicate_rng,
    run_cell,
    run_scenario,
)

POCOCK = SpendingFunction("pocock", 0.05)
ALL = [ScenarioSpec(k, spending=POCOCK) for k in ScenarioKind]


@pytest.mark.parametrize("rho,p,gamma", [(0.5, 1, 0.8660254), (0.25, 2, 0.6846532), (1.0, 3, 0.0)])
def test_generator_coefficients(rho, p, gamma):
    cfg = GeneratorConfig(0.0, rho, p, 300)
    assert cfg.gamma == pytest.approx(gamma, abs=1e-7)
    assert cfg.sigma2 == pytest.approx(rho**2, abs=1e-15)
    assert p * cfg.gamma**2 + cfg.sigma2 == pytest.approx(1.0, abs=1e-14)


def test_generator_validation():
    with pytest.raises(ValidationError):
        GeneratorConfig(0.0, 0.0, 1, 300)
    with pytest.raises(ValidationError):
        GeneratorConfig(0.0, 0.5, 0, 300)
    with pytest.raises(ValidationError):
        GeneratorConfig(0.0, 0.5, 5, 20)


def test_generated_moments():
    cfg = GeneratorConfig(0.2, 0.5, 1, 60_000, 3)
    data = generate_trial(cfg, np.random.default_rng(1))
    fit = fit_ancova(data)
    assert fit.delta_hat == pytest.approx(0.2, abs=0.01)
    assert fit.gamma_hat[0] == pytest.approx(cfg.gamma, abs=0.01)
    assert fit.sigma2_hat == pytest.approx(0.25, rel=0.03)
    assert data.stage_sizes() == [20_000] * 3
    assert abs(np.mean(data.a)) < 0.02


def test_replicate_streams_are_pure():
    a = replicate_rng(5, 3).standard_normal(4)
    b = replicate_rng(5, 3).standard_normal(4)
    c = replicate_rng(5, 4).standard_normal(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_run_cell_deterministic_and_order_free():
    cfg = GeneratorConfig(0.05, 0.5, 1, 150, seed=21)
    specs = [ScenarioSpec(ScenarioKind.A_I, spending=POCOCK), ScenarioSpec(ScenarioKind.B_III, spending=POCOCK)]
    fwd = run_cell(cfg, specs, range(6), inference=[ScenarioKind.B_III])
    again = run_cell(cfg, specs, 6, inference=[ScenarioKind.B_III])
    rev = run_cell(cfg, specs, [5, 4, 3, 2, 1, 0], inference=[ScenarioKind.B_III])
    for kind in (ScenarioKind.A_I, ScenarioKind.B_III):
        assert fwd.outcomes[kind] == again.outcomes[kind]
        assert fwd.outcomes[kind] == rev.outcomes[kind][::-1]


def test_common_random_numbers_across_scenarios():
    cfg = GeneratorConfig(0.1, 0.5, 1, 300, seed=2)
    res = run_cell(cfg, ALL, 40)
    for bi, biii in zip(res.outcomes[ScenarioKind.B_I], res.outcomes[ScenarioKind.B_III]):
        # same data, same interim bounds and statistics
        assert bi.stop_stage == biii.stop_stage
        assert bi.z[:-1] == biii.z[:-1]
        if bi.stop_stage < 3:
            assert bi.rejected == biii.rejected


def test_rho_one_scenarios_agree():
    cfg = GeneratorConfig(0.0, 1.0, 1, 150, seed=4)
    res = run_cell(cfg, ALL, 400)
    rates = {k: res.report(k).reject_rate for k in ScenarioKind}
    # with a useless covariate every scenario monitors nearly the same statistic
    assert max(rates.values()) - min(rates.values()) < 3 * math.sqrt(0.05 * 0.95 / 400)


def test_unadjusted_power_matches_model():
    cfg = GeneratorConfig(0.1, 0.5, 1, 450, seed=8)
    spec = ScenarioSpec(ScenarioKind.A_I, spending=POCOCK)
    res = run_cell(cfg, [spec], 2000)
    rep = res.report(ScenarioKind.A_I)
    bounds = cell_boundaries(cfg, spec).consistent
    sel = select_schedule(full_joint(cfg.plan, cfg.rho), AnalysisSchedule.consistent(3))
    m = mean_shift(cfg.plan, sel.labels, cfg.delta, cfg.rho, 1.0)
    want = mvn.union_reject_prob(sel.corr, bounds.looks(), mean=m)
    assert abs(rep.reject_rate - want) < 3 * rep.reject_se + 0.01


def test_run_scenario_records_bounds_and_results():
    cfg = GeneratorConfig(0.3, 0.5, 1, 300, seed=3)
    spec = ScenarioSpec(ScenarioKind.B_III, spending=POCOCK)
    cell = cell_boundaries(cfg, spec)
    out = run_scenario(generate_trial(cfg, replicate_rng(3, 0)), cfg, spec, cell)
    assert not out.aborted
    assert set(out.results) == {"Simple", "GS", "GSAdjust"}
    assert 0 < out.rho_hat <= 1
    assert out.bounds[:2] == cell.consistent.upper[:2]
    if out.stop_stage < 3:
        assert out.z_adjusted is not None


def _outcome(rep, est, lo, hi, rejected=True, error=None):
    res = InferenceResult(0.01, 0.99, 0.02, (lo, hi), est, Ordering.STAGEWISE, False)
    return TrialOutcome(ScenarioKind.A_I, rep, 3, None, rejected, (2.0,),
                        results={"Simple": res}, error=error)


def test_aggregate_rules():
    with pytest.raises(ValidationError):
        aggregate([], 0.1)
    with pytest.raises(ValidationError):
        aggregate([_outcome(i, 0.1, 0.0, 0.2) for i in range(99)], 0.1)
    outs = [_outcome(i, 0.1 + 0.001 * (i - 50), 0.05, 0.15, rejected=i % 4 == 0) for i in range(100)]
    outs += [_outcome(100 + i, 0.0, 0.0, 0.0, error="bracket: failed") for i in range(3)]
    rep = aggregate(outs, 0.1)
    assert rep.n_reps == 103 and rep.n_aborted == 3
    assert rep.reject_rate == 0.25
    assert rep.reject_se == pytest.approx(math.sqrt(0.25 * 0.75 / 100), rel=1e-12)
    simple = rep.estimators["Simple"]
    assert simple.n == 100
    assert simple.median_scaled_bias == pytest.approx(100 * 0.001 * -0.5, abs=1e-9)
    assert simple.mean_scaled_bias == pytest.approx(100 * 0.001 * -0.5, abs=1e-9)
    assert simple.coverage == 1.0


def test_aggregate_rejects_mixed_scenarios():
    outs = [_outcome(i, 0.1, 0.0, 0.2) for i in range(100)]
    outs.append(TrialOutcome(ScenarioKind.B_I, 100))
    with pytest.raises(ValidationError):
        aggregate(outs, 0.1)


def test_duplicate_scenarios_rejected():
    cfg = GeneratorConfig(0.0, 0.5, 1, 150)
    with pytest.raises(ValidationError):
        run_cell(cfg, [ALL[0], ALL[0]], 2)
