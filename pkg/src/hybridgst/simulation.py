"""Seeded Monte Carlo of group-sequential trials with optional adjustment.

Each replicate draws one dataset and runs every requested monitoring scenario
on it, so scenario comparisons use common random numbers:

* ``A_i``   unadjusted statistics at every look;
* ``A_ii``  adjusted statistics at every look;
* ``B_i``   unadjusted interim looks, adjusted final analysis, boundaries
  computed as if the analysis were consistent;
* ``B_ii``  the same schedule with boundaries designed for the known ``rho``;
* ``B_iii`` the same schedule with alpha-spending, where the final critical
  value is re-solved using ``rho`` estimated from all accrued data.

Data follow ``y = delta * a + x @ gamma + eps`` with ``x ~ N(0, I_p)`` and
``eps ~ N(0, rho^2)``, so the unadjusted outcome variance is one and the
adjusted (residual) variance is ``rho^2``.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boundaries import (
    BoundarySet,
    BoundaryShape,
    SpendingFunction,
    SpendingKind,
    SpendingState,
    design_boundaries,
    next_boundary,
    spending_boundaries,
)
from .covariance import AnalysisSchedule, Method, StagePlan
from .errors import GSTError, ValidationError
from .estimators import (
    TrialData,
    estimate_rho,
    fit_ancova,
    fit_anova,
    standardized_stat,
)
from .inference import (
    InferenceResult,
    Ordering,
    StatisticModel,
    StatisticPath,
    StopReason,
    analyze,
    wald_result,
)

__all__ = [
    "CellBoundaries",
    "CellResult",
    "EstimatorSummary",
    "GeneratorConfig",
    "ScenarioKind",
    "ScenarioSpec",
    "SimReport",
    "TrialOutcome",
    "aggregate",
    "cell_boundaries",
    "generate_trial",
    "replicate_rng",
    "run_cell",
    "run_scenario",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("Simple", "GS", "GSAdjust")
U, C = Method.UNADJUSTED, Method.ADJUSTED


@dataclass(frozen=True)
class GeneratorConfig:
    delta: float
    rho: float
    p: int
    n_total: int
    n_stages: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValidationError("rho must lie in (0, 1]", rho=self.rho)
        if self.p < 1:
            raise ValidationError("need at least one covariate", p=self.p)
        if self.n_total < self.n_stages * (self.p + 3):
            raise ValidationError("too few subjects per stage for an adjusted fit",
                                  n_total=self.n_total, n_stages=self.n_stages)

    @property
    def plan(self) -> StagePlan:
        return StagePlan.equal(self.n_total, self.n_stages)

    @property
    def gamma(self) -> float:
        return math.sqrt((1.0 - self.rho**2) / self.p)

    @property
    def sigma2(self) -> float:
        return self.rho**2

    @property
    def sigma_tilde2(self) -> float:
        return 1.0


def replicate_rng(master_seed: int, rep: int) -> np.random.Generator:
    """Generator for replicate ``rep``, a pure function of the two integers."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(rep,)))


def generate_trial(cfg: GeneratorConfig, rng: np.random.Generator | None = None) -> TrialData:
    """Draw one trial's data in enrolment order."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = cfg.n_total
    a = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    x = rng.standard_normal((n, cfg.p))
    eps = rng.standard_normal(n) * cfg.rho
    y = cfg.delta * a + x.sum(axis=1) * cfg.gamma + eps
    stage = np.repeat(np.arange(1, cfg.n_stages + 1), cfg.plan.n_per_stage)
    return TrialData(y, a, x, stage)


class ScenarioKind(str, enum.Enum):
    A_I = "A_i"
    A_II = "A_ii"
    B_I = "B_i"
    B_II = "B_ii"
    B_III = "B_iii"

    @property
    def hybrid(self) -> bool:
        return self.value.startswith("B")


@dataclass(frozen=True)
class ScenarioSpec:
    """Monitoring scenario plus how its boundaries are built.

    Exactly one of ``spending`` and ``shape`` is normally given.  A scenario
    with a fixed design (``B_ii``) maps a spending function to the matching
    shape; ``B_iii`` needs spending and maps a shape to the matching spending
    function.
    """

    kind: ScenarioKind
    spending: SpendingFunction | None = None
    shape: BoundaryShape | None = None
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if self.spending is None and self.shape is None:
            raise ValidationError("scenario needs a spending function or a boundary shape")
        if self.shape is not None:
            object.__setattr__(self, "shape", BoundaryShape(self.shape))

    def schedule(self, K: int) -> AnalysisSchedule:
        if self.kind is ScenarioKind.A_I:
            return AnalysisSchedule.consistent(K, U)
        if self.kind is ScenarioKind.A_II:
            return AnalysisSchedule.consistent(K, C)
        return AnalysisSchedule.hybrid(K)

    @property
    def spending_fn(self) -> SpendingFunction:
        if self.spending is not None:
            return self.spending
        return SpendingFunction(SpendingKind(self.shape.value), self.alpha)

    @property
    def design_shape(self) -> BoundaryShape:
        if self.shape is not None:
            return self.shape
        return BoundaryShape(self.spending.kind.value)


@dataclass(frozen=True)
class CellBoundaries:
    """Data-independent boundaries shared by every replicate of a cell."""

    consistent: BoundarySet
    known_rho: BoundarySet | None


def cell_boundaries(cfg: GeneratorConfig, spec: ScenarioSpec) -> CellBoundaries:
    plan = cfg.plan
    if spec.spending is not None or spec.kind is ScenarioKind.B_III:
        consistent = spending_boundaries(plan, spec.spending_fn)
    else:
        consistent = design_boundaries(plan, AnalysisSchedule.consistent(plan.K), 1.0,
                                       spec.design_shape, spec.alpha)
    known = None
    if spec.kind is ScenarioKind.B_II:
        known = design_boundaries(plan, AnalysisSchedule.hybrid(plan.K), cfg.rho,
                                  spec.design_shape, spec.alpha)
    return CellBoundaries(consistent, known)


@dataclass(frozen=True)
class TrialOutcome:
    scenario: ScenarioKind
    rep: int
    stop_stage: int = 0
    stop_reason: StopReason | None = None
    rejected: bool = False
    z: tuple[float, ...] = ()
    z_adjusted: float | None = None
    rho_hat: float = math.nan
    bounds: tuple[float, ...] = ()
    results: dict[str, InferenceResult] = field(default_factory=dict)
    error: str | None = None

    @property
    def aborted(self) -> bool:
        return self.error is not None


def run_scenario(data: TrialData, cfg: GeneratorConfig, spec: ScenarioSpec,
                 cell: CellBoundaries, *, rep: int = 0, inference: bool = True,
                 ordering: Ordering = Ordering.STAGEWISE) -> TrialOutcome:
    """Monitor one dataset under one scenario and, optionally, analyse it."""
    try:
        return _run(data, cfg, spec, cell, rep, inference, Ordering(ordering))
    except GSTError as exc:
        log.info("replicate %d (%s) aborted: %s", rep, spec.kind.value, exc)
        return TrialOutcome(spec.kind, rep, error=f"{exc.code}: {exc.message}")


def _run(data, cfg, spec, cell, rep, inference, ordering) -> TrialOutcome:
    plan = cfg.plan
    K = plan.K
    schedule = spec.schedule(K)
    base = cell.known_rho if spec.kind is ScenarioKind.B_II else cell.consistent
    upper = list(base.upper)
    z_path: list[float] = []
    fits = {}
    reason = StopReason.FINAL
    for k in range(1, K + 1):
        cum = data.through_stage(k)
        method = schedule.per_stage_method[k - 1]
        fit = fit_ancova(cum) if method is C else fit_anova(cum)
        fits[(k, method)] = fit
        if spec.kind is ScenarioKind.B_III and k == K:
            upper[K - 1] = _final_spending_bound(cell.consistent, spec.spending_fn, cum)
        z = standardized_stat(fit)
        z_path.append(z)
        if k < K and abs(z) >= upper[k - 1]:
            reason = StopReason.UPPER if z > 0 else StopReason.LOWER
            break
    k = len(z_path)
    rejected = abs(z_path[-1]) >= upper[k - 1]
    if k == K and rejected:
        reason = StopReason.UPPER if z_path[-1] > 0 else StopReason.LOWER

    cum = data.through_stage(k)
    z_adj = None
    if schedule.hybrid_final and k < K:
        fits[(k, C)] = fit_ancova(cum)
        z_adj = standardized_stat(fits[(k, C)])

    if not inference:
        return TrialOutcome(spec.kind, rep, k, reason, rejected, tuple(z_path), z_adj,
                            bounds=tuple(upper))

    bounds = BoundarySet(tuple(upper), base.alpha, base.t_star, schedule.per_stage_method,
                         base.increments, base.rho)
    path = StatisticPath(schedule, tuple(z_path), reason, z_adj)
    final_fit = fits.get((k, C)) or fits[(k, U)]
    results = {"Simple": wald_result(final_fit.delta_hat, final_fit.se, spec.alpha)}
    sd_final = math.sqrt(final_fit.sigma2_hat)
    gs_model = StatisticModel.consistent(plan, sd_final)
    results["GS"] = analyze(path.consistent_view(), bounds, gs_model, ordering, spec.alpha)
    rho_hat = math.nan
    if schedule.hybrid_final:
        est = estimate_rho(cum)
        rho_hat = est.rho_hat
        adj_model = StatisticModel(plan, rho_hat, rho_hat * est.sigma_tilde_hat, est.sigma_tilde_hat)
        results["GSAdjust"] = analyze(path, bounds, adj_model, ordering, spec.alpha)
    else:
        results["GSAdjust"] = results["GS"]
    return TrialOutcome(spec.kind, rep, k, reason, rejected, tuple(z_path), z_adj,
                        rho_hat, tuple(upper), results)


def _final_spending_bound(consistent: BoundarySet, fn: SpendingFunction, cum: TrialData) -> float:
    K = consistent.K
    state = SpendingState(
        fn.alpha,
        upper=consistent.upper[: K - 1],
        t_star=consistent.t_star[: K - 1],
        methods=(U,) * (K - 1),
        rho_used=(1.0,) * (K - 1),
        increments=consistent.increments[: K - 1],
    )
    rho_hat = estimate_rho(cum).rho_hat
    _, u, _ = next_boundary(state, fn, consistent.t_star[K - 1], C, rho_hat)
    return u


# --- batches ----------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    median_scaled_bias: float
    mean_scaled_bias: float
    coverage: float
    coverage_se: float
    n: int


@dataclass(frozen=True)
class SimReport:
    scenario: ScenarioKind
    delta: float
    rho: float
    n_total: int
    n_reps: int
    n_aborted: int
    reject_rate: float
    reject_se: float
    estimators: dict[str, EstimatorSummary] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("delta", "rho", "n_total", "n_reps", "n_aborted", "reject_rate", "reject_se")}
        out["scenario"] = self.scenario.value
        out["estimators"] = {k: vars(v) for k, v in self.estimators.items()}
        return out


def aggregate(outcomes: Sequence[TrialOutcome], delta: float, rho: float = math.nan,
              n_total: int = 0, min_reps: int = 100) -> SimReport:
    """Rejection rate, scaled bias (x100) and coverage over replicates."""
    if not outcomes:
        raise ValidationError("no replicates to aggregate")
    if len(outcomes) < min_reps:
        raise ValidationError(f"need at least {min_reps} replicates", n=len(outcomes))
    kinds = {o.scenario for o in outcomes}
    if len(kinds) != 1:
        raise ValidationError("outcomes mix scenarios")
    ok = [o for o in outcomes if not o.aborted]
    n = len(ok)
    rate = sum(o.rejected for o in ok) / n if n else math.nan
    se = math.sqrt(rate * (1 - rate) / n) if n else math.nan
    summaries = {}
    for name in ESTIMATORS:
        res = [o.results[name] for o in ok if name in o.results]
        if not res:
            continue
        bias = 100.0 * (np.array([r.median_unbiased for r in res]) - delta)
        cover = np.mean([r.covers(delta) for r in res])
        summaries[name] = EstimatorSummary(
            name, float(np.median(bias)), float(np.mean(bias)), float(cover),
            float(math.sqrt(cover * (1 - cover) / len(res))), len(res),
        )
    return SimReport(kinds.pop(), delta, rho, n_total, len(outcomes),
                     len(outcomes) - n, rate, se, summaries)


@dataclass(frozen=True)
class CellResult:
    cfg: GeneratorConfig
    outcomes: dict[ScenarioKind, list[TrialOutcome]]

    def report(self, kind: ScenarioKind, min_reps: int = 100) -> SimReport:
        return aggregate(self.outcomes[ScenarioKind(kind)], self.cfg.delta, self.cfg.rho,
                         self.cfg.n_total, min_reps)


def _run_block(args) -> list[dict[ScenarioKind, TrialOutcome]]:
    cfg, specs, cells, reps, inference, ordering = args
    out = []
    for r in reps:
        data = generate_trial(cfg, replicate_rng(cfg.seed, r))
        out.append({
            s.kind: run_scenario(data, cfg, s, cells[s.kind], rep=r,
                                 inference=s.kind in inference, ordering=ordering)
            for s in specs
        })
    return out


def run_cell(cfg: GeneratorConfig, specs: Sequence[ScenarioSpec], reps: int | Iterable[int], *,
             inference: Iterable[ScenarioKind] = (), ordering: Ordering = Ordering.STAGEWISE,
             threads: int = 1) -> CellResult:
    """Run every scenario on the same replicate datasets.

    Args:
        cfg: Data-generating configuration; ``cfg.seed`` is the master seed.
        specs: Scenarios to monitor each dataset under.
        reps: Number of replicates, or explicit replicate indices.
        inference: Scenarios for which adjusted inference is also computed.
        threads: Worker processes; results do not depend on this.
    """
    rep_ids = list(range(reps)) if isinstance(reps, int) else list(reps)
    inference = frozenset(ScenarioKind(k) for k in inference)
    kinds = [s.kind for s in specs]
    if len(set(kinds)) != len(kinds):
        raise ValidationError("each scenario may appear once per cell")
    cells = {s.kind: cell_boundaries(cfg, s) for s in specs}
    if threads <= 1 or len(rep_ids) < 2 * threads:
        rows = _run_block((cfg, specs, cells, rep_ids, inference, ordering))
    else:
        chunk = math.ceil(len(rep_ids) / (4 * threads))
        blocks = [rep_ids[i:i + chunk] for i in range(0, len(rep_ids), chunk)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(_run_block, [(cfg, specs, cells, b, inference, ordering) for b in blocks])
            rows = [row for part in parts for row in part]
    return CellResult(cfg, {k: [row[k] for row in rows] for k in kinds})
