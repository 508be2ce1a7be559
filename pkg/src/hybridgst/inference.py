"""Inference after a group-sequential trial: p-values, intervals, estimates.

Everything is driven by one quantity, the probability under effect ``delta``
that a fresh trial's outcome is at least as extreme as the observed one in a
chosen ordering of the sample space (stage-wise or sample-mean).  That
probability is written as a sum of Gaussian box probabilities over the joint
law of the cumulative ANOVA / ANCOVA statistics, so it stays valid when the
analysis switches to covariate adjustment after an interim crossing and the
statistics lose their independent increments.

Lower-tail probabilities are obtained by mirroring: ``P_delta(T <= obs)``
equals the upper-tail probability of the sign-flipped path at ``-delta``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from . import mvn
from .boundaries import BoundarySet
from .covariance import AnalysisSchedule, Method, StagePlan, StatLabel, full_joint
from .errors import BracketError, DimensionMismatch, ValidationError

__all__ = [
    "Direction",
    "InferenceResult",
    "Ordering",
    "StatisticModel",
    "StatisticPath",
    "StopReason",
    "adjusted_pvalue",
    "analyze",
    "confidence_interval",
    "exceedance_prob",
    "median_unbiased_estimate",
    "wald_result",
]

DEFAULT_TOL = 1e-5
ROOT_XTOL = 1e-6


class Ordering(str, enum.Enum):
    STAGEWISE = "stagewise"
    SAMPLE_MEAN = "sample_mean"


class StopReason(str, enum.Enum):
    UPPER = "upper"
    LOWER = "lower"
    FINAL = "final"


class Direction(str, enum.Enum):
    UPPER = "upper"
    LOWER = "lower"


U, C = Method.UNADJUSTED, Method.ADJUSTED


@dataclass(frozen=True)
class StatisticPath:
    """Observed monitoring statistics up to the stopping stage.

    Attributes:
        schedule: Analysis schedule the trial followed.
        z: Monitoring statistic at stages ``1..stop_stage`` (null value 0).
        stop_reason: Why monitoring ended.
        z_adjusted: For a hybrid schedule stopped at an interim look, the
            adjusted statistic computed at the stopping stage.
        check_stop: Whether the stopping statistic must lie on the side of
            the boundary named by ``stop_reason``.  Off only for the
            hybrid-ignorant view, whose stopping statistic is not the one
            that was monitored.
    """

    schedule: AnalysisSchedule
    z: tuple[float, ...]
    stop_reason: StopReason
    z_adjusted: float | None = None
    check_stop: bool = True

    def __post_init__(self):
        z = tuple(float(v) for v in self.z)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "stop_reason", StopReason(self.stop_reason))
        K = self.schedule.K
        if not 1 <= len(z) <= K:
            raise ValidationError("path length must be between 1 and the number of stages",
                                  length=len(z), K=K)
        if self.stop_reason is StopReason.FINAL and len(z) != K:
            raise ValidationError("a path reaching the final analysis must cover every stage")
        if self.early_hybrid and self.z_adjusted is None:
            raise ValidationError("hybrid path stopped early needs the adjusted statistic")
        if self.z_adjusted is not None and not self.early_hybrid:
            raise ValidationError("adjusted stop statistic only applies to an early hybrid stop")

    @property
    def stop_stage(self) -> int:
        return len(self.z)

    @property
    def early_hybrid(self) -> bool:
        return self.schedule.hybrid_final and self.stop_stage < self.schedule.K

    @property
    def ordering_z(self) -> float:
        """Statistic that ranks outcomes stopping at the observed stage."""
        return self.z_adjusted if self.early_hybrid else self.z[-1]

    @property
    def ordering_method(self) -> Method:
        return C if self.early_hybrid else self.schedule.per_stage_method[self.stop_stage - 1]

    def label(self, stage: int) -> StatLabel:
        return StatLabel(stage, self.schedule.per_stage_method[stage - 1])

    def mirrored(self) -> "StatisticPath":
        flip = {StopReason.UPPER: StopReason.LOWER, StopReason.LOWER: StopReason.UPPER}
        return StatisticPath(
            self.schedule,
            tuple(-v for v in self.z),
            flip.get(self.stop_reason, self.stop_reason),
            None if self.z_adjusted is None else -self.z_adjusted,
            self.check_stop,
        )

    def consistent_view(self) -> "StatisticPath":
        """The same trial as seen by an analysis that ignores the method switch.

        The statistic used at the stop replaces the monitoring statistic of
        that stage and every stage is treated as analysed the same way.
        """
        z = self.z[:-1] + (self.ordering_z,)
        schedule = AnalysisSchedule.consistent(self.schedule.K)
        return StatisticPath(schedule, z, self.stop_reason, check_stop=not self.early_hybrid)

    def check_against(self, bounds: BoundarySet) -> None:
        if bounds.K != self.schedule.K:
            raise DimensionMismatch("path and boundaries disagree on the number of stages")
        k = self.stop_stage
        for j in range(k - 1):
            if not -bounds.upper[j] < self.z[j] < bounds.upper[j]:
                raise ValidationError(
                    f"stage {j + 1} statistic lies outside the continuation region",
                    stage=j + 1, z=self.z[j], upper=bounds.upper[j],
                )
        zk, uk = self.z[-1], bounds.upper[k - 1]
        if not self.check_stop:
            return
        if self.stop_reason is StopReason.UPPER and not zk >= uk:
            raise ValidationError(f"stage {k} statistic did not cross the upper boundary")
        if self.stop_reason is StopReason.LOWER and not zk <= -uk:
            raise ValidationError(f"stage {k} statistic did not cross the lower boundary")
        if k < bounds.K and self.stop_reason is StopReason.FINAL:
            raise ValidationError("final stop before the last stage")


@dataclass(frozen=True)
class StatisticModel:
    """Sampling law of the standardized statistics as a function of the effect.

    ``sigma`` and ``sigma_tilde`` are the adjusted and unadjusted outcome
    standard deviations; the unadjusted statistic at stage ``k`` has mean
    ``delta * sqrt(n_k) / sigma_tilde`` and the adjusted one
    ``delta * sqrt(n_k) / sigma``.
    """

    plan: StagePlan
    rho: float
    sigma: float
    sigma_tilde: float
    tol: float = DEFAULT_TOL
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0 and self.sigma_tilde > 0):
            raise ValidationError("standard deviations must be positive")

    @classmethod
    def consistent(cls, plan: StagePlan, sigma: float, **kw) -> "StatisticModel":
        return cls(plan, 1.0, sigma, sigma, **kw)

    @cached_property
    def _joint(self):
        joint = full_joint(self.plan, self.rho)
        return joint, {lb: i for i, lb in enumerate(joint.labels)}

    @cached_property
    def _scale(self) -> np.ndarray:
        root_n = np.sqrt(self.plan.cum_n.astype(float))
        return np.column_stack([root_n / self.sigma_tilde, root_n / self.sigma]).ravel()

    def sd(self, method: Method) -> float:
        return self.sigma if method is C else self.sigma_tilde

    def event_prob(self, event: dict[StatLabel, tuple[float, float]], delta: float) -> float:
        """Probability that every labelled statistic falls in its interval."""
        joint, index = self._joint
        idx = [index[lb] for lb in event]
        bounds = np.array(list(event.values()), dtype=float)
        mu = delta * self._scale[idx]
        corr = joint.corr[np.ix_(idx, idx)]
        return mvn._box_prob(corr, bounds[:, 0] - mu, bounds[:, 1] - mu, self.tol, self.seed).prob


Event = dict  # StatLabel -> (lower, upper)


def _continue_event(path: StatisticPath, bounds: BoundarySet, through: int) -> Event:
    return {path.label(j): (-bounds.upper[j - 1], bounds.upper[j - 1]) for j in range(1, through + 1)}


def _stagewise_events(path: StatisticPath, bounds: BoundarySet) -> list[Event]:
    k = path.stop_stage
    inf = math.inf
    events = [
        {**_continue_event(path, bounds, j - 1), path.label(j): (bounds.upper[j - 1], inf)}
        for j in range(1, k)
    ]
    cont = _continue_event(path, bounds, k - 1)
    if path.early_hybrid:
        uk = bounds.upper[k - 1]
        zc = path.z_adjusted
        events.append({**cont, StatLabel(k, U): (uk, inf), StatLabel(k, C): (zc, inf)})
        events.append({**cont, StatLabel(k, U): (-inf, -uk), StatLabel(k, C): (zc, inf)})
        if path.stop_reason is StopReason.LOWER:
            # outcomes that continue past a lower crossing rank above it
            events.append(_continue_event(path, bounds, k))
    else:
        events.append({**cont, path.label(k): (path.z[-1], inf)})
    return events


def _sample_mean_events(path: StatisticPath, bounds: BoundarySet, plan: StagePlan) -> list[Event]:
    K = path.schedule.K
    root_n = np.sqrt(plan.cum_n.astype(float))
    x = path.ordering_z / root_n[path.stop_stage - 1]
    inf = math.inf
    events: list[Event] = []
    for j in range(1, K):
        thr = x * root_n[j - 1]
        uj = bounds.upper[j - 1]
        cont = _continue_event(path, bounds, j - 1)
        if path.schedule.hybrid_final:
            events.append({**cont, StatLabel(j, U): (uj, inf), StatLabel(j, C): (thr, inf)})
            events.append({**cont, StatLabel(j, U): (-inf, -uj), StatLabel(j, C): (thr, inf)})
        else:
            lab = path.label(j)
            events.append({**cont, lab: (max(uj, thr), inf)})
            if thr < -uj:
                events.append({**cont, lab: (thr, -uj)})
    events.append({**_continue_event(path, bounds, K - 1), path.label(K): (x * root_n[K - 1], inf)})
    return events


def _events(path, bounds, model, ordering) -> list[Event]:
    if ordering is Ordering.STAGEWISE:
        return _stagewise_events(path, bounds)
    return _sample_mean_events(path, bounds, model.plan)


def exceedance_prob(path: StatisticPath, bounds: BoundarySet, model: StatisticModel,
                    ordering: Ordering = Ordering.STAGEWISE, delta: float = 0.0,
                    direction: Direction = Direction.UPPER) -> float:
    """Probability under ``delta`` of an outcome at least as extreme as ``path``.

    ``Direction.UPPER`` gives ``P(outcome >= observed)``, ``Direction.LOWER``
    gives ``P(outcome <= observed)``.
    """
    ordering = Ordering(ordering)
    direction = Direction(direction)
    path.check_against(bounds)
    if model.plan.K != path.schedule.K:
        raise DimensionMismatch("model plan and path disagree on the number of stages")
    if direction is Direction.LOWER:
        path, delta = path.mirrored(), -delta
    events = _events(path, bounds, model, ordering)
    p = sum(model.event_prob(ev, delta) for ev in events)
    return min(1.0, max(0.0, p))


def adjusted_pvalue(path, bounds, model, ordering=Ordering.STAGEWISE) -> tuple[float, float, float]:
    """Upper, lower and two-sided p-values for the null of no effect."""
    p_up = exceedance_prob(path, bounds, model, ordering, 0.0, Direction.UPPER)
    p_low = exceedance_prob(path, bounds, model, ordering, 0.0, Direction.LOWER)
    return p_up, p_low, min(1.0, 2.0 * min(p_up, p_low))


def _naive_estimate(path: StatisticPath, model: StatisticModel) -> tuple[float, float]:
    n = float(model.plan.cum_n[path.stop_stage - 1])
    se = model.sd(path.ordering_method) / math.sqrt(n)
    return path.ordering_z * se, se


BRACKET_WIDTHS = (10.0, 20.0, 40.0, 80.0)


def _solve(fn, center: float, se: float, what: str) -> float:
    # se is on the reported statistic's scale; after a hybrid stop the
    # unadjusted statistic can move several times slower in delta
    for width in BRACKET_WIDTHS:
        lo, hi = center - width * se, center + width * se
        f_lo, f_hi = fn(lo), fn(hi)
        if f_lo == 0.0:
            return lo
        if f_hi == 0.0:
            return hi
        if (f_lo < 0) != (f_hi < 0):
            return brentq(fn, lo, hi, xtol=ROOT_XTOL)
    raise BracketError(f"{what}: no sign change within +/-{BRACKET_WIDTHS[-1]:g} standard errors",
                       center=center, se=se, f=(f_lo, f_hi))


def confidence_interval(path, bounds, model, ordering=Ordering.STAGEWISE,
                        alpha: float = 0.05) -> tuple[float, float]:
    """Equal-tailed interval from inverting the ordering's tail probabilities."""
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)", alpha=alpha)
    center, se = _naive_estimate(path, model)
    lower = _solve(
        lambda d: exceedance_prob(path, bounds, model, ordering, d, Direction.UPPER) - alpha / 2,
        center, se, "lower confidence limit",
    )
    upper = _solve(
        lambda d: alpha / 2 - exceedance_prob(path, bounds, model, ordering, d, Direction.LOWER),
        center, se, "upper confidence limit",
    )
    return lower, upper


def median_unbiased_estimate(path, bounds, model, ordering=Ordering.STAGEWISE) -> float:
    center, se = _naive_estimate(path, model)
    return _solve(
        lambda d: exceedance_prob(path, bounds, model, ordering, d, Direction.UPPER) - 0.5,
        center, se, "median-unbiased estimate",
    )


@dataclass(frozen=True)
class InferenceResult:
    p_upper: float
    p_lower: float
    p_two_sided: float
    ci: tuple[float, float]
    median_unbiased: float
    ordering: Ordering
    adjusted_for_hybrid: bool
    audit: tuple[mvn.MVNResult, ...] = field(default=(), repr=False, compare=False)

    def covers(self, delta: float) -> bool:
        return self.ci[0] <= delta <= self.ci[1]


def analyze(path: StatisticPath, bounds: BoundarySet, model: StatisticModel,
            ordering=Ordering.STAGEWISE, alpha: float = 0.05, *,
            keep_audit: bool = False) -> InferenceResult:
    """P-values, confidence interval and median-unbiased estimate in one call."""
    ordering = Ordering(ordering)
    with mvn.audit_log() as entries:
        p_up, p_low, p_two = adjusted_pvalue(path, bounds, model, ordering)
        ci = confidence_interval(path, bounds, model, ordering, alpha)
        med = median_unbiased_estimate(path, bounds, model, ordering)
    return InferenceResult(
        p_upper=p_up,
        p_lower=p_low,
        p_two_sided=p_two,
        ci=ci,
        median_unbiased=med,
        ordering=ordering,
        adjusted_for_hybrid=path.schedule.hybrid_final and model.rho < 1.0,
        audit=tuple(entries) if keep_audit else (),
    )


def wald_result(delta_hat: float, se: float, alpha: float = 0.05) -> InferenceResult:
    """Fixed-sample inference that ignores the sequential monitoring."""
    z = delta_hat / se
    q = float(ndtri(1 - alpha / 2))
    p_up = float(ndtr(-z))
    p_low = 1.0 - p_up
    return InferenceResult(
        p_upper=p_up,
        p_lower=p_low,
        p_two_sided=min(1.0, 2 * min(p_up, p_low)),
        ci=(delta_hat - q * se, delta_hat + q * se),
        median_unbiased=delta_hat,
        ordering=Ordering.STAGEWISE,
        adjusted_for_hybrid=False,
    )
