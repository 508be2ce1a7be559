"""Joint law of cumulative ANOVA / ANCOVA statistics across stages.

With ``t_k`` the cumulative information fraction at stage ``k`` and ``rho``
the ratio of the ANCOVA to the ANOVA standard deviation, the standardized
statistics (stage-major, unadjusted before adjusted) are asymptotically
normal with correlation

    corr((k, m), (k', m')) = sqrt(t_min / t_max) * (rho if m != m' else 1)

i.e. the Kronecker product of the usual information-fraction matrix with
``[[1, rho], [rho, 1]]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, ValidationError

__all__ = [
    "AnalysisSchedule",
    "JointCovariance",
    "Method",
    "StagePlan",
    "StatLabel",
    "full_joint",
    "mean_shift",
    "select_schedule",
]


class Method(str, enum.Enum):
    UNADJUSTED = "U"
    ADJUSTED = "C"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        key = str(value).strip().lower()
        if key in ("u", "unadjusted", "anova"):
            return cls.UNADJUSTED
        if key in ("c", "adjusted", "ancova"):
            return cls.ADJUSTED
        raise ValidationError(f"unknown analysis method {value!r}")


U = Method.UNADJUSTED
C = Method.ADJUSTED


@dataclass(frozen=True)
class StagePlan:
    """Per-stage enrolment; cumulative counts and fractions are derived."""

    n_per_stage: tuple[int, ...]

    def __post_init__(self):
        try:
            sizes = tuple(int(n) for n in self.n_per_stage)
        except (TypeError, ValueError) as exc:
            raise ValidationError("stage sizes must be integers") from exc
        if not sizes:
            raise ValidationError("a plan needs at least one stage")
        if any(n <= 0 for n in sizes) or any(
            float(n) != float(m) for n, m in zip(sizes, self.n_per_stage)
        ):
            raise ValidationError("stage sizes must be positive integers", n_per_stage=sizes)
        object.__setattr__(self, "n_per_stage", sizes)

    @classmethod
    def equal(cls, n_total: int, n_stages: int) -> "StagePlan":
        """Split ``n_total`` as evenly as possible, remainder to the last stages."""
        if n_stages < 1 or n_total < n_stages:
            raise ValidationError("need n_total >= n_stages >= 1",
                                  n_total=n_total, n_stages=n_stages)
        base, extra = divmod(int(n_total), int(n_stages))
        return cls(tuple(base + (1 if k >= n_stages - extra else 0) for k in range(n_stages)))

    @property
    def K(self) -> int:
        return len(self.n_per_stage)

    @property
    def cum_n(self) -> np.ndarray:
        return np.cumsum(self.n_per_stage)

    @property
    def t_star(self) -> np.ndarray:
        cum = self.cum_n
        return cum / cum[-1]


@dataclass(frozen=True)
class StatLabel:
    stage: int  # 1-based
    method: Method

    def __str__(self) -> str:
        return f"{self.stage}{self.method.value}"


@dataclass(frozen=True)
class AnalysisSchedule:
    """Which statistic is tested at each stage.

    With ``hybrid_final`` every interim look is unadjusted, the last stage is
    adjusted, and an adjusted statistic is also computed at whichever stage
    the trial stops.
    """

    per_stage_method: tuple[Method, ...]
    hybrid_final: bool = False

    def __post_init__(self):
        methods = tuple(Method.parse(m) for m in self.per_stage_method)
        if not methods:
            raise ValidationError("schedule needs at least one stage")
        object.__setattr__(self, "per_stage_method", methods)
        if self.hybrid_final and (
            any(m is not U for m in methods[:-1]) or methods[-1] is not C
        ):
            raise ValidationError(
                "a hybrid schedule is unadjusted at every interim and adjusted at the end"
            )

    @classmethod
    def consistent(cls, K: int, method=U) -> "AnalysisSchedule":
        return cls((Method.parse(method),) * K)

    @classmethod
    def hybrid(cls, K: int) -> "AnalysisSchedule":
        return cls((U,) * (K - 1) + (C,), hybrid_final=True)

    @property
    def K(self) -> int:
        return len(self.per_stage_method)


def _as_rho(rho: float) -> float:
    rho = float(rho)
    if not 0.0 < rho <= 1.0:
        raise ValidationError("rho must lie in (0, 1]", rho=rho)
    return rho


@dataclass(frozen=True)
class JointCovariance:
    labels: tuple[StatLabel, ...]
    corr: np.ndarray = field(repr=False)
    rho: float
    plan: StagePlan

    def index(self, label: StatLabel) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DimensionMismatch(f"statistic {label} is not in this covariance") from None

    def restrict(self, labels: Sequence[StatLabel]) -> "JointCovariance":
        idx = [self.index(lb) for lb in labels]
        sub = self.corr[np.ix_(idx, idx)].copy()
        sub.setflags(write=False)
        return JointCovariance(tuple(labels), sub, self.rho, self.plan)


def information_matrix(t_star) -> np.ndarray:
    t = np.asarray(t_star, dtype=float)
    return np.sqrt(np.minimum.outer(t, t) / np.maximum.outer(t, t))


def full_joint(plan: StagePlan, rho: float) -> JointCovariance:
    """Correlation of all ``2K`` statistics ``(1U, 1C, ..., KU, KC)``."""
    rho = _as_rho(rho)
    corr = np.kron(information_matrix(plan.t_star), np.array([[1.0, rho], [rho, 1.0]]))
    corr.setflags(write=False)
    labels = tuple(StatLabel(k, m) for k in range(1, plan.K + 1) for m in (U, C))
    return JointCovariance(labels, corr, rho, plan)


def schedule_labels(schedule: AnalysisSchedule, stop_stage: int | None = None) -> list[StatLabel]:
    labels = [StatLabel(k, m) for k, m in enumerate(schedule.per_stage_method, start=1)]
    if schedule.hybrid_final and stop_stage is not None and stop_stage < schedule.K:
        labels.insert(stop_stage, StatLabel(stop_stage, C))
    return labels


def select_schedule(joint: JointCovariance, schedule: AnalysisSchedule,
                    stop_stage: int | None = None) -> JointCovariance:
    """Restrict ``joint`` to the statistics a schedule actually tests.

    For a hybrid schedule stopped early at ``stop_stage`` the adjusted
    statistic of that stage is placed right after its unadjusted one.
    """
    if schedule.K != joint.plan.K:
        raise DimensionMismatch("schedule and plan disagree on the number of stages",
                                schedule_K=schedule.K, plan_K=joint.plan.K)
    if stop_stage is not None and not 1 <= stop_stage <= schedule.K:
        raise ValidationError("stop stage out of range", stop_stage=stop_stage)
    return joint.restrict(schedule_labels(schedule, stop_stage))


def mean_shift(plan: StagePlan, labels: Sequence[StatLabel], delta: float,
               sigma: float, sigma_tilde: float) -> np.ndarray:
    """Means of the standardized statistics when the true effect is ``delta``."""
    if not (sigma > 0 and sigma_tilde > 0):
        raise ValidationError("standard deviations must be positive",
                              sigma=sigma, sigma_tilde=sigma_tilde)
    if sigma > sigma_tilde * (1 + 1e-12):
        raise ValidationError("adjusted sd cannot exceed the unadjusted sd",
                              sigma=sigma, sigma_tilde=sigma_tilde)
    cum = plan.cum_n
    return np.array([
        delta * np.sqrt(cum[lb.stage - 1]) / (sigma if lb.method is C else sigma_tilde)
        for lb in labels
    ])
