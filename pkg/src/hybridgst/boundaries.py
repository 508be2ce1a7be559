"""Two-sided rejection boundaries for mixed ANOVA / ANCOVA monitoring.

Two routes are offered:

* :func:`design_boundaries` fixes the boundary shape (flat or square-root
  decay) and solves for the single constant that gives total size ``alpha``
  under the joint null law of the scheduled statistics with a known ``rho``.
* :func:`next_boundary` is the alpha-spending route.  Each stage solves for
  its own critical value given the ones already used, spending
  ``alpha*(t_k) - alpha*(t_{k-1})``.  Switching to an adjusted statistic at a
  stage enters only through the correlation ``rho_hat`` with the earlier
  unadjusted statistics.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from . import mvn
from .covariance import AnalysisSchedule, Method, StagePlan, full_joint, information_matrix, select_schedule
from .errors import BracketError, ValidationError

__all__ = [
    "BoundarySet",
    "BoundaryShape",
    "SpendingFunction",
    "SpendingKind",
    "SpendingState",
    "design_boundaries",
    "next_boundary",
    "spend_alpha",
    "spending_boundaries",
    "write_boundary_csv",
]

log = logging.getLogger(__name__)

C_BRACKET = (0.5, 10.0)
X_TOL = 1e-7
DEFAULT_TOL = 1e-6


class BoundaryShape(str, enum.Enum):
    POCOCK = "pocock"
    OBF = "obf"

    def profile(self, t_star) -> np.ndarray:
        t = np.asarray(t_star, dtype=float)
        if self is BoundaryShape.POCOCK:
            return np.ones_like(t)
        return np.sqrt(t[-1] / t)


class SpendingKind(str, enum.Enum):
    POCOCK = "pocock"
    OBF = "obf"


def _check_alpha(alpha: float, upper: float = 0.5) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= upper:
        raise ValidationError(f"alpha must lie in (0, {upper}]", alpha=alpha)
    return alpha


@dataclass(frozen=True)
class SpendingFunction:
    """Lan-DeMets style approximations to Pocock and O'Brien-Fleming spending."""

    kind: SpendingKind
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", SpendingKind(self.kind))
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))

    def __call__(self, t: float) -> float:
        return spend_alpha(self, t)


def spend_alpha(fn: SpendingFunction, t_star: float) -> float:
    """Cumulative alpha spent by information fraction ``t_star``."""
    t = float(t_star)
    if not t > 0:
        raise ValidationError("information fraction must be positive", t_star=t)
    t = min(t, 1.0)
    if t == 1.0:
        return fn.alpha
    if fn.kind is SpendingKind.POCOCK:
        return fn.alpha * math.log1p((math.e - 1.0) * t)
    z = ndtri(1.0 - fn.alpha / 2.0)
    return float(2.0 * ndtr(-z / math.sqrt(t)))


@dataclass(frozen=True)
class BoundarySet:
    """Symmetric two-sided boundaries ``-upper_k < Z_k < upper_k`` to continue."""

    upper: tuple[float, ...]
    alpha: float
    t_star: tuple[float, ...]
    methods: tuple[Method, ...]
    increments: tuple[float, ...]
    rho: tuple[float, ...]
    two_sided: bool = True

    @property
    def lower(self) -> tuple[float, ...]:
        return tuple(-u for u in self.upper)

    @property
    def K(self) -> int:
        return len(self.upper)

    def looks(self, indices: Sequence[int] | None = None) -> list[mvn.Look]:
        idx = range(self.K) if indices is None else indices
        return [mvn.Look(i, -u, u) for i, u in zip(idx, self.upper)]

    def rows(self) -> list[dict]:
        cum = np.cumsum(self.increments)
        return [
            {
                "stage": k + 1,
                "t_star": self.t_star[k],
                "method": self.methods[k].value,
                "lower": -self.upper[k],
                "upper": self.upper[k],
                "alpha_spent_increment": self.increments[k],
                "alpha_spent_cum": float(cum[k]),
            }
            for k in range(self.K)
        ]


def stage_correlation(t_star: Sequence[float], methods: Sequence[Method],
                      rho: float) -> np.ndarray:
    """Null correlation of one statistic per stage under the given methods."""
    t = np.asarray(t_star, dtype=float)
    m = np.array([Method.parse(x) is Method.ADJUSTED for x in methods])
    cross = np.where(np.equal.outer(m, m), 1.0, rho)
    return information_matrix(t) * cross


def _null_crossing_prob(corr, prev_upper, u, tol, seed) -> float:
    """Two-sided first-crossing probability at the last look under the null.

    With zero means and symmetric boundaries both tails are equal, and a
    crossing box is far cheaper to integrate accurately than the complement
    of the (high-probability) continuation box.
    """
    lo = np.append(-prev_upper, u)
    hi = np.append(prev_upper, np.inf)
    return 2.0 * mvn._box_prob(corr, lo, hi, tol, seed).prob


def _null_reject_prob(corr, upper, tol, seed) -> float:
    upper = np.asarray(upper, dtype=float)
    return sum(
        _null_crossing_prob(corr[: k + 1, : k + 1], upper[:k], upper[k], tol, seed)
        for k in range(upper.size)
    )


def _crossing_increments(corr, upper, tol, seed) -> tuple[float, ...]:
    looks = [mvn.Look(i, -u, u) for i, u in enumerate(upper)]
    up, down = mvn.crossing_probs(corr, looks, tol=tol, seed=seed)
    return tuple(float(v) for v in up + down)


def design_boundaries(plan: StagePlan, schedule: AnalysisSchedule, rho: float,
                      shape: BoundaryShape, alpha: float = 0.05, *,
                      tol: float = DEFAULT_TOL, seed: int = 0) -> BoundarySet:
    """Boundaries ``u_k = c * shape_k`` with total two-sided size ``alpha``."""
    alpha = _check_alpha(alpha, 0.2)
    shape = BoundaryShape(shape)
    cov = select_schedule(full_joint(plan, rho), schedule)
    corr = cov.corr
    prof = shape.profile(plan.t_star)
    K = plan.K

    def excess(c: float) -> float:
        return _null_reject_prob(corr, c * prof, tol, seed) - alpha

    lo, hi = C_BRACKET
    f_lo, f_hi = excess(lo), excess(hi)
    if not (f_lo > 0 > f_hi):
        raise BracketError("design constant not bracketed", bracket=C_BRACKET,
                           excess=(f_lo, f_hi))
    c = brentq(excess, lo, hi, xtol=X_TOL, rtol=4 * np.finfo(float).eps)
    upper = tuple(float(v) for v in c * prof)
    return BoundarySet(
        upper=upper,
        alpha=alpha,
        t_star=tuple(float(t) for t in plan.t_star),
        methods=schedule.per_stage_method,
        increments=_crossing_increments(corr, upper, tol, seed),
        rho=(float(rho),) * K,
    )


@dataclass(frozen=True)
class SpendingState:
    """Boundaries fixed so far in an alpha-spending sequence."""

    alpha: float
    upper: tuple[float, ...] = ()
    t_star: tuple[float, ...] = ()
    methods: tuple[Method, ...] = ()
    rho_used: tuple[float, ...] = ()
    increments: tuple[float, ...] = ()

    @property
    def spent(self) -> float:
        return float(sum(self.increments))

    @property
    def stage(self) -> int:
        return len(self.upper)

    def as_boundaries(self) -> BoundarySet:
        return BoundarySet(self.upper, self.alpha, self.t_star, self.methods,
                           self.increments, self.rho_used)


def next_boundary(state: SpendingState, fn: SpendingFunction, t_star: float,
                  method=Method.UNADJUSTED, rho_hat: float = 1.0, *,
                  tol: float = DEFAULT_TOL, seed: int = 0) -> tuple[float, float, SpendingState]:
    """Solve the critical value for the next look and return the new state.

    The incremental two-sided crossing probability at the new look, under a
    null law in which statistics of differing method have correlation
    ``rho_hat * sqrt(t_min / t_max)``, is set equal to the incremental spend.
    """
    method = Method.parse(method)
    t = float(t_star)
    if not 0.0 < t <= 1.0 + 1e-12:
        raise ValidationError("information fraction must lie in (0, 1]", t_star=t)
    if state.t_star and t <= state.t_star[-1]:
        raise ValidationError("information fraction must increase",
                              previous=state.t_star[-1], t_star=t)
    if not 0.0 < rho_hat <= 1.0:
        raise ValidationError("rho_hat must lie in (0, 1]", rho_hat=rho_hat)
    if abs(fn.alpha - state.alpha) > 1e-15:
        raise ValidationError("spending function alpha differs from the state's alpha")
    prev = spend_alpha(fn, state.t_star[-1]) if state.t_star else 0.0
    target = spend_alpha(fn, t) - prev

    def advance(u: float, inc: float) -> tuple[float, float, SpendingState]:
        new = replace(
            state,
            upper=state.upper + (u,),
            t_star=state.t_star + (t,),
            methods=state.methods + (method,),
            rho_used=state.rho_used + (float(rho_hat),),
            increments=state.increments + (inc,),
        )
        return -u, u, new

    if target <= 1e-12:
        if state.spent >= state.alpha - 1e-9 or target > -1e-12:
            log.warning("alpha exhausted before stage %d; boundary set to +inf", state.stage + 1)
            return advance(math.inf, 0.0)
        raise ValidationError("incremental spend is not positive", increment=target)

    if not state.upper:
        u = float(ndtri(1.0 - target / 2.0))
        return advance(u, target)

    corr = stage_correlation(state.t_star + (t,), state.methods + (method,), rho_hat)
    prev_u = np.asarray(state.upper)

    def excess(u: float) -> float:
        return _null_crossing_prob(corr, prev_u, u, tol, seed) - target

    lo, hi = C_BRACKET
    f_lo, f_hi = excess(lo), excess(hi)
    if not (f_lo > 0 > f_hi):
        raise BracketError(f"stage {state.stage + 1} boundary not bracketed",
                           stage=state.stage + 1, excess=(f_lo, f_hi))
    u = brentq(excess, lo, hi, xtol=X_TOL, rtol=4 * np.finfo(float).eps)
    return advance(float(u), float(excess(u) + target))


def spending_boundaries(plan: StagePlan, fn: SpendingFunction,
                        methods: Sequence[Method] | None = None, rho: float = 1.0, *,
                        tol: float = DEFAULT_TOL, seed: int = 0) -> BoundarySet:
    """Run :func:`next_boundary` over every stage of a plan."""
    methods = [Method.UNADJUSTED] * plan.K if methods is None else [Method.parse(m) for m in methods]
    if len(methods) != plan.K:
        raise ValidationError("one method per stage is required")
    state = SpendingState(fn.alpha)
    for t, m in zip(plan.t_star, methods):
        _, _, state = next_boundary(state, fn, float(t), m, rho, tol=tol, seed=seed)
    return state.as_boundaries()


def write_boundary_csv(bounds: BoundarySet, path: str | Path) -> None:
    rows = bounds.rows()
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.7g}" if isinstance(v, float) else v) for k, v in row.items()})
