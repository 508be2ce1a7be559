"""ANOVA and ANCOVA treatment-effect estimates for a two-arm trial.

Arms are coded ``a = +1`` (treatment) and ``a = -1`` (control), so the
regression coefficient on ``a`` is half the difference in arm means and the
target effect ``Delta`` is on that half-difference scale.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import RankDeficientDesign, ValidationError

__all__ = [
    "FitResult",
    "RhoEstimate",
    "SubjectRecord",
    "TrialData",
    "estimate_rho",
    "fit_ancova",
    "fit_anova",
    "influence_values",
    "read_trial_csv",
    "write_trial_csv",
    "standardized_stat",
]

log = logging.getLogger(__name__)

RHO_FLOOR = 1e-6
_RANK_TOL = 1e-12


class SubjectRecord(NamedTuple):
    y: float
    a: int
    x: tuple[float, ...]
    stage: int = 1


@dataclass(frozen=True)
class TrialData:
    """Columnar trial data: outcome, arm, covariates and enrolment stage."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    stage: np.ndarray
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        n = y.size
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        stage = np.asarray(self.stage if self.stage is not None else np.ones(n), dtype=int).reshape(-1)
        if a.size != n or x.shape[0] != n or stage.size != n:
            raise ValidationError("columns have different lengths",
                                  n_y=n, n_a=a.size, n_x=x.shape[0], n_stage=stage.size)
        if not np.all(np.isin(a, (-1.0, 1.0))):
            raise ValidationError("arm indicator must be -1 or +1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValidationError("outcomes and covariates must be finite")
        if n and stage.min() < 1:
            raise ValidationError("stages are numbered from 1")
        for name, arr in (("y", y), ("a", a), ("x", x), ("stage", stage)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "TrialData":
        recs = list(records)
        if not recs:
            raise ValidationError("no records")
        p = len(recs[0].x)
        if any(len(r.x) != p for r in recs):
            raise ValidationError("records have differing covariate counts")
        return cls(
            y=[r.y for r in recs],
            a=[r.a for r in recs],
            x=np.array([r.x for r in recs], dtype=float).reshape(len(recs), p),
            stage=[r.stage for r in recs],
        )

    def records(self) -> list[SubjectRecord]:
        return [SubjectRecord(float(y), int(a), tuple(map(float, x)), int(s))
                for y, a, x, s in zip(self.y, self.a, self.x, self.stage)]

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_stages(self) -> int:
        return int(self.stage.max()) if self.n else 0

    def through_stage(self, k: int) -> "TrialData":
        """Cumulative data from stages ``1..k``."""
        keep = self.stage <= k
        return TrialData(self.y[keep], self.a[keep], self.x[keep], self.stage[keep], self.notes)

    def stage_sizes(self) -> list[int]:
        return [int(np.sum(self.stage == k)) for k in range(1, self.n_stages + 1)]


def _as_data(data) -> TrialData:
    return data if isinstance(data, TrialData) else TrialData.from_records(data)


@dataclass(frozen=True)
class FitResult:
    delta_hat: float
    theta_hat: float
    gamma_hat: np.ndarray
    sigma2_hat: float
    n_used: int
    adjusted: bool
    rss: float

    @property
    def se(self) -> float:
        """Standard error of ``delta_hat``."""
        return math.sqrt(self.sigma2_hat / self.n_used)


def _check_arms(data: TrialData, min_n: int) -> None:
    n_pos = int(np.sum(data.a > 0))
    if n_pos == 0 or n_pos == data.n:
        raise ValidationError("both arms must be present", n=data.n, n_treated=n_pos)
    if data.n < min_n:
        raise ValidationError(f"need at least {min_n} subjects", n=data.n)


def fit_anova(data) -> FitResult:
    """Least squares of ``y`` on an intercept and the arm indicator."""
    data = _as_data(data)
    _check_arms(data, 3)
    pos = data.a > 0
    m_pos = float(data.y[pos].mean())
    m_neg = float(data.y[~pos].mean())
    resid = data.y - np.where(pos, m_pos, m_neg)
    rss = float(resid @ resid)
    return FitResult(
        delta_hat=(m_pos - m_neg) / 2.0,
        theta_hat=(m_pos + m_neg) / 2.0,
        gamma_hat=np.zeros(0),
        sigma2_hat=rss / (data.n - 2),
        n_used=data.n,
        adjusted=False,
        rss=rss,
    )


def _ancova_design(data: TrialData) -> np.ndarray:
    xc = data.x - data.x.mean(axis=0)
    return np.column_stack([np.ones(data.n), data.a, xc])


def _collinear_columns(design: np.ndarray) -> list[int]:
    norms = np.linalg.norm(design, axis=0)
    bad = [int(j) for j in np.flatnonzero(norms == 0)]
    scaled = design[:, norms > 0] / norms[norms > 0]
    kept = np.flatnonzero(norms > 0)
    r = np.linalg.qr(scaled, mode="r")
    bad += [int(kept[j]) for j in np.flatnonzero(np.abs(np.diag(r)) < math.sqrt(_RANK_TOL))]
    return sorted(set(bad))


def fit_ancova(data) -> FitResult:
    """Least squares of ``y`` on intercept, arm and mean-centred covariates."""
    data = _as_data(data)
    p = data.p
    if p < 1:
        raise ValidationError("adjusted fit needs at least one covariate")
    _check_arms(data, p + 3)
    design = _ancova_design(data)
    names = ["intercept", "a"] + [f"x{j + 1}" for j in range(p)]
    bad = _collinear_columns(design)
    if bad:
        raise RankDeficientDesign(
            "design matrix is rank deficient",
            collinear_columns=[names[j] for j in bad],
        )
    gram = design.T @ design
    coef = cho_solve(cho_factor(gram, lower=True), design.T @ data.y)
    resid = data.y - design @ coef
    rss = float(resid @ resid)
    return FitResult(
        delta_hat=float(coef[1]),
        theta_hat=float(coef[0]),
        gamma_hat=coef[2:].copy(),
        sigma2_hat=rss / (data.n - p - 2),
        n_used=data.n,
        adjusted=True,
        rss=rss,
    )


def influence_values(data, fit: FitResult) -> np.ndarray:
    """Per-subject influence values ``a * residual`` of the effect estimate.

    Their sample mean is zero and their variance estimates
    ``n * Var(delta_hat)``.
    """
    data = _as_data(data)
    fitted = fit.theta_hat + fit.delta_hat * data.a
    if fit.adjusted:
        fitted = fitted + (data.x - data.x.mean(axis=0)) @ fit.gamma_hat
    return data.a * (data.y - fitted)


@dataclass(frozen=True)
class RhoEstimate:
    rho_hat: float
    sigma_hat: float
    sigma_tilde_hat: float
    clamped: bool = False


def estimate_rho(data) -> RhoEstimate:
    """Ratio of ANCOVA to ANOVA residual standard deviations, clamped to (0, 1]."""
    data = _as_data(data)
    s = math.sqrt(fit_ancova(data).sigma2_hat)
    st = math.sqrt(fit_anova(data).sigma2_hat)
    raw = s / st if st > 0 else 1.0
    rho = min(1.0, max(RHO_FLOOR, raw))
    return RhoEstimate(rho, s, st, clamped=rho != raw)


def standardized_stat(fit: FitResult, null_delta: float = 0.0) -> float:
    if not fit.sigma2_hat > 0:
        raise ValidationError("residual variance is zero; statistic undefined")
    return (fit.delta_hat - null_delta) * math.sqrt(fit.n_used) / math.sqrt(fit.sigma2_hat)


def read_trial_csv(path: str | Path) -> TrialData:
    """Read ``y,a,x1..xp,stage`` comma-separated data.

    The arm column may use ``{-1, 1}`` or ``{0, 1}``; in the latter case 0 is
    mapped to -1 and a note is attached to the returned data.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    x_cols = [h for h in header if h.startswith("x")]
    expected = ["y", "a"] + [f"x{j + 1}" for j in range(len(x_cols))] + ["stage"]
    if header != expected:
        raise ValidationError(f"{path}: header must be {','.join(expected)}", header=header)
    try:
        table = np.array([[float(c) for c in row] for row in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric value ({exc})") from None
    if table.ndim != 2 or table.shape[0] == 0 or table.shape[1] != len(header):
        raise ValidationError(f"{path}: malformed rows")
    a = table[:, 1]
    notes: list[str] = []
    levels = set(np.unique(a).tolist())
    if levels <= {0.0, 1.0} and 0.0 in levels:
        a = np.where(a == 0, -1.0, a)
        notes.append("arm coded {0,1}; 0 mapped to -1")
        log.info("%s: arm coded {0,1}; 0 mapped to -1", path)
    elif not levels <= {-1.0, 1.0}:
        raise ValidationError(f"{path}: arm must be coded {{-1,1}} or {{0,1}}", levels=sorted(levels))
    stage = table[:, -1]
    if np.any(stage != np.round(stage)):
        raise ValidationError(f"{path}: stage must be an integer")
    return TrialData(table[:, 0], a, table[:, 2:-1], stage.astype(int), tuple(notes))


def write_trial_csv(data: TrialData, path: str | Path) -> None:
    """Write data in the layout read by :func:`read_trial_csv`."""
    header = ["y", "a"] + [f"x{j + 1}" for j in range(data.p)] + ["stage"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            writer.writerow([repr(float(data.y[i])), int(data.a[i])]
                            + [repr(float(v)) for v in data.x[i]] + [int(data.stage[i])])
