"""Probabilities of axis-aligned boxes under a centred multivariate normal.

All group-sequential quantities in this package reduce to probabilities of
the form ``P(lower < Z < upper)`` with ``Z ~ N(mean, corr)``.  Once ANOVA and
ANCOVA statistics are mixed across stages the statistics no longer have
independent increments, so these are evaluated directly as box
probabilities rather than by recursive numerical integration.

Dimension 1 uses the normal CDF, dimension 2 Genz's bivariate algorithm
(Drezner-Wesolowsky with Gauss-Legendre rules, accurate to ~1e-15), and
higher dimensions Genz's sequential conditioning transform integrated with a
randomised Kronecker lattice (square roots of primes, baker-periodised) and
8 independent random shifts.  The lattice is extended by doubling until the
estimated error (3 standard errors across shifts) drops below ``tol``.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DimensionMismatch, NotPositiveSemidefinite, ValidationError

__all__ = [
    "Box",
    "Look",
    "MVNResult",
    "as_correlation",
    "audit_log",
    "cholesky",
    "crossing_probs",
    "rect_prob",
    "rect_prob_detail",
    "union_reject_prob",
]

log = logging.getLogger(__name__)

TAIL = 8.5
MAX_DIM = 16
N_SHIFTS = 8
MAX_POINTS = 2**22
INITIAL_POINTS = 2**7  # per shift
ERROR_FACTOR = 3.0

_SYM_TOL = 1e-12
_PSD_TOL = 1e-10
_DEGENERATE_VAR = 1e-12
_MERGE_CORR = 1.0 - 1e-12

_PRIMES = np.array([2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53])
_KRONECKER = np.sqrt(_PRIMES) % 1.0


@dataclass(frozen=True)
class MVNResult:
    prob: float
    error: float
    n_points: int
    dim: int
    lower: tuple[float, ...] = field(default=(), repr=False)
    upper: tuple[float, ...] = field(default=(), repr=False)


_AUDIT: contextvars.ContextVar[list | None] = contextvars.ContextVar(
    "hybridgst_mvn_audit", default=None
)


@contextlib.contextmanager
def audit_log() -> Iterator[list[MVNResult]]:
    """Collect every box probability evaluated inside the ``with`` block."""
    entries: list[MVNResult] = []
    token = _AUDIT.set(entries)
    try:
        yield entries
    finally:
        _AUDIT.reset(token)


def as_correlation(corr) -> np.ndarray:
    """Validate a correlation matrix and return a symmetrised float copy."""
    c = np.array(corr, dtype=float, ndmin=2)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError("correlation matrix must be square", shape=c.shape)
    d = c.shape[0]
    if d > MAX_DIM:
        raise ValidationError(
            f"dimension {d} exceeds the supported maximum {MAX_DIM}", dim=d
        )
    if not np.all(np.isfinite(c)):
        raise ValidationError("correlation matrix has non-finite entries")
    asym = float(np.max(np.abs(c - c.T)))
    if asym > _SYM_TOL:
        raise ValidationError("correlation matrix is not symmetric", asymmetry=asym)
    if np.max(np.abs(np.diag(c) - 1.0)) > _SYM_TOL:
        raise ValidationError("correlation matrix must have unit diagonal")
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    min_eig = float(np.linalg.eigvalsh(c)[0])
    if min_eig < -_PSD_TOL:
        raise NotPositiveSemidefinite(
            "correlation matrix is not positive semidefinite", min_eigenvalue=min_eig
        )
    return c


def cholesky(corr) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``corr`` and the diagonal jitter that was needed.

    Singular (but PSD) matrices are factored after adding the smallest jitter
    from ``0, 1e-14, ..., 1e-10`` that makes the factorisation succeed.
    """
    c = as_correlation(corr)
    eye = np.eye(c.shape[0])
    for jitter in (0.0, 1e-14, 1e-13, 1e-12, 1e-11, 1e-10):
        try:
            return np.linalg.cholesky(c + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveSemidefinite("matrix could not be factored with jitter <= 1e-10")


@dataclass(frozen=True)
class Box:
    """Open box ``lower < z < upper``; infinite endpoints allowed."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise DimensionMismatch("lower and upper differ in length")
        if any(not a < b for a, b in zip(lo, hi)):
            raise ValidationError("box requires lower < upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)


def rect_prob(corr, lower, upper=None, *, mean=None, tol: float = 1e-6, seed: int = 0) -> float:
    """P(lower < Z < upper) for Z ~ N(mean, corr).

    ``lower`` may also be a :class:`Box`, in which case ``upper`` is omitted.
    """
    return rect_prob_detail(corr, lower, upper, mean=mean, tol=tol, seed=seed).prob


def rect_prob_detail(corr, lower, upper=None, *, mean=None, tol: float = 1e-6, seed: int = 0) -> MVNResult:
    if isinstance(lower, Box):
        box = lower
    else:
        box = Box(tuple(np.ravel(lower)), tuple(np.ravel(upper)))
    if not 1e-9 <= tol <= 1e-2:
        raise ValidationError("tol must lie in [1e-9, 1e-2]", tol=tol)
    c = as_correlation(corr)
    if box.dim != c.shape[0]:
        raise DimensionMismatch(
            "region dimension does not match correlation matrix",
            region_dim=box.dim, corr_dim=c.shape[0],
        )
    lo = np.asarray(box.lower)
    hi = np.asarray(box.upper)
    if mean is not None:
        mu = np.asarray(mean, dtype=float)
        if mu.shape != lo.shape:
            raise DimensionMismatch("mean has the wrong length")
        lo, hi = lo - mu, hi - mu
    return _box_prob(c, lo, hi, tol, seed)


def _box_prob(c: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float, seed: int) -> MVNResult:
    """Box probability on an already validated correlation matrix.

    Empty boxes are allowed here and give probability zero.
    """
    lo = np.where(lo <= -TAIL, -np.inf, np.where(lo >= TAIL, np.inf, lo))
    hi = np.where(hi >= TAIL, np.inf, np.where(hi <= -TAIL, -np.inf, hi))
    result = _reduced_prob(c, lo, hi, tol, seed)
    entries = _AUDIT.get()
    if entries is not None:
        result = MVNResult(result.prob, result.error, result.n_points, result.dim,
                           tuple(lo.tolist()), tuple(hi.tolist()))
        entries.append(result)
    return result


def _reduced_prob(c, lo, hi, tol, seed) -> MVNResult:
    if np.any(lo >= hi):
        return MVNResult(0.0, 0.0, 0, 0)
    keep = ~(np.isneginf(lo) & np.isposinf(hi))
    c, lo, hi = c[np.ix_(keep, keep)], lo[keep], hi[keep]
    c, lo, hi = _merge_collinear(c, lo, hi)
    if np.any(lo >= hi):
        return MVNResult(0.0, 0.0, 0, 0)
    d = lo.size
    if d == 0:
        return MVNResult(1.0, 0.0, 0, 0)
    if d == 1:
        return MVNResult(float(_interval(lo[0], hi[0])), 0.0, 0, 1)
    if d == 2:
        return MVNResult(_bvn_rect(lo, hi, c[0, 1]), 1e-15, 0, 2)
    if d == 3:
        return _tvn_rect(c, lo, hi)
    return _genz(c, lo, hi, tol, seed)


def _interval(lo, hi):
    # evaluate in the tail where the subtraction is accurate
    return np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def _merge_collinear(c, lo, hi):
    """Collapse coordinates that are (anti-)perfectly correlated."""
    d = lo.size
    drop = np.zeros(d, dtype=bool)
    lo, hi = lo.copy(), hi.copy()
    for i in range(d):
        if drop[i]:
            continue
        for j in range(i + 1, d):
            if drop[j]:
                continue
            r = c[i, j]
            if r >= _MERGE_CORR:
                lo[i], hi[i] = max(lo[i], lo[j]), min(hi[i], hi[j])
                drop[j] = True
            elif r <= -_MERGE_CORR:
                lo[i], hi[i] = max(lo[i], -hi[j]), min(hi[i], -lo[j])
                drop[j] = True
    if not drop.any():
        return c, lo, hi
    keep = ~drop
    return c[np.ix_(keep, keep)], lo[keep], hi[keep]


# --- bivariate ---------------------------------------------------------------

def _half_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    pos = x > 0
    return x[pos], w[pos]


_GL = {6: _half_legendre(6), 12: _half_legendre(12), 20: _half_legendre(20)}
_TWO_PI = 2.0 * math.pi


def _bvnu(h: np.ndarray, k: np.ndarray, r: float) -> np.ndarray:
    """P(X > h, Y > k) for a standard bivariate normal with correlation r."""
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    out = np.zeros(h.shape)
    fin = np.isfinite(h) & np.isfinite(k)
    hneg = np.isneginf(h) & ~np.isposinf(k)
    out[hneg] = np.where(np.isneginf(k[hneg]), 1.0, ndtr(-k[hneg]))
    kneg = np.isneginf(k) & np.isfinite(h)
    out[kneg] = ndtr(-h[kneg])
    if fin.any():
        out[fin] = _bvnu_finite(h[fin], k[fin], r)
    return out


def _bvnu_finite(h: np.ndarray, k: np.ndarray, r: float) -> np.ndarray:
    ar = abs(r)
    x, w = _GL[6 if ar < 0.3 else 12 if ar < 0.75 else 20]
    hk = h * k
    if ar < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r) / 2.0
        total = np.zeros_like(h)
        for sn in (np.sin(asr * (1.0 - x)), np.sin(asr * (1.0 + x))):
            total += np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn)) @ w
        return np.clip(total * asr / _TWO_PI + ndtr(-h) * ndtr(-k), 0.0, 1.0)

    if r < 0:
        k = -k
        hk = -hk
    bvn = np.zeros_like(h)
    if ar < 1.0:
        as_ = (1.0 - r) * (1.0 + r)
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -(bs / as_ + hk) / 2.0
        with np.errstate(over="ignore", under="ignore"):
            bvn = np.where(
                asr > -100.0,
                a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                                   + c * d * as_ * as_ / 5.0),
                0.0,
            )
            b = np.sqrt(bs)
            sp = math.sqrt(_TWO_PI) * ndtr(-b / a)
            bvn = np.where(
                hk > -100.0,
                bvn - np.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0),
                bvn,
            )
            a /= 2.0
            for sign in (-1.0, 1.0):
                xs = (a + a * sign * x) ** 2
                rs = np.sqrt(1.0 - xs)
                asr2 = -(bs[:, None] / xs + hk[:, None]) / 2.0
                spx = 1.0 + c[:, None] * xs * (1.0 + d[:, None] * xs)
                ep = np.exp(-hk[:, None] * xs / (2.0 * (1.0 + rs) ** 2)) / rs
                term = np.where(asr2 > -100.0, np.exp(asr2) * (ep - spx), 0.0)
                bvn = bvn + a * (term @ w)
        bvn = -bvn / _TWO_PI
    if r > 0:
        bvn = bvn + ndtr(-np.maximum(h, k))
    else:
        gap = np.where(h < 0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
        bvn = np.where(h >= k, -bvn, gap - bvn)
    return np.clip(bvn, 0.0, 1.0)


def _bvn_rect(lo: np.ndarray, hi: np.ndarray, r: float) -> float:
    return float(_bvn_rect_many(lo[None, :], hi[None, :], r)[0])


def _bvn_rect_many(lo: np.ndarray, hi: np.ndarray, r: float) -> np.ndarray:
    """Rectangle probabilities for rows of ``lo``/``hi`` (shape (m, 2))."""
    h = np.concatenate([lo[:, 0], hi[:, 0], lo[:, 0], hi[:, 0]])
    k = np.concatenate([lo[:, 1], lo[:, 1], hi[:, 1], hi[:, 1]])
    v = _bvnu(h, k, r).reshape(4, -1)
    return np.clip(v[0] - v[1] - v[2] + v[3], 0.0, 1.0)


# --- trivariate: one-dimensional quadrature over an exact bivariate ---------

_GL12 = np.polynomial.legendre.leggauss(12)
_TVN_RANGE = 8.5


def _tvn_rect(c, lo, hi) -> MVNResult:
    """Condition on one coordinate and integrate the bivariate remainder.

    The pivot is the coordinate whose conditioning leaves the largest
    conditional standard deviations, so the integrand is as smooth as
    possible; composite 12-point Gauss-Legendre panels no wider than that
    standard deviation then give errors far below 1e-9.
    """
    r2 = np.minimum(c * c, 1.0)
    np.fill_diagonal(r2, 0.0)
    i = int(np.argmin(r2.max(axis=1)))
    j, k = [m for m in range(3) if m != i]
    rj, rk = c[i, j], c[i, k]
    sj, sk = math.sqrt(1.0 - rj * rj), math.sqrt(1.0 - rk * rk)
    a = max(lo[i], -_TVN_RANGE)
    b = min(hi[i], _TVN_RANGE)
    if a >= b:
        return MVNResult(0.0, 0.0, 0, 3)
    width = b - a
    h = min(1.0, max(min(sj, sk), 0.02))
    n_panels = max(1, math.ceil(width / h))
    edges = np.linspace(a, b, n_panels + 1)
    half = np.diff(edges) / 2.0
    mid = edges[:-1] + half
    x, w = _GL12
    z = (mid[:, None] + half[:, None] * x).ravel()
    wz = (half[:, None] * w).ravel() * np.exp(-0.5 * z * z) / math.sqrt(_TWO_PI)
    clo = np.column_stack([(lo[j] - rj * z) / sj, (lo[k] - rk * z) / sk])
    chi = np.column_stack([(hi[j] - rj * z) / sj, (hi[k] - rk * z) / sk])
    rc = (c[j, k] - rj * rk) / (sj * sk)
    if abs(rc) >= _MERGE_CORR:
        # remaining pair is (anti-)collinear given the pivot
        if rc < 0:
            clo[:, 1], chi[:, 1] = -chi[:, 1], -clo[:, 1]
        inner = _interval(np.maximum(clo[:, 0], clo[:, 1]), np.minimum(chi[:, 0], chi[:, 1]))
        inner = np.where(np.maximum(clo[:, 0], clo[:, 1]) < np.minimum(chi[:, 0], chi[:, 1]), inner, 0.0)
    else:
        inner = _bvn_rect_many(clo, chi, rc)
    p = float(wz @ inner)
    return MVNResult(min(1.0, max(0.0, p)), 1e-10, z.size, 3)


# --- Genz sequential conditioning with a randomised lattice -----------------

def _prioritized_cholesky(c, a, b):
    """Cholesky factor with Genz-Bretz variable ordering.

    At each step the variable with the smallest conditional interval
    probability (given the truncated expectations of the variables already
    chosen) is placed next.  Variables whose conditional variance vanishes get
    a zero column and are handled as indicators by the integrand.
    """
    d = a.size
    c, a, b = c.copy(), a.copy(), b.copy()
    L = np.zeros((d, d))
    y = np.zeros(d)
    min_sd = math.sqrt(_DEGENERATE_VAR)
    for i in range(d):
        s = L[i:, :i] @ y[:i]
        v = np.diag(c)[i:] - np.einsum("ij,ij->i", L[i:, :i], L[i:, :i])
        sd = np.sqrt(np.maximum(v, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            pr = np.where(sd > min_sd, _interval((a[i:] - s) / sd, (b[i:] - s) / sd), np.inf)
        j = i + int(np.argmin(pr))
        if j != i:
            c[[i, j]] = c[[j, i]]
            c[:, [i, j]] = c[:, [j, i]]
            a[[i, j]], b[[i, j]] = a[[j, i]], b[[j, i]]
            L[[i, j]] = L[[j, i]]
        vi = v[j - i]
        if vi <= _DEGENERATE_VAR:
            L[i:, i] = 0.0
            y[i] = 0.0
            continue
        L[i, i] = math.sqrt(vi)
        L[i + 1:, i] = (c[i + 1:, i] - L[i + 1:, :i] @ L[i, :i]) / L[i, i]
        si = float(L[i, :i] @ y[:i])
        lo = (a[i] - si) / L[i, i]
        hi = (b[i] - si) / L[i, i]
        p = float(_interval(lo, hi))
        if p > 1e-300:
            phi_lo = math.exp(-lo * lo / 2) if np.isfinite(lo) else 0.0
            phi_hi = math.exp(-hi * hi / 2) if np.isfinite(hi) else 0.0
            y[i] = (phi_lo - phi_hi) / (math.sqrt(_TWO_PI) * p)
        else:
            y[i] = lo if np.isfinite(lo) else hi
    return L, a, b


def _genz_integrand(L, a, b, w):
    m = w.shape[0]
    d = a.size
    y = np.zeros((m, d))
    lo = np.full(m, ndtr(a[0]))
    hi = np.full(m, ndtr(b[0]))
    f = hi - lo
    for i in range(1, d):
        u = lo + w[:, i - 1] * (hi - lo)
        y[:, i - 1] = np.clip(ndtri(np.clip(u, 1e-300, 1.0)), -9.0, 9.0)
        s = y[:, :i] @ L[i, :i]
        lii = L[i, i]
        if lii > 0.0:
            lo = ndtr((a[i] - s) / lii)
            hi = ndtr((b[i] - s) / lii)
            f = f * (hi - lo)
        else:
            f = f * ((s > a[i]) & (s < b[i]))
            lo = np.zeros(m)
            hi = np.ones(m)
    return f


def _genz(c, lo, hi, tol, seed) -> MVNResult:
    L, a, b = _prioritized_cholesky(c, lo, hi)
    d = a.size
    q = _KRONECKER[: d - 1]
    shifts = np.random.default_rng(seed).random((N_SHIFTS, d - 1))
    sums = np.zeros(N_SHIFTS)
    n = 0
    m = INITIAL_POINTS
    while True:
        idx = np.arange(n + 1, n + m + 1, dtype=float)[:, None] * q
        w = (idx[None, :, :] + shifts[:, None, :]) % 1.0
        w = np.abs(2.0 * w - 1.0).reshape(-1, d - 1)
        sums += _genz_integrand(L, a, b, w).reshape(N_SHIFTS, m).sum(axis=1)
        n += m
        means = sums / n
        est = float(means.mean())
        err = ERROR_FACTOR * float(means.std(ddof=1)) / math.sqrt(N_SHIFTS)
        if err <= tol:
            break
        if N_SHIFTS * n * 2 > MAX_POINTS:
            log.warning("box probability reached the point cap with error %.2e > tol %.2e", err, tol)
            break
        m = n
    return MVNResult(min(1.0, max(0.0, est)), err, N_SHIFTS * n, d)


# --- group-sequential crossing events ---------------------------------------

@dataclass(frozen=True)
class Look:
    """One interim look: statistic ``index`` continues while lower < Z < upper."""

    index: int
    lower: float
    upper: float


def _check_looks(looks: Sequence[Look], dim: int) -> None:
    seen = set()
    for look in looks:
        if not 0 <= look.index < dim:
            raise DimensionMismatch("look references a statistic outside the matrix",
                                    index=look.index, dim=dim)
        if look.index in seen:
            raise ValidationError("two looks reference the same statistic", index=look.index)
        if not look.lower < look.upper:
            raise ValidationError("look continuation region is empty", index=look.index)
        seen.add(look.index)


def crossing_probs(corr, looks: Sequence[Look], *, mean=None, tol: float = 1e-6,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-look probabilities of first crossing above / below.

    Entry k of the first array is ``P(Z_k >= upper_k, continue at looks < k)``;
    the second array holds the matching lower-tail probabilities.
    """
    c = as_correlation(corr)
    _check_looks(looks, c.shape[0])
    mu = np.zeros(c.shape[0]) if mean is None else np.asarray(mean, dtype=float)
    up = np.zeros(len(looks))
    down = np.zeros(len(looks))
    for k, look in enumerate(looks):
        idx = [lk.index for lk in looks[: k + 1]]
        sub = c[np.ix_(idx, idx)]
        lo = np.array([lk.lower for lk in looks[:k]] + [look.upper]) - mu[idx]
        hi = np.array([lk.upper for lk in looks[:k]] + [np.inf]) - mu[idx]
        up[k] = _box_prob(sub, lo, hi, tol, seed).prob
        lo[-1], hi[-1] = -np.inf, look.lower - mu[look.index]
        down[k] = _box_prob(sub, lo, hi, tol, seed).prob
    return up, down


def union_reject_prob(corr, looks: Sequence[Look], *, mean=None, tol: float = 1e-6,
                      seed: int = 0) -> float:
    """Probability of crossing at any look, summed over looks and both tails."""
    up, down = crossing_probs(corr, looks, mean=mean, tol=tol, seed=seed)
    return float(up.sum() + down.sum())


def continue_prob(corr, looks: Sequence[Look], *, mean=None, tol: float = 1e-6,
                  seed: int = 0) -> float:
    """Probability of staying inside every look's continuation region."""
    c = as_correlation(corr)
    _check_looks(looks, c.shape[0])
    idx = [lk.index for lk in looks]
    mu = np.zeros(c.shape[0]) if mean is None else np.asarray(mean, dtype=float)
    lo = np.array([lk.lower for lk in looks]) - mu[idx]
    hi = np.array([lk.upper for lk in looks]) - mu[idx]
    return _box_prob(c[np.ix_(idx, idx)], lo, hi, tol, seed).prob
