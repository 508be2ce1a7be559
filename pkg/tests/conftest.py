"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import functools
import math

import numpy as np
import pytest

from hybridgst.boundaries import SpendingFunction
from hybridgst.simulation import GeneratorConfig, ScenarioKind, ScenarioSpec, run_cell

POCOCK_SPEND = SpendingFunction("pocock", 0.05)
TABLE_SEED = 20240101


def orthant_2d(r: float) -> float:
    """P(Z1 < 0, Z2 < 0) for a standard bivariate normal with correlation r."""
    return 0.25 + math.asin(r) / (2 * math.pi)


def _gl_nodes(a: float, b: float, panels: int = 6, order: int = 24):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = np.diff(edges) / 2
    mid = (edges[:-1] + edges[1:]) / 2
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def grid_box_prob(corr, lower, upper, panels: int = 6, order: int = 24, cut: float = 9.0) -> float:
    """Box probability by a tensor Gauss-Legendre rule on the normal density.

    Infinite limits are cut at +/-``cut``.  Works for dimensions up to three
    at the default resolution.
    """
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    prec = np.linalg.inv(corr)
    norm = 1.0 / math.sqrt((2 * math.pi) ** d * np.linalg.det(corr))
    axes, weights = [], []
    for lo, hi in zip(lower, upper):
        lo, hi = max(lo, -cut), min(hi, cut)
        if lo >= hi:
            return 0.0
        x, w = _gl_nodes(lo, hi, panels, order)
        axes.append(x)
        weights.append(w)
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = functools.reduce(np.multiply.outer, weights).ravel()
    quad = np.einsum("ij,jk,ik->i", pts, prec, pts)
    return float(norm * np.sum(wts * np.exp(-quad / 2)))


def grid_pocock_size(c: float, t_star) -> float:
    """Two-sided size of flat boundaries ``c`` at looks with fractions ``t_star``."""
    t = np.asarray(t_star, dtype=float)
    corr = np.sqrt(np.minimum.outer(t, t) / np.maximum.outer(t, t))
    total = 0.0
    for k in range(len(t)):
        lo = [-c] * k + [c]
        hi = [c] * k + [math.inf]
        total += 2 * grid_box_prob(corr[: k + 1, : k + 1], lo, hi)
    return total


def mc_box(corr, lower, upper, n_draws: int, seed: int, mean=None, chunk: int = 500_000):
    """Plain Monte Carlo estimate of a box probability and its standard error."""
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    L = np.linalg.cholesky(corr + 1e-13 * np.eye(d))
    rng = np.random.default_rng(seed)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    mu = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    hits = 0
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        z = rng.standard_normal((m, d)) @ L.T + mu
        hits += int(np.count_nonzero(np.all((z > lo) & (z < hi), axis=1)))
        done += m
    p = hits / n_draws
    return p, math.sqrt(max(p * (1 - p), 1.0 / n_draws) / n_draws)


@functools.lru_cache(maxsize=None)
def table_cell(delta: float, rho: float, reps: int = 10_000, n_total: int = 1000):
    """Hybrid spending cell with full inference, shared across test modules."""
    cfg = GeneratorConfig(delta, rho, 1, n_total, 3, seed=TABLE_SEED)
    spec = ScenarioSpec(ScenarioKind.B_III, spending=POCOCK_SPEND)
    return run_cell(cfg, [spec], reps, inference=[ScenarioKind.B_III])


@functools.lru_cache(maxsize=None)
def scenario_cell(delta: float, rho: float, reps: int, n_total: int = 1000, seed: int = 7):
    """All five monitoring scenarios on common data, rejection decisions only."""
    cfg = GeneratorConfig(delta, rho, 1, n_total, 3, seed=seed)
    specs = [ScenarioSpec(k, spending=POCOCK_SPEND) for k in ScenarioKind]
    return run_cell(cfg, specs, reps)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
