"""Layer-adapted finite-difference reference solver.

Second-order three-point central differences on a piecewise-uniform
Shishkin mesh with two transition points per endpoint (an epsilon-width and
a mu-width layer region), solved as one banded system with the unknowns
interleaved ``u_1, v_1, u_2, v_2, ...``.

Also hosts the Chebyshev collocation solver used for the smooth
``mu``-scale problems of the two-scale expansion.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.linalg import solve_banded

from .funcalc import ChebSeries, check_parameters

log = logging.getLogger(__name__)

SIGMA = 2.5
MIN_CELLS = 8


class SolverError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    transitions: tuple = ()
    coalesced: bool = False

    def __post_init__(self):
        x = self.nodes
        if len(x) < MIN_CELLS + 1:
            raise ValueError("a mesh needs at least 8 cells")
        if x[0] != 0.0 or x[-1] != 1.0 or np.any(np.diff(x) <= 0):
            raise ValueError("mesh nodes must increase strictly from 0 to 1")

    @property
    def n_cells(self):
        return len(self.nodes) - 1

    def refined(self):
        """Bisect every cell; the coarse nodes stay nodes of the result."""
        x = self.nodes
        mid = 0.5 * (x[:-1] + x[1:])
        fine = np.empty(2 * len(x) - 1)
        fine[0::2] = x
        fine[1::2] = mid
        return Mesh(fine, self.transitions, self.coalesced)


@dataclass(frozen=True)
class GridFunction:
    """Nodal values on a mesh; ``values`` has shape (n,) or (n, 2)."""

    mesh: Mesh
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.values) != len(self.mesh.nodes):
            raise ValueError("value count must equal node count")

    @property
    def x(self):
        return self.mesh.nodes

    @property
    def u(self):
        return self.values[:, 0]

    @property
    def v(self):
        return self.values[:, 1]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "u", "v"])
        for x, (u, v) in zip(self.x, self.values):
            w.writerow([repr(float(x)), repr(float(u)), repr(float(v))])
        return buf.getvalue()


def shishkin_mesh(epsilon, mu, n_per_region, sigma=SIGMA, rate=1.0):
    """Piecewise-uniform mesh resolving epsilon- and mu-width layers at both ends.

    Layer regions ``[0, t_eps]``, ``[t_eps, t_mu]`` and their mirror images
    get ``n_per_region`` cells each, the interior ``[t_mu, 1 - t_mu]`` gets
    ``4 * n_per_region``; ``N = 8 * n_per_region`` cells in total.  Coinciding
    transition points are coalesced (flagged) and the cells moved to the
    neighbouring region so the node count is unchanged.
    """
    check_parameters(epsilon, mu)
    if rate <= 0:
        raise ValueError("rate must be positive")
    n = int(n_per_region)
    if n < 1:
        raise ValueError("n_per_region must be positive")
    N = 8 * n
    t_eps = min(0.125, sigma * epsilon * math.log(N) / rate)
    t_mu = min(0.25, sigma * mu * math.log(N) / rate)
    coalesced = False
    if t_mu - t_eps <= 1e-14 * t_mu:
        coalesced = True
        breaks = [0.0, t_mu, 1.0 - t_mu, 1.0]
        counts = [2 * n, 4 * n, 2 * n]
    else:
        breaks = [0.0, t_eps, t_mu, 1.0 - t_mu, 1.0 - t_eps, 1.0]
        counts = [n, n, 4 * n, n, n]
    pieces = [np.linspace(a, b, k + 1)[:-1] for a, b, k in zip(breaks[:-1], breaks[1:], counts)]
    nodes = np.concatenate(pieces + [np.array([1.0])])
    return Mesh(nodes, (t_eps, t_mu), coalesced)


def _second_difference(x):
    """Weights (lower, diag, upper) of the nonuniform three-point u'' stencil."""
    h = np.diff(x)
    hl, hr = h[:-1], h[1:]
    s = 2.0 / (hl + hr)
    return s / hl, -s * (1.0 / hl + 1.0 / hr), s / hr


def solve_full_system(p, mesh):
    """Central-difference solution of the coupled system with zero Dirichlet data."""
    x = mesh.nodes
    xi = x[1:-1]
    m = len(xi)
    lo, di, up = _second_difference(x)
    A = p.A(xi)
    F = p.F(xi)
    eps2, mu2 = p.epsilon ** 2, p.mu ** 2
    # banded storage, 2 sub- and 2 super-diagonals on the interleaved unknowns
    ab = np.zeros((5, 2 * m))
    diag_u = -eps2 * di + A[:, 0, 0]
    diag_v = -mu2 * di + A[:, 1, 1]
    ab[2, 0::2] = diag_u
    ab[2, 1::2] = diag_v
    # u_k -> v_k (row 2k, col 2k+1): superdiagonal 1
    ab[1, 1::2] = A[:, 0, 1]
    # v_k -> u_k (row 2k+1, col 2k): subdiagonal 1
    ab[3, 0::2] = A[:, 1, 0]
    # neighbours two apart
    ab[0, 2::2] = -eps2 * up[:-1]
    ab[0, 3::2] = -mu2 * up[:-1]
    ab[4, 0:-2:2] = -eps2 * lo[1:]
    ab[4, 1:-2:2] = -mu2 * lo[1:]
    rhs = np.empty(2 * m)
    rhs[0::2] = F[:, 0]
    rhs[1::2] = F[:, 1]
    try:
        sol = solve_banded((2, 2), ab, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular finite-difference system on {mesh.n_cells} cells: {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise SolverError("finite-difference solve produced non-finite values")
    values = np.zeros((len(x), 2))
    values[1:-1, 0] = sol[0::2]
    values[1:-1, 1] = sol[1::2]
    return GridFunction(mesh, values)


def solve_scalar_bvp(c, rhs, mu, bc0, bc1, mesh):
    """Central differences for ``-mu^2 u'' + c u = rhs`` with ``u(0)=bc0, u(1)=bc1``.

    ``c`` is a callable of x; ``rhs`` is a callable or an array of nodal values.
    """
    x = mesh.nodes
    xi = x[1:-1]
    cv = np.broadcast_to(np.asarray(c(xi), dtype=float), xi.shape)
    if np.any(cv <= 0):
        raise SolverError("nonpositive reaction coefficient")
    rv = rhs(xi) if callable(rhs) else np.asarray(rhs, dtype=float)[1:-1]
    rv = np.array(np.broadcast_to(rv, xi.shape), dtype=float)
    lo, di, up = _second_difference(x)
    mu2 = mu * mu
    ab = np.zeros((3, len(xi)))
    ab[0, 1:] = -mu2 * up[:-1]
    ab[1] = -mu2 * di + cv
    ab[2, :-1] = -mu2 * lo[1:]
    rv[0] += mu2 * lo[0] * bc0
    rv[-1] += mu2 * up[-1] * bc1
    sol = solve_banded((1, 1), ab, rv)
    return GridFunction(mesh, np.concatenate([[bc0], sol, [bc1]]))


def refine_and_estimate(p, base_n, mesh=None):
    """Solve on a Shishkin mesh and on its bisection; return (fine, estimate).

    The estimate is the nodal max-norm difference on the coarse nodes.
    """
    if base_n < 1 or 8 * base_n < MIN_CELLS:
        raise ValueError("base_n too small")
    coarse_mesh = mesh or shishkin_mesh(p.epsilon, p.mu, base_n, rate=p.alpha)
    coarse = solve_full_system(p, coarse_mesh)
    fine = solve_full_system(p, coarse_mesh.refined())
    est = float(np.max(np.abs(fine.values[0::2] - coarse.values)))
    return GridFunction(fine.mesh, fine.values, {"error_estimate": est, "n_cells": fine.mesh.n_cells}), est


def richardson_reference(p, base_n, mesh=None):
    """Richardson-extrapolated solution from three nested bisection levels.

    With solutions ``s0, s1, s2`` on a mesh and its two bisections, the
    extrapolants ``r = s_fine + (s_fine - s_coarse) / 3`` of consecutive
    pairs are compared on the coarsest nodes; that difference is the returned
    estimate (it bounds the error of the coarser extrapolant).  The finer
    extrapolant is returned on the once-refined mesh.
    """
    m0 = mesh or shishkin_mesh(p.epsilon, p.mu, base_n, rate=p.alpha)
    m1 = m0.refined()
    m2 = m1.refined()
    s0, s1, s2 = (solve_full_system(p, m).values for m in (m0, m1, m2))
    r0 = s1[0::2] + (s1[0::2] - s0) / 3.0
    r1 = s2[0::2] + (s2[0::2] - s1) / 3.0
    est = float(np.max(np.abs(r1[0::2] - r0)))
    return GridFunction(m1, r1, {"error_estimate": est, "n_cells": m1.n_cells,
                                 "method": "richardson"}), est


def certified_reference(p, base_n, target, max_n=1 << 17, method="plain"):
    """Double ``base_n`` until the estimate is at most ``target``.

    Returns ``(reference, estimate, converged)``.  Once the estimate grows
    (round-off has overtaken truncation error) the loop stops and the best
    level seen is returned, logged as non-convergent.
    """
    solver = richardson_reference if method == "richardson" else refine_and_estimate
    n = base_n
    best = None
    while True:
        ref, est = solver(p, n)
        if best is not None and est > best[1]:
            log.warning("non-convergent refinement: estimate grew from %.3g to %.3g", best[1], est)
            return best[0], best[1], False
        best = (ref, est)
        if est <= target:
            return ref, est, True
        if 2 * n > max_n:
            return ref, est, False
        n *= 2


# ---------------------------------------------------------------------------
# spectral solver for smooth scalar problems


def cheb_lobatto(n):
    """Chebyshev-Lobatto points on [0, 1] (increasing) and the D matrix there."""
    k = np.arange(n + 1)
    t = -np.cos(np.pi * k / n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** k
    T = np.tile(t, (n + 1, 1)).T
    dT = T - T.T
    D = np.outer(c, 1.0 / c) / (dT + np.eye(n + 1))
    D -= np.diag(D.sum(axis=1))
    # map [-1, 1] -> [0, 1]
    return 0.5 * (t + 1.0), 2.0 * D


def _collocation_solve(c, rhs, mu, bc0, bc1, n):
    x, D = cheb_lobatto(n)
    D2 = D @ D
    L = -mu * mu * D2 + np.diag(np.broadcast_to(np.asarray(c(x), dtype=float), x.shape))
    b = np.array(np.broadcast_to(np.asarray(rhs(x), dtype=float), x.shape))
    L[0] = 0.0
    L[0, 0] = 1.0
    L[-1] = 0.0
    L[-1, -1] = 1.0
    b[0], b[-1] = bc0, bc1
    vals = np.linalg.solve(L, b)
    coeffs = C.chebfit(2.0 * x - 1.0, vals, n)
    return ChebSeries(coeffs, float(np.max(np.abs(coeffs[-max(1, (n + 1) // 10):]))))


def solve_scalar_bvp_spectral(c, rhs, mu, bc0, bc1, tol=1e-9, start=32, max_n=1024):
    """Chebyshev collocation for ``-mu^2 u'' + c u = rhs``; doubles until converged.

    Returns ``(series, error_estimate)``; the estimate compares successive
    resolutions on a fine probe grid.
    """
    probe = np.linspace(0.0, 1.0, 513)
    if np.any(np.asarray(c(probe)) <= 0):
        raise SolverError("nonpositive reaction coefficient")
    n = start
    prev = _collocation_solve(c, rhs, mu, bc0, bc1, n)
    while True:
        n *= 2
        cur = _collocation_solve(c, rhs, mu, bc0, bc1, n)
        est = float(np.max(np.abs(cur(probe) - prev(probe))))
        scale = max(1.0, float(np.max(np.abs(cur(probe)))))
        if est <= 0.01 * tol * scale or n >= max_n:
            break
        prev = cur
    coeffs = cur.coeffs
    big = np.nonzero(np.abs(coeffs) > 1e-15 * np.max(np.abs(coeffs)))[0] if np.any(coeffs) else []
    keep = int(big[-1]) + 1 if len(big) else 1
    series = ChebSeries(coeffs[:keep].copy(), cur.tail_estimate, est <= tol * scale)
    return series, est
