"""Norms, residuals, structural invariants and decay fits.

Everything here measures objects built elsewhere: decompositions are
compared with reference solutions, expansion tables are checked against
their defining recurrences, and sweep results are condensed into fitted
decay rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .expansion import assemble_decomposition, build_case_iv
from .funcalc import positivity_data, probe_grid
from .halfline import HalfLineError
from .refsolve import GridFunction, shishkin_mesh

BC_TOL = 1e-9
RECURRENCE_TOL = 1e-8
HALFLINE_SAMPLES = np.linspace(0.0, 10.0, 50)


@dataclass(frozen=True)
class LayerRates:
    """Endpoint decay data; ``a_lower``/``a_upper`` are (left, right) pairs."""

    a_lower: tuple
    a_upper: tuple
    beta_left: float
    beta_right: float
    beta0: float


def layer_rates(p):
    lo, hi = [], []
    for x in (0.0, 1.0):
        A = p.A(np.array(x))
        det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        pair = (float(A[0, 0]), float(det / A[0, 0]))
        lo.append(min(pair))
        hi.append(max(pair))
    return LayerRates(tuple(lo), tuple(hi), math.sqrt(float(p.a11(0.0))),
                      math.sqrt(float(p.a11(1.0))), p.alpha)


# ---------------------------------------------------------------------------
# norms


def _quad(x, y):
    return float(simpson(y, x=x))


def energy_norm(U, epsilon, mu, alpha, x=None):
    """Energy norm of a GridFunction or of a callable ``U(x, k)`` with shape (n, 2).

    Grid functions are differenced; callables supply exact derivatives and
    are sampled on ``x`` (a Shishkin mesh for ``epsilon``, ``mu`` by default).
    """
    if isinstance(U, GridFunction):
        x = U.x
        vals = np.asarray(U.values, dtype=float)
        der = np.gradient(vals, x, axis=0, edge_order=2)
    else:
        if x is None:
            x = shishkin_mesh(epsilon, mu, 512).nodes
        vals = U(x, 0)
        der = U(x, 1)
    h1_u, h1_v = _quad(x, der[:, 0] ** 2), _quad(x, der[:, 1] ** 2)
    l2 = _quad(x, vals[:, 0] ** 2 + vals[:, 1] ** 2)
    total = epsilon ** 2 * h1_u + mu ** 2 * h1_v + alpha ** 2 * l2
    return math.sqrt(max(total, 0.0))


def l2_norm(x, values):
    return math.sqrt(max(_quad(x, np.asarray(values, dtype=float) ** 2), 0.0))


def apriori_bound(p, x=None):
    """``alpha^-1 sqrt(|f|^2 + |g|^2)`` in L2(0, 1)."""
    x = np.linspace(0.0, 1.0, 2049) if x is None else x
    F = p.F(x)
    return math.sqrt(_quad(x, F[:, 0] ** 2) + _quad(x, F[:, 1] ** 2)) / p.alpha


def weighted_l2_norm(w, beta):
    """``sqrt(int_0^inf e^{2 beta s} w(s)^2 ds)`` in closed form."""
    if w.is_zero():
        return 0.0
    if beta >= min(r.real for r in w.rates()):
        raise HalfLineError(f"weighted norm diverges: beta={beta} is not below every decay rate")
    # w = Re(sum c s^k e^{-r s}) = (1/2) sum over the terms and their conjugates
    parts = []
    for r, c in w.terms:
        parts.append((r, c))
        parts.append((np.conj(r), np.conj(c)))
    total = 0.0 + 0.0j
    for r1, c1 in parts:
        for r2, c2 in parts:
            rate = r1 + r2 - 2.0 * beta
            prod = np.convolve(c1, c2)
            k = np.arange(len(prod))
            fact = np.array([math.factorial(int(n)) for n in k], dtype=float)
            total += np.sum(prod * fact / rate ** (k + 1))
    return math.sqrt(max(0.25 * total.real, 0.0))


# ---------------------------------------------------------------------------
# residuals of a decomposition


def sample_grid(epsilon, mu, sample=200):
    """Uniform in ``x/epsilon`` and ``x/mu`` near both ends, uniform in ``x`` inside."""
    layer = np.linspace(0.0, 20.0, sample)
    left = np.concatenate([epsilon * layer, mu * layer, np.linspace(0.0, 1.0, sample)])
    left = left[(left >= 0.0) & (left <= 1.0)]
    return np.unique(np.concatenate([left, 1.0 - left]))


def residual_sup(p, d, sample=200):
    x = sample_grid(p.epsilon, p.mu, sample)
    D, D2 = d(x, 0), d(x, 2)
    E = np.array([p.epsilon ** 2, p.mu ** 2])
    R = -E * D2 + np.einsum("nij,nj->ni", p.A(x), D) - p.F(x)
    return float(np.max(np.abs(R)))


def remainder_energy(p, d, reference):
    """Energy norm of ``reference - d`` on the reference mesh."""
    w = reference.values - d(reference.x, 0)
    return energy_norm(GridFunction(reference.mesh, w), p.epsilon, p.mu, p.alpha)


def boundary_mismatch(d):
    return float(np.max(np.abs(d(np.array([0.0, 1.0]), 0))))


# ---------------------------------------------------------------------------
# structural invariants


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    magnitude: float
    tolerance: float

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed),
                "magnitude": float(self.magnitude), "tolerance": float(self.tolerance)}


def _cheb_scale(*series):
    return max((float(np.max(np.abs(s.coeffs))) for s in series), default=0.0)


def _zero_check(name, pairs):
    mag = max((_cheb_scale(*uv) for uv in pairs), default=0.0)
    return Check(name, mag == 0.0, mag, 0.0)


def _bc_check(name, rows):
    """``rows`` holds tuples of boundary values that must sum to zero."""
    worst = 0.0
    for vals in rows:
        scale = max(1.0, max(abs(v) for v in vals))
        worst = max(worst, abs(sum(vals)) / scale)
    return Check(name, worst <= BC_TOL, worst, BC_TOL)


def _ep_residual(residual, terms):
    """Residual ExpPoly sampled on the half-line, relative to its ingredients."""
    s = HALFLINE_SAMPLES
    scale = max([1.0] + [float(np.max(np.abs(t.eval_complex(s)))) for t in terms])
    return float(np.max(np.abs(residual.eval_complex(s)))) / scale


def _sum_products(At, pairs, row, ks):
    """``sum_k s^k (A_k[row, 0] a_k + A_k[row, 1] b_k)`` for ``(k, (a, b))``."""
    acc = None
    for k, (a, b) in zip(ks, pairs):
        term = (At[k][row, 0] * a + At[k][row, 1] * b).mul_monomial(k)
        acc = term if acc is None else acc + term
    return acc


def _inner_residuals_iv(exp, table_t, table_h, At):
    worst = 0.0
    for i, j in exp.indices():
        tu = lambda a, b: exp.layer_term(table_t, a, b)
        hu = lambda a, b: exp.layer_term(table_h, a, b)
        ks = list(range(i + 1))
        pairs = [tu(i - k, j) for k in ks]
        prev = tu(i, j - 2) if j >= 2 else None
        r_u = _sum_products(At, pairs, 0, ks)
        if prev is not None:
            r_u = r_u - prev[0].derivative(2)
        r_v = _sum_products(At, pairs, 1, ks) - pairs[0][1].derivative(2)
        ingredients = [t for pr in pairs for t in pr]
        worst = max(worst, _ep_residual(r_u, ingredients), _ep_residual(r_v, ingredients))
        ks = list(range(min(i, j) + 1))
        pairs = [hu(i - k, j - k) for k in ks]
        ingredients = [t for pr in pairs for t in pr]
        r_u = _sum_products(At, pairs, 0, ks) - pairs[0][0].derivative(2)
        worst = max(worst, _ep_residual(r_u, ingredients))
        if j + 2 <= exp.m2:
            up = hu(i, j + 2)[1]
            r_v = _sum_products(At, pairs, 1, ks) - up.derivative(2)
            worst = max(worst, _ep_residual(r_v, ingredients + [up]))
    return worst


def _inner_residuals_ii(terms, At, m):
    worst = 0.0
    for i in range(m + 1):
        ks = list(range(i + 1))
        pairs = [terms[i - k] for k in ks]
        ingredients = [t for pr in pairs for t in pr]
        r_u = _sum_products(At, pairs, 0, ks) - terms[i][0].derivative(2)
        worst = max(worst, _ep_residual(r_u, ingredients))
        if i + 2 <= m:
            up = terms[i + 2][1]
            r_v = _sum_products(At, pairs, 1, ks) - up.derivative(2)
            worst = max(worst, _ep_residual(r_v, ingredients + [up]))
    return worst


def _inner_residuals_iii(terms, At, ratio, m):
    worst = 0.0
    for i in range(m + 1):
        ks = list(range(i + 1))
        pairs = [terms[i - k] for k in ks]
        ingredients = [t for pr in pairs for t in pr]
        r_u = _sum_products(At, pairs, 0, ks) - ratio ** 2 * terms[i][0].derivative(2)
        r_v = _sum_products(At, pairs, 1, ks) - terms[i][1].derivative(2)
        worst = max(worst, _ep_residual(r_u, ingredients), _ep_residual(r_v, ingredients))
    return worst


def _outer_residual(p, rows):
    """``rows`` yields (u, v, rhs_u(x), rhs_v(x), extra_v(x)) per term."""
    x = probe_grid()
    A = p.A(x)
    worst = 0.0
    for u, v, ru, rv, extra_v in rows:
        U = np.stack([u(x), v(x)], axis=-1)
        AU = np.einsum("nij,nj->ni", A, U)
        res_u = AU[:, 0] - ru
        res_v = AU[:, 1] + extra_v - rv
        scale = max(1.0, np.max(np.abs(AU)), np.max(np.abs(ru)), np.max(np.abs(rv)),
                    np.max(np.abs(extra_v)))
        worst = max(worst, float(max(np.max(np.abs(res_u)), np.max(np.abs(res_v))) / scale))
    return worst


def _outer_rows_iv(exp, p):
    x = probe_grid()
    zero = np.zeros_like(x)
    F = p.F(x)
    for i, j in exp.indices():
        u, v = exp.outer_term(i, j)
        if (i, j) == (0, 0):
            ru, rv = F[:, 0], F[:, 1]
        else:
            ru = exp.outer_term(i - 2, j - 2)[0].derivative(2)(x) if i >= 2 and j >= 2 else zero
            rv = exp.outer_term(i - 2, j)[1].derivative(2)(x) if i >= 2 else zero
        yield u, v, ru, rv, zero


def _outer_rows_iii(exp, p):
    x = probe_grid()
    zero = np.zeros_like(x)
    F = p.F(x)
    r2 = exp.ratio ** 2
    for i in exp.indices():
        u, v = exp.outer_term(i)
        if i == 0:
            ru, rv = F[:, 0], F[:, 1]
        elif i >= 2:
            pu, pv = exp.outer_term(i - 2)
            ru, rv = r2 * pu.derivative(2)(x), pv.derivative(2)(x)
        else:
            ru, rv = zero, zero
        yield u, v, ru, rv, zero


def _outer_rows_ii(exp, p):
    x = probe_grid()
    zero = np.zeros_like(x)
    F = p.F(x)
    mu2 = exp.mu ** 2
    for i in exp.indices():
        u, v = exp.outer_term(i)
        ru = F[:, 0] if i == 0 else zero.copy()
        if i >= 2:
            ru = ru + mu2 * exp.outer_term(i - 2)[0].derivative(2)(x)
        rv = F[:, 1] if i == 0 else zero
        yield u, v, ru, rv, -mu2 * v.derivative(2)(x)


def structural_check(expansion, p=None):
    """Evaluate the invariants of an expansion; ``p`` enables outer residuals."""
    checks = []
    case = expansion.case
    if case == "IV":
        idx = expansion.indices()
        checks.append(_zero_check("outer zero for j > i",
                                  [expansion.outer_term(i, j) for i, j in idx if j > i]))
        checks.append(_zero_check("outer zero for odd i or j",
                                  [expansion.outer_term(i, j) for i, j in idx if i % 2 or j % 2]))
        for side, x0 in (("left", 0.0), ("right", 1.0)):
            hat = getattr(expansion, f"hat_{side}")
            tilde = getattr(expansion, f"tilde_{side}")
            mag = max((hat[(i, j)][1].magnitude() for i, j in idx if j <= 1), default=0.0)
            checks.append(Check(f"hat v zero for j in {{0, 1}} ({side})", mag == 0.0, mag, 0.0))
            for c, comp in enumerate("uv"):
                rows = [(float(expansion.outer_term(i, j)[c](x0)), float(tilde[(i, j)][c](0.0)),
                         float(hat[(i, j)][c](0.0))) for i, j in idx]
                checks.append(_bc_check(f"boundary cancellation {comp} ({side})", rows))
            At = getattr(expansion, f"taylor_{side}")
            if At is not None:
                r = _inner_residuals_iv(expansion, f"tilde_{side}", f"hat_{side}", At)
                checks.append(Check(f"inner recurrence residual ({side})", r <= RECURRENCE_TOL, r, RECURRENCE_TOL))
        if p is not None:
            r = _outer_residual(p, _outer_rows_iv(expansion, p))
            checks.append(Check("outer recurrence residual", r <= RECURRENCE_TOL, r, RECURRENCE_TOL))
    elif case == "II":
        idx = expansion.indices()
        for side, x0 in (("left", 0.0), ("right", 1.0)):
            hat = getattr(expansion, f"hat_{side}")
            mag = max(hat[i][1].magnitude() for i in idx if i <= 1)
            checks.append(Check(f"hat v zero for i in {{0, 1}} ({side})", mag == 0.0, mag, 0.0))
            for c, comp in enumerate("uv"):
                rows = [(float(expansion.outer_term(i)[c](x0)), float(hat[i][c](0.0))) for i in idx]
                checks.append(_bc_check(f"boundary cancellation {comp} ({side})", rows))
            At = getattr(expansion, f"taylor_{side}")
            if At is not None:
                r = _inner_residuals_ii(hat, At, expansion.m)
                checks.append(Check(f"inner recurrence residual ({side})", r <= RECURRENCE_TOL, r, RECURRENCE_TOL))
        if p is not None:
            # v_i carries the spectral solver's error, so its tolerance is looser
            r = _outer_residual(p, _outer_rows_ii(expansion, p))
            tol = max(RECURRENCE_TOL, 1e-6)
            checks.append(Check("outer recurrence residual", r <= tol, r, tol))
    elif case == "III":
        idx = expansion.indices()
        checks.append(_zero_check("outer zero for odd i",
                                  [expansion.outer_term(i) for i in idx if i % 2]))
        for side, x0 in (("left", 0.0), ("right", 1.0)):
            tilde = getattr(expansion, f"tilde_{side}")
            for c, comp in enumerate("uv"):
                rows = [(float(expansion.outer_term(i)[c](x0)), float(tilde[i][c](0.0))) for i in idx]
                checks.append(_bc_check(f"boundary cancellation {comp} ({side})", rows))
            At = getattr(expansion, f"taylor_{side}")
            if At is not None:
                r = _inner_residuals_iii(tilde, At, expansion.ratio, expansion.m)
                checks.append(Check(f"inner recurrence residual ({side})", r <= RECURRENCE_TOL, r, RECURRENCE_TOL))
        if p is not None:
            r = _outer_residual(p, _outer_rows_iii(expansion, p))
            checks.append(Check("outer recurrence residual", r <= RECURRENCE_TOL, r, RECURRENCE_TOL))
    return checks


# ---------------------------------------------------------------------------
# positivity, fits, probes


def positivity_check(p):
    """``(alpha, details)``; raises PositivityError naming the violating x."""
    alpha, details = positivity_data(*p.coefficients)
    return alpha, details


def decay_fit(xs, ys, model="exp-reciprocal"):
    """Least-squares fit in log space; returns ``(rate, prefactor, r_squared)``.

    ``exp-reciprocal``: y = C exp(-b x), rate b.  ``power``: y = C x^p, rate p.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 3 or len(xs) != len(ys):
        raise ValueError("decay_fit needs at least 3 (x, y) points")
    if np.any(ys <= 0) or not np.all(np.isfinite(ys)):
        raise ValueError("decay_fit needs positive finite y values")
    ly = np.log(ys)
    if model == "exp-reciprocal":
        t = xs
    elif model == "power":
        if np.any(xs <= 0):
            raise ValueError("power model needs positive x values")
        t = np.log(xs)
    else:
        raise ValueError(f"unknown model {model!r}")
    slope, intercept = np.polyfit(t, ly, 1)
    fitted = slope * t + intercept
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum((ly - fitted) ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 * len(ly) else 1.0 - ss_res / ss_tot
    rate = -slope if model == "exp-reciprocal" else slope
    if abs(rate) < 1e-13:
        rate = 0.0
    return float(rate), float(math.exp(intercept)), float(r2)


def derivative_growth_probe(p, reference, n_max=3):
    """Differenced derivative norms ``|u^(n)| + |v^(n)|`` and their scaled ratios."""
    if not 0 <= n_max <= 3:
        raise ValueError("n_max must lie in 0..3")
    est = reference.meta.get("error_estimate")
    if est is None or est > 1e-6:
        raise ValueError(f"reference not resolved (error estimate {est}); need <= 1e-6")
    x = reference.x
    vals = np.asarray(reference.values, dtype=float)
    out = []
    for n in range(n_max + 1):
        norm = l2_norm(x, vals[:, 0]) + l2_norm(x, vals[:, 1])
        ratio = norm / max(n, 1.0 / p.epsilon) ** n
        out.append((n, norm, ratio))
        vals = np.gradient(vals, x, axis=0, edge_order=2)
    return out


def hat_v_scaling(p, ratios, mu, m1=2, m2=2, xmax=20.0, samples=401):
    """``sup |hat-v layer sum| / (epsilon/mu)^2`` over ``[0, xmax]`` per ratio."""
    s = np.linspace(0.0, xmax, samples)
    out = []
    for r in ratios:
        q = p.with_params(r * mu, mu)
        d = assemble_decomposition(build_case_iv(q, m1, m2), q)
        vhat = d.layers["hat_left"].v
        out.append(float(np.max(np.abs(vhat(s)))) / r ** 2)
    return out


def layer_decay_samples(a_lower, n=40):
    """Logarithmic sample of ``[0, 40 / a_lower]`` for layer decay checks."""
    return np.concatenate([[0.0], np.geomspace(1e-3, 40.0 / a_lower, n - 1)])
