"""Truncated multi-scale expansions for the coupled reaction-diffusion system.

Three regimes carry an expansion:

* Case IV (``mu`` and ``epsilon/mu`` small): outer terms ``U_ij`` on ``x``,
  layer terms on ``x/mu`` (tilde) and ``x/epsilon`` (hat) at both ends,
  weighted by ``mu^i (epsilon/mu)^j``.
* Case II (only ``epsilon/mu`` small): outer terms from ``mu``-scale scalar
  problems, hat layers, weighted by ``(epsilon/mu)^i``.
* Case III (only ``mu`` small): outer terms and coupled tilde layers,
  weighted by ``mu^i``.

Case I has no expansion; its decomposition is the reference solution itself.
Right-endpoint layers are always obtained from the reflected problem
``x -> 1 - x``, whose left layers are the original right layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .funcalc import ChebSeries, cheb_derivative, cheb_fit_adaptive, cheb_zero
from .halfline import (ExpPoly, VectorExpPoly, double_antiderivative, ep_eval,
                       solve_decaying_scalar, solve_decaying_system)
from .refsolve import refine_and_estimate, solve_scalar_bvp_spectral

CASES = ("I", "II", "III", "IV")
MAX_ORDER = 8


class ExpansionError(ArithmeticError):
    pass


def classify_regime(epsilon, mu, threshold=0.1):
    if not (0.0 < epsilon <= mu <= 1.0):
        raise ValueError(f"parameters must satisfy 0 < epsilon <= mu <= 1, got {epsilon}, {mu}")
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    mu_small = mu <= threshold
    ratio_small = epsilon / mu <= threshold
    if mu_small and ratio_small:
        return "IV"
    if ratio_small:
        return "II"
    if mu_small:
        return "III"
    return "I"


def default_orders(case, epsilon, mu):
    """Orders ~ 1/mu and ~ mu/epsilon, capped at 8 per index."""
    m1 = min(MAX_ORDER, max(0, math.ceil(1.0 / mu)))
    m2 = min(MAX_ORDER, max(0, math.ceil(mu / epsilon)))
    if case == "IV":
        return {"m1": m1, "m2": m2}
    if case == "II":
        return {"m": m2}
    if case == "III":
        return {"m": m1}
    return {}


# ---------------------------------------------------------------------------
# small helpers


def _zero_pair_cheb():
    z = cheb_zero()
    return (z, z)


def _solve_pointwise(p, rhs):
    """Chebyshev fits of ``A(x)^{-1} rhs(x)``; ``rhs`` returns shape (n, 2)."""
    def solved(x):
        return np.linalg.solve(p.A(x), rhs(x)[..., None])[..., 0]

    u = cheb_fit_adaptive(lambda x: solved(x)[:, 0])
    v = cheb_fit_adaptive(lambda x: solved(x)[:, 1])
    return u, v


def _stack(*fns):
    return lambda x: np.stack([np.broadcast_to(np.asarray(f(x), dtype=float), np.shape(x)) for f in fns], axis=-1)


def _is_zero_cheb(*ss):
    return all(s.is_zero() for s in ss)


def _apply(M, V):
    """Constant matrix times a VectorExpPoly."""
    u, v = V
    return VectorExpPoly(M[0, 0] * u + M[0, 1] * v, M[1, 0] * u + M[1, 1] * v)


def _at0(e):
    return float(ep_eval(e, 0.0))


# ---------------------------------------------------------------------------
# expansion containers


@dataclass(frozen=True)
class ExpansionCaseIV:
    m1: int
    m2: int
    outer: dict
    tilde_left: dict
    hat_left: dict
    tilde_right: dict
    hat_right: dict
    resolution_limited: bool = False
    taylor_left: np.ndarray = None
    taylor_right: np.ndarray = None
    case: str = field(default="IV", init=False)

    def outer_term(self, i, j):
        return self.outer.get((i, j), _zero_pair_cheb())

    def layer_term(self, table, i, j):
        tag = {"tilde_left": "tilde-left", "hat_left": "hat-left",
               "tilde_right": "tilde-right", "hat_right": "hat-right"}[table]
        z = ExpPoly.zero(tag)
        return getattr(self, table).get((i, j), (z, z))

    def indices(self):
        return [(i, j) for i in range(self.m1 + 1) for j in range(self.m2 + 1)]


@dataclass(frozen=True)
class ExpansionCaseII:
    m: int
    mu: float
    outer: dict
    hat_left: dict
    hat_right: dict
    outer_error: float = 0.0
    resolution_limited: bool = False
    taylor_left: np.ndarray = None
    taylor_right: np.ndarray = None
    case: str = field(default="II", init=False)

    def outer_term(self, i):
        return self.outer.get(i, _zero_pair_cheb())

    def indices(self):
        return list(range(self.m + 1))


@dataclass(frozen=True)
class ExpansionCaseIII:
    m: int
    ratio: float
    outer: dict
    tilde_left: dict
    tilde_right: dict
    resolution_limited: bool = False
    taylor_left: np.ndarray = None
    taylor_right: np.ndarray = None
    case: str = field(default="III", init=False)

    def outer_term(self, i):
        return self.outer.get(i, _zero_pair_cheb())

    def indices(self):
        return list(range(self.m + 1))


@dataclass(frozen=True)
class ExpansionCaseI:
    reference: object
    error_estimate: float
    case: str = field(default="I", init=False)


# ---------------------------------------------------------------------------
# Case IV


def _outer_case_iv(p, m1, m2):
    outer = {}
    limited = False
    for i in range(m1 + 1):
        for j in range(m2 + 1):
            if (i, j) == (0, 0):
                rhs = p.F
            else:
                uu = outer.get((i - 2, j - 2), _zero_pair_cheb())[0]
                vv = outer.get((i - 2, j), _zero_pair_cheb())[1]
                if _is_zero_cheb(uu, vv):
                    outer[(i, j)] = _zero_pair_cheb()
                    continue
                rhs = _stack(cheb_derivative(uu, 2), cheb_derivative(vv, 2))
            u, v = _solve_pointwise(p, rhs)
            limited |= not (u.resolved and v.resolved)
            outer[(i, j)] = (u, v)
    return outer, limited


def _layers_case_iv(At, bvals, m1, m2, side):
    """Left-endpoint tilde/hat chains for Taylor data ``At`` and outer values ``bvals``."""
    tt, ht = f"tilde-{side}", f"hat-{side}"
    A0 = At[0]
    a11, a12, a21, a22 = A0[0, 0], A0[0, 1], A0[1, 0], A0[1, 1]
    d = (a11 * a22 - a12 * a21) / a11
    r = a21 / a11
    zt, zh = ExpPoly.zero(tt), ExpPoly.zero(ht)
    tu, tv, hu, hv = {}, {}, {}, {}

    def get(table, i, j, z):
        return table.get((i, j), z) if i >= 0 and j >= 0 else z

    for j in range(m2 + 1):
        for i in range(m1 + 1):
            u0, v0 = bvals[(i, j)]
            # tilde v, reduced scalar problem
            rhs = -r * get(tu, i, j - 2, zt).derivative(2)
            for k in range(1, i + 1):
                Ak = At[k]
                rhs = rhs + ((r * Ak[0, 0] - Ak[1, 0]) * get(tu, i - k, j, zt)
                             + (r * Ak[0, 1] - Ak[1, 1]) * get(tv, i - k, j, zt)).mul_monomial(k)
            hv_ij = get(hv, i, j, zh)
            tv[(i, j)] = solve_decaying_scalar(d, rhs, -(v0 + _at0(hv_ij)))
            # tilde u, algebraic elimination
            acc = -a12 * tv[(i, j)] + get(tu, i, j - 2, zt).derivative(2)
            for k in range(1, i + 1):
                Ak = At[k]
                acc = acc - (Ak[0, 0] * get(tu, i - k, j, zt) + Ak[0, 1] * get(tv, i - k, j, zt)).mul_monomial(k)
            tu[(i, j)] = acc * (1.0 / a11)
            # hat u
            rhs = -a12 * hv_ij
            for k in range(1, min(i, j) + 1):
                Ak = At[k]
                rhs = rhs - (Ak[0, 0] * get(hu, i - k, j - k, zh)
                             + Ak[0, 1] * get(hv, i - k, j - k, zh)).mul_monomial(k)
            hu[(i, j)] = solve_decaying_scalar(a11, rhs, -(u0 + _at0(tu[(i, j)])))
            hv.setdefault((i, j), zh)
            # hat v two levels up
            if j + 2 <= m2:
                acc = zh
                for k in range(0, min(i, j) + 1):
                    Ak = At[k]
                    acc = acc + (Ak[1, 0] * get(hu, i - k, j - k, zh)
                                 + Ak[1, 1] * get(hv, i - k, j - k, zh)).mul_monomial(k)
                hv[(i, j + 2)] = double_antiderivative(acc)
    tilde = {key: (tu[key], tv[key]) for key in tu}
    hat = {key: (hu[key], hv[key]) for key in hu}
    return tilde, hat


def build_case_iv(p, m1, m2):
    if m1 < 0 or m2 < 0:
        raise ValueError("orders must be nonnegative")
    outer, limited = _outer_case_iv(p, m1, m2)
    order = max(m1, 1)
    left_vals = {k: (float(u(0.0)), float(v(0.0))) for k, (u, v) in outer.items()}
    right_vals = {k: (float(u(1.0)), float(v(1.0))) for k, (u, v) in outer.items()}
    At_L, At_R = p.taylor_matrices(order), p.reflected().taylor_matrices(order)
    tl, hl = _layers_case_iv(At_L, left_vals, m1, m2, "left")
    tr, hr = _layers_case_iv(At_R, right_vals, m1, m2, "right")
    return ExpansionCaseIV(m1, m2, outer, tl, hl, tr, hr, limited, At_L, At_R)


# ---------------------------------------------------------------------------
# Case II


def _hat_step_case_ii(At, i, m, bc_u, hu, hv, tag):
    a11, a12 = At[0][0, 0], At[0][0, 1]
    z = ExpPoly.zero(tag)
    rhs = -a12 * hv.get(i, z)
    for k in range(1, i + 1):
        Ak = At[k]
        rhs = rhs - (Ak[0, 0] * hu.get(i - k, z) + Ak[0, 1] * hv.get(i - k, z)).mul_monomial(k)
    hu[i] = solve_decaying_scalar(a11, rhs, bc_u)
    hv.setdefault(i, z)
    if i + 2 <= m:
        acc = z
        for k in range(0, i + 1):
            Ak = At[k]
            acc = acc + (Ak[1, 0] * hu.get(i - k, z) + Ak[1, 1] * hv.get(i - k, z)).mul_monomial(k)
        hv[i + 2] = double_antiderivative(acc)


def build_case_ii(p, m):
    if m < 0:
        raise ValueError("order must be nonnegative")
    mu = p.mu
    mu2 = mu * mu
    order = max(m, 1)
    scale = mu ** np.arange(order + 1)
    At_L = p.taylor_matrices(order) * scale[:, None, None]
    At_R = p.reflected().taylor_matrices(order) * scale[:, None, None]
    a11, a12, a21, a22 = p.coefficients

    def c_red(x):
        return (a22(x) * a11(x) - a12(x) * a21(x)) / a11(x)

    outer = {}
    hu_L, hv_L, hu_R, hv_R = {}, {}, {}, {}
    worst = 0.0
    limited = False
    zL, zR = ExpPoly.zero("hat-left"), ExpPoly.zero("hat-right")
    for i in range(m + 1):
        u_prev = outer.get(i - 2, _zero_pair_cheb())[0]
        upp = cheb_derivative(u_prev, 2)
        f_i = p.f if i == 0 else (lambda x: np.zeros_like(x))
        g_i = p.g if i == 0 else (lambda x: np.zeros_like(x))

        def forcing_u(x, f_i=f_i, upp=upp):
            return f_i(x) + mu2 * upp(x)

        def rhs_v(x, g_i=g_i, forcing_u=forcing_u):
            return g_i(x) - a21(x) / a11(x) * forcing_u(x)

        bc0 = -_at0(hv_L.get(i, zL))
        bc1 = -_at0(hv_R.get(i, zR))
        probe = np.linspace(0.0, 1.0, 65)
        if not np.any(rhs_v(probe)) and bc0 == 0.0 and bc1 == 0.0:
            v_i = cheb_zero()
        else:
            v_i, est = solve_scalar_bvp_spectral(c_red, rhs_v, mu, bc0, bc1)
            worst = max(worst, est)
            limited |= not v_i.resolved
        if v_i.is_zero() and not np.any(forcing_u(probe)):
            u_i = cheb_zero()
        else:
            u_i = cheb_fit_adaptive(lambda x, v_i=v_i, forcing_u=forcing_u:
                                    (forcing_u(x) - a12(x) * v_i(x)) / a11(x))
            limited |= not u_i.resolved
        outer[i] = (u_i, v_i)
        _hat_step_case_ii(At_L, i, m, -float(u_i(0.0)), hu_L, hv_L, "hat-left")
        _hat_step_case_ii(At_R, i, m, -float(u_i(1.0)), hu_R, hv_R, "hat-right")
    hat_left = {i: (hu_L[i], hv_L[i]) for i in range(m + 1)}
    hat_right = {i: (hu_R[i], hv_R[i]) for i in range(m + 1)}
    return ExpansionCaseII(m, mu, outer, hat_left, hat_right, worst, limited, At_L, At_R)


# ---------------------------------------------------------------------------
# Case III


def _tilde_chain_case_iii(At, ratio, bvals, m, tag):
    nu_sq = ratio * ratio
    B = At[0]
    terms = {}
    for i in range(m + 1):
        rhs = VectorExpPoly.zero(tag)
        for n in range(i):
            rhs = rhs + (-_apply(At[i - n], terms[n])).mul_monomial(i - n)
        terms[i] = solve_decaying_system(nu_sq, B, rhs, (-bvals[i][0], -bvals[i][1]))
    return {i: (V.u_comp, V.v_comp) for i, V in terms.items()}


def build_case_iii(p, m):
    if m < 0:
        raise ValueError("order must be nonnegative")
    ratio = p.epsilon / p.mu
    outer = {}
    limited = False
    for i in range(m + 1):
        if i == 0:
            rhs = p.F
        else:
            uu, vv = outer.get(i - 2, _zero_pair_cheb())
            if _is_zero_cheb(uu, vv):
                outer[i] = _zero_pair_cheb()
                continue
            d2u, d2v = cheb_derivative(uu, 2), cheb_derivative(vv, 2)
            rhs = _stack(lambda x, d2u=d2u: ratio * ratio * d2u(x), d2v)
        u, v = _solve_pointwise(p, rhs)
        limited |= not (u.resolved and v.resolved)
        outer[i] = (u, v)
    order = max(m, 1)
    left = {i: (float(u(0.0)), float(v(0.0))) for i, (u, v) in outer.items()}
    right = {i: (float(u(1.0)), float(v(1.0))) for i, (u, v) in outer.items()}
    At_L, At_R = p.taylor_matrices(order), p.reflected().taylor_matrices(order)
    tl = _tilde_chain_case_iii(At_L, ratio, left, m, "tilde-left")
    tr = _tilde_chain_case_iii(At_R, ratio, right, m, "tilde-right")
    return ExpansionCaseIII(m, ratio, outer, tl, tr, limited, At_L, At_R)


def build_case_i(p, n_mesh=64):
    ref, est = refine_and_estimate(p, n_mesh)
    return ExpansionCaseI(ref, est)


def build_expansion(p, case, m1=None, m2=None, m=None, n_mesh=64):
    """Dispatch on the case label with the documented default orders."""
    if case == "IV":
        return build_case_iv(p, 2 if m1 is None else m1, 2 if m2 is None else m2)
    if case == "II":
        return build_case_ii(p, 3 if m is None else m)
    if case == "III":
        return build_case_iii(p, 3 if m is None else m)
    if case == "I":
        return build_case_i(p, n_mesh)
    raise ValueError(f"unknown case {case!r}")


# ---------------------------------------------------------------------------
# assembled decomposition


@dataclass(frozen=True)
class SmoothPart:
    u: ChebSeries
    v: ChebSeries

    def __call__(self, x, k=0):
        u, v = cheb_derivative(self.u, k), cheb_derivative(self.v, k)
        return np.stack([u(x), v(x)], axis=-1)


@dataclass(frozen=True)
class LayerPart:
    """Layer sum in the stretched variable ``x/width`` or ``(1 - x)/width``."""

    u: ExpPoly
    v: ExpPoly
    width: float
    side: str

    def __call__(self, x, k=0):
        x = np.asarray(x, dtype=float)
        if self.side == "left":
            s, factor = x / self.width, self.width ** -k
        else:
            s, factor = (1.0 - x) / self.width, (-1.0 / self.width) ** k
        s = np.maximum(s, 0.0)
        return factor * np.stack([self.u.derivative(k)(s), self.v.derivative(k)(s)], axis=-1)


@dataclass(frozen=True)
class GridPart:
    """Cubic-spline interpolant of nodal values (Case I pass-through)."""

    x: np.ndarray
    values: np.ndarray

    def __call__(self, x, k=0):
        spline = CubicSpline(self.x, self.values, axis=0)
        return spline(np.asarray(x, dtype=float), k)


@dataclass(frozen=True)
class Decomposition:
    case: str
    epsilon: float
    mu: float
    smooth: object
    layers: dict
    orders: dict

    def components(self):
        return {"smooth": self.smooth, **self.layers}

    def __call__(self, x, k=0):
        return self.evaluate(x, k)

    def evaluate(self, x, k=0):
        out = self.smooth(x, k)
        for part in self.layers.values():
            out = out + part(x, k)
        return out


def _weighted_cheb(pairs):
    """Sum ``w * (u, v)`` over ``(w, (u, v))`` pairs into one coefficient array each."""
    n = max((len(s.coeffs) for _, uv in pairs for s in uv), default=1)
    acc = [np.zeros(n), np.zeros(n)]
    for w, uv in pairs:
        for c, s in enumerate(uv):
            acc[c][:len(s.coeffs)] += w * s.coeffs
    return ChebSeries(acc[0]), ChebSeries(acc[1])


def _weighted_layer(pairs, tag):
    u = ExpPoly.zero(tag)
    v = ExpPoly.zero(tag)
    for w, (a, b) in pairs:
        u = u + w * a
        v = v + w * b
    return u, v


def assemble_decomposition(expansion, p):
    eps, mu = p.epsilon, p.mu
    case = expansion.case
    if case == "I":
        ref = expansion.reference
        return Decomposition("I", eps, mu, GridPart(ref.x, ref.values), {}, {})
    if case == "IV":
        ratio = eps / mu
        idx = expansion.indices()
        w = {(i, j): mu ** i * ratio ** j for i, j in idx}
        smooth = SmoothPart(*_weighted_cheb([(w[k], expansion.outer_term(*k)) for k in idx]))
        layers = {}
        for table, width, side in (("tilde_left", mu, "left"), ("hat_left", eps, "left"),
                                   ("tilde_right", mu, "right"), ("hat_right", eps, "right")):
            tag = table.replace("_", "-")
            u, v = _weighted_layer([(w[k], expansion.layer_term(table, *k)) for k in idx], tag)
            layers[table] = LayerPart(u, v, width, side)
        return Decomposition("IV", eps, mu, smooth, layers, {"m1": expansion.m1, "m2": expansion.m2})
    idx = expansion.indices()
    if case == "II":
        base, width, tables = eps / mu, eps, (("hat_left", "left"), ("hat_right", "right"))
    else:
        base, width, tables = mu, mu, (("tilde_left", "left"), ("tilde_right", "right"))
    w = {i: base ** i for i in idx}
    smooth = SmoothPart(*_weighted_cheb([(w[i], expansion.outer_term(i)) for i in idx]))
    layers = {}
    for table, side in tables:
        tag = table.replace("_", "-")
        terms = getattr(expansion, table)
        z = (ExpPoly.zero(tag), ExpPoly.zero(tag))
        u, v = _weighted_layer([(w[i], terms.get(i, z)) for i in idx], tag)
        layers[table] = LayerPart(u, v, width, side)
    return Decomposition(case, eps, mu, smooth, layers, {"m": expansion.m})


# ---------------------------------------------------------------------------
# term dump


def _cheb_json(s):
    return [float(c) for c in s.coeffs]


def dump_terms(expansion, checks=None):
    """JSON-ready dictionary of every term of an expansion."""
    doc = {"case": expansion.case}
    if expansion.case == "IV":
        doc["orders"] = {"m1": expansion.m1, "m2": expansion.m2}
        doc["outer"] = [
            {"i": i, "j": j, "u": _cheb_json(u), "v": _cheb_json(v)}
            for (i, j), (u, v) in sorted(expansion.outer.items())
        ]
        for table in ("tilde_left", "hat_left", "tilde_right", "hat_right"):
            doc[table] = [
                {"i": i, "j": j, "u": a.to_json(), "v": b.to_json()}
                for (i, j), (a, b) in sorted(getattr(expansion, table).items())
            ]
    elif expansion.case in ("II", "III"):
        doc["orders"] = {"m": expansion.m}
        doc["outer"] = [
            {"i": i, "u": _cheb_json(u), "v": _cheb_json(v)}
            for i, (u, v) in sorted(expansion.outer.items())
        ]
        tables = ("hat_left", "hat_right") if expansion.case == "II" else ("tilde_left", "tilde_right")
        for table in tables:
            doc[table] = [
                {"i": i, "u": a.to_json(), "v": b.to_json()}
                for i, (a, b) in sorted(getattr(expansion, table).items())
            ]
    else:
        doc["orders"] = {}
        doc["reference_error_estimate"] = expansion.error_estimate
    doc["resolution_limited"] = bool(getattr(expansion, "resolution_limited", False))
    if checks is not None:
        doc["checks"] = checks
    return doc
