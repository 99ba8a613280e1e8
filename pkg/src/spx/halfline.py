"""Exp-polynomials on the half-line and closed-form decaying solution operators.

An :class:`ExpPoly` is a finite sum ``sum_m exp(-b_m s) p_m(s)`` with
``Re b_m > 0``.  The class is closed under differentiation, multiplication by
``s^k``, the decaying solution operator of ``-w'' + a^2 w = r`` and the double
antiderivative ``int_s^inf int_t^inf``, so every boundary-layer term of the
expansions is represented exactly by its rates and polynomial coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P

MERGE_REL = 1e-12
RESONANCE_REL = 1e-10
COND_MAX = 1e12
IMAG_REL = 1e-10

SCALE_TAGS = ("tilde-left", "hat-left", "tilde-right", "hat-right")


class HalfLineError(ArithmeticError):
    pass


def _trim(c):
    c = np.asarray(c, dtype=complex)
    nz = np.nonzero(c)[0]
    if len(nz) == 0:
        return np.zeros(0, dtype=complex)
    return c[:nz[-1] + 1].copy()


@dataclass(frozen=True)
class ExpPoly:
    """``terms`` is a tuple of ``(rate, coeffs)``; coeffs run low to high degree."""

    terms: tuple = ()
    scale_tag: str = "tilde-left"

    def __post_init__(self):
        if self.scale_tag not in SCALE_TAGS:
            raise ValueError(f"unknown scale tag {self.scale_tag!r}")
        for rate, _ in self.terms:
            if not rate.real > 0:
                raise HalfLineError(f"rate {rate} does not decay")

    @classmethod
    def build(cls, pairs, scale_tag="tilde-left"):
        """Collect ``(rate, coeffs)`` pairs, merging rates that agree to 1e-12."""
        merged = []
        for rate, coeffs in pairs:
            rate = complex(rate)
            coeffs = _trim(coeffs)
            if len(coeffs) == 0:
                continue
            for k, (r, c) in enumerate(merged):
                if abs(r - rate) <= MERGE_REL * max(abs(r), abs(rate)):
                    merged[k] = (r, P.polyadd(c, coeffs))
                    break
            else:
                merged.append((rate, coeffs))
        merged = [(r, _trim(c)) for r, c in merged]
        merged = [(r, c) for r, c in merged if len(c)]
        merged.sort(key=lambda t: (t[0].real, t[0].imag))
        return cls(tuple(merged), scale_tag)

    @classmethod
    def exp(cls, rate, coeff=1.0, scale_tag="tilde-left"):
        return cls.build([(rate, [coeff])], scale_tag)

    @classmethod
    def zero(cls, scale_tag="tilde-left"):
        return cls((), scale_tag)

    # -- algebra ----------------------------------------------------------

    def retag(self, scale_tag):
        return ExpPoly(self.terms, scale_tag)

    def is_zero(self):
        return not self.terms

    def __add__(self, other):
        if not isinstance(other, ExpPoly):
            return NotImplemented
        return ExpPoly.build(self.terms + other.terms, self.scale_tag)

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, c):
        if c == 0:
            return ExpPoly.zero(self.scale_tag)
        return ExpPoly(tuple((r, p * c) for r, p in self.terms), self.scale_tag)

    __rmul__ = __mul__

    def rates(self):
        return [r for r, _ in self.terms]

    def degree(self):
        return max((len(c) - 1 for _, c in self.terms), default=-1)

    def magnitude(self):
        """Sum of absolute coefficient values; a cheap scale for tolerances."""
        return float(sum(np.abs(c).sum() for _, c in self.terms))

    # -- evaluation -------------------------------------------------------

    def eval_complex(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape, dtype=complex)
        for rate, coeffs in self.terms:
            with np.errstate(under="ignore", over="ignore", invalid="ignore"):
                e = np.exp(-rate * s)
                term = e * P.polyval(s, coeffs)
            # exp underflow times a huge polynomial is still zero
            term = np.where(e == 0, 0.0, term)
            out = out + term
        return out

    def __call__(self, s):
        return ep_eval(self, s)

    def derivative(self, k=1):
        return ep_derivative(self, k)

    def mul_monomial(self, k):
        return ep_mul_monomial(self, k)

    # -- serialization ----------------------------------------------------

    def to_json(self):
        return [
            {
                "rate_re": float(r.real),
                "rate_im": float(r.imag),
                "coeffs_re": [float(v) for v in c.real],
                "coeffs_im": [float(v) for v in c.imag],
                "scale_tag": self.scale_tag,
            }
            for r, c in self.terms
        ]

    @classmethod
    def from_json(cls, items, scale_tag=None):
        tag = scale_tag or (items[0]["scale_tag"] if items else "tilde-left")
        pairs = [
            (complex(t["rate_re"], t["rate_im"]),
             np.asarray(t["coeffs_re"]) + 1j * np.asarray(t["coeffs_im"]))
            for t in items
        ]
        return cls.build(pairs, tag)


@dataclass(frozen=True)
class VectorExpPoly:
    u_comp: ExpPoly
    v_comp: ExpPoly

    def __post_init__(self):
        if self.u_comp.scale_tag != self.v_comp.scale_tag:
            raise ValueError("component scale tags differ")

    @property
    def scale_tag(self):
        return self.u_comp.scale_tag

    @classmethod
    def zero(cls, scale_tag="tilde-left"):
        return cls(ExpPoly.zero(scale_tag), ExpPoly.zero(scale_tag))

    def __add__(self, other):
        return VectorExpPoly(self.u_comp + other.u_comp, self.v_comp + other.v_comp)

    def __mul__(self, c):
        return VectorExpPoly(self.u_comp * c, self.v_comp * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __iter__(self):
        return iter((self.u_comp, self.v_comp))

    def __call__(self, s):
        return np.stack([self.u_comp(s), self.v_comp(s)], axis=-1)

    def derivative(self, k=1):
        return VectorExpPoly(self.u_comp.derivative(k), self.v_comp.derivative(k))

    def mul_monomial(self, k):
        return VectorExpPoly(self.u_comp.mul_monomial(k), self.v_comp.mul_monomial(k))

    def retag(self, tag):
        return VectorExpPoly(self.u_comp.retag(tag), self.v_comp.retag(tag))

    def to_json(self):
        return {"u": self.u_comp.to_json(), "v": self.v_comp.to_json()}


# ---------------------------------------------------------------------------
# elementary operations


def ep_eval(p, s):
    """Real part of ``p(s)``; the imaginary residue must be round-off."""
    val = p.eval_complex(s)
    if p.terms:
        bound = IMAG_REL * (np.abs(val) + p.magnitude()) + 1e-300
        if np.any(np.abs(val.imag) > bound):
            raise HalfLineError("exp-polynomial has a non-negligible imaginary part")
    return val.real


def ep_derivative(p, k=1):
    if k < 0:
        raise ValueError("k must be nonnegative")
    terms = []
    for rate, c in p.terms:
        for _ in range(k):
            # (e^{-bs} c(s))' = e^{-bs} (c' - b c)
            c = P.polysub(np.append(P.polyder(c), 0.0)[:len(c)], rate * c)
        terms.append((rate, np.asarray(c, dtype=complex)))
    return ExpPoly(tuple(terms), p.scale_tag)


def ep_mul_monomial(p, k):
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return p
    shift = np.zeros(k, dtype=complex)
    return ExpPoly(tuple((r, np.concatenate([shift, c])) for r, c in p.terms), p.scale_tag)


# ---------------------------------------------------------------------------
# solution operators


def _particular_scalar(a, rate, p):
    """Coefficients q with ``-w'' + a^2 w = e^{-rate s} p`` for ``w = e^{-rate s} q``."""
    d = len(p) - 1
    if abs(rate - a) <= RESONANCE_REL * abs(a):
        # 2a q' - q'' = p: solve for r = q', then integrate with q(0) = 0
        r = np.zeros(d + 1, dtype=complex)
        for n in range(d, -1, -1):
            nxt = (n + 1) * r[n + 1] if n + 1 <= d else 0.0
            r[n] = (p[n] + nxt) / (2.0 * a)
        return a, P.polyint(r)
    denom = a * a - rate * rate
    # upper-triangular coefficient system: denom q_n + 2 rate (n+1) q_{n+1} - (n+2)(n+1) q_{n+2} = p_n
    n = np.arange(d + 1)
    M = np.diag(np.full(d + 1, denom, dtype=complex))
    M += np.diag(2.0 * rate * (n[:-1] + 1), 1)
    if d >= 1:
        M += np.diag(-(n[:-2] + 2.0) * (n[:-2] + 1), 2)
    if denom == 0 or np.linalg.cond(M) > COND_MAX:
        raise HalfLineError(f"ill-conditioned coefficient solve for rate {rate}")
    q = np.zeros(d + 3, dtype=complex)
    for n in range(d, -1, -1):
        q[n] = (p[n] - 2.0 * rate * (n + 1) * q[n + 1] + (n + 2) * (n + 1) * q[n + 2]) / denom
    return rate, q[:d + 1]


def solve_decaying_scalar(a_sq, rhs, bc):
    """Decaying solution of ``-w'' + a_sq w = rhs`` on (0, inf) with ``w(0) = bc``."""
    if not a_sq > 0:
        raise HalfLineError("a_sq must be positive")
    a = math.sqrt(a_sq)
    pairs = []
    at_zero = 0.0
    for rate, p in rhs.terms:
        r, q = _particular_scalar(a, rate, p)
        pairs.append((r, q))
        at_zero += q[0]
    pairs.append((a, [bc - at_zero]))
    return ExpPoly.build(pairs, rhs.scale_tag)


def double_antiderivative(rhs):
    """``W(s) = int_s^inf int_t^inf rhs``, so that ``W'' = rhs``."""
    pairs = []
    for rate, p in rhs.terms:
        d = len(p) - 1
        q = np.zeros(d + 3, dtype=complex)
        b2 = rate * rate
        for n in range(d, -1, -1):
            q[n] = (p[n] + 2.0 * rate * (n + 1) * q[n + 1] - (n + 2) * (n + 1) * q[n + 2]) / b2
        pairs.append((rate, q[:d + 1]))
    return ExpPoly.build(pairs, rhs.scale_tag)


def homogeneous_modes(nu_sq, B):
    """Decay rates and mode shapes of ``-diag(nu_sq, 1) U'' + B U = 0``."""
    E = np.diag([nu_sq, 1.0])
    kappa, W = np.linalg.eig(np.linalg.solve(E, np.asarray(B, dtype=float)))
    if np.linalg.cond(W) > COND_MAX:
        raise HalfLineError("degenerate coupling: defective eigenvector matrix")
    lam = np.sqrt(kappa.astype(complex))
    if np.any(lam.real <= 0):
        raise HalfLineError("non-dissipative system: homogeneous rate with nonpositive real part")
    return lam, W.astype(complex), kappa.astype(complex)


def _particular_system(nu_sq, B, rate, Pu, Pv, kappa, lam):
    E = np.diag([nu_sq, 1.0]).astype(complex)
    d = max(len(Pu), len(Pv)) - 1
    D = d
    for km, lm in zip(kappa, lam):
        if abs(rate * rate - km) <= RESONANCE_REL * abs(km):
            rate = lm
            D = d + 1
            break
    K = np.asarray(B, dtype=complex) - rate * rate * E
    n_unk = 2 * (D + 1)
    M = np.zeros((n_unk, n_unk), dtype=complex)
    rhs = np.zeros(n_unk, dtype=complex)
    for n in range(D + 1):
        row = slice(2 * n, 2 * n + 2)
        M[row, 2 * n:2 * n + 2] += K
        if n + 1 <= D:
            M[row, 2 * n + 2:2 * n + 4] += 2.0 * rate * (n + 1) * E
        if n + 2 <= D:
            M[row, 2 * n + 4:2 * n + 6] -= (n + 2) * (n + 1) * E
        if n < len(Pu):
            rhs[2 * n] = Pu[n]
        if n < len(Pv):
            rhs[2 * n + 1] = Pv[n]
    # at exact resonance M is singular by design and lstsq picks a solution
    if D == d and np.linalg.cond(M) > COND_MAX:
        raise HalfLineError(f"ill-conditioned coefficient solve for rate {rate}")
    Q, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    scale = max(np.abs(rhs).max(), 1e-300)
    if np.abs(M @ Q - rhs).max() > 1e-10 * scale * max(1.0, np.abs(M).max()):
        raise HalfLineError(f"ill-conditioned coefficient solve for rate {rate}")
    return rate, Q[0::2], Q[1::2]


def solve_decaying_system(nu_sq, B, rhs, bc):
    """Decaying solution of ``-diag(nu_sq, 1) U'' + B U = rhs`` with ``U(0) = bc``."""
    if not nu_sq > 0:
        raise HalfLineError("nu_sq must be positive")
    lam, W, kappa = homogeneous_modes(nu_sq, B)
    tag = rhs.scale_tag
    u_terms = dict()
    v_terms = dict()
    for rate, c in rhs.u_comp.terms:
        u_terms.setdefault(rate, [c, np.zeros(0)])
    for rate, c in rhs.v_comp.terms:
        for key in u_terms:
            if abs(key - rate) <= MERGE_REL * max(abs(key), abs(rate)):
                u_terms[key][1] = c
                break
        else:
            u_terms[rate] = [np.zeros(0), c]
    u_pairs, v_pairs = [], []
    at_zero = np.zeros(2, dtype=complex)
    for rate, (Pu, Pv) in u_terms.items():
        r, Qu, Qv = _particular_system(nu_sq, B, rate, Pu, Pv, kappa, lam)
        u_pairs.append((r, Qu))
        v_pairs.append((r, Qv))
        at_zero += (Qu[0], Qv[0])
    c = np.linalg.solve(W, np.asarray(bc, dtype=complex) - at_zero)
    for m in range(2):
        u_pairs.append((lam[m], [c[m] * W[0, m]]))
        v_pairs.append((lam[m], [c[m] * W[1, m]]))
    return VectorExpPoly(ExpPoly.build(u_pairs, tag), ExpPoly.build(v_pairs, tag))
