"""Analytic input data: expression trees, Taylor-mode series and Chebyshev fits.

Coefficient functions and right-hand sides are given as small arithmetic
expressions in ``x``.  They are parsed once into an immutable tree that can be

* evaluated on numpy arrays,
* expanded in a truncated power series about a point (Taylor mode, no
  finite differences), and
* reflected, ``x -> 1 - x``, for building right-endpoint layers.

Chebyshev representations on ``[0, 1]`` are thin wrappers around
:mod:`numpy.polynomial.chebyshev`.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

PROBE_POINTS = 1001
ALPHA_MARGIN = 1e-12
CHEB_START = 16
CHEB_MAX = 512
CHEB_TAIL_REL = 1e-12
DIV_LEAD_MIN = 1e-14

FUNCTIONS = ("exp", "sin", "cos")
PROBLEM_FIELDS = ("epsilon", "mu", "a11", "a12", "a21", "a22", "f", "g")


class ExpressionError(ValueError):
    """Raised on malformed expression source.  ``offset`` is 0-based."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class SeriesError(ArithmeticError):
    pass


class ProblemError(ValueError):
    pass


class PositivityError(ProblemError):
    """A(x) fails the pointwise positivity test; ``x`` is the worst probe point."""

    def __init__(self, message, x):
        super().__init__(message)
        self.x = x


# ---------------------------------------------------------------------------
# truncated power series arithmetic


def series_mul(a, b):
    n = len(a)
    return np.convolve(a, b)[:n]


def series_div(a, b):
    if abs(b[0]) < DIV_LEAD_MIN:
        raise SeriesError("division by a series with vanishing leading coefficient")
    n = len(a)
    q = np.zeros(n)
    for k in range(n):
        q[k] = (a[k] - np.dot(b[1:k + 1], q[k - 1::-1][:k])) / b[0]
    return q


def series_exp(a):
    n = len(a)
    y = np.zeros(n)
    y[0] = math.exp(a[0])
    j = np.arange(n)
    for k in range(1, n):
        y[k] = np.dot(j[1:k + 1] * a[1:k + 1], y[k - 1::-1][:k]) / k
    return y


def series_sincos(a):
    n = len(a)
    s = np.zeros(n)
    c = np.zeros(n)
    s[0], c[0] = math.sin(a[0]), math.cos(a[0])
    j = np.arange(n)
    for k in range(1, n):
        ja = j[1:k + 1] * a[1:k + 1]
        s[k] = np.dot(ja, c[k - 1::-1][:k]) / k
        c[k] = -np.dot(ja, s[k - 1::-1][:k]) / k
    return s, c


def series_pow(a, n):
    if n < 0:
        one = np.zeros(len(a))
        one[0] = 1.0
        return series_div(one, series_pow(a, -n))
    result = np.zeros(len(a))
    result[0] = 1.0
    base = a
    while n:
        if n & 1:
            result = series_mul(result, base)
        n >>= 1
        if n:
            base = series_mul(base, base)
    return result


# ---------------------------------------------------------------------------
# expression tree


class Node:
    def evaluate(self, x):
        raise NotImplementedError

    def series(self, center, n):
        """Length-``n`` Taylor coefficients about ``center``."""
        raise NotImplementedError

    def substitute(self, repl):
        """Replace the variable by the tree ``repl``."""
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Node):
    value: float

    def evaluate(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.value)

    def series(self, center, n):
        out = np.zeros(n)
        out[0] = self.value
        return out

    def substitute(self, repl):
        return self

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class Var(Node):
    def evaluate(self, x):
        return np.asarray(x, dtype=float) + 0.0

    def series(self, center, n):
        out = np.zeros(n)
        out[0] = center
        if n > 1:
            out[1] = 1.0
        return out

    def substitute(self, repl):
        return repl

    def __str__(self):
        return "x"


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def evaluate(self, x):
        return -self.arg.evaluate(x)

    def series(self, center, n):
        return -self.arg.series(center, n)

    def substitute(self, repl):
        return Neg(self.arg.substitute(repl))

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, x):
        a = self.left.evaluate(x)
        b = self.right.evaluate(x)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if np.any(b == 0.0):
            raise ZeroDivisionError(f"division by zero in {self}")
        return a / b

    def series(self, center, n):
        a = self.left.series(center, n)
        b = self.right.series(center, n)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return series_mul(a, b)
        return series_div(a, b)

    def substitute(self, repl):
        return BinOp(self.op, self.left.substitute(repl), self.right.substitute(repl))

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int

    def evaluate(self, x):
        b = self.base.evaluate(x)
        if self.exponent < 0 and np.any(b == 0.0):
            raise ZeroDivisionError(f"negative power of zero in {self}")
        return b ** float(self.exponent)

    def series(self, center, n):
        return series_pow(self.base.series(center, n), self.exponent)

    def substitute(self, repl):
        return Pow(self.base.substitute(repl), self.exponent)

    def __str__(self):
        return f"({self.base}^{self.exponent})"


@dataclass(frozen=True)
class Func(Node):
    name: str
    arg: Node

    def evaluate(self, x):
        return getattr(np, self.name)(self.arg.evaluate(x))

    def series(self, center, n):
        a = self.arg.series(center, n)
        if self.name == "exp":
            return series_exp(a)
        s, c = series_sincos(a)
        return s if self.name == "sin" else c

    def substitute(self, repl):
        return Func(self.name, self.arg.substitute(repl))

    def __str__(self):
        return f"{self.name}({self.arg})"


# ---------------------------------------------------------------------------
# parser

_TOKEN = re.compile(r"(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(\S)")


def _tokenize(src):
    tokens = []
    for m in _TOKEN.finditer(src):
        num, name, sym = m.groups()
        if num is not None:
            tokens.append(("num", num, m.start()))
        elif name is not None:
            tokens.append(("name", name, m.start()))
        elif sym in "+-*/^()":
            tokens.append((sym, sym, m.start()))
        else:
            raise ExpressionError(f"unexpected character {sym!r}", m.start())
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    # expr   := term (('+'|'-') term)*
    # term   := unary (('*'|'/') unary)*
    # unary  := '-' unary | '+' unary | power
    # power  := atom ('^' signed_int)?
    # atom   := number | 'x' | 'pi' | 'e' | func '(' expr ')' | '(' expr ')'

    def __init__(self, src):
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None):
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind:
            what = "end of input" if tok[0] == "end" else repr(tok[1])
            raise ExpressionError(f"syntax error: expected {kind!r}, found {what}", tok[2])
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExpressionError(f"syntax error: unexpected {tok[1]!r}", tok[2])
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] in ("*", "/"):
            op = self.take()[0]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind = self.peek()[0]
        if kind == "-":
            self.take()
            return Neg(self.unary())
        if kind == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] != "^":
            return base
        self.take()
        sign = 1
        while self.peek()[0] in ("+", "-"):
            if self.take()[0] == "-":
                sign = -sign
        tok = self.peek()
        if tok[0] != "num" or not re.fullmatch(r"\d+", tok[1]):
            raise ExpressionError("syntax error: exponent must be an integer literal", tok[2])
        self.take()
        return Pow(base, sign * int(tok[1]))

    def atom(self):
        tok = self.peek()
        kind, text, pos = tok
        if kind == "num":
            self.take()
            return Const(float(text))
        if kind == "name":
            self.take()
            if text == "x":
                return Var()
            if text == "pi":
                return Const(math.pi)
            if text == "e":
                return Const(math.e)
            if text in FUNCTIONS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return Func(text, arg)
            raise ExpressionError(f"unknown identifier {text!r}", pos)
        if kind == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExpressionError(f"syntax error: unexpected {what}", pos)


@dataclass(frozen=True)
class AnalyticFunction:
    """Parsed expression in the single variable ``x``."""

    tree: Node
    source: str = ""

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(all="raise"):
            try:
                out = self.tree.evaluate(x)
            except FloatingPointError as exc:
                raise ArithmeticError(f"cannot evaluate {self.source!r}: {exc}") from None
        return out

    def reflected(self):
        """The function ``x -> self(1 - x)``."""
        tree = self.tree.substitute(BinOp("-", Const(1.0), Var()))
        return AnalyticFunction(tree, f"({self.source})|x->1-x")

    def __str__(self):
        return self.source or str(self.tree)


def parse_function(src):
    if not src or not src.strip():
        raise ExpressionError("empty expression", 0)
    return AnalyticFunction(_Parser(src).parse(), src)


def constant(value):
    return AnalyticFunction(Const(float(value)), repr(float(value)))


@dataclass(frozen=True)
class PowerSeries:
    center: float
    coeffs: np.ndarray

    def __post_init__(self):
        if len(self.coeffs) < 1 or not np.all(np.isfinite(self.coeffs)):
            raise SeriesError("power series needs at least one finite coefficient")


def taylor_at(fn, center, order):
    """Coefficients ``f^(k)(center)/k!`` for ``k = 0..order``."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    with np.errstate(all="raise"):
        try:
            coeffs = fn.tree.series(float(center), order + 1)
        except (FloatingPointError, ValueError) as exc:
            raise SeriesError(f"Taylor expansion of {fn} at {center} failed: {exc}") from None
    return PowerSeries(float(center), coeffs)


# ---------------------------------------------------------------------------
# Chebyshev series on [0, 1]


def _to_ref(x):
    return 2.0 * np.asarray(x, dtype=float) - 1.0


def cheb_points(degree):
    """First-kind Chebyshev points mapped to [0, 1] (those used by the fits)."""
    return 0.5 * (C.chebpts1(degree + 1) + 1.0)


@dataclass(frozen=True)
class ChebSeries:
    coeffs: np.ndarray
    tail_estimate: float = 0.0
    resolved: bool = True

    @property
    def degree(self):
        return len(self.coeffs) - 1

    def __call__(self, x):
        return C.chebval(_to_ref(x), self.coeffs)

    def derivative(self, k=1):
        return cheb_derivative(self, k)

    def is_zero(self):
        return not np.any(self.coeffs)

    def scale(self):
        return float(np.max(np.abs(self.coeffs))) if len(self.coeffs) else 0.0

    def reflected(self):
        # T_k(-t) = (-1)^k T_k(t)
        signs = (-1.0) ** np.arange(len(self.coeffs))
        return ChebSeries(self.coeffs * signs, self.tail_estimate, self.resolved)


def _tail(coeffs):
    m = max(1, int(math.ceil(0.1 * len(coeffs))))
    return float(np.max(np.abs(coeffs[-m:])))


def cheb_zero():
    return ChebSeries(np.zeros(1))


def cheb_fit(fn, degree):
    """Interpolate ``fn`` at ``degree + 1`` Chebyshev points of [0, 1]."""
    if degree < 1:
        raise ValueError("degree must be at least 1")
    f = fn.evaluate if isinstance(fn, AnalyticFunction) else fn
    xs = cheb_points(degree)
    vals = np.asarray(f(xs), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ArithmeticError("evaluation failure at a Chebyshev node")
    # discrete orthogonality at first-kind points
    n = degree + 1
    coeffs = C.chebvander(2.0 * xs - 1.0, degree).T @ vals
    coeffs[0] /= n
    coeffs[1:] /= 0.5 * n
    return ChebSeries(coeffs, _tail(coeffs))


def cheb_fit_adaptive(fn, start=CHEB_START, max_degree=CHEB_MAX, rel_tol=CHEB_TAIL_REL):
    """Double the degree until the coefficient tail is negligible.

    The returned series is chopped to the last coefficient above the
    round-off floor; ``resolved`` is False when ``max_degree`` was hit first.
    """
    degree = start
    while True:
        s = cheb_fit(fn, degree)
        scale = s.scale()
        if scale == 0.0:
            return cheb_zero()
        if s.tail_estimate <= rel_tol * scale:
            # round-off in the fitted coefficients grows with their count
            return _chop(s, 8.0 * np.finfo(float).eps * len(s.coeffs))
        if degree >= max_degree:
            return ChebSeries(s.coeffs, s.tail_estimate, resolved=False)
        degree *= 2


def _chop(s, rel_tol):
    coeffs = s.coeffs
    big = np.nonzero(np.abs(coeffs) > rel_tol * s.scale())[0]
    keep = max(int(big[-1]) + 1, 2) if len(big) else 1
    return ChebSeries(coeffs[:keep].copy(), s.tail_estimate, s.resolved)


def cheb_derivative(s, k=1):
    """Exact derivative on [0, 1] via the Chebyshev coefficient recurrence."""
    coeffs = s.coeffs
    for _ in range(k):
        if len(coeffs) <= 1:
            coeffs = np.zeros(1)
        else:
            coeffs = 2.0 * C.chebder(coeffs)
    return ChebSeries(coeffs, s.tail_estimate, s.resolved)


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class ProblemSpec:
    epsilon: float
    mu: float
    a11: AnalyticFunction
    a12: AnalyticFunction
    a21: AnalyticFunction
    a22: AnalyticFunction
    f: AnalyticFunction
    g: AnalyticFunction
    alpha: float = field(default=0.0, compare=False)

    @property
    def coefficients(self):
        return (self.a11, self.a12, self.a21, self.a22)

    def A(self, x):
        """Coefficient matrices, shape ``x.shape + (2, 2)``."""
        x = np.asarray(x, dtype=float)
        vals = [np.broadcast_to(c.evaluate(x), x.shape) for c in self.coefficients]
        return np.stack(vals, axis=-1).reshape(x.shape + (2, 2))

    def F(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.broadcast_to(self.f(x), x.shape),
                         np.broadcast_to(self.g(x), x.shape)], axis=-1)

    def taylor_matrices(self, order, center=0.0):
        """``A_k = A^(k)(center)/k!`` for ``k = 0..order``, shape (order+1, 2, 2)."""
        cs = [taylor_at(c, center, order).coeffs for c in self.coefficients]
        return np.stack(cs, axis=-1).reshape(order + 1, 2, 2)

    def reflected(self):
        """The same problem under ``x -> 1 - x``."""
        return ProblemSpec(self.epsilon, self.mu,
                           *(c.reflected() for c in self.coefficients),
                           self.f.reflected(), self.g.reflected(), alpha=self.alpha)

    def with_params(self, epsilon, mu):
        check_parameters(epsilon, mu)
        return ProblemSpec(float(epsilon), float(mu), self.a11, self.a12, self.a21,
                           self.a22, self.f, self.g, alpha=self.alpha)

    def to_dict(self):
        d = {"epsilon": self.epsilon, "mu": self.mu}
        for name in PROBLEM_FIELDS[2:]:
            d[name] = getattr(self, name).source
        return d

    def digest(self):
        """Parameter-independent hash of the coefficient data."""
        d = self.to_dict()
        del d["epsilon"], d["mu"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def check_parameters(epsilon, mu):
    if not (0.0 < epsilon <= mu <= 1.0):
        raise ProblemError(f"parameters must satisfy 0 < epsilon <= mu <= 1, got epsilon={epsilon}, mu={mu}")


def probe_grid():
    return np.linspace(0.0, 1.0, PROBE_POINTS)


def positivity_data(a11, a12, a21, a22, xs=None):
    """Pointwise checks of A(x) on the probe grid.

    Returns ``(alpha, details)``; raises :class:`PositivityError` with the
    worst probe point when the symmetric part is not positive definite or a
    consequence (``a_kk >= alpha^2``, ``det A >= alpha^2 max a_kk >= alpha^4``)
    fails.
    """
    xs = probe_grid() if xs is None else xs
    vals = [np.broadcast_to(c.evaluate(xs), xs.shape) for c in (a11, a12, a21, a22)]
    A = np.stack(vals, axis=-1).reshape(xs.shape + (2, 2))
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam = np.linalg.eigvalsh(sym)[:, 0]
    k = int(np.argmin(lam))
    if not lam[k] > ALPHA_MARGIN:
        raise PositivityError(
            f"A(x) is not positive definite: smallest eigenvalue of the symmetric part "
            f"is {lam[k]:.6g} at x={xs[k]:.6g}", float(xs[k]))
    alpha_sq = float(lam[k]) - ALPHA_MARGIN
    diag_min = np.minimum(A[:, 0, 0], A[:, 1, 1])
    diag_max = np.maximum(A[:, 0, 0], A[:, 1, 1])
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    slack = 1e-10 * np.maximum(1.0, np.abs(det))
    bad_diag = diag_min < alpha_sq - 1e-10
    bad_det = (det < alpha_sq * diag_max - slack) | (alpha_sq * diag_max < alpha_sq ** 2 - slack)
    for mask, what in ((bad_diag, "diagonal entry below alpha^2"),
                       (bad_det, "det A below alpha^2 max(a11, a22)")):
        if np.any(mask):
            x = float(xs[np.argmax(mask)])
            raise PositivityError(f"{what} at x={x:.6g}", x)
    details = {
        "alpha_sq": alpha_sq,
        "x_min_eig": float(xs[k]),
        "min_diag": float(diag_min.min()),
        "min_det": float(det.min()),
        "min_det_over_alpha_sq_max_diag": float(np.min(det / (alpha_sq * diag_max))),
    }
    return math.sqrt(alpha_sq), details


def make_problem(epsilon, mu, a11, a12, a21, a22, f, g):
    """Build and validate a :class:`ProblemSpec` from expression strings or trees."""
    check_parameters(epsilon, mu)
    fns = []
    for name, src in zip(PROBLEM_FIELDS[2:], (a11, a12, a21, a22, f, g)):
        fn = src if isinstance(src, AnalyticFunction) else parse_function(str(src))
        try:
            vals = fn.evaluate(probe_grid())
        except (ArithmeticError, ZeroDivisionError) as exc:
            raise ProblemError(f"{name}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise ProblemError(f"{name} is not finite on [0, 1]")
        fns.append(fn)
    alpha, _ = positivity_data(*fns[:4])
    return ProblemSpec(float(epsilon), float(mu), *fns, alpha=alpha)


def problem_from_dict(d):
    if not isinstance(d, dict):
        raise ProblemError("problem file must hold a JSON object")
    unknown = sorted(set(d) - set(PROBLEM_FIELDS))
    if unknown:
        raise ProblemError(f"unknown field(s) in problem file: {', '.join(unknown)}")
    missing = [k for k in PROBLEM_FIELDS if k not in d]
    if missing:
        raise ProblemError(f"missing field(s) in problem file: {', '.join(missing)}")
    for k in ("epsilon", "mu"):
        if isinstance(d[k], bool) or not isinstance(d[k], (int, float)):
            raise ProblemError(f"{k} must be a number")
    for k in PROBLEM_FIELDS[2:]:
        if not isinstance(d[k], str):
            raise ProblemError(f"{k} must be an expression string")
    return make_problem(*(d[k] for k in PROBLEM_FIELDS))


def load_problem(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ProblemError(f"malformed JSON in {path}: {exc}") from None
    return problem_from_dict(d)


def canonical_problem(epsilon=0.01, mu=0.1):
    """a11 = a22 = 2 + x, a12 = a21 = 1, f = exp(x), g = 1 + x."""
    return make_problem(epsilon, mu, "2 + x", "1", "1", "2 + x", "exp(x)", "1 + x")


def constant_problem(epsilon=0.01, mu=0.1):
    """A = 2 I, f = g = 1: the closed-form test problem."""
    return make_problem(epsilon, mu, "2", "0", "0", "2", "1", "1")
