import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from spx.analysis import (apriori_bound, boundary_mismatch, decay_fit, derivative_growth_probe,
                          energy_norm, hat_v_scaling, layer_rates, positivity_check,
                          remainder_energy, residual_sup, structural_check, weighted_l2_norm)
from spx.expansion import assemble_decomposition, build_case_iv, build_expansion
from spx.funcalc import (ChebSeries, PositivityError, canonical_problem, constant_problem,
                         make_problem)
from spx.halfline import ExpPoly, HalfLineError
from spx.refsolve import GridFunction, richardson_reference, shishkin_mesh


def sine_pair(x, k=0):
    w = np.pi
    u = [np.sin(w * x), w * np.cos(w * x)][k]
    return np.stack([u, np.zeros_like(x)], axis=-1)


def test_energy_norm_of_sine():
    x = np.linspace(0, 1, 4001)
    got = energy_norm(sine_pair, 1.0, 1.0, 1.0, x=x)
    assert abs(got - math.sqrt(np.pi ** 2 / 2 + 0.5)) < 1e-9


def test_energy_norm_grid_matches_callable():
    mesh = shishkin_mesh(0.5, 0.5, 512)
    g = GridFunction(mesh, sine_pair(mesh.nodes))
    exact = math.sqrt(0.25 * np.pi ** 2 / 2 + 0.5)
    assert abs(energy_norm(g, 0.5, 0.5, 1.0) - exact) < 1e-5


def test_energy_norm_homogeneous_and_subadditive(rng):
    mesh = shishkin_mesh(0.01, 0.1, 64)
    a = GridFunction(mesh, rng.normal(size=(len(mesh.nodes), 2)))
    b = GridFunction(mesh, rng.normal(size=(len(mesh.nodes), 2)))
    na = energy_norm(a, 0.01, 0.1, 1.3)
    nb = energy_norm(b, 0.01, 0.1, 1.3)
    n3a = energy_norm(GridFunction(mesh, 3 * a.values), 0.01, 0.1, 1.3)
    nab = energy_norm(GridFunction(mesh, a.values + b.values), 0.01, 0.1, 1.3)
    assert abs(n3a - 3 * na) < 1e-12 * n3a
    assert nab <= na + nb + 1e-12


def test_weighted_norm_examples():
    w = ExpPoly.exp(1.0, 2.0)
    assert abs(weighted_l2_norm(w, 0.0) - math.sqrt(2.0)) < 1e-14
    assert abs(weighted_l2_norm(w, 0.5) - 2.0) < 1e-14
    assert weighted_l2_norm(ExpPoly.zero(), 5.0) == 0.0
    with pytest.raises(HalfLineError):
        weighted_l2_norm(w, 2.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.0, 2.0),
       st.floats(0.0, 0.4))
def test_weighted_norm_matches_quadrature(rate, c0, c1, omega, beta_frac):
    c = [complex(c0, 0.3), complex(c1, -0.2)]
    w = ExpPoly.build([(complex(rate, omega), c), (complex(rate, -omega), np.conj(c))])
    beta = beta_frac * rate
    want = math.sqrt(quad(lambda s: math.exp(2 * beta * s) * float(w(np.array(s))) ** 2,
                          0, 60.0 / (rate - beta), limit=200)[0])
    assert abs(weighted_l2_norm(w, beta) - want) <= 1e-8 * max(1.0, want)


def test_residual_and_mismatch_constant_problem():
    p = constant_problem(0.001, 0.1)
    d = assemble_decomposition(build_expansion(p, "IV", m1=0, m2=0), p)
    want = 0.5 * (math.exp(-math.sqrt(2) / 0.1) + math.exp(-math.sqrt(2) / 0.001))
    assert abs(boundary_mismatch(d) - want) <= 1e-10 * want
    assert residual_sup(p, d) < 1e-12
    p2 = constant_problem(0.001, 0.05)
    d2 = assemble_decomposition(build_expansion(p2, "IV", m1=0, m2=0), p2)
    assert boundary_mismatch(d2) < 1e-12


def test_remainder_of_exact_decomposition_is_reference_error():
    p = constant_problem(0.01, 0.05)
    d = assemble_decomposition(build_expansion(p, "IV", m1=0, m2=0), p)
    ref, est = richardson_reference(p, 256)
    assert remainder_energy(p, d, ref) < 1e-6
    zero = GridFunction(ref.mesh, np.zeros_like(ref.values))
    assert abs(remainder_energy(p, d, zero) - energy_norm(d, p.epsilon, p.mu, p.alpha, x=ref.x)) < 1e-3


@pytest.mark.parametrize("case, eps, mu", [("IV", 1e-4, 1e-2), ("II", 1e-3, 0.5), ("III", 1e-2, 2e-2)])
def test_structural_checks_pass(case, eps, mu):
    p = canonical_problem(eps, mu)
    checks = structural_check(build_expansion(p, case), p)
    assert checks
    assert all(c.passed for c in checks), [c for c in checks if not c.passed]


def test_structural_check_flags_corruption():
    p = canonical_problem(1e-4, 1e-2)
    e = build_case_iv(p, 2, 2)
    outer = dict(e.outer)
    outer[(1, 0)] = (ChebSeries(np.array([0.0, 1e-3])), outer[(1, 0)][1])
    bad = dataclasses.replace(e, outer=outer)
    failed = {c.name for c in structural_check(bad, p) if not c.passed}
    assert "outer zero for odd i or j" in failed


def test_positivity():
    alpha, _ = positivity_check(constant_problem(0.1, 0.1))
    assert abs(alpha - math.sqrt(2)) < 1e-12
    with pytest.raises(PositivityError) as info:
        make_problem(0.1, 0.1, "1 - 2*x", "0", "0", "1", "1", "1")
    assert 0.5 <= info.value.x <= 1.0


def test_layer_rates_constant():
    r = layer_rates(constant_problem(0.1, 0.1))
    assert r.a_lower == (2.0, 2.0) and r.a_upper == (2.0, 2.0)
    assert abs(r.beta_left - math.sqrt(2)) < 1e-14


def test_decay_fit_examples():
    xs = np.array([1.0, 2.0, 3.0, 4.0])
    b, c, r2 = decay_fit(xs, 5 * np.exp(-0.7 * xs))
    assert abs(b - 0.7) < 1e-12 and abs(c - 5) < 1e-10 and abs(r2 - 1) < 1e-12
    pw, pc, pr2 = decay_fit(xs, 2 * xs ** -3.0, "power")
    assert abs(pw + 3) < 1e-12 and abs(pc - 2) < 1e-10
    b, _, r2 = decay_fit(xs, np.ones(4))
    assert b == 0.0 and r2 == 1.0
    with pytest.raises(ValueError):
        decay_fit(xs[:2], np.ones(2))
    with pytest.raises(ValueError):
        decay_fit(xs, np.array([1.0, 0.0, 1.0, 1.0]))


def test_probe_examples():
    p = make_problem(0.25, 0.5, "2", "0", "0", "2", "0", "0")
    ref, _ = richardson_reference(p, 64)
    assert all(norm == 0.0 for _, norm, _ in derivative_growth_probe(p, ref))
    p = canonical_problem(0.25, 0.5)
    ref, _ = richardson_reference(p, 256)
    rows = derivative_growth_probe(p, ref)
    x = ref.x
    l2 = lambda y: math.sqrt(np.trapezoid(y ** 2, x)) if hasattr(np, "trapezoid") else math.sqrt(np.trapz(y ** 2, x))
    assert abs(rows[0][2] - (l2(ref.values[:, 0]) + l2(ref.values[:, 1]))) < 1e-6
    unresolved = GridFunction(ref.mesh, ref.values, {"error_estimate": 1e-3})
    with pytest.raises(ValueError):
        derivative_growth_probe(p, unresolved)


def test_apriori_bound_constant():
    p = constant_problem(0.1, 0.1)
    assert abs(apriori_bound(p) - 1.0) < 1e-12


def test_remainder_decreases_with_mu():
    rems = []
    for mu in (0.1, 0.05, 0.025):
        p = canonical_problem(mu ** 2, mu)
        d = assemble_decomposition(build_case_iv(p, 2, 2), p)
        ref, _ = richardson_reference(p, 512)
        rems.append(remainder_energy(p, d, ref))
    assert rems[0] > rems[1] > rems[2]


def test_hat_v_scaling_bounded():
    vals = hat_v_scaling(canonical_problem(1e-4, 1e-2), [0.1, 0.05, 0.02], 1e-2)
    assert max(vals) / min(vals) < 10
