"""Single-point verification and parameter sweeps.

A point builds the expansion, checks its invariants, and compares the
assembled decomposition against a reference solution that is refined until
its own error estimate is a fixed fraction of the measured remainder.  A
sweep runs points (optionally in worker processes), sorts them by
``(mu, epsilon)`` descending and fits the remainder decay.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .analysis import (apriori_bound, boundary_mismatch, decay_fit, energy_norm,
                       remainder_energy, residual_sup, structural_check)
from .expansion import assemble_decomposition, build_expansion, classify_regime
from .funcalc import problem_from_dict
from .refsolve import richardson_reference

log = logging.getLogger(__name__)

COLUMNS = ("epsilon", "mu", "m1", "m2", "rem_energy", "resid_sup", "bc_mismatch",
           "ref_err", "fit_b", "fit_r2", "pass")
REF_FRACTION = 0.1
REF_FLOOR = 1e-13
MAX_BASE_N = 1 << 15
FIT_VARIABLE = {"IV": "1/mu", "III": "1/mu", "II": "mu/epsilon"}


def _orders(expansion):
    if expansion.case == "IV":
        return expansion.m1, expansion.m2
    if expansion.case == "III":
        return expansion.m, None
    if expansion.case == "II":
        return None, expansion.m
    return None, None


def verify_point(p, case="auto", m1=None, m2=None, m=None, n_mesh=512,
                 tol=REF_FRACTION, max_n=MAX_BASE_N):
    """Remainder, residual and mismatch of one expansion against the reference.

    The reference is Richardson-extrapolated; its mesh doubles until the
    error estimate is at most ``tol * rem_energy``, the estimate stops
    shrinking, or ``max_n`` cells per region is reached.
    """
    label = classify_regime(p.epsilon, p.mu) if case == "auto" else case
    expansion = build_expansion(p, label, m1=m1, m2=m2, m=m, n_mesh=n_mesh)
    checks = structural_check(expansion, p)
    d = assemble_decomposition(expansion, p)
    n = n_mesh
    best = None
    while True:
        ref, est = richardson_reference(p, n)
        rem = remainder_energy(p, d, ref)
        if best is not None and est > best[1]:
            # round-off floor reached; keep the best level
            ref, est, rem = best
            break
        best = (ref, est, rem)
        if est <= max(tol * rem, REF_FLOOR) or 2 * n > max_n:
            break
        n *= 2
    certified = est <= max(tol * rem, REF_FLOOR)
    if not certified:
        log.warning("reference not certified at eps=%g mu=%g: estimate %.3g vs remainder %.3g",
                    p.epsilon, p.mu, est, rem)
    ref_energy = energy_norm(ref, p.epsilon, p.mu, p.alpha)
    bound = apriori_bound(p)
    apriori_ok = ref_energy <= bound + est
    o1, o2 = _orders(expansion)
    return {
        "epsilon": p.epsilon, "mu": p.mu, "m1": o1, "m2": o2, "case": label,
        "rem_energy": rem, "resid_sup": residual_sup(p, d), "bc_mismatch": boundary_mismatch(d),
        "ref_err": est, "ref_cells": ref.mesh.n_cells, "ref_certified": certified,
        "ref_energy": ref_energy, "apriori_bound": bound, "apriori_ok": apriori_ok,
        "checks": [c.to_dict() for c in checks],
        "fit_b": None, "fit_r2": None,
        "pass": bool(certified and apriori_ok and all(c.passed for c in checks)),
    }


def _point_job(args):
    problem, eps, mu, kw = args
    p = problem_from_dict(dict(problem, epsilon=eps, mu=mu))
    return verify_point(p, **kw)


def sweep_pairs(eps_list, mu_list):
    """Pair the axes: equal lengths zip, a single value broadcasts."""
    eps_list, mu_list = list(eps_list), list(mu_list)
    if not eps_list or not mu_list:
        raise ValueError("sweep axes must be non-empty")
    if len(eps_list) == 1:
        eps_list = eps_list * len(mu_list)
    elif len(mu_list) == 1:
        mu_list = mu_list * len(eps_list)
    if len(eps_list) != len(mu_list):
        raise ValueError("--eps and --mu lists must have equal length or length one")
    pairs = list(zip(eps_list, mu_list))
    for e, u in pairs:
        if not 0.0 < e <= u <= 1.0:
            raise ValueError(f"sweep point violates 0 < epsilon <= mu <= 1: ({e}, {u})")
    return pairs


def fit_rows(rows):
    """Exponential fit of rem_energy in the case's scale variable, or None."""
    cases = {r["case"] for r in rows}
    if len(cases) != 1 or next(iter(cases)) not in FIT_VARIABLE:
        return None
    var = FIT_VARIABLE[next(iter(cases))]
    xs = [1.0 / r["mu"] if var == "1/mu" else r["mu"] / r["epsilon"] for r in rows]
    ys = [r["rem_energy"] for r in rows]
    if len(set(xs)) < 3 or min(ys) <= 0.0:
        return None
    b, c, r2 = decay_fit(xs, ys, "exp-reciprocal")
    pw, pc, pr2 = decay_fit(xs, ys, "power")
    return {"variable": var, "model": "exp-reciprocal", "b": b, "C": c, "r2": r2,
            "power_exponent": pw, "power_C": pc, "power_r2": pr2}


@dataclass
class StudyReport:
    rows: list
    metadata: dict = field(default_factory=dict)
    fit: dict = None

    @property
    def passed(self):
        ok = all(r["pass"] for r in self.rows)
        if self.fit is not None:
            ok = ok and self.fit["b"] > 0
        return ok

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_cell(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self):
        doc = {"metadata": self.metadata, "fit": self.fit, "rows": self.rows}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_sweep(p, pairs, case="auto", m1=None, m2=None, m=None, n_mesh=512,
              tol=REF_FRACTION, jobs=1):
    kw = {"case": case, "m1": m1, "m2": m2, "m": m, "n_mesh": n_mesh, "tol": tol}
    problem = p.to_dict()
    tasks = [(problem, float(e), float(u), kw) for e, u in pairs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_point_job, tasks))
    else:
        rows = [_point_job(t) for t in tasks]
    rows.sort(key=lambda r: (-r["mu"], -r["epsilon"]))
    fit = fit_rows(rows)
    if fit is not None:
        for r in rows:
            r["fit_b"], r["fit_r2"] = fit["b"], fit["r2"]
    coeffs = {k: v for k, v in problem.items() if k not in ("epsilon", "mu")}
    meta = {"problem": coeffs, "problem_hash": p.digest(), "options": kw,
            "reference_fraction": tol, "columns": list(COLUMNS)}
    return StudyReport(rows, meta, fit)
