"""Acceptance suite: one printed PASS/FAIL line per criterion, then the assertion.

Runs take a few minutes in total; the 2D Burgers and 3D stability runs dominate.
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE
from ridg.errors import Instability
from ridg.harness.bench import bench_assembly
from ridg.law import Burgers, LinearAdvection, get_problem
from ridg.mesh import CartesianMesh, pad_periodic
from ridg.metrics import comms_estimate, convergence_order, efom, quality, speedup_efficiency
from ridg.parallel import run_parallel
from ridg.predictor import RegionOperator
from ridg.stepper import SchemeConfig, Simulation, run

TABLE1 = {
    ("ridg", 3): {50: 6.48e-4, 70: 1.47e-4, 120: 1.85e-5, 240: 8.31e-7},
    ("ridg", 5): {30: 1.57e-5, 50: 8.62e-7},
    ("ridg", 7): {20: 1.32e-6, 30: 4.77e-8},
    ("rkdg", 3): {50: 3.07e-4, 70: 7.96e-5, 120: 9.23e-6},
}
NU = {"ridg": 0.9, "rkdg": 0.1}
ERROR_FACTOR = 3.0
RIDG3_ORDER_RANGE = (3.4, 5.1)
RKDG3_ORDER = (4.0, 0.3)

# stability envelope: (problem, Mdeg, nu, cells per axis, final time or None for the default)
ENVELOPE = [
    ("adv1d", 3, 0.9, 50, None), ("adv1d", 5, 0.9, 30, None), ("adv1d", 7, 0.9, 20, None),
    ("adv2d", 3, 0.7, 20, None), ("burgers2d", 3, 0.7, 20, None), ("adv3d", 3, 0.6, 24, 0.25),
]

N_STATES = 25
QUAD_TOL, PERT_TOL = 1e-9, 1e-5


def report(n, passed, detail, capsys):
    ACCEPTANCE[n] = (bool(passed), detail)
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


@lru_cache(maxsize=None)
def serial_run(name, scheme, mdeg, nu, n, final_time=None):
    prob = get_problem(name, final_time)
    mesh = CartesianMesh(prob.dim, (n,) * prob.dim, prob.lower, prob.upper)
    return run(prob, SchemeConfig(scheme, mdeg, nu), mesh)


@lru_cache(maxsize=None)
def parallel_run(n_cells, tasks, mdeg=3, final_time=0.1):
    prob = get_problem("adv2d", final_time)
    mesh = CartesianMesh(2, (n_cells, n_cells), prob.lower, prob.upper)
    return run_parallel(prob, SchemeConfig("ridg", mdeg, 0.7), mesh, tasks)


def within(err, ref, factor=ERROR_FACTOR):
    return ref / factor <= err <= ref * factor


@pytest.mark.slow
def test_criterion_1_table1_convergence(capsys):
    parts, ok = [], True
    for (scheme, mdeg), table in TABLE1.items():
        meshes = sorted(table)
        errs = [serial_run("adv1d", scheme, mdeg, NU[scheme], n).error for n in meshes]
        hit = [within(e, table[n]) for e, n in zip(errs, meshes)]
        orders = [convergence_order(errs[i], 1 / meshes[i], errs[i + 1], 1 / meshes[i + 1])
                  for i in range(len(meshes) - 1)]
        ok &= all(hit)
        if (scheme, mdeg) == ("ridg", 3):
            lo, hi = RIDG3_ORDER_RANGE
            slope = np.polyfit(np.log(1 / np.array(meshes)), np.log(errs), 1)[0]
            ok &= all(lo <= p <= hi for p in orders)
            order_txt = f"pairwise {', '.join(f'{p:.2f}' for p in orders)}; least squares {slope:.2f}"
        elif (scheme, mdeg) == ("rkdg", 3):
            target, tol = RKDG3_ORDER
            ok &= all(abs(p - target) <= tol for p in orders)
            order_txt = ", ".join(f"{p:.2f}" for p in orders)
        else:
            order_txt = ", ".join(f"{p:.2f}" for p in orders)
        ratios = ", ".join(f"{table[n] / e:.0f}x" for e, n in zip(errs, meshes))
        parts.append(f"{scheme} M{mdeg}: errors {', '.join(f'{e:.2e}' for e in errs)} "
                     f"(table/ours {ratios}); orders {order_txt}")
    report(1, ok, " | ".join(parts), capsys)
    assert ok, "errors are not within a factor 3 of the table (see the decisions ledger)"


@pytest.mark.slow
def test_criterion_2_cfl_envelope(capsys):
    failures = []
    for name, mdeg, nu, n, T in ENVELOPE:
        try:
            res = serial_run(name, "ridg", mdeg, nu, n, T)
            if not np.all(np.isfinite(res.state.Q)):
                failures.append(f"{name} M{mdeg}: non-finite state")
        except Instability as exc:
            failures.append(f"{name} M{mdeg}: {exc}")
    try:
        serial_run("adv1d", "rkdg", 3, 0.9, 50)
        rkdg = "RKDG M3 nu=0.9 stayed stable"
        failures.append(rkdg)
    except Instability as exc:
        rkdg = f"RKDG M3 nu=0.9 unstable at step {exc.step}"
        if exc.step > 200:
            failures.append(rkdg + " (after 200 steps)")
    ok = not failures
    detail = f"{len(ENVELOPE)} RIDG runs stable; {rkdg}" if ok else "; ".join(failures)
    report(2, ok, detail, capsys)
    assert ok, detail


def _rel(A, B):
    return float(np.max(np.abs(A - B)) / np.max(np.abs(A)))


def _directional_ok(op, dW, dQ, c, rng):
    lam = op.face_lambdas(dW, c)
    J = op.jacobian(dW, dQ, c, lam)
    v = rng.standard_normal(dW.shape)
    Jv = J @ v.ravel()
    R0 = op.residual(dW, dQ, c, lam)
    errs = []
    for eps in (1e-2, 1e-3, 1e-4):
        fd = ((op.residual(dW + eps * v, dQ, c, lam) - R0) / eps).ravel()
        errs.append(np.linalg.norm(fd - Jv) / np.linalg.norm(Jv))
    if max(errs) < 1e-8:  # linear residual: differences are exact up to rounding
        return True
    return all(5.0 <= errs[i] / errs[i + 1] <= 20.0 for i in range(2))


@pytest.mark.slow
def test_criterion_3_backend_equivalence(capsys):
    laws = {"adv1d": LinearAdvection((1.0,)), "adv2d": LinearAdvection((1.0, 1.0)),
            "adv3d": LinearAdvection((1.0, 1.0, 1.0)), "burgers2d": Burgers(2)}
    worst_q = worst_p = 0.0
    bad = []
    for name, law in laws.items():
        for mdeg in (1, 2, 3):
            h = 1.0 / 20
            op = RegionOperator(law, mdeg, 0.5 * h, (h,) * law.dim)
            rng = np.random.default_rng(1000 * law.dim + mdeg)
            for k in range(N_STATES):
                dW = 0.05 * rng.standard_normal((op.nreg, op.theta_t))
                dQ = 0.05 * rng.standard_normal((op.nreg, op.theta))
                c = 0.5 + 0.1 * rng.standard_normal()
                Jq = op.jacobian(dW, dQ, c, backend="qqf")
                eq = _rel(Jq, op.jacobian(dW, dQ, c, backend="quadrature"))
                ep = _rel(Jq, op.jacobian(dW, dQ, c, backend="perturbation"))
                worst_q, worst_p = max(worst_q, eq), max(worst_p, ep)
                if eq >= QUAD_TOL or ep >= PERT_TOL:
                    bad.append(f"{name} M{mdeg} state {k}")
                if k < 3 and not _directional_ok(op, dW, dQ, c, rng):
                    bad.append(f"{name} M{mdeg} state {k}: directional derivative")
    ok = not bad
    detail = (f"12 configurations x {N_STATES} states; worst qqf/quadrature {worst_q:.1e}, "
              f"qqf/perturbation {worst_p:.1e}" + ("" if ok else f"; failing: {bad[:5]}"))
    report(3, ok, detail, capsys)
    assert ok, detail


@pytest.mark.slow
def test_criterion_4_assembly_benchmark(capsys):
    res = bench_assembly(dim=3, orders=(2, 3, 4, 5), repetitions=11)
    ratios = res.ratios()
    faster = all(ratios[m] > 1.0 for m in (3, 4, 5))
    monotone = all(ratios[m] < ratios[m + 1] for m in (2, 3, 4))
    gap = res.exponents["quadrature"] - res.exponents["qqf"]
    ok = faster and monotone and gap >= 1.5
    detail = (f"quadrature/qqf time ratio {', '.join(f'{m}: {ratios[m]:.2f}' for m in sorted(ratios))}; "
              f"exponents quadrature {res.exponents['quadrature']:.2f}, qqf {res.exponents['qqf']:.2f}, "
              f"gap {gap:.2f}")
    report(4, ok, detail, capsys)
    assert ok, detail


def _constant_preserved(law, scheme, mdeg, nu, cells):
    d = law.dim
    mesh = CartesianMesh(d, (cells,) * d, (0.0,) * d, (1.0,) * d)
    Q = np.zeros(mesh.shape + ((mdeg + 1) ** d,))
    Q[..., 0] = 0.37
    sim = Simulation(law, SchemeConfig(scheme, mdeg, nu), mesh.h, mesh.cell_volume,
                     lambda X, protocol: pad_periodic(X, d))
    out, _ = sim.advance(Q.copy(), 10.0, max_steps=5)
    return np.array_equal(out, Q)


@pytest.mark.slow
def test_criterion_5_conservation_and_free_stream(capsys):
    runs = [("adv1d", s, m, NU[s], n, None) for (s, m), t in TABLE1.items() for n in t]
    runs += [(name, "ridg", m, nu, n, T) for name, m, nu, n, T in ENVELOPE]
    worst = 0.0
    for args in runs:
        res = serial_run(*args)
        worst = max(worst, abs(res.mass_final - res.mass_initial) / abs(res.mass_initial))
    for tasks in (1, 2, 3, 6):
        res = parallel_run(60, tasks)
        worst = max(worst, abs(res.mass_final - res.mass_initial) / abs(res.mass_initial))
    cases = [(LinearAdvection((1.0,)), "ridg", m, 0.9, 6) for m in (3, 5, 7)]
    cases += [(LinearAdvection((1.0,)), "rkdg", 3, 0.1, 6), (LinearAdvection((1.0, 1.0)), "ridg", 3, 0.7, 4),
              (Burgers(2), "ridg", 3, 0.7, 4), (Burgers(2), "rkdg", 3, 0.1, 4),
              (LinearAdvection((1.0, 1.0, 1.0)), "ridg", 3, 0.6, 3)]
    constant = all(_constant_preserved(*c) for c in cases)
    ok = worst <= 1e-12 and constant
    detail = (f"{len(runs) + 4} runs, worst relative mass drift {worst:.1e}; "
              f"constant data bitwise in {len(cases)} configurations: {constant}")
    report(5, ok, detail, capsys)
    assert ok, detail


@pytest.mark.slow
def test_criterion_6_parallel_determinism(capsys):
    ref = serial_run("adv2d", "ridg", 3, 0.7, 60, 0.1).state.Q
    results = {p * p: parallel_run(60, p) for p in (1, 2, 3, 6)}
    bitwise = all(np.array_equal(r.state.Q, ref) for r in results.values())
    counts_2d = all(c.messages_per_step == [2 * 8] * r.steps for r in results.values() for c in r.counters)
    prob = get_problem("adv3d", 0.02)
    mesh = CartesianMesh(3, (12,) * 3, prob.lower, prob.upper)
    cfg = SchemeConfig("ridg", 3, 0.6)
    r3 = run_parallel(prob, cfg, mesh, 2)
    counts_3d = all(c.messages_per_step == [2 * 26] * r3.steps for c in r3.counters)
    bitwise_3d = np.array_equal(r3.state.Q, run(prob, cfg, mesh).state.Q)
    analytic = all(sum(c.messages_sent for c in r.counters)
                   == comms_estimate(n, r.steps, 2, 8) for n, r in results.items())
    ok = bitwise and counts_2d and counts_3d and bitwise_3d and analytic
    detail = (f"60x60, tasks 1/4/9/36 bitwise equal to serial: {bitwise}; messages per task per step 16 in 2D: "
              f"{counts_2d}; 52 in 3D (12^3, 8 tasks): {counts_3d}, bitwise {bitwise_3d}; totals match the "
              f"analytic estimate: {analytic}")
    report(6, ok, detail, capsys)
    assert ok, detail


def test_criterion_7_metric_formulas(capsys):
    checks = {
        "efom(16, 100, 2) = 40": efom(16, 100, 2) == 40,
        "quality(6.48e-4, 1.09) = 3.15": abs(quality(6.48e-4, 1.09) - 3.15) <= 0.01,
        "comms(36, 75, 2, 8) = 43200": comms_estimate(36, 75, 2, 8) == 43200,
    }
    sp, eff = speedup_efficiency({1: 54.0, 4: 15.6})[4]
    checks["speedup 3.46x, efficiency 82.1%"] = abs(sp - 3.46) <= 0.005 and abs(eff - 82.1) <= 0.05
    ok = all(checks.values())
    detail = "; ".join(f"{k}: {'ok' if v else 'wrong'}" for k, v in checks.items())
    report(7, ok, detail, capsys)
    assert ok, detail


def test_criterion_8_declared_not_reproducible(capsys):
    # absolute runtimes and large-core efficiencies are not compared; the scaling
    # records only have to satisfy the speedup and efficiency identities
    runtimes = {1: 2.0, 4: 0.9, 9: 2.5}
    se = speedup_efficiency(runtimes)
    identities = all(
        math.isclose(sp, runtimes[1] / runtimes[n])
        and (eff is None if n == 1 else math.isclose(eff, max(0.0, (sp - 1) / (n - 1) * 100)))
        for n, (sp, eff) in se.items()
    )
    report(8, identities, "absolute runtimes, quality columns and large-core efficiencies are not reproduced; "
           "criteria 4 and 6 stand in for them", capsys)
    assert identities
