"""Acceptance criteria: analytic oracles and property checks at their stated
tolerances. Each test prints one PASS/FAIL line; the terminal summary repeats
all of them."""
import math
import time

import numpy as np
import pytest

from splitjko import diagnostics as dg
from splitjko import helmholtz as hz
from splitjko import jko, ot
from splitjko import scenarios as S
from splitjko import scheme as sc
from splitjko import transport as tr
from splitjko.fitting import fit_power_law
from splitjko.measures import Domain, GridMeasure, entropy, internal_energy

from conftest import periodic_lp, record, sparse_measure

pytestmark = pytest.mark.slow

H_SWEEP = (4e-3, 2e-3, 1e-3)


def _sweep(scenario, hs=H_SWEEP, T=0.25, agreement=False):
    trajs, secs = {}, {}
    for h in hs:
        t = time.perf_counter()
        cfg = sc.SchemeConfig(h=h, T=T, energy=scenario.energy, drift=scenario.drift, step_distances=False)
        trajs[h] = sc.run_scheme(scenario.rho0, cfg)
        secs[h] = time.perf_counter() - t
    study = dg.convergence_study(scenario.rho0, None, hs, oracle=scenario.oracle, agreement=agreement,
                                 trajectories=trajs)
    return study, secs


@pytest.fixture(scope="module")
def heat_study():
    return _sweep(S.heat())


def test_c01_heat_oracle(heat_study):
    study, secs = heat_study
    errs = [r["error"] for r in study["rows"]]
    fit = study["fit"]
    ok = study["monotone"] and fit["slope"] >= 0.5 and fit["r2"] >= 0.95 and max(secs.values()) <= 120
    record(1, "heat oracle", ok,
           f"errors {[f'{e:.3e}' for e in errs]} order {fit['slope']:.3f} R2 {fit['r2']:.4f} "
           f"max runtime {max(secs.values()):.1f}s")
    assert ok


def test_c02_porous_medium_oracle(heat_study):
    study, secs = _sweep(S.porous_medium())
    best_heat = min(r["error"] for r in heat_study[0]["rows"])
    errs = [r["error"] for r in study["rows"]]
    total = sum(secs.values())
    ok = min(errs) <= 3 * best_heat and study["order"] > 0 and total <= 300
    record(2, "porous medium oracle", ok,
           f"errors {[f'{e:.3e}' for e in errs]} (cap {3 * best_heat:.3e}) order {study['order']:.3f} "
           f"runtime {total:.1f}s")
    assert ok


def test_c03_transport_energy_conservation():
    p = S.rotation_transport(cells=128)
    E = entropy()
    cfg = sc.SchemeConfig(h=1e-2, T=1.0, energy=E, drift=p.drift, transport_only=True, step_distances=False,
                          snapshot_stride=100)
    traj = sc.run_scheme(p.rho0, cfg)
    per_step = max(abs(r["energy_transport_change"]) for r in traj.records)
    cumulative = abs(internal_energy(E, traj.final()) - internal_energy(E, p.rho0))
    ok = traj.steps == 100 and per_step <= 1e-6 and cumulative <= 1e-4
    record(3, "transport energy conservation", ok, f"per-step {per_step:.2e} cumulative {cumulative:.2e}")
    assert ok


def test_c04_per_step_transport_bound():
    p = S.rotation_transport(cells=64)
    W = hz.split_drift(p.drift, p.rho0).W
    hs = np.geomspace(1e-4, 1e-2, 5)
    vals = [ot.w2_entropic(tr.transport_step(p.rho0, W, h), p.rho0, tol=1e-12).cost for h in hs]
    fit = fit_power_law(hs, vals)
    ok = abs(fit.slope - 2) <= 0.2 and fit.r2 >= 0.99
    record(4, "per-step transport bound", ok, f"slope {fit.slope:.4f} R2 {fit.r2:.6f}")
    assert ok


def test_c05_telescoping_sum():
    p = S.mixed_drift(cells=48)
    dx2 = p.domain.dx[0] ** 2
    hs = (0.05, 0.1, 0.2, 0.5)
    sums = []
    for h in hs:
        cfg = sc.SchemeConfig(h=h, T=1.0, energy=p.energy, drift=p.drift, eps=min(dx2, 0.2 * h),
                              step_distances=False)
        traj = sc.run_scheme(p.rho0, cfg)
        sums.append(sum(r["jko_w2sq"] for r in traj.records))
    fit = fit_power_law(hs, sums)
    ok = fit.slope >= 0.8 and hs[-1] / hs[0] >= 10
    record(5, "telescoping sum", ok,
           f"sums {[f'{s:.4f}' for s in sums]} slope {fit.slope:.3f} R2 {fit.r2:.4f}")
    assert ok


def test_c06_euler_lagrange_identity():
    h = 1e-2
    res = {}
    for n in (256, 512):
        p = S.stationary_gaussian(cells=n)
        x = p.domain.axis_centers(0)
        V = 0.5 * x * x
        step = jko.jko_step(p.rho0, V, p.energy, h)
        res[n] = jko.euler_lagrange_residual(step, p.rho0, V, p.energy, h, grad_V=x)
    ok = res[256] <= 5e-3 and res[512] <= 0.5 * res[256]
    record(6, "Euler-Lagrange identity", ok, f"residual {res[256]:.3e} (256) {res[512]:.3e} (512)")
    assert ok


def test_c07_ot_oracle():
    rng = np.random.default_rng(7)
    exact_err = 0.0
    line = Domain.interval(0.0, 1.0, 64)
    ring = Domain.interval(0.0, 1.0, 64, boundary="periodic")
    for _ in range(40):
        a, b = sparse_measure(rng, line), sparse_measure(rng, line)
        x, am = ot.grid_support(a)
        y, bm = ot.grid_support(b)
        lp = ot.brute_force_lp(x, am, y, bm).cost
        exact_err = max(exact_err, abs(ot.w2_exact_1d(a, b, mode="atoms").cost - lp))
        a, b = sparse_measure(rng, ring), sparse_measure(rng, ring)
        lp = periodic_lp(ring, a.masses, b.masses)
        exact_err = max(exact_err, abs(ot.w2_exact_1d(a, b, mode="atoms").cost - lp))
    plan_err, debiased_err = 0.0, 0.0
    square = Domain.square(0.0, 1.0, 32)
    for dom in (line, ring, square):
        for _ in range(15):
            a, b = sparse_measure(rng, dom), sparse_measure(rng, dom)
            if dom.periodic:
                ref = periodic_lp(dom, a.masses, b.masses)
            else:
                x, am = ot.grid_support(a)
                y, bm = ot.grid_support(b)
                ref = ot.brute_force_lp(x, am, y, bm).cost
            if ref < 1e-12:
                continue
            r = ot.w2_entropic(a, b)
            plan_err = max(plan_err, abs(r.info["plan_cost"] - ref) / ref)
            debiased_err = max(debiased_err, abs(r.cost - ref) / ref)
    ok = exact_err <= 1e-9 and plan_err <= 0.01
    record(7, "OT oracle equivalence", ok,
           f"exact abs err {exact_err:.1e}, entropic plan rel err {plan_err:.2e} "
           f"(debiased divergence {debiased_err:.2e}); properties in test_ot.py")
    assert ok


def test_c08_helmholtz_round_trip():
    d = Domain.square(-math.pi, math.pi, 128, boundary="periodic")
    x, y = d.centers()
    rng = np.random.default_rng(0)
    U = np.zeros((2,) + d.shape)
    for _ in range(8):
        kx, ky = rng.integers(-4, 5, 2)
        ph = rng.random(2) * 2 * math.pi
        U[0] += rng.normal() * np.sin(kx * x + ky * y + ph[0])
        U[1] += rng.normal() * np.cos(kx * x - ky * y + ph[1])
    s = hz.decompose(hz.VectorField(d, U))
    gV = hz.grad(s.V, d)
    recon = np.abs(-s.W.values + gV - U).max()
    div = np.abs(hz.divergence(s.W.values, d)).max()
    orth = abs(np.sum(s.W.values * gV) * d.cell_volume)
    ok = recon <= 1e-8 and div <= 1e-10 and orth <= 1e-8
    record(8, "Helmholtz round trip", ok, f"reconstruction {recon:.1e} div {div:.1e} orthogonality {orth:.1e}")
    assert ok


def test_c09_discrete_weak_identity():
    worst_imb, worst_ratio = 0.0, 0.0
    for name in ("heat", "drifted-heat", "porous-medium"):
        p = S.PRESETS[name](cells=128)
        cfg = sc.SchemeConfig(h=1e-2, T=0.2, energy=p.energy, drift=p.drift)
        for row in dg.weak_residual(sc.run_scheme(p.rho0, cfg)):
            worst_imb = max(worst_imb, abs(row["imbalance"]))
            worst_ratio = max(worst_ratio, abs(row["remainder"]) / max(row["remainder_bound"], 1e-300))
    ok = worst_imb <= 1e-8 and worst_ratio <= 1.0
    record(9, "discrete weak identity", ok,
           f"max imbalance {worst_imb:.1e}, max |remainder|/bound {worst_ratio:.3f}")
    assert ok


def test_c10_interpolation_agreement():
    p = S.drifted_heat()
    consts = {}
    for h in H_SWEEP:
        cfg = sc.SchemeConfig(h=h, T=0.25, energy=p.energy, drift=p.drift, step_distances=False)
        consts[h] = dg.interpolation_agreement(sc.run_scheme(p.rho0, cfg))["constant"]
    c_max = consts[max(H_SWEEP)]
    ok = max(consts.values()) <= 1.25 * c_max
    record(10, "interpolation agreement", ok, "C_h " + ", ".join(f"{h:g}: {c:.4f}" for h, c in consts.items()))
    assert ok
