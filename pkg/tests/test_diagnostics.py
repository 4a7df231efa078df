import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitjko import diagnostics as dg
from splitjko import scenarios as S
from splitjko import scheme as sc
from splitjko.fitting import fit_power_law


@pytest.fixture(scope="module")
def heat_run():
    p = S.heat(cells=128)
    return p, sc.run_scheme(p.rho0, sc.SchemeConfig(h=0.01, T=0.2, energy=p.energy, drift=p.drift))


@given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0), st.floats(0.01, 100.0))
def test_power_fit_recovers_exact_law(slope, logc, scale):
    x = np.geomspace(1e-3, 1e-3 * (1 + scale), 5)
    fit = fit_power_law(x, math.exp(logc) * x**slope)
    assert fit.slope == pytest.approx(slope, rel=1e-9)
    assert fit.constant == pytest.approx(math.exp(logc), rel=1e-7)
    assert fit.r2 == pytest.approx(1.0) and fit.passes(slope - 1e-6, slope + 1e-6)


def test_power_fit_needs_two_points():
    with pytest.raises(ValueError):
        fit_power_law([1.0, -1.0], [1.0, 1.0])


def test_bump_derivatives():
    f = dg.BumpFunction((0.2, -0.1), 0.8, 1.0)
    x = np.linspace(-0.4, 0.7, 7)
    y = np.full_like(x, 0.15)
    e = 1e-6
    gx = (f.space(x + e, y) - f.space(x - e, y)) / (2 * e)
    gy = (f.space(x, y + e) - f.space(x, y - e)) / (2 * e)
    g = f.space_grad(x, y)
    assert np.allclose(g[0], gx, atol=1e-7) and np.allclose(g[1], gy, atol=1e-7)
    e = 1e-4
    lap = (f.space(x + e, y) + f.space(x - e, y) + f.space(x, y + e) + f.space(x, y - e)
           - 4 * f.space(x, y)) / e**2
    assert np.allclose(f.space_laplacian(x, y), lap, atol=1e-4)
    assert f.time(0.0) == 1.0 and f.time(1.2) == 0.0
    assert f.time_derivative(0.5) == pytest.approx((f.time(0.5 + 1e-7) - f.time(0.5 - 1e-7)) / 2e-7, rel=1e-6)
    # the spectral norm of the Hessian peaks at the center
    c = np.array([0.2, -0.1])
    H = np.array([[(f.space(*(c + a + b)) - f.space(*(c + a - b)) - f.space(*(c - a + b)) + f.space(*(c - a - b)))
                   / (4e-8) for b in (np.array([1e-4, 0]), np.array([0, 1e-4]))]
                  for a in (np.array([1e-4, 0]), np.array([0, 1e-4]))])
    assert np.abs(np.linalg.eigvalsh(H)).max() == pytest.approx(f.hessian_sup, rel=1e-4)


def test_default_basis_fits_inside():
    d = S.mixed_drift(cells=16).domain
    basis = dg.TestFunctionBasis.default(d, 1.0)
    assert len(basis.functions) == 9
    for f in basis.functions:
        for c, (lo, hi) in zip(f.center, d.bounds):
            assert lo + f.radius <= c <= hi - f.radius
        assert f.t_cut == pytest.approx(0.9)


def test_weak_identity_balances(heat_run):
    _, traj = heat_run
    rows = dg.weak_residual(traj)
    assert rows
    for r in rows:
        assert abs(r["imbalance"]) < 1e-12
        assert abs(r["remainder"]) <= r["remainder_bound"]
        # the Euler-Lagrange term is consistent with the finite-difference form
        assert abs(r["el_defect"]) < 0.1 * max(abs(r["el_term"]), 1e-3)


def test_weak_identity_on_a_2d_run():
    p = S.mixed_drift(cells=16)
    traj = sc.run_scheme(p.rho0, sc.SchemeConfig(h=0.1, T=0.3, energy=p.energy, drift=p.drift))
    rows = dg.weak_residual(traj, dg.TestFunctionBasis.default(p.domain, traj.T, per_axis=2))
    assert max(abs(r["imbalance"]) for r in rows) < 1e-10


def test_estimates_and_pressure(heat_run):
    _, traj = heat_run
    est = dg.estimate_report(traj)
    assert est["steps"] == 20 and est["sum_w2sq_jko"] > 0
    assert est["holder_constant"] < 5
    bv = dg.bv_pressure_report(traj)
    assert bv["total"] > 0 and len(bv["per_step"]) == 20
    assert bv["tightness_constant"] > 0


def test_interpolation_agreement_trivial_transport(heat_run):
    _, traj = heat_run
    ag = dg.interpolation_agreement(traj, probes=4)
    # no drift: the two tilde interpolations coincide
    assert ag["pairs"]["tilde1_tilde2"] == 0.0
    assert ag["constant"] == pytest.approx(ag["sup"] / math.sqrt(traj.h))


def test_convergence_study_modes():
    p = S.heat(cells=128)
    make = lambda h: sc.SchemeConfig(h=h, T=0.05, energy=p.energy, drift=p.drift, step_distances=False)
    hs = (0.01, 0.005, 0.0025)
    study = dg.convergence_study(p.rho0, make, hs, oracle=p.oracle, agreement=False)
    assert study["monotone"] and study["order"] > 0.5
    again = dg.convergence_study(p.rho0, make, hs, reference="finest", trajectories=study["trajectories"])
    assert len(again["rows"]) == 2 and "agreement_sup" in again["rows"][0]
    with pytest.raises(ValueError):
        dg.convergence_study(p.rho0, make, hs[:2], oracle=p.oracle)
    with pytest.raises(ValueError):
        dg.convergence_study(p.rho0, make, hs, trajectories=study["trajectories"])
    with pytest.raises(ValueError):
        dg.convergence_study(p.rho0, make, hs, reference="coarsest", trajectories=study["trajectories"])


def test_serialization(tmp_path):
    rows = [{"h": 0.1, "error": 1 / 3}, {"h": 0.05, "note": None, "error": np.float64(0.25)}]
    text = dg.to_csv(rows)
    assert text.splitlines() == ["h,error,note", "0.1,0.3333333333333333,", "0.05,0.25,"]
    dg.write_csv(rows, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == text
    obj = {"x": np.arange(3), "y": np.float64(np.inf), "ok": np.bool_(True), "fit": fit_power_law([1, 2], [1, 4])}
    back = json.loads(dg.to_json(obj))
    assert back["x"] == [0, 1, 2] and back["y"] == "inf" and back["ok"] is True
    assert back["fit"]["slope"] == pytest.approx(2.0)
    dg.write_dat({"h": [0.1, 0.05], "e": [1.0, 0.5]}, tmp_path / "a.dat", comment="demo")
    lines = (tmp_path / "a.dat").read_text().splitlines()
    assert lines[:2] == ["# demo", "# h e"] and lines[2] == "0.10000000000000001 1"
