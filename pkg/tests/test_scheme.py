import numpy as np
import pytest

from splitjko import helmholtz as hz
from splitjko import jko
from splitjko import scenarios as S
from splitjko import scheme as sc
from splitjko import transport as tr
from splitjko.measures import entropy


def test_config_rules():
    cfg = sc.SchemeConfig(h=0.3, T=1.0)
    assert cfg.steps == 4 and cfg.horizon == pytest.approx(1.2)
    assert sc.SchemeConfig(h=0.1, T=0.3).steps == 3
    with pytest.raises(ValueError):
        sc.SchemeConfig(h=-0.1, T=1.0)
    with pytest.raises(ValueError):
        sc.SchemeConfig(h=0.1, T=0.0)
    with pytest.raises(ValueError):
        sc.SchemeConfig(h=0.2, T=1.0, h0=0.1)
    with pytest.raises(ValueError):
        sc.SchemeConfig(h=0.6, T=1.0, semiconvexity=1.0)
    with pytest.raises(ValueError):
        sc.SchemeConfig(h=0.1, T=1.0, snapshot_stride=0)


def test_single_step_is_transport_then_jko():
    p = S.mixed_drift(cells=24)
    h = 0.05
    traj = sc.run_scheme(p.rho0, sc.SchemeConfig(h=h, T=h, energy=p.energy, drift=p.drift, step_distances=False))
    split = hz.split_drift(p.drift, p.rho0)
    rt = tr.transport_step(p.rho0, split.W, h)
    r = jko.jko_step(rt, split.V, p.energy, h, need_potential=False)
    assert traj.steps == 1
    assert np.array_equal(traj.rho_tilde[1].density, rt.density)
    assert np.array_equal(traj.final().density, r.rho.density)


def test_decoupled_species_match_single_runs():
    d = S.heat(cells=64).domain
    rho0 = [S.gaussian(d, -1.0, 0.3, images=False), S.gaussian(d, 0.5, 0.2, images=False)]
    conf = hz.interaction(lambda x: (0.5 * x,))
    cfg = sc.SchemeConfig(h=0.01, T=0.05, energy=entropy(), drift=conf)
    both = sc.run_scheme_system(rho0, [[conf, None], [None, conf]], [entropy(), entropy()], cfg)
    for i in range(2):
        alone = sc.run_scheme(rho0[i], cfg)
        assert np.array_equal(both[i].final().density, alone.final().density)
        assert both[i].records == alone.records


def test_mirror_symmetry_of_two_species():
    sys_ = S.two_species(cells=64)
    cfg = sc.SchemeConfig(h=0.01, T=0.1)
    a, b = sc.run_scheme_system(sys_["rho0"], sys_["coupling"], sys_["energies"], cfg)
    assert np.allclose(a.final().density[::-1], b.final().density, atol=1e-9)
    # cross attraction pulls the two means together
    assert b.final().mean()[0] - a.final().mean()[0] < 2.0


def test_transport_only_keeps_energy():
    p = S.rotation_transport(cells=48)
    cfg = sc.SchemeConfig(h=0.02, T=0.2, energy=p.energy, drift=p.drift, transport_only=True)
    traj = sc.run_scheme(p.rho0, cfg)
    assert all(abs(r["energy_transport_change"]) < 1e-6 for r in traj.records)
    assert "jko_w2sq" not in traj.records[0]
    assert traj.records[-1]["w2sq_jko"] == 0.0


def test_records_and_snapshots():
    p = S.heat(cells=64)
    cfg = sc.SchemeConfig(h=0.01, T=0.1, energy=p.energy, drift=p.drift, snapshot_stride=4)
    seen = []
    traj = sc.run_scheme(p.rho0, cfg, progress=lambda k, n, recs: seen.append((k, n)))
    assert seen[-1] == (10, 10) and len(traj.records) == 10
    # the last step keeps its start (and field) for the continuous interpolation
    assert traj.stored_steps() == [0, 4, 8, 9, 10]
    assert sorted(traj.W) == [0, 4, 8, 9]
    assert np.allclose(traj.times, 0.01 * np.arange(11))
    energies = [r["energy"] for r in traj.records]
    assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))
    for key in ("w2sq_transport", "w2sq_step", "jko_w2sq", "second_moment", "mass_drift"):
        assert key in traj.records[0]


def test_interpolations():
    p = S.drifted_heat(cells=64)
    h = 0.02
    traj = sc.run_scheme(p.rho0, sc.SchemeConfig(h=h, T=0.1, energy=p.energy, drift=p.drift))
    assert sc.evaluate_interpolation(traj, 0.0) is traj.rho[0]
    t = 2.5 * h
    assert sc.evaluate_interpolation(traj, t, "rho") is traj.rho[3]
    assert sc.evaluate_interpolation(traj, t, "tilde1") is traj.rho_tilde[3]
    # continuous interpolation hits rho~ at the end of the step
    end = sc.evaluate_interpolation(traj, 3 * h, "tilde2")
    assert np.allclose(end.density, traj.rho_tilde[3].density, atol=1e-12)
    mid = sc.evaluate_interpolation(traj, t, "tilde2")
    shift = mid.mean()[0] - traj.rho[2].mean()[0]
    assert shift == pytest.approx(0.5 * h, rel=1e-3)
    with pytest.raises(ValueError):
        sc.evaluate_interpolation(traj, 1.0)
    with pytest.raises(ValueError):
        sc.evaluate_interpolation(traj, t, "spline")


def test_system_validation():
    d = S.heat(cells=16).domain
    r = S.gaussian(d, 0.0, 0.5)
    cfg = sc.SchemeConfig(h=0.1, T=0.1)
    with pytest.raises(ValueError):
        sc.run_scheme_system([r, r], [[None]], [None, None], cfg)
    other = S.gaussian(S.heat(cells=32).domain, 0.0, 0.5)
    with pytest.raises(ValueError):
        sc.run_scheme_system([r, other], [[None, None], [None, None]], [None, None], cfg)
