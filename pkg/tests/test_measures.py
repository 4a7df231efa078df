import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitjko.measures import (Domain, GridMeasure, check_energy_assumptions, entropy, internal_energy, linear,
                               power, read_snapshot, second_moment, write_snapshot)

positive = arrays(float, st.integers(2, 40), elements=st.floats(0.0, 10.0)).filter(lambda a: a.sum() > 1e-3)


def test_domain_geometry():
    d = Domain.square(-1.0, 3.0, 8)
    assert d.dim == 2 and d.shape == (8, 8)
    assert d.dx == (0.5, 0.5)
    assert d.cell_volume == pytest.approx(0.25)
    assert d.axis_centers(0)[0] == pytest.approx(-0.75)
    assert len(d.axis_edges(1)) == 9
    with pytest.raises(ValueError):
        Domain.interval(1.0, 0.0, 4)
    with pytest.raises(ValueError):
        Domain.interval(0.0, 1.0, 4, boundary="reflecting")


@given(positive)
def test_from_density_has_unit_mass(a):
    d = Domain.interval(0.0, 2.0, len(a))
    r = GridMeasure.from_density(d, a)
    assert abs(r.mass() - 1.0) < 1e-13
    assert np.all(r.density >= 0)


def test_measure_rejects_bad_input():
    d = Domain.interval(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        GridMeasure(d, np.array([1.0, 1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        GridMeasure(d, np.array([4.0, -1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        GridMeasure.from_density(d, np.zeros(4))
    with pytest.raises(ValueError):
        GridMeasure(d, np.ones(5))


def test_density_is_read_only():
    r = GridMeasure.uniform(Domain.interval(0.0, 1.0, 4))
    with pytest.raises(ValueError):
        r.density[0] = 3.0


def test_mean_second_moment_and_mix():
    d = Domain.interval(-4.0, 4.0, 400)
    r = GridMeasure.from_function(d, lambda x: np.exp(-(x - 1.0) ** 2 / 0.5))
    assert r.mean()[0] == pytest.approx(1.0, abs=1e-8)
    # mass at cell centers drops the within-cell variance dx^2 / 12
    assert second_moment(r) == pytest.approx(1.25 + d.dx[0] ** 2 / 12, rel=1e-7)
    u = GridMeasure.uniform(d)
    m = r.mix(u, 0.25)
    assert np.allclose(m.density, 0.25 * r.density + 0.75 * u.density)


def test_entropy_of_uniform():
    d = Domain.interval(0.0, 4.0, 16)
    assert internal_energy(entropy(), GridMeasure.uniform(d)) == pytest.approx(-np.log(4.0))


@pytest.mark.parametrize("energy", [entropy(), power(2.0), power(1.5)])
def test_pressure_and_derivative(energy):
    s = np.geomspace(1e-3, 1e3, 50)
    P = energy.pressure(s)
    F = energy.value(s)
    Fp = energy.Fprime(s)
    assert np.allclose(P, s * Fp - F)
    dP = np.gradient(P, s)
    assert np.allclose(energy.pressure_derivative(s)[1:-1], dP[1:-1], rtol=2e-2)
    assert energy.pressure(np.array([0.0]))[0] == 0.0


@pytest.mark.parametrize("energy", [entropy(), power(2.0), power(3.0)])
def test_energy_assumptions_hold(energy):
    rep = check_energy_assumptions(energy)
    assert rep.ok, rep.violations


def test_linear_energy_fails_assumptions():
    rep = check_energy_assumptions(linear())
    assert "strict_convexity" in rep.violations and "superlinearity" in rep.violations
    with pytest.raises(ValueError):
        power(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 2.0), st.floats(1e-3, 1.0), st.floats(-2, 2))
def test_kl_prox_stationarity(log_q, tau, eps, tilt):
    vol = 0.1
    for energy in (entropy(), power(2.0)):
        u = energy.kl_prox(np.array([log_q]), tau, eps, tilt, vol)[0]
        s = np.exp(u) / vol
        g = tau * (energy.Fprime(s) + tilt) + eps * (u - log_q)
        assert abs(g) < 1e-9 * max(1.0, abs(tau * energy.Fprime(s)))


def test_snapshot_round_trip(tmp_path):
    d = Domain(((-1.0, 1.0), (0.0, 3.0)), (5, 7))
    r = GridMeasure.from_density(d, np.random.default_rng(0).random((5, 7)))
    write_snapshot(tmp_path / "s.txt", r, t=0.125)
    back, t = read_snapshot(tmp_path / "s.txt")
    assert t == 0.125 and back.domain == d
    assert np.array_equal(back.density, r.density)
